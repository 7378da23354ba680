//! Synthetic corpus generation: sinusoid families the forecaster should
//! exploit plus deliberately dissimilar families (off-grid sinusoids and
//! random walks) that retrieval may drag in.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, XragError};
use crate::series::WindowPair;

/// Frequencies (cycles per input window) for the relevant families.
pub const RELEVANT_FREQS: [f64; 3] = [4.0, 5.0, 6.0];
/// Frequencies for the irrelevant sinusoid families, disjoint from the grid above.
pub const IRRELEVANT_FREQS: [f64; 2] = [13.0, 17.0];
/// Number of distinct phases each family draws from.
pub const PHASE_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub n_relevant_families: usize,
    pub n_irrelevant_families: usize,
    pub samples_per_family: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub t: usize,
    pub l: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            n_relevant_families: 3,
            n_irrelevant_families: 4,
            samples_per_family: 16,
            noise_sigma: 0.05,
            seed: 0,
            t: 64,
            l: 16,
        }
    }
}

/// Pretrain / knowledge-base / test splits, disjoint at window level.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub pretrain: Vec<WindowPair>,
    pub kb: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

/// True when a window's source id marks a relevant toy family.
pub fn is_relevant_source(source_id: &str) -> bool {
    source_id.starts_with("toy/rel")
}

/// Family label encoded in a toy source id, e.g. "rel0" or "irr2".
pub fn family_label(source_id: &str) -> Option<&str> {
    source_id.strip_prefix("toy/").and_then(|r| r.split('/').next())
}

#[derive(Clone, Copy)]
enum FamilyKind {
    Sine { freq: f64, phase: f64 },
    Walk,
}

/// Deterministically generates the toy corpus: same spec, same bytes.
///
/// Each sinusoid family takes a frequency from a fixed grid and one random
/// phase from a grid of [`PHASE_BINS`] values; samples within a family then
/// differ only by noise. With `noise_sigma = 0` every split holds exact
/// copies of the family waveform, so a test query always has a perfect
/// knowledge-base match. Test queries come only from relevant families.
pub fn gen_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    if spec.n_relevant_families == 0 {
        return Err(XragError::InvalidConfig(
            "toy corpus needs at least one relevant family".into(),
        ));
    }
    if spec.samples_per_family == 0 {
        return Err(XragError::InvalidConfig(
            "samples_per_family must be positive".into(),
        ));
    }
    assert!(spec.t >= 2 && spec.l >= 1);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = ToyCorpus {
        pretrain: Vec::new(),
        kb: Vec::new(),
        test: Vec::new(),
    };

    let total_families = spec.n_relevant_families + spec.n_irrelevant_families;
    for fam in 0..total_families {
        let relevant = fam < spec.n_relevant_families;
        let phase_bin = rng.random_range(0..PHASE_BINS);
        let phase = 2.0 * std::f64::consts::PI * phase_bin as f64 / PHASE_BINS as f64;
        let kind = if relevant {
            FamilyKind::Sine {
                freq: RELEVANT_FREQS[fam % RELEVANT_FREQS.len()],
                phase,
            }
        } else {
            let j = fam - spec.n_relevant_families;
            // Alternate between off-grid sinusoids and random walks.
            if j % 2 == 0 {
                FamilyKind::Sine {
                    freq: IRRELEVANT_FREQS[(j / 2) % IRRELEVANT_FREQS.len()],
                    phase,
                }
            } else {
                FamilyKind::Walk
            }
        };
        let label = if relevant {
            format!("rel{fam}")
        } else {
            format!("irr{}", fam - spec.n_relevant_families)
        };

        for split in ["pretrain", "kb", "test"] {
            if split == "test" && !relevant {
                continue;
            }
            for sample in 0..spec.samples_per_family {
                let pair = gen_sample(spec, &kind, &label, split, sample, &mut rng);
                match split {
                    "pretrain" => corpus.pretrain.push(pair),
                    "kb" => corpus.kb.push(pair),
                    _ => corpus.test.push(pair),
                }
            }
        }
    }
    Ok(corpus)
}

fn gen_sample(
    spec: &ToyCorpusSpec,
    kind: &FamilyKind,
    label: &str,
    split: &str,
    sample: usize,
    rng: &mut ChaCha8Rng,
) -> WindowPair {
    let n = spec.t + spec.l;
    let mut values = Vec::with_capacity(n);
    match kind {
        FamilyKind::Sine { freq, phase } => {
            for i in 0..n {
                let angle = 2.0 * std::f64::consts::PI * freq * i as f64 / spec.t as f64 + phase;
                values.push(angle.sin());
            }
        }
        FamilyKind::Walk => {
            let mut acc = 0.0;
            for _ in 0..n {
                let step: f64 = StandardNormal.sample(rng);
                acc += step;
                values.push(acc);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in values.iter_mut() {
            let noise: f64 = StandardNormal.sample(rng);
            *v += spec.noise_sigma * noise;
        }
    } else {
        // Keep the RNG stream layout identical across noise settings.
        for _ in 0..n {
            let _: f64 = StandardNormal.sample(rng);
        }
    }

    WindowPair {
        x: values[..spec.t].to_vec(),
        y: values[spec.t..].to_vec(),
        source_id: format!("toy/{label}/{split}/{sample}"),
        start_index: 0,
    }
}

/// Writes window pairs as CSV: family label, source id, start index, then
/// the T input values and L horizon values.
pub fn write_windows_csv(path: &Path, pairs: &[WindowPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(XragError::EmptyInput("no window pairs to write"));
    }
    let t = pairs[0].x.len();
    let l = pairs[0].y.len();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "family,source_id,start_index")?;
    for i in 0..t {
        write!(out, ",x{i}")?;
    }
    for i in 0..l {
        write!(out, ",y{i}")?;
    }
    writeln!(out)?;
    for p in pairs {
        let family = family_label(&p.source_id).unwrap_or("-");
        write!(out, "{family},{},{}", p.source_id, p.start_index)?;
        for v in &p.x {
            write!(out, ",{v:?}")?;
        }
        for v in &p.y {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads window pairs written by [`write_windows_csv`].
pub fn read_windows_csv(path: &Path) -> Result<Vec<WindowPair>> {
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| XragError::Corrupt {
            path: path_str.clone(),
            detail: "empty file".into(),
        })??;
    let cols: Vec<&str> = header.split(',').collect();
    let t = cols.iter().filter(|c| c.starts_with('x')).count();
    let l = cols.iter().filter(|c| c.starts_with('y')).count();
    if t == 0 || l == 0 || cols.len() != 3 + t + l {
        return Err(XragError::Corrupt {
            path: path_str,
            detail: format!("unexpected header: {header}"),
        });
    }

    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(XragError::Corrupt {
                path: path_str,
                detail: format!("row {} has {} fields, want {}", i + 2, fields.len(), cols.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| XragError::UnparsableCell {
                path: path_str.clone(),
                line: i + 2,
                column: what.to_string(),
                cell: s.to_string(),
            })
        };
        let start_index: usize = fields[2].parse().map_err(|_| XragError::Corrupt {
            path: path_str.clone(),
            detail: format!("bad start_index on row {}", i + 2),
        })?;
        let mut x = Vec::with_capacity(t);
        for (j, s) in fields[3..3 + t].iter().enumerate() {
            x.push(parse(s, &format!("x{j}"))?);
        }
        let mut y = Vec::with_capacity(l);
        for (j, s) in fields[3 + t..].iter().enumerate() {
            y.push(parse(s, &format!("y{j}"))?);
        }
        pairs.push(WindowPair {
            x,
            y,
            source_id: fields[1].to_string(),
            start_index,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_same_seed() {
        let spec = ToyCorpusSpec::default();
        let a = gen_toy_corpus(&spec).unwrap();
        let b = gen_toy_corpus(&spec).unwrap();
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.kb, b.kb);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn seeds_differ() {
        let a = gen_toy_corpus(&ToyCorpusSpec::default()).unwrap();
        let b = gen_toy_corpus(&ToyCorpusSpec {
            seed: 1,
            ..ToyCorpusSpec::default()
        })
        .unwrap();
        assert_ne!(a.kb, b.kb);
    }

    #[test]
    fn split_sizes_and_relevance() {
        let spec = ToyCorpusSpec {
            n_relevant_families: 2,
            n_irrelevant_families: 3,
            samples_per_family: 5,
            ..ToyCorpusSpec::default()
        };
        let c = gen_toy_corpus(&spec).unwrap();
        assert_eq!(c.pretrain.len(), 25);
        assert_eq!(c.kb.len(), 25);
        assert_eq!(c.test.len(), 10);
        assert!(c.test.iter().all(|p| is_relevant_source(&p.source_id)));
        assert_eq!(c.kb.iter().filter(|p| is_relevant_source(&p.source_id)).count(), 10);
    }

    #[test]
    fn zero_relevant_families_rejected() {
        let err = gen_toy_corpus(&ToyCorpusSpec {
            n_relevant_families: 0,
            ..ToyCorpusSpec::default()
        })
        .unwrap_err();
        assert!(matches!(err, XragError::InvalidConfig(_)));
    }

    #[test]
    fn splits_disjoint_at_window_level() {
        let c = gen_toy_corpus(&ToyCorpusSpec::default()).unwrap();
        for p in &c.pretrain {
            assert!(c.kb.iter().all(|q| q.identity() != p.identity()));
            assert!(c.test.iter().all(|q| q.identity() != p.identity()));
        }
    }

    #[test]
    fn csv_roundtrip() {
        let c = gen_toy_corpus(&ToyCorpusSpec {
            samples_per_family: 3,
            ..ToyCorpusSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.csv");
        write_windows_csv(&path, &c.kb).unwrap();
        let back = read_windows_csv(&path).unwrap();
        assert_eq!(back, c.kb);
    }

    #[test]
    fn family_labels() {
        assert!(is_relevant_source("toy/rel0/kb/3"));
        assert!(!is_relevant_source("toy/irr1/kb/3"));
        assert_eq!(family_label("toy/irr1/kb/3"), Some("irr1"));
    }
}

//! Flag parsing, key-value config files and run manifests.
//!
//! Precedence: command-line flag > config file > built-in default. Unknown
//! verbs, unknown flags and missing required flags are usage errors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use xrag_core::error::{Result, XragError};

pub struct FlagSpec {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub required: bool,
    pub help: &'static str,
}

pub struct VerbSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub flags: &'static [FlagSpec],
}

macro_rules! flag {
    ($name:literal, req, $help:literal) => {
        FlagSpec {
            name: $name,
            default: None,
            required: true,
            help: $help,
        }
    };
    ($name:literal, $default:literal, $help:literal) => {
        FlagSpec {
            name: $name,
            default: Some($default),
            required: false,
            help: $help,
        }
    };
    ($name:literal, opt, $help:literal) => {
        FlagSpec {
            name: $name,
            default: None,
            required: false,
            help: $help,
        }
    };
}

pub const VERBS: &[VerbSpec] = &[
    VerbSpec {
        name: "gen-toy",
        about: "generate the synthetic sinusoid/random-walk corpus",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("seed", "0", "corpus seed"),
            flag!("relevant", "3", "number of relevant families"),
            flag!("irrelevant", "4", "number of irrelevant families"),
            flag!("samples", "16", "samples per family and split"),
            flag!("noise", "0.05", "gaussian noise sigma"),
            flag!("t", "64", "input window length"),
            flag!("l", "16", "forecast horizon length"),
        ],
    },
    VerbSpec {
        name: "build-index",
        about: "build and persist the retrieval index",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("windows", opt, "window-pair CSV (toy format)"),
            flag!("data", opt, "raw dataset CSV (header + channels)"),
            flag!("t", "64", "input window length (with --data)"),
            flag!("l", "16", "horizon length (with --data)"),
            flag!("stride", "1", "window stride (with --data)"),
            flag!("train-frac", "0.6", "chronological train fraction (with --data)"),
            flag!("test-frac", "0.2", "chronological test fraction (with --data)"),
        ],
    },
    VerbSpec {
        name: "pretrain-backbone",
        about: "train the frozen query encoder/predictor",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("windows", req, "pretraining window-pair CSV"),
            flag!("d", "32", "latent width"),
            flag!("dhid", "64", "encoder hidden width"),
            flag!("steps", "500", "optimizer steps"),
            flag!("batch", "32", "batch size"),
            flag!("lr", "0.0003", "learning rate"),
            flag!("wd", "0.01", "weight decay"),
            flag!("seed", "0", "training seed"),
        ],
    },
    VerbSpec {
        name: "train",
        about: "train the fusion stage against a knowledge base",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("windows", req, "pretraining window-pair CSV"),
            flag!("index", req, "knowledge-base index file"),
            flag!("backbone", req, "frozen backbone checkpoint"),
            flag!("k", "10", "retrieved samples per query"),
            flag!("lambda", "0.7", "gate weight"),
            flag!("mask", "Q+R+QxR", "fusion components"),
            flag!("heads", "4", "attention heads"),
            flag!("dropout", "0.2", "dropout rate"),
            flag!("loss", "quantile", "loss mode: quantile | mse"),
            flag!("gate", "fixed", "gate mode: fixed | learnable"),
            flag!("metric", "cosine", "retrieval metric"),
            flag!("steps", "400", "optimizer steps"),
            flag!("batch", "32", "batch size"),
            flag!("lr", "0.0003", "learning rate"),
            flag!("wd", "0.01", "weight decay"),
            flag!("seed", "0", "training seed"),
        ],
    },
    VerbSpec {
        name: "eval",
        about: "zero-shot evaluation of a trained model",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("model", req, "model checkpoint"),
            flag!("index", req, "knowledge-base index file"),
            flag!("test", req, "test window-pair CSV"),
            flag!("k", opt, "override retrieved count"),
            flag!("lambda", opt, "override gate weight"),
            flag!("mask", opt, "override fusion components"),
            flag!("metric", "cosine", "retrieval metric"),
            flag!("mode", "topk", "retrieval mode: topk | random:SEED | mixed:NR:NI:SEED"),
            flag!("attention", "false", "also export attention weights"),
            flag!("svg", "false", "render forecast overlays"),
        ],
    },
    VerbSpec {
        name: "scenario",
        about: "retrieval-scenario studies",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("kind", req, "k-sweep | random | small-kb | cross-dataset"),
            flag!("model", req, "model checkpoint"),
            flag!("test", req, "test window-pair CSV"),
            flag!("index", opt, "knowledge-base index (k-sweep, random)"),
            flag!("windows", opt, "train window CSV (small-kb)"),
            flag!("kb-windows", opt, "other-dataset window CSV (cross-dataset)"),
            flag!("ks", "1..15", "k values: a..b or comma list"),
            flag!("k", opt, "retrieved count for small-kb/cross-dataset"),
            flag!("seeds", "5", "random-retrieval seeds"),
            flag!("fractions", "0.25,0.5,0.75,1.0", "train fractions (small-kb)"),
            flag!("metric", "cosine", "retrieval metric"),
            flag!("svg", "false", "render the sweep curve"),
        ],
    },
    VerbSpec {
        name: "ablate",
        about: "train and evaluate the 7-mask fusion component grid",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("pretrain", req, "pretraining window-pair CSV"),
            flag!("kb", req, "knowledge-base window-pair CSV"),
            flag!("test", req, "test window-pair CSV"),
            flag!("seeds", "3", "number of seeds"),
            flag!("d", "32", "latent width"),
            flag!("dhid", "64", "encoder hidden width"),
            flag!("heads", "4", "attention heads"),
            flag!("k", "10", "retrieved samples per query"),
            flag!("lambda", "0.7", "gate weight"),
            flag!("dropout", "0.1", "dropout rate"),
            flag!("pretrain-steps", "300", "backbone steps"),
            flag!("steps", "300", "fusion steps"),
            flag!("batch", "32", "batch size"),
            flag!("lr", "0.0003", "fusion learning rate"),
            flag!("metric", "cosine", "retrieval metric"),
            flag!("mode", "topk", "evaluation retrieval mode"),
        ],
    },
    VerbSpec {
        name: "sweep-lambda",
        about: "train and evaluate one model per gate weight",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("pretrain", req, "pretraining window-pair CSV"),
            flag!("kb", req, "knowledge-base window-pair CSV"),
            flag!("test", req, "test window-pair CSV"),
            flag!("lambdas", "0.4,0.5,0.6,0.7,0.8", "gate weights"),
            flag!("learnable", "true", "also run the learnable gate"),
            flag!("seeds", "1", "number of seeds"),
            flag!("d", "32", "latent width"),
            flag!("dhid", "64", "encoder hidden width"),
            flag!("heads", "4", "attention heads"),
            flag!("k", "10", "retrieved samples per query"),
            flag!("dropout", "0.1", "dropout rate"),
            flag!("pretrain-steps", "300", "backbone steps"),
            flag!("steps", "300", "fusion steps"),
            flag!("batch", "32", "batch size"),
            flag!("lr", "0.0003", "fusion learning rate"),
            flag!("metric", "cosine", "retrieval metric"),
            flag!("mode", "topk", "evaluation retrieval mode"),
        ],
    },
    VerbSpec {
        name: "export-attention",
        about: "dump cross-attention weights for test queries",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("model", req, "model checkpoint"),
            flag!("index", req, "knowledge-base index file"),
            flag!("test", req, "test window-pair CSV"),
            flag!("k", opt, "override retrieved count"),
            flag!("metric", "cosine", "retrieval metric"),
            flag!("mode", "topk", "retrieval mode"),
            flag!("svg", "true", "render per-query attention bars"),
            flag!("max-queries", "8", "bar charts to render"),
        ],
    },
    VerbSpec {
        name: "report-efficiency",
        about: "parameter, FLOP, inference-time and retrieval-time tables",
        flags: &[
            flag!("out", req, "output directory"),
            flag!("config", opt, "key = value config file"),
            flag!("t", "512", "input window length"),
            flag!("l", "64", "horizon length"),
            flag!("d", "64", "latent width"),
            flag!("dhid", "16384", "encoder hidden width"),
            flag!("heads", "4", "attention heads"),
            flag!("k", "15", "retrieved samples per query"),
            flag!("runs", "1000", "inference repetitions per mask"),
            flag!("kb-size", "10000", "entries in the timing knowledge base"),
            flag!("queries", "50", "queries in the timing batch"),
            flag!("seed", "0", "synthetic data seed"),
        ],
    },
];

/// Fully resolved configuration of one run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub verb: &'static str,
    values: BTreeMap<String, String>,
}

#[derive(Debug)]
pub enum ArgError {
    Usage(String),
    Runtime(XragError),
}

impl From<XragError> for ArgError {
    fn from(e: XragError) -> Self {
        ArgError::Runtime(e)
    }
}

pub fn usage() -> String {
    let mut s = String::from("usage: xrag <verb> [--flag value ...]\n\nverbs:\n");
    for v in VERBS {
        s.push_str(&format!("  {:<18} {}\n", v.name, v.about));
    }
    s.push_str("\nrun `xrag <verb> --help` for the verb's flags\n");
    s
}

pub fn verb_usage(spec: &VerbSpec) -> String {
    let mut s = format!("usage: xrag {} [flags]\n  {}\n\nflags:\n", spec.name, spec.about);
    for f in spec.flags {
        let default = match (f.required, f.default) {
            (true, _) => "(required)".to_string(),
            (false, Some(d)) => format!("[default: {d}]"),
            (false, None) => "[optional]".to_string(),
        };
        s.push_str(&format!("  --{:<16} {} {}\n", f.name, f.help, default));
    }
    s
}

fn find_verb(name: &str) -> Option<&'static VerbSpec> {
    VERBS.iter().find(|v| v.name == name)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(XragError::Corrupt {
                path: path.display().to_string(),
                detail: format!("line {}: expected `key = value`", i + 1),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Resolves a verb's configuration from argv and an optional config file.
pub fn resolve(args: &[String]) -> std::result::Result<Resolved, ArgError> {
    if args.is_empty() {
        return Err(ArgError::Usage(usage()));
    }
    let verb_name = args[0].as_str();
    if verb_name == "--help" || verb_name == "-h" || verb_name == "help" {
        return Err(ArgError::Usage(usage()));
    }
    let spec = find_verb(verb_name)
        .ok_or_else(|| ArgError::Usage(format!("unknown verb {verb_name:?}\n\n{}", usage())))?;

    // Command-line flags.
    let mut cli: BTreeMap<String, String> = BTreeMap::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            return Err(ArgError::Usage(verb_usage(spec)));
        }
        let Some(name) = arg.strip_prefix("--") else {
            return Err(ArgError::Usage(format!(
                "expected a --flag, got {arg:?}\n\n{}",
                verb_usage(spec)
            )));
        };
        if !spec.flags.iter().any(|f| f.name == name) {
            return Err(ArgError::Usage(format!(
                "unknown flag --{name} for verb {verb_name}\n\n{}",
                verb_usage(spec)
            )));
        }
        let value = args.get(i + 1).ok_or_else(|| {
            ArgError::Usage(format!("flag --{name} needs a value\n\n{}", verb_usage(spec)))
        })?;
        cli.insert(name.to_string(), value.clone());
        i += 2;
    }

    // Config file values sit below CLI flags.
    let mut values: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = cli.get("config") {
        let file = parse_config_file(Path::new(path))?;
        for (key, value) in file {
            if key == "verb" {
                if value != verb_name {
                    return Err(ArgError::Usage(format!(
                        "config file is for verb {value:?}, command line says {verb_name:?}"
                    )));
                }
                continue;
            }
            if !spec.flags.iter().any(|f| f.name == key) {
                return Err(ArgError::Usage(format!(
                    "unknown key {key:?} in config file for verb {verb_name}"
                )));
            }
            values.insert(key, value);
        }
    }
    for (k, v) in cli {
        values.insert(k, v);
    }
    // Defaults fill the rest.
    for f in spec.flags {
        if !values.contains_key(f.name) {
            if let Some(d) = f.default {
                values.insert(f.name.to_string(), d.to_string());
            } else if f.required {
                return Err(ArgError::Usage(format!(
                    "missing required flag --{}\n\n{}",
                    f.name,
                    verb_usage(spec)
                )));
            }
        }
    }
    // The config path itself is not part of the resolved run configuration.
    values.remove("config");

    Ok(Resolved {
        verb: spec.name,
        values,
    })
}

impl Resolved {
    pub fn str(&self, name: &str) -> Result<&str> {
        self.values
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| XragError::InvalidConfig(format!("missing flag --{name}")))
    }

    pub fn opt_str(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        self.str(name)?
            .parse()
            .map_err(|_| XragError::InvalidConfig(format!("--{name} wants an integer")))
    }

    pub fn opt_usize(&self, name: &str) -> Result<Option<usize>> {
        match self.opt_str(name) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| XragError::InvalidConfig(format!("--{name} wants an integer"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.str(name)?
            .parse()
            .map_err(|_| XragError::InvalidConfig(format!("--{name} wants an integer")))
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        self.str(name)?
            .parse()
            .map_err(|_| XragError::InvalidConfig(format!("--{name} wants a number")))
    }

    pub fn opt_f64(&self, name: &str) -> Result<Option<f64>> {
        match self.opt_str(name) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| XragError::InvalidConfig(format!("--{name} wants a number"))),
        }
    }

    pub fn bool(&self, name: &str) -> Result<bool> {
        match self.str(name)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(XragError::InvalidConfig(format!(
                "--{name} wants true/false, got {other:?}"
            ))),
        }
    }

    /// "a..b" inclusive range or a comma list.
    pub fn usize_list(&self, name: &str) -> Result<Vec<usize>> {
        let raw = self.str(name)?;
        let bad = || XragError::InvalidConfig(format!("--{name}: cannot parse {raw:?}"));
        if let Some((a, b)) = raw.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            return Ok((a..=b).collect());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect()
    }

    pub fn f64_list(&self, name: &str) -> Result<Vec<f64>> {
        let raw = self.str(name)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| XragError::InvalidConfig(format!("--{name}: cannot parse {raw:?}")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = PathBuf::from(self.str("out")?);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Writes the full resolved configuration; re-running from this file
    /// reproduces the outputs.
    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
        writeln!(out, "verb = {}", self.verb)?;
        for (key, value) in &self.values {
            writeln!(out, "{key} = {value}")?;
        }
        Ok(())
    }
}

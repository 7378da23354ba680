//! Named-tensor container: magic "XRGW", format version, then
//! (name length, name, shape, little-endian f64 data) records. Model
//! checkpoints store backbone and fusion tensors under separate prefixes
//! plus scalar `meta/*` entries carrying the configuration.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, XragError};
use crate::fusion::{
    AblationMask, AttentionParams, FrozenBackbone, FusionConfig, FusionModel, FusionParams,
    GateMode, HeadMode, HeadParams, Mlp2,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XRGW";
const VERSION: u32 = 1;

pub fn save_tensors(path: &Path, items: &[(String, &Tensor)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, tensor) in items {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let path_str = path.display().to_string();
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let corrupt = |detail: &str| XragError::Corrupt {
        path: path_str.clone(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(XragError::BadMagic {
            path: path_str,
            expected: "XRGW",
        });
    }
    let version = read_u32(&mut file).map_err(|_| corrupt("truncated version"))?;
    if version != VERSION {
        return Err(XragError::BadVersion {
            path: path_str,
            found: version,
            supported: VERSION,
        });
    }
    let count = read_u32(&mut file).map_err(|_| corrupt("truncated count"))? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut file).map_err(|_| corrupt("truncated record"))? as usize;
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name not utf-8"))?;
        let rank = read_u32(&mut file).map_err(|_| corrupt("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut file).map_err(|_| corrupt("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        file.read_exact(&mut buf).map_err(|_| corrupt("truncated data"))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        items.push((name, Tensor::new(shape, data)?));
    }
    Ok(items)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_backbone(path: &Path, backbone: &FrozenBackbone) -> Result<()> {
    let mut items: Vec<(String, &Tensor)> = Vec::new();
    backbone.visit(&mut |name, t| items.push((format!("backbone/{name}"), t)));
    let meta = [
        ("meta/t", backbone.t as f64),
        ("meta/l", backbone.l as f64),
        ("meta/d", backbone.d as f64),
        ("meta/d_hid", backbone.d_hid as f64),
    ];
    let meta_tensors: Vec<(String, Tensor)> = meta
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::scalar(*v)))
        .collect();
    let mut all = items;
    let refs: Vec<(String, &Tensor)> = meta_tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    all.extend(refs);
    save_tensors(path, &all)
}

pub fn load_backbone(path: &Path) -> Result<FrozenBackbone> {
    let items = load_tensors(path)?;
    let mut map: HashMap<String, Tensor> = items.into_iter().collect();
    backbone_from_map(&mut map, path)
}

fn meta_value(map: &HashMap<String, Tensor>, name: &str, path: &Path) -> Result<f64> {
    map.get(name)
        .map(|t| t.data()[0])
        .ok_or_else(|| XragError::Corrupt {
            path: path.display().to_string(),
            detail: format!("missing {name}"),
        })
}

fn take_tensor(
    map: &mut HashMap<String, Tensor>,
    name: &str,
    shape: &[usize],
    path: &Path,
) -> Result<Tensor> {
    let t = map.remove(name).ok_or_else(|| XragError::Corrupt {
        path: path.display().to_string(),
        detail: format!("missing tensor {name}"),
    })?;
    if t.shape() != shape {
        return Err(XragError::Corrupt {
            path: path.display().to_string(),
            detail: format!("tensor {name}: shape {:?}, expected {:?}", t.shape(), shape),
        });
    }
    Ok(t)
}

fn take_mlp2(
    map: &mut HashMap<String, Tensor>,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    path: &Path,
) -> Result<Mlp2> {
    Ok(Mlp2 {
        w1: take_tensor(map, &format!("{prefix}.w1"), &[d_in, d_hidden], path)?,
        b1: take_tensor(map, &format!("{prefix}.b1"), &[d_hidden], path)?,
        w2: take_tensor(map, &format!("{prefix}.w2"), &[d_hidden, d_out], path)?,
        b2: take_tensor(map, &format!("{prefix}.b2"), &[d_out], path)?,
    })
}

fn take_attention(
    map: &mut HashMap<String, Tensor>,
    prefix: &str,
    d: usize,
    n_heads: usize,
    path: &Path,
) -> Result<AttentionParams> {
    let dh = d / n_heads;
    let mut w_q = Vec::with_capacity(n_heads);
    let mut w_k = Vec::with_capacity(n_heads);
    let mut w_v = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        w_q.push(take_tensor(map, &format!("{prefix}.w_q{i}"), &[d, dh], path)?);
        w_k.push(take_tensor(map, &format!("{prefix}.w_k{i}"), &[d, dh], path)?);
        w_v.push(take_tensor(map, &format!("{prefix}.w_v{i}"), &[d, dh], path)?);
    }
    Ok(AttentionParams {
        w_q,
        w_k,
        w_v,
        w_o: take_tensor(map, &format!("{prefix}.w_o"), &[d, d], path)?,
    })
}

fn backbone_from_map(map: &mut HashMap<String, Tensor>, path: &Path) -> Result<FrozenBackbone> {
    let t = meta_value(map, "meta/t", path)? as usize;
    let l = meta_value(map, "meta/l", path)? as usize;
    let d = meta_value(map, "meta/d", path)? as usize;
    let d_hid = meta_value(map, "meta/d_hid", path)? as usize;
    Ok(FrozenBackbone {
        encoder: take_mlp2(map, "backbone/encoder", t, d_hid, d, path)?,
        predictor: HeadParams {
            w: take_tensor(map, "backbone/predictor.w", &[d, l], path)?,
            b: take_tensor(map, "backbone/predictor.b", &[l], path)?,
        },
        t,
        l,
        d,
        d_hid,
    })
}

pub fn save_model(path: &Path, model: &FusionModel) -> Result<()> {
    let cfg = &model.config;
    let mask_bits = cfg.mask.q as u8 as f64
        + 2.0 * (cfg.mask.r as u8 as f64)
        + 4.0 * (cfg.mask.cross as u8 as f64);
    let meta: Vec<(String, Tensor)> = vec![
        ("meta/t".into(), Tensor::scalar(cfg.t as f64)),
        ("meta/l".into(), Tensor::scalar(cfg.l as f64)),
        ("meta/d".into(), Tensor::scalar(cfg.d as f64)),
        ("meta/d_hid".into(), Tensor::scalar(model.backbone.d_hid as f64)),
        ("meta/n_heads".into(), Tensor::scalar(cfg.n_heads as f64)),
        ("meta/k".into(), Tensor::scalar(cfg.k as f64)),
        ("meta/lambda".into(), Tensor::scalar(cfg.lambda)),
        ("meta/dropout_p".into(), Tensor::scalar(cfg.dropout_p)),
        (
            "meta/gate_mode".into(),
            Tensor::scalar(match cfg.gate_mode {
                GateMode::Fixed => 0.0,
                GateMode::Learnable => 1.0,
            }),
        ),
        (
            "meta/head_mode".into(),
            Tensor::scalar(match cfg.head_mode {
                HeadMode::Point => 0.0,
                HeadMode::Quantile => 1.0,
            }),
        ),
        (
            "meta/head_trainable".into(),
            Tensor::scalar(cfg.head_trainable as u8 as f64),
        ),
        ("meta/mask".into(), Tensor::scalar(mask_bits)),
    ];

    let mut items: Vec<(String, &Tensor)> = Vec::new();
    model
        .backbone
        .visit(&mut |name, t| items.push((format!("backbone/{name}"), t)));
    model
        .params
        .visit(&mut |name, t| items.push((format!("fusion/{name}"), t)));
    items.extend(meta.iter().map(|(n, t)| (n.clone(), t)));
    save_tensors(path, &items)
}

pub fn load_model(path: &Path) -> Result<FusionModel> {
    let items = load_tensors(path)?;
    let mut map: HashMap<String, Tensor> = items.into_iter().collect();

    let mask_bits = meta_value(&map, "meta/mask", path)? as u8;
    let config = FusionConfig {
        d: meta_value(&map, "meta/d", path)? as usize,
        n_heads: meta_value(&map, "meta/n_heads", path)? as usize,
        k: meta_value(&map, "meta/k", path)? as usize,
        lambda: meta_value(&map, "meta/lambda", path)?,
        dropout_p: meta_value(&map, "meta/dropout_p", path)?,
        gate_mode: if meta_value(&map, "meta/gate_mode", path)? != 0.0 {
            GateMode::Learnable
        } else {
            GateMode::Fixed
        },
        head_mode: if meta_value(&map, "meta/head_mode", path)? != 0.0 {
            HeadMode::Quantile
        } else {
            HeadMode::Point
        },
        head_trainable: meta_value(&map, "meta/head_trainable", path)? != 0.0,
        mask: AblationMask {
            q: mask_bits & 1 != 0,
            r: mask_bits & 2 != 0,
            cross: mask_bits & 4 != 0,
        },
        t: meta_value(&map, "meta/t", path)? as usize,
        l: meta_value(&map, "meta/l", path)? as usize,
    };
    config.validate()?;

    let backbone = backbone_from_map(&mut map, path)?;
    let d = config.d;
    let head = if config.head_mode == HeadMode::Quantile
        || (config.head_mode == HeadMode::Point && config.head_trainable)
    {
        let width = config.head_width();
        Some(HeadParams {
            w: take_tensor(&mut map, "fusion/head.w", &[d, width], path)?,
            b: take_tensor(&mut map, "fusion/head.b", &[width], path)?,
        })
    } else {
        None
    };
    let gate_mlp = if config.gate_mode == GateMode::Learnable {
        Some(take_mlp2(&mut map, "fusion/gate", 2 * d, d, 1, path)?)
    } else {
        None
    };
    let params = FusionParams {
        proj_x: take_mlp2(&mut map, "fusion/proj_x", config.t, d, d, path)?,
        proj_y: take_mlp2(&mut map, "fusion/proj_y", config.l, d, d, path)?,
        cross_attn: take_attention(&mut map, "fusion/cross_attn", d, config.n_heads, path)?,
        ffn_cross: take_mlp2(&mut map, "fusion/ffn_cross", d, 4 * d, d, path)?,
        self_attn: take_attention(&mut map, "fusion/self_attn", d, config.n_heads, path)?,
        ffn_self: take_mlp2(&mut map, "fusion/ffn_self", d, 4 * d, d, path)?,
        head,
        gate_mlp,
    };

    Ok(FusionModel {
        config,
        params,
        backbone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.xrgw");
        let a = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 1e-300, 3e5, 0.0]).unwrap();
        let b = Tensor::scalar(42.0);
        save_tensors(&path, &[("layer/a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "layer/a");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn model_roundtrip_preserves_everything() {
        let cfg = FusionConfig {
            d: 16,
            n_heads: 2,
            k: 3,
            t: 24,
            l: 6,
            ..FusionConfig::default()
        };
        let backbone = FrozenBackbone::init(24, 6, 16, 20, 7);
        let model = FusionModel::new(cfg, backbone, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xrgw");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.backbone, model.backbone);
        assert_eq!(back.config.k, model.config.k);
        assert_eq!(back.config.lambda, model.config.lambda);
        assert_eq!(back.config.mask, model.config.mask);
        assert_eq!(back.backbone.content_hash(), model.backbone.content_hash());
    }

    #[test]
    fn backbone_roundtrip() {
        let backbone = FrozenBackbone::init(32, 8, 16, 24, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.xrgw");
        save_backbone(&path, &backbone).unwrap();
        let back = load_backbone(&path).unwrap();
        assert_eq!(back, backbone);
    }

    #[test]
    fn truncated_checkpoint_reports_corruption() {
        let backbone = FrozenBackbone::init(16, 4, 8, 12, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.xrgw");
        save_backbone(&path, &backbone).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_backbone(&path).unwrap_err(),
            XragError::Corrupt { .. }
        ));
    }
}

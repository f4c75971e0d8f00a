//! Single-file model checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u64` header length, a JSON
//! header, then the arrays listed in the header as little-endian `f32`s in
//! header order.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::medium::{Aabb, MediumParams, VMGrid, VmComponents};
use crate::mlp::{Activation, DenseNet, Layer, PruneMlp};
use crate::paup::PruneWeights;
use crate::pipeline::Model;
use crate::sh::SH_COEFFS;
use crate::types::{Gaussian3D, GaussianCloud, Vec3};

pub const MAGIC: &[u8; 8] = b"AQSPLAT\x01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub n_gaussians: usize,
    pub sh_coeffs: usize,
    pub generation: u64,
    pub bbox: Aabb,
    pub grid_resolution: usize,
    pub grid_rank: usize,
    pub mlp: Vec<LayerShape>,
    pub has_uncertainty: bool,
    /// SHA-256 of the run configuration's JSON, or empty.
    pub config_hash: String,
    pub config: Option<serde_json::Value>,
    pub arrays: Vec<ArrayEntry>,
}

/// Hex SHA-256 of a configuration's canonical JSON.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn arrays_of(model: &Model) -> Vec<(&'static str, Vec<f64>)> {
    let gs = &model.cloud.gaussians;
    let mut out = vec![
        ("mean", gs.iter().flat_map(|g| g.mean.iter().copied().collect::<Vec<_>>()).collect()),
        ("rotation", gs.iter().flat_map(|g| g.rotation).collect()),
        ("log_scale", gs.iter().flat_map(|g| g.log_scale.iter().copied().collect::<Vec<_>>()).collect()),
        ("opacity_logit", gs.iter().map(|g| g.opacity_logit).collect()),
        ("sh", gs.iter().flat_map(|g| g.sh.iter().flatten().copied().collect::<Vec<_>>()).collect()),
    ];
    if let Some(u) = &model.uncertainty {
        out.push(("uncertainty", u.clone()));
    }
    out.push(("grid_d", model.medium.grid_d.comps.to_flat()));
    out.push(("grid_b", model.medium.grid_b.comps.to_flat()));
    out.push(("b_inf_logit", model.medium.b_inf_logit.to_vec()));
    out.push(("mlp", model.mlp.net.params().collect()));
    out.push(("prune_weights", vec![model.prune_weights.w_u, model.prune_weights.w_p]));
    out
}

pub fn encode(model: &Model, config: Option<&serde_json::Value>) -> Vec<u8> {
    let arrays = arrays_of(model);
    let header = CheckpointHeader {
        version: VERSION,
        n_gaussians: model.cloud.len(),
        sh_coeffs: SH_COEFFS,
        generation: model.cloud.generation,
        bbox: model.medium.grid_d.bbox,
        grid_resolution: model.medium.grid_d.resolution(),
        grid_rank: model.medium.grid_d.rank(),
        mlp: model
            .mlp
            .net
            .layers
            .iter()
            .map(|l| LayerShape {
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
            })
            .collect(),
        has_uncertainty: model.uncertainty.is_some(),
        config_hash: config.map(config_hash).unwrap_or_default(),
        config: config.cloned(),
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayEntry {
                name: n.to_string(),
                len: a.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * arrays.iter().map(|(_, a)| a.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, a) in &arrays {
        for &v in a {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn save(path: &Path, model: &Model, config: Option<&serde_json::Value>) -> Result<()> {
    write_atomic(path, &encode(model, config))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|message| Error::MalformedFile {
        kind: "checkpoint",
        path: path.to_path_buf(),
        message,
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Model, CheckpointHeader), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| e.to_string())?;
    if header.version != VERSION {
        return Err(format!("unsupported version {}", header.version));
    }
    if header.sh_coeffs != SH_COEFFS {
        return Err(format!("expected {SH_COEFFS} SH coefficients, found {}", header.sh_coeffs));
    }
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    let body = &bytes[body_start..];
    if body.len() != 4 * total {
        return Err(format!("expected {} bytes of arrays, found {}", 4 * total, body.len()));
    }
    let mut arrays = std::collections::HashMap::new();
    let mut at = 0;
    for a in &header.arrays {
        let vals: Vec<f64> = body[at..at + 4 * a.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        at += 4 * a.len;
        arrays.insert(a.name.as_str(), vals);
    }
    let n = header.n_gaussians;
    let get = |name: &str, len: usize| -> std::result::Result<&Vec<f64>, String> {
        let a = arrays.get(name).ok_or_else(|| format!("missing array '{name}'"))?;
        if a.len() != len {
            return Err(format!("array '{name}' has {} values, expected {len}", a.len()));
        }
        Ok(a)
    };

    let mean = get("mean", 3 * n)?;
    let rot = get("rotation", 4 * n)?;
    let scale = get("log_scale", 3 * n)?;
    let opacity = get("opacity_logit", n)?;
    let sh = get("sh", 3 * SH_COEFFS * n)?;
    let gaussians = (0..n)
        .map(|i| {
            let mut coeffs = [[0.0; 3]; SH_COEFFS];
            for (k, c) in coeffs.iter_mut().enumerate() {
                c.copy_from_slice(&sh[(i * SH_COEFFS + k) * 3..(i * SH_COEFFS + k) * 3 + 3]);
            }
            Gaussian3D {
                mean: Vec3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]),
                rotation: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
                log_scale: Vec3::new(scale[3 * i], scale[3 * i + 1], scale[3 * i + 2]),
                opacity_logit: opacity[i],
                sh: coeffs,
            }
        })
        .collect();
    let mut cloud = GaussianCloud::new(gaussians);
    cloud.generation = header.generation;

    let (g, r) = (header.grid_resolution, header.grid_rank);
    header.bbox.validate().map_err(|e| e.to_string())?;
    let grid = |name: &str| -> std::result::Result<VMGrid, String> {
        let flat = arrays.get(name).ok_or_else(|| format!("missing array '{name}'"))?;
        let comps = VmComponents::from_flat(g, r, flat).ok_or_else(|| format!("array '{name}' has the wrong size"))?;
        Ok(VMGrid {
            bbox: header.bbox,
            comps,
        })
    };
    let b = get("b_inf_logit", 3)?;
    let medium = MediumParams {
        b_inf_logit: [b[0], b[1], b[2]],
        grid_d: grid("grid_d")?,
        grid_b: grid("grid_b")?,
    };

    let mut net = DenseNet {
        layers: header
            .mlp
            .iter()
            .map(|l| Layer::zeros(l.inputs, l.outputs, l.activation))
            .collect(),
    };
    if !net.is_consistent() {
        return Err("inconsistent network layer shapes".into());
    }
    let params = get("mlp", net.param_count())?;
    for (p, v) in net.params_mut().zip(params) {
        *p = *v;
    }
    let pw = get("prune_weights", 2)?;
    let uncertainty = if header.has_uncertainty {
        Some(get("uncertainty", n)?.clone())
    } else {
        None
    };
    let model = Model {
        cloud,
        medium,
        mlp: PruneMlp { net },
        prune_weights: PruneWeights { w_u: pw[0], w_p: pw[1] },
        uncertainty,
    };
    Ok((model, header))
}

/// Rounds every parameter to `f32`, matching what a save/load cycle yields.
pub fn quantized(model: &Model) -> Model {
    decode(&encode(model, None)).expect("own encoding decodes").0
}

#[doc(hidden)]
pub fn random_model(n: usize, seed: u64) -> Model {
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mut g = Gaussian3D::isotropic(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)),
                rng.random_range(0.05..0.3),
                rng.random_range(0.1..0.9),
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            );
            for c in g.sh.iter_mut().skip(1) {
                *c = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            }
            g
        })
        .collect();
    let bbox = Aabb::new(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 5.0)).expect("valid box");
    Model {
        cloud: GaussianCloud::new(gaussians),
        medium: MediumParams::new(bbox, 6, 2, [0.2, 0.4, 0.5], &mut rng).expect("valid grid"),
        mlp: PruneMlp::new(&mut rng),
        prune_weights: PruneWeights::default(),
        uncertainty: Some((0..n).map(|i| i as f64 / n as f64).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_reproduces_the_quantized_model() {
        let model = random_model(7, 1);
        let cfg = serde_json::json!({"iterations": 5});
        let bytes = encode(&model, Some(&cfg));
        let (back, header) = decode(&bytes).unwrap();
        assert_eq!(header.config_hash, config_hash(&cfg));
        assert_eq!(back, quantized(&model));
        assert_eq!(encode(&back, Some(&cfg)), bytes);
        for (a, b) in model.cloud.gaussians.iter().zip(&back.cloud.gaussians) {
            assert!((a.mean - b.mean).norm() < 1e-6);
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = encode(&random_model(3, 2), None);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let m = random_model(4, 3);
        save(&p, &m, None).unwrap();
        let (back, _) = load(&p).unwrap();
        assert_eq!(back, quantized(&m));
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}

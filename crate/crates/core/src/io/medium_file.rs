//! Standalone medium files: JSON with the factor arrays as base64 `f32`s.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::medium::{Aabb, MediumParams, VMGrid, VmComponents};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRecord {
    resolution: usize,
    rank: usize,
    /// `bias, u, m, v, w` flattened.
    factors: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MediumRecord {
    bbox: Aabb,
    b_infinity: [f64; 3],
    b_inf_logit: [f64; 3],
    grid_d: GridRecord,
    grid_b: GridRecord,
}

fn pack(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn unpack(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err("array length is not a multiple of 4 bytes".into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn grid_record(g: &VMGrid) -> GridRecord {
    GridRecord {
        resolution: g.resolution(),
        rank: g.rank(),
        factors: pack(&g.comps.to_flat()),
    }
}

pub fn to_json(m: &MediumParams) -> String {
    let rec = MediumRecord {
        bbox: m.grid_d.bbox,
        b_infinity: m.b_infinity(),
        b_inf_logit: m.b_inf_logit,
        grid_d: grid_record(&m.grid_d),
        grid_b: grid_record(&m.grid_b),
    };
    serde_json::to_string_pretty(&rec).expect("medium serializes")
}

pub fn from_json(text: &str) -> std::result::Result<MediumParams, String> {
    let rec: MediumRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
    rec.bbox.validate().map_err(|e| e.to_string())?;
    let grid = |g: &GridRecord| -> std::result::Result<VMGrid, String> {
        let flat = unpack(&g.factors)?;
        let comps = VmComponents::from_flat(g.resolution, g.rank, &flat)
            .ok_or_else(|| format!("grid factors do not match resolution {} rank {}", g.resolution, g.rank))?;
        Ok(VMGrid { bbox: rec.bbox, comps })
    };
    Ok(MediumParams {
        b_inf_logit: rec.b_inf_logit,
        grid_d: grid(&rec.grid_d)?,
        grid_b: grid(&rec.grid_b)?,
    })
}

pub fn save(path: &Path, m: &MediumParams) -> Result<()> {
    write_atomic(path, to_json(m).as_bytes())
}

pub fn load(path: &Path) -> Result<MediumParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text).map_err(|message| Error::MalformedFile {
        kind: "medium",
        path: path.to_path_buf(),
        message,
    })
}

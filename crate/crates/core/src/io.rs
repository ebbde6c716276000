//! File formats: scene/prediction JSON and the little-endian tensor container.
//!
//! The container is a 16-byte header (4-byte magic, then `u32` C, H, W) followed
//! by `C*H*W` `f32` values in channel-major, row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BevRange, MapClass, MapInstance, Point2, Prediction, PredictionSet, Scene};

pub const HEATMAP_MAGIC: [u8; 4] = *b"FMHM";
pub const PRIORS_MAGIC: [u8; 4] = *b"FMSP";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"FMWT";

const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceDoc {
    pub class: MapClass,
    pub closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    pub points: Vec<[f64; 2]>,
}

/// Shared JSON layout of scenes and prediction sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapDocument {
    pub range: BevRange,
    pub instances: Vec<InstanceDoc>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn points_doc(inst: &MapInstance) -> Vec<[f64; 2]> {
    inst.points().iter().map(|p| [round6(p.x), round6(p.y)]).collect()
}

impl MapDocument {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            range: scene.range(),
            instances: scene
                .instances()
                .iter()
                .map(|inst| InstanceDoc {
                    class: inst.class(),
                    closed: inst.closed(),
                    score: None,
                    logits: None,
                    points: points_doc(inst),
                })
                .collect(),
        }
    }

    pub fn from_predictions(preds: &PredictionSet) -> Self {
        Self {
            range: preds.range(),
            instances: preds
                .predictions()
                .iter()
                .map(|p| InstanceDoc {
                    class: p.instance.class(),
                    closed: p.instance.closed(),
                    score: Some(round6(p.score)),
                    logits: Some(p.logits.iter().map(|&v| round6(v)).collect()),
                    points: points_doc(&p.instance),
                })
                .collect(),
        }
    }

    fn instances(&self) -> Result<Vec<MapInstance>> {
        self.instances
            .iter()
            .map(|d| {
                MapInstance::with_closure(
                    d.class,
                    d.points.iter().map(|&p| Point2::from(p)).collect(),
                    d.closed,
                )
            })
            .collect()
    }

    pub fn to_scene(&self) -> Result<Scene> {
        Scene::new(self.range, self.instances()?)
    }

    /// Instances without a score get 1.0; missing logits are synthesized from
    /// the class and score.
    pub fn to_predictions(&self) -> Result<PredictionSet> {
        let preds = self
            .instances()?
            .into_iter()
            .zip(&self.instances)
            .map(|(instance, doc)| {
                let score = doc.score.unwrap_or(1.0);
                let logits = doc
                    .logits
                    .clone()
                    .unwrap_or_else(|| crate::model::one_hot_logits(instance.class(), score));
                Prediction { instance, score, logits }
            })
            .collect();
        PredictionSet::new(self.range, preds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    MapDocument::from_json(&fs::read_to_string(path)?)?.to_scene()
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    MapDocument::from_json(&fs::read_to_string(path)?)?.to_predictions()
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Encodes a 3-D array as a tagged container.
pub fn encode_container(magic: [u8; 4], values: &Array3<f64>) -> Vec<u8> {
    let (c, h, w) = values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(&magic);
    for dim in [c, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_container(expected_magic: [u8; 4], bytes: &[u8]) -> Result<Array3<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != expected_magic {
        return Err(Error::Format(format!(
            "magic {:?} != {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&expected_magic)
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * count {
        return Err(Error::Format(format!(
            "expected {} payload bytes for {c}x{h}x{w}, found {}",
            4 * count,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Array3::from_shape_vec((c, h, w), values).map_err(|e| Error::Format(e.to_string()))
}

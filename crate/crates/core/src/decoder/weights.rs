//! Named, seeded decoder parameters and their FMWT container.

use std::path::Path;

use ndarray::{Array3, ArrayD, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use super::DecoderConfig;
use crate::error::{Error, Result};
use crate::io::{decode_container, encode_container, write_atomic, WEIGHTS_MAGIC};
use crate::model::MapClass;
use crate::rng::Lcg64;

/// Hidden width of the heatmap head.
pub const HEAT_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform(usize),
    Ones,
    Zeros,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn slot(name: &str, shape: &[usize], init: Init) -> Slot {
    Slot { name: name.to_string(), shape: shape.to_vec(), init }
}

fn dense(out: &mut Vec<Slot>, name: &str, fan_in: usize, fan_out: usize) {
    out.push(slot(&format!("{name}.w"), &[fan_in, fan_out], Init::Uniform(fan_in)));
    out.push(slot(&format!("{name}.b"), &[fan_out], Init::Uniform(fan_in)));
}

fn norm(out: &mut Vec<Slot>, name: &str, d: usize) {
    out.push(slot(&format!("{name}.g"), &[d], Init::Ones));
    out.push(slot(&format!("{name}.b"), &[d], Init::Zeros));
}

/// Residual block shared by both stages: norm, feed-forward, norm.
fn block(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    norm(out, &format!("{prefix}.ln1"), d);
    dense(out, &format!("{prefix}.ff1"), d, 2 * d);
    dense(out, &format!("{prefix}.ff2"), 2 * d, d);
    norm(out, &format!("{prefix}.ln2"), d);
}

/// Every tensor, in initialization and file order.
fn layout(cfg: &DecoderConfig) -> Vec<Slot> {
    let (d, c, nm) = (cfg.d, MapClass::COUNT, cfg.n * cfg.m);
    let samples = cfg.heads * cfg.levels * cfg.sample_points;
    let mut out = Vec::new();
    for (name, cin, cout) in [("heat.conv1", d, HEAT_HIDDEN), ("heat.conv2", HEAT_HIDDEN, HEAT_HIDDEN), ("heat.conv3", HEAT_HIDDEN, c)] {
        out.push(slot(&format!("{name}.w"), &[cout, cin, 3, 3], Init::Uniform(cin * 9)));
        out.push(slot(&format!("{name}.b"), &[cout], Init::Uniform(cin * 9)));
    }
    out.push(slot("query.pos", &[nm, d], Init::Uniform(d)));
    out.push(slot("query.feat", &[nm, d], Init::Uniform(d)));

    dense(&mut out, "cgca.w_p", 2, d);
    out.push(slot("cgca.w_c", &[c, d], Init::Uniform(d)));
    for proj in ["q", "k", "v", "o"] {
        dense(&mut out, &format!("cgca.attn.{proj}"), d, d);
    }
    block(&mut out, "cgca", d);
    dense(&mut out, "cgca.w_ref", d, 2);
    dense(&mut out, "cgca.cls", d, c + 1);

    dense(&mut out, "fgca.w_q", d, d);
    dense(&mut out, "fgca.offset", d, samples * 2);
    dense(&mut out, "fgca.weight", d, samples);
    dense(&mut out, "fgca.value", d, d);
    dense(&mut out, "fgca.out", d, d);
    block(&mut out, "fgca", d);
    dense(&mut out, "fgca.point", d, 2);
    dense(&mut out, "fgca.cls", d, c + 1);
    out
}

/// Name, shape and position of one tensor in the flat weight file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// JSON companion of an FMWT file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: DecoderConfig,
    pub tensors: Vec<TensorInfo>,
}

/// All decoder parameters. Values are kept at `f32` precision so the file
/// round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    config: DecoderConfig,
    tensors: Vec<(String, ArrayD<f64>)>,
}

impl DecoderWeights {
    /// Seeded initialization from `config.seed`.
    pub fn init(config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Lcg64::new(config.seed);
        let tensors = layout(config)
            .into_iter()
            .map(|s| {
                let len: usize = s.shape.iter().product();
                let values: Vec<f64> = match s.init {
                    Init::Uniform(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..len).map(|_| rng.uniform(-bound, bound) as f32 as f64).collect()
                    }
                    Init::Ones => vec![1.0; len],
                    Init::Zeros => vec![0.0; len],
                };
                (s.name, ArrayD::from_shape_vec(IxDyn(&s.shape), values).expect("layout shape"))
            })
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Sets every parameter to `value`.
    pub fn fill(&mut self, value: f64) {
        for (_, t) in &mut self.tensors {
            t.fill(value);
        }
    }

    fn tensor(&self, name: &str) -> &ArrayD<f64> {
        self.get(name).unwrap_or_else(|| panic!("missing weight {name}"))
    }

    pub(crate) fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.tensor(name).view().into_dimensionality::<Ix2>().expect("matrix weight")
    }

    pub(crate) fn vec(&self, name: &str) -> ArrayView1<'_, f64> {
        self.tensor(name).view().into_dimensionality::<Ix1>().expect("vector weight")
    }

    pub(crate) fn kernel(&self, name: &str) -> ArrayView4<'_, f64> {
        self.tensor(name).view().into_dimensionality::<Ix4>().expect("conv weight")
    }

    pub fn manifest(&self) -> WeightManifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let info = TensorInfo { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                info
            })
            .collect();
        WeightManifest { config: self.config.clone(), tensors }
    }

    /// Flat FMWT container of shape `1 x 1 x parameter_count`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let flat: Vec<f64> = self.tensors.iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let n = flat.len();
        encode_container(WEIGHTS_MAGIC, &Array3::from_shape_vec((1, 1, n), flat).expect("flat shape"))
    }

    /// Rebuilds weights from a container and its manifest. Names and shapes
    /// must match the layout implied by the manifest's config.
    pub fn from_parts(bytes: &[u8], manifest: &WeightManifest) -> Result<Self> {
        manifest.config.validate()?;
        let flat = decode_container(WEIGHTS_MAGIC, bytes)?;
        let flat: Vec<f64> = flat.iter().copied().collect();
        let expected = layout(&manifest.config);
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, config implies {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for (slot, info) in expected.iter().zip(&manifest.tensors) {
            if slot.name != info.name || slot.shape != info.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    info.name, info.shape, slot.name, slot.shape
                )));
            }
            let len: usize = info.shape.iter().product();
            let values = flat
                .get(info.offset..info.offset + len)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the data", info.name)))?;
            tensors.push((info.name.clone(), ArrayD::from_shape_vec(IxDyn(&info.shape), values.to_vec()).expect("shape")));
        }
        Ok(Self { config: manifest.config.clone(), tensors })
    }

    pub fn save(&self, bin: &Path, manifest: &Path) -> Result<()> {
        write_atomic(bin, &self.to_bytes())?;
        write_atomic(manifest, serde_json::to_string_pretty(&self.manifest())?.as_bytes())
    }

    pub fn load(bin: &Path, manifest: &Path) -> Result<Self> {
        let m: WeightManifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        Self::from_parts(&std::fs::read(bin)?, &m)
    }
}

//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian): magic `SNNC`, u32 version, stage u8,
//! 32-byte config hash, u32 calibration time steps (0 before conversion),
//! mask-mode u8, the embedded model spec, then per parameterized layer:
//! name, dims, f32 weights, mask packed 8 bits per byte, and an optional
//! `(v_th, leak)` pair. Save/load round-trips bitwise.

use crate::error::{Error, Result};
use crate::model::{Layer, ModelSpec, ModelState, ParamLayer};
use crate::snn::SnnModel;
use crate::sparse::{MaskMode, PruneMask};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SNNC";
const VERSION: u32 = 1;

/// Pipeline stage the checkpoint came from. Conversion refuses to run twice;
/// SNN training accepts converted or snn checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ann,
    Converted,
    Snn,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Ann => 0,
            Stage::Converted => 1,
            Stage::Snn => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stage::Ann),
            1 => Ok(Stage::Converted),
            2 => Ok(Stage::Snn),
            other => Err(Error::Checkpoint(format!("unknown stage tag {}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ann => "ann",
            Stage::Converted => "converted",
            Stage::Snn => "snn",
        }
    }
}

/// One parameterized layer as stored.
#[derive(Debug, Clone)]
pub struct CkptLayer {
    pub name: String,
    pub weight: Tensor<f32>,
    pub mask: PruneMask,
    /// `(v_th, leak)` for spiking layers of converted/snn checkpoints.
    pub neuron: Option<(f32, f32)>,
}

/// In-memory checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: [u8; 32],
    pub calib_steps: u32,
    pub mode: MaskMode,
    pub spec: ModelSpec,
    pub layers: Vec<CkptLayer>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.b.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.off,
                self.b.len()
            )));
        }
        let s = &self.b[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let s = self.take(4)?;
        Ok(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let s = self.take(8)?;
        Ok(f64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]))
    }
}

fn encode_spec(out: &mut Vec<u8>, spec: &ModelSpec) {
    put_u32(out, spec.input.0 as u32);
    put_u32(out, spec.input.1 as u32);
    put_u32(out, spec.input.2 as u32);
    put_u32(out, spec.classes as u32);
    put_u32(out, spec.layers.len() as u32);
    for l in &spec.layers {
        match l {
            Layer::Conv { out_channels, kernel, stride, pad } => {
                out.push(0);
                put_u32(out, *out_channels as u32);
                put_u32(out, *kernel as u32);
                put_u32(out, *stride as u32);
                put_u32(out, *pad as u32);
            }
            Layer::Linear { out_features } => {
                out.push(1);
                put_u32(out, *out_features as u32);
            }
            Layer::Relu => out.push(2),
            Layer::AvgPool { kernel, stride } => {
                out.push(3);
                put_u32(out, *kernel as u32);
                put_u32(out, *stride as u32);
            }
            Layer::Dropout { rate } => {
                out.push(4);
                put_f64(out, *rate);
            }
        }
    }
}

fn decode_spec(r: &mut Reader) -> Result<ModelSpec> {
    let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let classes = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let layer = match r.u8()? {
            0 => Layer::Conv {
                out_channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                pad: r.u32()? as usize,
            },
            1 => Layer::Linear { out_features: r.u32()? as usize },
            2 => Layer::Relu,
            3 => Layer::AvgPool { kernel: r.u32()? as usize, stride: r.u32()? as usize },
            4 => Layer::Dropout { rate: r.f64()? },
            other => return Err(Error::Checkpoint(format!("unknown layer tag {}", other))),
        };
        layers.push(layer);
    }
    Ok(ModelSpec { input, classes, layers })
}

impl Checkpoint {
    /// From an ANN-stage model.
    pub fn from_ann(state: &ModelState<f32>, spec: &ModelSpec, mode: MaskMode, config_hash: [u8; 32]) -> Self {
        Checkpoint {
            stage: Stage::Ann,
            config_hash,
            calib_steps: 0,
            mode,
            spec: spec.clone(),
            layers: state
                .params
                .iter()
                .map(|p| CkptLayer {
                    name: p.name.clone(),
                    weight: p.weight.clone(),
                    mask: p.mask.clone(),
                    neuron: None,
                })
                .collect(),
        }
    }

    /// From a converted or fine-tuned SNN.
    pub fn from_snn(
        model: &SnnModel<f32>,
        stage: Stage,
        mode: MaskMode,
        config_hash: [u8; 32],
        calib_steps: u32,
    ) -> Self {
        Checkpoint {
            stage,
            config_hash,
            calib_steps,
            mode,
            spec: model.spec.clone(),
            layers: model
                .state
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| CkptLayer {
                    name: p.name.clone(),
                    weight: p.weight.clone(),
                    mask: p.mask.clone(),
                    neuron: if i < model.v_th.len() {
                        Some((model.v_th[i], model.leak[i]))
                    } else {
                        None
                    },
                })
                .collect(),
        }
    }

    /// Rebuild ANN-style parameters (momentum zeroed).
    pub fn to_model_state(&self) -> Result<ModelState<f32>> {
        let params = self
            .layers
            .iter()
            .map(|l| ParamLayer {
                name: l.name.clone(),
                weight: l.weight.clone(),
                mask: l.mask.clone(),
                momentum: Tensor::zeros(l.weight.shape()),
            })
            .collect();
        Ok(ModelState { params })
    }

    /// Rebuild the SNN with stored thresholds and leaks.
    pub fn to_snn_model(&self) -> Result<SnnModel<f32>> {
        let state = self.to_model_state()?;
        let mut model = SnnModel::from_ann(state, self.spec.clone())?;
        for (i, l) in self.layers.iter().enumerate() {
            if let Some((vth, leak)) = l.neuron {
                if i >= model.v_th.len() {
                    return Err(Error::Checkpoint(format!(
                        "layer {} carries neuron params but is the classifier head",
                        l.name
                    )));
                }
                model.v_th[i] = vth;
                model.leak[i] = leak;
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(self.stage.code());
        out.extend_from_slice(&self.config_hash);
        put_u32(&mut out, self.calib_steps);
        out.push(match self.mode {
            MaskMode::Irregular => 0,
            MaskMode::Channel => 1,
        });
        encode_spec(&mut out, &self.spec);
        put_u32(&mut out, self.layers.len() as u32);
        for l in &self.layers {
            let name = l.name.as_bytes();
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name);
            put_u32(&mut out, l.weight.shape().len() as u32);
            for &d in l.weight.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in l.weight.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&l.mask.pack_bits());
            match l.neuron {
                Some((vth, leak)) => {
                    out.push(1);
                    out.extend_from_slice(&vth.to_le_bytes());
                    out.extend_from_slice(&leak.to_le_bytes());
                }
                None => out.push(0),
            }
        }
        out.push(0); // no optimizer state
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, off: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("magic mismatch, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {})",
                version, VERSION
            )));
        }
        let stage = Stage::from_code(r.u8()?)?;
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let calib_steps = r.u32()?;
        let mode = match r.u8()? {
            0 => MaskMode::Irregular,
            1 => MaskMode::Channel,
            other => return Err(Error::Checkpoint(format!("unknown mask mode {}", other))),
        };
        let spec = decode_spec(&mut r)?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("layer name is not utf-8".into()))?;
            let ndims = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()?);
            }
            let weight = Tensor::new(shape.clone(), data)?;
            let mask_bytes = r.take((numel + 7) / 8)?;
            let mask = PruneMask::from_packed_bits(shape, mode, mask_bytes)?;
            let neuron = match r.u8()? {
                0 => None,
                1 => Some((r.f32()?, r.f32()?)),
                other => return Err(Error::Checkpoint(format!("bad neuron flag {}", other))),
            };
            layers.push(CkptLayer { name, weight, mask, neuron });
        }
        let opt_flag = r.u8()?;
        if opt_flag != 0 {
            return Err(Error::Checkpoint(format!("unsupported optimizer-state flag {}", opt_flag)));
        }
        if r.off != b.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                b.len() - r.off
            )));
        }
        Ok(Checkpoint {
            stage,
            config_hash,
            calib_steps,
            mode,
            spec,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::Checkpoint(format!("cannot create {}: {}", path.display(), e)))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form; the determinism tests compare these.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        h.finalize().into()
    }
}

pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, preset};

    fn sample() -> Checkpoint {
        let spec = preset("vgg-mini", (1, 8, 8), 10, 0.1, 0.5).unwrap();
        let state = build_model::<f32>(&spec, 3).unwrap();
        Checkpoint::from_ann(&state, &spec, MaskMode::Irregular, [7u8; 32])
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.stage, Stage::Ann);
        assert_eq!(back.spec, ck.spec);
        for (a, b) in back.layers.iter().zip(&ck.layers) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn snn_roundtrip_keeps_neuron_params() {
        let spec = preset("vgg-mini", (1, 8, 8), 10, 0.0, 0.0).unwrap();
        let state = build_model::<f32>(&spec, 5).unwrap();
        let mut model = SnnModel::from_ann(state, spec).unwrap();
        for (i, v) in model.v_th.iter_mut().enumerate() {
            *v = 0.3 + i as f32 * 0.1;
        }
        for l in model.leak.iter_mut() {
            *l = 0.95;
        }
        let ck = Checkpoint::from_snn(&model, Stage::Converted, MaskMode::Irregular, [0u8; 32], 10);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let rebuilt = back.to_snn_model().unwrap();
        assert_eq!(rebuilt.v_th, model.v_th);
        assert_eq!(rebuilt.leak, model.leak);
        assert_eq!(back.calib_steps, 10);
    }
}

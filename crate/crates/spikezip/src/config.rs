//! Flat `key=value` run configuration.
//!
//! One documented text file drives every pipeline stage; `#` starts a
//! comment. Unknown keys are rejected so typos fail loudly. The canonical
//! rendering (all keys, sorted, effective values) is what the checkpoint
//! provenance hash covers, so two files that mean the same run hash the
//! same.

use crate::attention::AgNorm;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::metrics::EnergyModel;
use crate::model::{Layer, ModelSpec};
use crate::snn::SnnTrainConfig;
use crate::sparse::MaskMode;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Dataset file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    RawF32,
}

/// Input preprocessing for ANN training and direct coding. Poisson encoding
/// always consumes raw `[0,1]` intensities regardless of this setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    Standardize,
    None,
}

/// ANN-stage hyperparameters.
#[derive(Debug, Clone)]
pub struct AnnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// The reference schedule leaves weight decay unstated; 5e-4 is a
    /// conventional default, not a quoted value.
    pub weight_decay: f64,
    pub milestones: Vec<(usize, f64)>,
    pub batch: usize,
    /// `None` picks 0.2 for dense runs and 0.05 for compressed ones.
    pub dropout_conv: Option<f64>,
    pub dropout_linear: f64,
}

/// Calibration settings for conversion.
#[derive(Debug, Clone, Copy)]
pub struct CalibConfig {
    pub batch: usize,
    pub percentile: f64,
    pub scale: f64,
}

/// Everything a run needs, with every default the pipeline assumes.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: String,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub inline_layers: Option<Vec<Layer>>,
    pub data_dir: PathBuf,
    pub data_format: DataFormat,
    pub normalize: Normalize,
    pub mode: MaskMode,
    pub density: f64,
    pub p0: f64,
    pub alpha: f64,
    pub epsilon: usize,
    pub power: u32,
    pub ag_norm: AgNorm,
    pub ann: AnnConfig,
    pub snn: SnnTrainConfig,
    pub snn_epochs: usize,
    pub calib: CalibConfig,
    pub profile_batch: usize,
    pub energy: EnergyModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: "vgg-mini".into(),
            input: (1, 8, 8),
            classes: 10,
            inline_layers: None,
            data_dir: PathBuf::from("data"),
            data_format: DataFormat::RawF32,
            normalize: Normalize::Standardize,
            mode: MaskMode::Irregular,
            density: 1.0,
            p0: 0.5,
            alpha: 100.0,
            epsilon: 100,
            power: 2,
            ag_norm: AgNorm::L2,
            ann: AnnConfig {
                epochs: 240,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                milestones: vec![(150, 0.1), (180, 0.1), (210, 0.1)],
                batch: 32,
                dropout_conv: None,
                dropout_linear: 0.5,
            },
            snn: SnnTrainConfig::default(),
            snn_epochs: 20,
            calib: CalibConfig {
                batch: 512,
                percentile: 99.7,
                scale: 0.4,
            },
            profile_batch: 128,
            energy: EnergyModel::default(),
        }
    }
}

fn parse_milestones(s: &str) -> Result<Vec<(usize, f64)>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(vec![]);
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let (e, f) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("milestone {:?} wants epoch:factor", part)))?;
        out.push((
            e.trim().parse().map_err(|_| Error::Config(format!("bad milestone epoch {:?}", e)))?,
            f.trim().parse().map_err(|_| Error::Config(format!("bad milestone factor {:?}", f)))?,
        ));
    }
    Ok(out)
}

fn render_milestones(m: &[(usize, f64)]) -> String {
    if m.is_empty() {
        return "none".into();
    }
    m.iter().map(|(e, f)| format!("{}:{}", e, f)).collect::<Vec<_>>().join(",")
}

fn parse_inline_layers(s: &str) -> Result<Vec<Layer>> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let fields: Vec<&str> = item.trim().split(':').collect();
        let layer = match fields[0] {
            "conv" if fields.len() == 5 => Layer::Conv {
                out_channels: fields[1].parse().map_err(|_| bad_layer(item))?,
                kernel: fields[2].parse().map_err(|_| bad_layer(item))?,
                stride: fields[3].parse().map_err(|_| bad_layer(item))?,
                pad: fields[4].parse().map_err(|_| bad_layer(item))?,
            },
            "fc" if fields.len() == 2 => Layer::Linear {
                out_features: fields[1].parse().map_err(|_| bad_layer(item))?,
            },
            "relu" if fields.len() == 1 => Layer::Relu,
            "pool" if fields.len() == 3 => Layer::AvgPool {
                kernel: fields[1].parse().map_err(|_| bad_layer(item))?,
                stride: fields[2].parse().map_err(|_| bad_layer(item))?,
            },
            "drop" if fields.len() == 2 => Layer::Dropout {
                rate: fields[1].parse().map_err(|_| bad_layer(item))?,
            },
            _ => return Err(bad_layer(item)),
        };
        out.push(layer);
    }
    Ok(out)
}

fn bad_layer(item: &str) -> Error {
    Error::Config(format!(
        "bad layer {:?}; expected conv:OUT:K:S:P, fc:OUT, relu, pool:K:S or drop:RATE",
        item
    ))
}

fn render_inline_layers(layers: &[Layer]) -> String {
    layers
        .iter()
        .map(|l| match l {
            Layer::Conv { out_channels, kernel, stride, pad } => {
                format!("conv:{}:{}:{}:{}", out_channels, kernel, stride, pad)
            }
            Layer::Linear { out_features } => format!("fc:{}", out_features),
            Layer::Relu => "relu".into(),
            Layer::AvgPool { kernel, stride } => format!("pool:{}:{}", kernel, stride),
            Layer::Dropout { rate } => format!("drop:{}", rate),
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {:?}", ln + 1, raw)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = RunConfig::default();
        let mut take = |key: &str| map.remove(key);

        macro_rules! set {
            ($key:expr, $slot:expr, $parse:expr) => {
                if let Some(v) = take($key) {
                    $slot = $parse(&v)
                        .map_err(|e: Error| Error::Config(format!("{}: {}", $key, e)))?;
                }
            };
        }
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, Error> {
            v.parse().map_err(|_| Error::Config(format!("bad number {:?}", v)))
        }

        set!("seed", cfg.seed, num);
        if let Some(v) = take("model") {
            cfg.model = v;
        }
        if let Some(v) = take("model.input") {
            let dims: Vec<usize> = v
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::Config(format!("bad model.input {:?}", v))))
                .collect::<std::result::Result<_, _>>()?;
            if dims.len() != 3 {
                return Err(Error::Config(format!("model.input wants CxHxW, got {:?}", v)));
            }
            cfg.input = (dims[0], dims[1], dims[2]);
        }
        set!("model.classes", cfg.classes, num);
        if let Some(v) = take("model.layers") {
            cfg.inline_layers = Some(parse_inline_layers(&v)?);
        }
        if let Some(v) = take("data.dir") {
            cfg.data_dir = PathBuf::from(v);
        }
        if let Some(v) = take("data.format") {
            cfg.data_format = match v.as_str() {
                "idx" => DataFormat::Idx,
                "raw-f32" => DataFormat::RawF32,
                other => return Err(Error::Config(format!("unknown data.format {:?}", other))),
            };
        }
        if let Some(v) = take("data.normalize") {
            cfg.normalize = match v.as_str() {
                "standardize" => Normalize::Standardize,
                "none" => Normalize::None,
                other => return Err(Error::Config(format!("unknown data.normalize {:?}", other))),
            };
        }
        if let Some(v) = take("prune.mode") {
            cfg.mode = match v.as_str() {
                "irregular" => MaskMode::Irregular,
                "channel" => MaskMode::Channel,
                other => return Err(Error::Config(format!("unknown prune.mode {:?}", other))),
            };
        }
        set!("prune.density", cfg.density, num);
        set!("prune.p0", cfg.p0, num);
        set!("attn.alpha", cfg.alpha, num);
        set!("attn.epsilon", cfg.epsilon, num);
        set!("attn.power", cfg.power, num);
        if let Some(v) = take("attn.norm") {
            cfg.ag_norm = match v.as_str() {
                "l2" => AgNorm::L2,
                "l2sq" => AgNorm::L2Squared,
                other => return Err(Error::Config(format!("unknown attn.norm {:?}", other))),
            };
        }
        set!("ann.epochs", cfg.ann.epochs, num);
        set!("ann.lr", cfg.ann.lr, num);
        set!("ann.momentum", cfg.ann.momentum, num);
        set!("ann.weight_decay", cfg.ann.weight_decay, num);
        set!("ann.milestones", cfg.ann.milestones, parse_milestones);
        set!("ann.batch", cfg.ann.batch, num);
        if let Some(v) = take("ann.dropout_conv") {
            cfg.ann.dropout_conv = if v == "auto" { None } else { Some(num::<f64>(&v)?) };
        }
        set!("ann.dropout_linear", cfg.ann.dropout_linear, num);
        set!("snn.timesteps", cfg.snn.steps, num);
        set!("snn.gamma", cfg.snn.gamma, num);
        set!("snn.lr", cfg.snn.lr, num);
        if let Some(v) = take("snn.epochs") {
            cfg.snn_epochs = num(&v)?;
            cfg.snn.epochs = cfg.snn_epochs;
        }
        set!("snn.milestones", cfg.snn.milestones, parse_milestones);
        set!("snn.batch", cfg.snn.batch, num);
        set!("snn.train_weights", cfg.snn.train_weights, parse_bool);
        set!("snn.train_vth", cfg.snn.train_vth, parse_bool);
        set!("snn.train_leak", cfg.snn.train_leak, parse_bool);
        if let Some(v) = take("snn.encoding") {
            cfg.snn.encoding = Encoding::parse(&v)?;
        }
        set!("calib.batch", cfg.calib.batch, num);
        set!("calib.percentile", cfg.calib.percentile, num);
        set!("calib.scale", cfg.calib.scale, num);
        set!("profile.batch", cfg.profile_batch, num);
        set!("energy.e_ac", cfg.energy.e_ac, num);
        set!("energy.e_mac", cfg.energy.e_mac, num);

        if let Some((k, _)) = map.into_iter().next() {
            return Err(Error::Config(format!("unknown key {:?}", k)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("prune.density {} outside (0,1]", self.density)));
        }
        if self.power < 1 {
            return Err(Error::Config("attn.power must be >= 1".into()));
        }
        for &(e, _) in &self.ann.milestones {
            if e >= self.ann.epochs && self.ann.epochs > 0 {
                return Err(Error::Config(format!(
                    "ann milestone epoch {} outside 0..{}",
                    e, self.ann.epochs
                )));
            }
        }
        for &(e, _) in &self.snn.milestones {
            if e >= self.snn_epochs && self.snn_epochs > 0 {
                return Err(Error::Config(format!(
                    "snn milestone epoch {} outside 0..{}",
                    e, self.snn_epochs
                )));
            }
        }
        if !(0.0..=100.0).contains(&self.calib.percentile) {
            return Err(Error::Config(format!(
                "calib.percentile {} outside [0,100]",
                self.calib.percentile
            )));
        }
        self.energy.validate()?;
        self.snn.validate()?;
        Ok(())
    }

    /// Effective conv-block dropout: explicit value, or the compression-aware
    /// default (0.2 dense, 0.05 compressed).
    pub fn conv_dropout(&self) -> f64 {
        self.ann.dropout_conv.unwrap_or(if self.density < 1.0 { 0.05 } else { 0.2 })
    }

    /// Build the model spec this config describes.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = match &self.inline_layers {
            Some(layers) => ModelSpec {
                input: self.input,
                classes: self.classes,
                layers: layers.clone(),
            },
            None => crate::model::preset(
                &self.model,
                self.input,
                self.classes,
                self.conv_dropout(),
                self.ann.dropout_linear,
            )?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical rendering: every key, sorted, with effective values.
    pub fn canonical(&self) -> String {
        let mut lines = vec![
            format!("ann.batch={}", self.ann.batch),
            format!(
                "ann.dropout_conv={}",
                self.ann.dropout_conv.map(|v| v.to_string()).unwrap_or_else(|| "auto".into())
            ),
            format!("ann.dropout_linear={}", self.ann.dropout_linear),
            format!("ann.epochs={}", self.ann.epochs),
            format!("ann.lr={}", self.ann.lr),
            format!("ann.milestones={}", render_milestones(&self.ann.milestones)),
            format!("ann.momentum={}", self.ann.momentum),
            format!("ann.weight_decay={}", self.ann.weight_decay),
            format!("attn.alpha={}", self.alpha),
            format!("attn.epsilon={}", self.epsilon),
            format!(
                "attn.norm={}",
                if self.ag_norm == AgNorm::L2 { "l2" } else { "l2sq" }
            ),
            format!("attn.power={}", self.power),
            format!("calib.batch={}", self.calib.batch),
            format!("calib.percentile={}", self.calib.percentile),
            format!("calib.scale={}", self.calib.scale),
            format!("data.dir={}", self.data_dir.display()),
            format!(
                "data.format={}",
                if self.data_format == DataFormat::Idx { "idx" } else { "raw-f32" }
            ),
            format!(
                "data.normalize={}",
                if self.normalize == Normalize::Standardize { "standardize" } else { "none" }
            ),
            format!("energy.e_ac={}", self.energy.e_ac),
            format!("energy.e_mac={}", self.energy.e_mac),
            format!("model={}", self.model),
            format!("model.classes={}", self.classes),
            format!("model.input={}x{}x{}", self.input.0, self.input.1, self.input.2),
            format!("prune.density={}", self.density),
            format!(
                "prune.mode={}",
                if self.mode == MaskMode::Irregular { "irregular" } else { "channel" }
            ),
            format!("prune.p0={}", self.p0),
            format!("profile.batch={}", self.profile_batch),
            format!("seed={}", self.seed),
            format!("snn.batch={}", self.snn.batch),
            format!("snn.encoding={}", self.snn.encoding.name()),
            format!("snn.epochs={}", self.snn_epochs),
            format!("snn.gamma={}", self.snn.gamma),
            format!("snn.lr={}", self.snn.lr),
            format!("snn.milestones={}", render_milestones(&self.snn.milestones)),
            format!("snn.timesteps={}", self.snn.steps),
            format!("snn.train_leak={}", self.snn.train_leak),
            format!("snn.train_vth={}", self.snn.train_vth),
            format!("snn.train_weights={}", self.snn.train_weights),
        ];
        if let Some(layers) = &self.inline_layers {
            lines.push(format!("model.layers={}", render_inline_layers(layers)));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// SHA-256 of the canonical rendering; stored in checkpoint provenance.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.finalize().into()
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad bool {:?}", other))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.ann.epochs, 240);
        assert_eq!(cfg.ann.milestones, vec![(150, 0.1), (180, 0.1), (210, 0.1)]);
        assert_eq!(cfg.snn.milestones, vec![(12, 0.5), (16, 0.5), (18, 0.5)]);
        assert_eq!(cfg.calib.batch, 512);
        assert_eq!(cfg.calib.percentile, 99.7);
        assert_eq!(cfg.calib.scale, 0.4);
        assert_eq!(cfg.snn.gamma, 0.3);
        assert_eq!(cfg.snn.lr, 1e-4);
        assert_eq!(cfg.alpha, 100.0);
        assert_eq!(cfg.epsilon, 100);
        assert_eq!(cfg.p0, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("prune.densty=0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# a run\nseed=7\nprune.density=0.1  # ten percent\nsnn.timesteps=12\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.density, 0.1);
        assert_eq!(cfg.snn.steps, 12);
    }

    #[test]
    fn density_bounds_enforced() {
        assert!(RunConfig::parse("prune.density=0\n").is_err());
        assert!(RunConfig::parse("prune.density=1.2\n").is_err());
    }

    #[test]
    fn hash_ignores_formatting_but_sees_values() {
        let a = RunConfig::parse("seed=1\n# comment\n").unwrap();
        let b = RunConfig::parse("   seed = 1   \n").unwrap();
        let c = RunConfig::parse("seed=2\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn conv_dropout_auto_rule() {
        let dense = RunConfig::parse("prune.density=1.0\n").unwrap();
        let sparse = RunConfig::parse("prune.density=0.1\n").unwrap();
        assert_eq!(dense.conv_dropout(), 0.2);
        assert_eq!(sparse.conv_dropout(), 0.05);
        let explicit = RunConfig::parse("ann.dropout_conv=0.11\n").unwrap();
        assert_eq!(explicit.conv_dropout(), 0.11);
    }

    #[test]
    fn inline_layers_roundtrip() {
        let text = "model=custom\nmodel.input=1x6x6\nmodel.classes=4\nmodel.layers=conv:4:3:1:1,relu,pool:2:2,fc:4\n";
        let cfg = RunConfig::parse(text).unwrap();
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.layers.len(), 4);
        let rendered = cfg.canonical();
        assert!(rendered.contains("model.layers=conv:4:3:1:1,relu,pool:2:2,fc:4"));
    }

    #[test]
    fn milestone_range_checked() {
        assert!(RunConfig::parse("ann.epochs=100\n").is_err()); // default milestones at 150+ out of range
        assert!(RunConfig::parse("ann.epochs=100\nann.milestones=50:0.1\n").is_ok());
    }
}

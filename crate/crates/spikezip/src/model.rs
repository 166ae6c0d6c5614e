//! Constrained BN-free ANN construction, forward/loss evaluation, and the
//! momentum optimizer whose buffers drive the sparse-learning scheduler.
//!
//! The layer enum deliberately has no batch-norm, no max-pool, and no bias
//! terms: the conversion stage requires their absence, so they are
//! unrepresentable rather than checked.

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedSplitter};
use crate::sparse::{MaskMode, PruneMask};
use crate::tape::{conv_out_dim, OpTape, ValueRef};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One layer of a sequential model.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        out_features: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
}

/// Layer-graph description: input geometry, class count, ordered layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input: (usize, usize, usize), // (C, H, W)
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// Shape of the tensor flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowShape {
    Map { c: usize, h: usize, w: usize },
    Flat { n: usize },
}

impl FlowShape {
    pub fn numel(&self) -> usize {
        match self {
            FlowShape::Map { c, h, w } => c * h * w,
            FlowShape::Flat { n } => *n,
        }
    }
}

impl ModelSpec {
    /// Validate geometry and the classifier-head contract; returns the
    /// output shape after every layer.
    pub fn validate(&self) -> Result<Vec<FlowShape>> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let (c0, h0, w0) = self.input;
        let mut cur = FlowShape::Map { c: c0, h: h0, w: w0 };
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut last_linear_out = None;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, &cur) {
                (Layer::Conv { out_channels, kernel, stride, pad }, FlowShape::Map { h, w, .. }) => {
                    if *kernel > h + 2 * pad || *kernel > w + 2 * pad {
                        return Err(Error::Config(format!(
                            "layer {}: kernel {} exceeds padded input {}x{}",
                            i, kernel, h + 2 * pad, w + 2 * pad
                        )));
                    }
                    FlowShape::Map {
                        c: *out_channels,
                        h: conv_out_dim(*h, *kernel, *stride, *pad),
                        w: conv_out_dim(*w, *kernel, *stride, *pad),
                    }
                }
                (Layer::Conv { .. }, FlowShape::Flat { .. }) => {
                    return Err(Error::Config(format!("layer {}: conv after flatten", i)));
                }
                (Layer::Linear { out_features }, cur) => {
                    last_linear_out = Some(*out_features);
                    let _ = cur.numel();
                    FlowShape::Flat { n: *out_features }
                }
                (Layer::Relu, cur) => cur.clone(),
                (Layer::Dropout { rate }, cur) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Config(format!("layer {}: dropout rate {}", i, rate)));
                    }
                    cur.clone()
                }
                (Layer::AvgPool { kernel, stride }, FlowShape::Map { c, h, w }) => {
                    if *kernel > *h || *kernel > *w {
                        return Err(Error::Config(format!(
                            "layer {}: pool window {} on {}x{} map",
                            i, kernel, h, w
                        )));
                    }
                    FlowShape::Map {
                        c: *c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    }
                }
                (Layer::AvgPool { .. }, FlowShape::Flat { .. }) => {
                    return Err(Error::Config(format!("layer {}: pool after flatten", i)));
                }
            };
            shapes.push(cur.clone());
        }
        match (self.layers.last(), last_linear_out) {
            (Some(Layer::Linear { .. }), Some(out)) if out == self.classes => {}
            _ => {
                return Err(Error::Config(format!(
                    "model must end in a linear classifier head with {} outputs",
                    self.classes
                )))
            }
        }
        Ok(shapes)
    }

    /// Indices of parameterized (conv/linear) layers, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. } | Layer::Linear { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Weight shapes of the parameterized layers.
    pub fn weight_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.validate()?;
        let (c0, h0, w0) = self.input;
        let mut out = Vec::new();
        let mut prev = FlowShape::Map { c: c0, h: h0, w: w0 };
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { out_channels, kernel, .. } => {
                    if let FlowShape::Map { c, .. } = prev {
                        out.push(vec![*out_channels, c, *kernel, *kernel]);
                    }
                }
                Layer::Linear { out_features } => {
                    out.push(vec![*out_features, prev.numel()]);
                }
                _ => {}
            }
            prev = shapes[i].clone();
        }
        Ok(out)
    }
}

/// Parameterized layer: weight, prune mask, momentum buffer.
#[derive(Debug, Clone)]
pub struct ParamLayer<F: Scalar> {
    pub name: String,
    pub weight: Tensor<F>,
    pub mask: PruneMask,
    pub momentum: Tensor<F>,
}

/// Mutable parameter set of a model.
#[derive(Debug, Clone)]
pub struct ModelState<F: Scalar> {
    pub params: Vec<ParamLayer<F>>,
}

impl<F: Scalar> ModelState<F> {
    /// Zero out masked weight positions. Upheld after every optimizer step.
    pub fn apply_masks(&mut self) {
        for p in &mut self.params {
            p.mask.apply(&mut p.weight);
        }
    }

    pub fn total_weights(&self) -> usize {
        self.params.iter().map(|p| p.weight.numel()).sum()
    }

    pub fn active_weights(&self) -> usize {
        self.params.iter().map(|p| p.mask.nnz()).sum()
    }
}

/// He-normal fan-in initialization; masks all-ones until sparse learning
/// installs a budgeted mask.
pub fn build_model<F: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelState<F>> {
    let wshapes = spec.weight_shapes()?;
    let splitter = SeedSplitter::new(seed);
    let mut params = Vec::with_capacity(wshapes.len());
    let mut conv_i = 0usize;
    let mut fc_i = 0usize;
    for (li, shape) in wshapes.iter().enumerate() {
        let (name, fan_in) = if shape.len() == 4 {
            conv_i += 1;
            (format!("conv{}", conv_i), shape[1] * shape[2] * shape[3])
        } else {
            fc_i += 1;
            (format!("fc{}", fc_i), shape[1])
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        let mut rng = splitter.rng(Purpose::WeightInit, li as u64);
        let data: Vec<F> = (0..shape.iter().product::<usize>())
            .map(|_| F::from_f64(normal.sample(&mut rng)))
            .collect();
        let weight = Tensor::new(shape.clone(), data)?;
        params.push(ParamLayer {
            name,
            mask: PruneMask::all_ones(shape.clone(), MaskMode::Irregular),
            momentum: Tensor::zeros(shape),
            weight,
        });
    }
    Ok(ModelState { params })
}

/// Train/eval switch. The two differ only through dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything the training loop needs back from a taped forward pass.
pub struct ForwardOut {
    pub logits: ValueRef,
    /// Post-ReLU activations of conv stages, with the spec layer index of
    /// the ReLU. These are the attention-pairing candidates.
    pub activations: Vec<(usize, ValueRef)>,
    /// Tape refs of the weights, aligned with `ModelState::params`.
    pub weight_refs: Vec<ValueRef>,
}

/// Taped forward pass. Weights enter the tape as leaves so the caller can
/// pull dense gradients for every parameter after `backward`.
pub fn ann_forward<F: Scalar>(
    tape: &mut OpTape<F>,
    state: &ModelState<F>,
    spec: &ModelSpec,
    batch: &Tensor<F>,
    mode: Mode,
    dropout_rng: &mut impl Rng,
) -> Result<ForwardOut> {
    let (c0, h0, w0) = spec.input;
    if batch.shape().len() != 4 || batch.shape()[1..] != [c0, h0, w0] {
        return Err(Error::shape(
            "ann_forward",
            format!("batch {:?} vs model input [N,{},{},{}]", batch.shape(), c0, h0, w0),
        ));
    }
    let n = batch.shape()[0];
    let weight_refs: Vec<ValueRef> = state.params.iter().map(|p| tape.value(p.weight.clone())).collect();

    let mut cur = tape.value(batch.clone());
    let mut cur_is_map = true;
    let mut pi = 0usize; // parameterized-layer cursor
    let mut acts = Vec::new();
    let mut prev_was_conv = false;

    for (i, layer) in spec.layers.iter().enumerate() {
        let stage = |e: Error| match e {
            Error::NonFinite { op, location } => Error::NonFinite {
                op,
                location: format!("layer {}: {}", i, location),
            },
            other => other,
        };
        match layer {
            Layer::Conv { stride, pad, .. } => {
                cur = tape.conv2d(cur, weight_refs[pi], *stride, *pad).map_err(stage)?;
                pi += 1;
                prev_was_conv = true;
            }
            Layer::Linear { .. } => {
                if cur_is_map {
                    let numel = tape.get(cur).numel() / n;
                    cur = tape.reshape(cur, vec![n, numel])?;
                    cur_is_map = false;
                }
                cur = tape.linear(cur, weight_refs[pi]).map_err(stage)?;
                pi += 1;
                prev_was_conv = false;
            }
            Layer::Relu => {
                cur = tape.relu(cur)?;
                if prev_was_conv && cur_is_map {
                    acts.push((i, cur));
                }
            }
            Layer::AvgPool { kernel, stride } => {
                cur = tape.avgpool2d(cur, *kernel, *stride).map_err(stage)?;
            }
            Layer::Dropout { rate } => {
                if mode == Mode::Train && *rate > 0.0 {
                    let mask = bernoulli_mask(tape.get(cur).shape(), 1.0 - rate, dropout_rng);
                    cur = tape.dropout(cur, &mask, *rate)?;
                }
            }
        }
    }
    tape.get(cur).check_finite("logits").map_err(|e| match e {
        Error::NonFinite { op, location } => Error::NonFinite {
            op,
            location: format!("classifier head: {}", location),
        },
        other => other,
    })?;
    Ok(ForwardOut {
        logits: cur,
        activations: acts,
        weight_refs,
    })
}

/// Binary keep-mask for dropout.
pub fn bernoulli_mask<F: Scalar>(shape: &[usize], keep: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                F::one()
            } else {
                F::zero()
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

/// Tape-free forward for evaluation and for the frozen meta model.
/// Dropout is skipped; returns logits plus post-ReLU conv activations.
pub fn forward_eval<F: Scalar>(
    state: &ModelState<F>,
    spec: &ModelSpec,
    batch: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<(usize, Tensor<F>)>)> {
    let mut tape = OpTape::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let out = ann_forward(&mut tape, state, spec, batch, Mode::Eval, &mut rng)?;
    let logits = tape.get(out.logits).clone();
    let acts = out
        .activations
        .iter()
        .map(|(i, v)| (*i, tape.get(*v).clone()))
        .collect();
    Ok((logits, acts))
}

use rand_chacha::rand_core::SeedableRng;

/// Classification accuracy of logits against labels.
pub fn accuracy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut hit = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            hit += 1;
        }
    }
    hit as f64 / n as f64
}

/// SGD-with-momentum settings for the ANN stage.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, factor)` pairs; the factor applies from that epoch on.
    pub milestones: Vec<(usize, f64)>,
}

impl SgdConfig {
    /// Learning rate at an epoch: base times the product of all passed
    /// milestone factors.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(e, f) in &self.milestones {
            if epoch >= e {
                lr *= f;
            }
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::Config("lr milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One optimizer step: `mu <- m*mu + (g + wd*w)`, `w <- w - lr*mu`, then
/// masks are re-applied. Momentum accumulates at masked positions too;
/// regrowth ranks candidates by it.
pub fn sgd_momentum_step<F: Scalar>(
    state: &mut ModelState<F>,
    grads: &[Tensor<F>],
    cfg: &SgdConfig,
    lr_now: f64,
) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::Invariant(format!(
            "{} gradients for {} parameter layers",
            grads.len(),
            state.params.len()
        )));
    }
    let m = F::from_f64(cfg.momentum);
    let wd = F::from_f64(cfg.weight_decay);
    let lr = F::from_f64(lr_now);
    for (p, g) in state.params.iter_mut().zip(grads) {
        g.check_finite("sgd_momentum_step")?;
        for ((mu, &gv), w) in p
            .momentum
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(p.weight.data_mut().iter_mut())
        {
            *mu = m * *mu + (gv + wd * *w);
            *w = *w - lr * *mu;
        }
        p.mask.apply(&mut p.weight);
    }
    Ok(())
}

/// Model presets. Dropout rates are per-call so compressed runs can lower
/// the conv rate.
pub fn preset(name: &str, input: (usize, usize, usize), classes: usize, conv_dropout: f64, linear_dropout: f64) -> Result<ModelSpec> {
    let spec = match name {
        "vgg-mini" => vgg_from_plan(
            input,
            classes,
            &[Plan::C(8), Plan::C(16), Plan::P, Plan::D, Plan::C(32), Plan::C(32), Plan::P, Plan::D],
            &[64],
            conv_dropout,
            linear_dropout,
        ),
        "vgg9-meta" | "vgg9" => vgg_from_plan(
            input,
            classes,
            &[
                Plan::C(64), Plan::C(64), Plan::P, Plan::D,
                Plan::C(128), Plan::C(128), Plan::P, Plan::D,
                Plan::C(256), Plan::C(256), Plan::C(256), Plan::P, Plan::D,
            ],
            &[1024],
            conv_dropout,
            linear_dropout,
        ),
        "vgg16" => vgg_from_plan(
            input,
            classes,
            &[
                Plan::C(64), Plan::C(64), Plan::P, Plan::D,
                Plan::C(128), Plan::C(128), Plan::P, Plan::D,
                Plan::C(256), Plan::C(256), Plan::C(256), Plan::P, Plan::D,
                Plan::C(512), Plan::C(512), Plan::C(512), Plan::P, Plan::D,
                Plan::C(512), Plan::C(512), Plan::C(512), Plan::P, Plan::D,
            ],
            &[4096, 4096],
            conv_dropout,
            linear_dropout,
        ),
        other => return Err(Error::Config(format!("unknown model preset {:?}", other))),
    };
    spec.validate()?;
    Ok(spec)
}

enum Plan {
    C(usize),
    P,
    D,
}

fn vgg_from_plan(
    input: (usize, usize, usize),
    classes: usize,
    features: &[Plan],
    hidden: &[usize],
    conv_dropout: f64,
    linear_dropout: f64,
) -> ModelSpec {
    let mut layers = Vec::new();
    for p in features {
        match p {
            Plan::C(ch) => {
                layers.push(Layer::Conv {
                    out_channels: *ch,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                });
                layers.push(Layer::Relu);
            }
            Plan::P => layers.push(Layer::AvgPool { kernel: 2, stride: 2 }),
            Plan::D => {
                if conv_dropout > 0.0 {
                    layers.push(Layer::Dropout { rate: conv_dropout });
                }
            }
        }
    }
    for h in hidden {
        layers.push(Layer::Linear { out_features: *h });
        layers.push(Layer::Relu);
        if linear_dropout > 0.0 {
            layers.push(Layer::Dropout { rate: linear_dropout });
        }
    }
    layers.push(Layer::Linear { out_features: classes });
    ModelSpec {
        input,
        classes,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, SeedSplitter};

    fn mini() -> ModelSpec {
        preset("vgg-mini", (1, 8, 8), 10, 0.0, 0.0).unwrap()
    }

    #[test]
    fn preset_geometry_validates() {
        let spec = mini();
        let shapes = spec.validate().unwrap();
        // two 2x2 pools on 8x8 -> 2x2 maps of 32 channels
        assert!(shapes.iter().any(|s| *s == FlowShape::Map { c: 32, h: 2, w: 2 }));
        let w = spec.weight_shapes().unwrap();
        assert_eq!(w[0], vec![8, 1, 3, 3]);
        assert_eq!(w.last().unwrap(), &vec![10, 64]);
    }

    #[test]
    fn single_conv_spec_builds_expected_shapes() {
        let spec = ModelSpec {
            input: (3, 4, 4),
            classes: 10,
            layers: vec![
                Layer::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::Linear { out_features: 10 },
            ],
        };
        let state = build_model::<f32>(&spec, 1).unwrap();
        assert_eq!(state.params[0].weight.shape(), &[8, 3, 3, 3]);
        assert!(state.params[0].mask.is_all_ones());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let spec = mini();
        let a = build_model::<f32>(&spec, 7).unwrap();
        let b = build_model::<f32>(&spec, 7).unwrap();
        let c = build_model::<f32>(&spec, 8).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.weight.data(), pb.weight.data());
        }
        assert_ne!(a.params[0].weight.data(), c.params[0].weight.data());
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        // conv2 of vgg-mini: fan_in = 8*3*3 = 72
        let spec = mini();
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for seed in 0..10 {
            let st = build_model::<f64>(&spec, seed).unwrap();
            let w = &st.params[1].weight;
            let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
            let var = w.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / w.numel() as f64;
            acc += var.sqrt();
            count += 1;
        }
        let std = acc / count as f64;
        let expect = (2.0 / 72.0f64).sqrt();
        assert!((std - expect).abs() / expect < 0.05, "std {} vs {}", std, expect);
    }

    #[test]
    fn zero_input_zero_weights_gives_uniform_ce() {
        let spec = mini();
        let mut state = build_model::<f64>(&spec, 3).unwrap();
        for p in &mut state.params {
            p.weight = Tensor::zeros(p.weight.shape());
        }
        let batch = Tensor::zeros(&[2, 1, 8, 8]);
        let mut tape = OpTape::new();
        let mut rng = SeedSplitter::new(0).rng(Purpose::Dropout, 0);
        let out = ann_forward(&mut tape, &state, &spec, &batch, Mode::Train, &mut rng).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &[0, 1]).unwrap();
        assert!((tape.get(loss).item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_zero_final_mask_zeroes_logits() {
        let spec = mini();
        let mut state = build_model::<f64>(&spec, 3).unwrap();
        let last = state.params.len() - 1;
        let shape = state.params[last].weight.shape().to_vec();
        state.params[last].mask = PruneMask::new_off(shape, MaskMode::Irregular);
        state.apply_masks();
        let batch = Tensor::full(&[1, 1, 8, 8], 0.5);
        let (logits, _) = forward_eval(&state, &spec, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_step_arithmetic() {
        // one step, m=0.9, lr=0.1, w=1, grad=1, mu=0 -> mu=1, w=0.9
        let spec = ModelSpec {
            input: (1, 1, 1),
            classes: 2,
            layers: vec![Layer::Linear { out_features: 2 }],
        };
        let mut state = build_model::<f64>(&spec, 0).unwrap();
        state.params[0].weight = Tensor::full(&[2, 1], 1.0);
        let grads = vec![Tensor::full(&[2, 1], 1.0)];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![],
        };
        sgd_momentum_step(&mut state, &grads, &cfg, 0.1).unwrap();
        assert_eq!(state.params[0].momentum.data(), &[1.0, 1.0]);
        assert_eq!(state.params[0].weight.data(), &[0.9, 0.9]);

        // grad 0, mu 0 -> unchanged
        let mut state2 = build_model::<f64>(&spec, 0).unwrap();
        let before = state2.params[0].weight.clone();
        let zgrads = vec![Tensor::zeros(&[2, 1])];
        sgd_momentum_step(&mut state2, &zgrads, &cfg, 0.1).unwrap();
        assert_eq!(state2.params[0].weight.data(), before.data());
    }

    #[test]
    fn masked_position_stays_zero_after_step() {
        let spec = ModelSpec {
            input: (1, 1, 1),
            classes: 2,
            layers: vec![Layer::Linear { out_features: 2 }],
        };
        let mut state = build_model::<f64>(&spec, 0).unwrap();
        let mut mask = PruneMask::all_ones(vec![2, 1], MaskMode::Irregular);
        mask.set_index(0, false);
        state.params[0].mask = mask;
        state.apply_masks();
        let grads = vec![Tensor::full(&[2, 1], 2.5)];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![],
        };
        sgd_momentum_step(&mut state, &grads, &cfg, 0.1).unwrap();
        assert_eq!(state.params[0].weight.data()[0], 0.0);
        // momentum still accumulates at the masked position
        assert!(state.params[0].momentum.data()[0] != 0.0);
    }

    #[test]
    fn lr_schedule_is_exact_product() {
        let cfg = SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![(150, 0.1), (180, 0.1), (210, 0.1)],
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(149), 0.01);
        assert!((cfg.lr_at(150) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(239) - 0.00001).abs() < 1e-15);
    }

    #[test]
    fn train_eval_differ_only_by_dropout() {
        let spec = preset("vgg-mini", (1, 8, 8), 10, 0.0, 0.0).unwrap();
        let state = build_model::<f64>(&spec, 5).unwrap();
        let splitter = SeedSplitter::new(1);
        let batch = bernoulli_mask::<f64>(&[2, 1, 8, 8], 0.5, &mut splitter.rng(Purpose::Data, 0));
        let mut t1 = OpTape::new();
        let mut t2 = OpTape::new();
        let o1 = ann_forward(&mut t1, &state, &spec, &batch, Mode::Train, &mut splitter.rng(Purpose::Dropout, 0)).unwrap();
        let o2 = ann_forward(&mut t2, &state, &spec, &batch, Mode::Eval, &mut splitter.rng(Purpose::Dropout, 1)).unwrap();
        assert_eq!(t1.get(o1.logits).data(), t2.get(o2.logits).data());
    }
}

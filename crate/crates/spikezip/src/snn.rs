//! Discrete LIF/IF dynamics, ANN-to-SNN threshold calibration, and masked
//! surrogate-gradient training with jointly trainable weights, per-layer
//! threshold and leak.
//!
//! Membrane update per step, with soft reset applied in the same step:
//! `u_acc = leak*u + I`, spike where `u_acc > v_th` (strict), then
//! `u <- u_acc - v_th*spike`. Backward uses the per-step chain only:
//! the surrogate `gamma*max(0, 1-|z|)` stands in for the spike derivative at
//! `z = u_acc/v_th - 1`; gradients do not flow through the reset into past
//! steps, the threshold path is `dz/dv_th = -u_acc/v_th^2`, and the leak path
//! is `du/dleak = u_prev`.

use crate::encoding::{poisson_encode, Encoding, InputWindow};
use crate::error::{Error, Result};
use crate::metrics::{ConvGeom, LayerActivity, SpikeRecord};
use crate::model::{bernoulli_mask, ModelSpec, ModelState};
use crate::rng::{Purpose, SeedSplitter};
use crate::sparse::Diagnostics;
use crate::tape::{
    avgpool2d_backward, avgpool2d_forward, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, OpTape,
};
use crate::tensor::{Scalar, Tensor};

/// Neuron family. IF is LIF with the leak pinned to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronKind {
    If,
    Lif,
}

impl NeuronKind {
    pub fn check_leak(self, leak: f64) -> Result<()> {
        if !(leak > 0.0 && leak <= 1.0) {
            return Err(Error::Config(format!("leak {} outside (0,1]", leak)));
        }
        if self == NeuronKind::If && leak != 1.0 {
            return Err(Error::Config("IF neurons require leak = 1".into()));
        }
        Ok(())
    }
}

/// Linear surrogate for the spike derivative: `gamma * max(0, 1 - |z|)`.
pub fn surrogate_grad<F: Scalar>(z: F, gamma: F) -> F {
    let one = F::one();
    gamma * (one - z.abs()).max(F::zero())
}

/// One membrane update. Returns `(u_next, spikes)`; spikes are exactly 0/1.
pub fn lif_step<F: Scalar>(
    u: &Tensor<F>,
    weighted_input: &Tensor<F>,
    leak: F,
    v_th: F,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if v_th <= F::zero() {
        return Err(Error::Config(format!("threshold {} must be positive", v_th)));
    }
    let u_acc = u.zip_map(weighted_input, "lif_step", |uu, ii| leak * uu + ii)?;
    let spikes = u_acc.map(|v| if v > v_th { F::one() } else { F::zero() });
    let u_next = u_acc.zip_map(&spikes, "lif_step", |v, s| v - v_th * s)?;
    Ok((u_next, spikes))
}

/// Compiled step sequence for running a sequential spec as an SNN. Every
/// conv/linear layer except the classifier head is followed by exactly one
/// spiking stage (the ANN's ReLU slot); the head accumulates raw inputs.
#[derive(Debug, Clone)]
pub struct SnnProgram {
    steps: Vec<PStep>,
    pub n_weighted: usize,
    pub n_spiking: usize,
    pub drop_count: usize,
    geoms: Vec<ConvGeom>,
}

#[derive(Debug, Clone)]
enum PStep {
    Conv { pi: usize, stride: usize, pad: usize },
    Linear { pi: usize },
    Flatten { from: Vec<usize> },
    Spike { si: usize },
    Pool { k: usize, stride: usize, in_shape: Vec<usize> },
    Drop { di: usize, rate: f64, shape: Vec<usize> },
}

impl SnnProgram {
    pub fn compile(spec: &ModelSpec) -> Result<Self> {
        use crate::model::{FlowShape, Layer};
        let shapes = spec.validate()?;
        let n_weighted = spec.param_layers().len();
        let mut steps = Vec::new();
        let mut geoms = Vec::new();
        let (c0, h0, w0) = spec.input;
        let mut prev = FlowShape::Map { c: c0, h: h0, w: w0 };
        let mut flat = false;
        let mut pi = 0usize;
        let mut si = 0usize;
        let mut di = 0usize;
        let mut awaiting_spike = false;
        for (i, l) in spec.layers.iter().enumerate() {
            match l {
                Layer::Conv { out_channels, kernel, stride, pad } => {
                    if awaiting_spike {
                        return Err(Error::Config(format!(
                            "layer {}: two weighted layers without a ReLU between them; not convertible",
                            i
                        )));
                    }
                    let (ci, hi, wi) = match prev {
                        FlowShape::Map { c, h, w } => (c, h, w),
                        _ => return Err(Error::Config("conv after flatten".into())),
                    };
                    if let FlowShape::Map { h, w, .. } = shapes[i] {
                        geoms.push(ConvGeom {
                            k: *kernel,
                            h_o: h,
                            w_o: w,
                            c_o: *out_channels,
                            c_i: ci,
                            h_i: hi,
                            w_i: wi,
                            stride: *stride,
                            pad: *pad,
                        });
                    }
                    steps.push(PStep::Conv { pi, stride: *stride, pad: *pad });
                    pi += 1;
                    awaiting_spike = pi < n_weighted;
                }
                Layer::Linear { out_features } => {
                    if awaiting_spike {
                        return Err(Error::Config(format!(
                            "layer {}: two weighted layers without a ReLU between them; not convertible",
                            i
                        )));
                    }
                    if !flat {
                        let from = match prev {
                            FlowShape::Map { c, h, w } => vec![c, h, w],
                            FlowShape::Flat { n } => vec![n],
                        };
                        steps.push(PStep::Flatten { from });
                        flat = true;
                    }
                    geoms.push(ConvGeom::for_linear(prev.numel(), *out_features));
                    steps.push(PStep::Linear { pi });
                    pi += 1;
                    awaiting_spike = pi < n_weighted;
                }
                Layer::Relu => {
                    if !awaiting_spike {
                        return Err(Error::Config(format!(
                            "layer {}: ReLU without a preceding weighted layer; not convertible",
                            i
                        )));
                    }
                    steps.push(PStep::Spike { si });
                    si += 1;
                    awaiting_spike = false;
                }
                Layer::AvgPool { kernel, stride } => {
                    let in_shape = match prev {
                        FlowShape::Map { c, h, w } => vec![c, h, w],
                        _ => return Err(Error::Config("pool after flatten".into())),
                    };
                    steps.push(PStep::Pool { k: *kernel, stride: *stride, in_shape });
                }
                Layer::Dropout { rate } => {
                    let shape = match &prev {
                        FlowShape::Map { c, h, w } => vec![*c, *h, *w],
                        FlowShape::Flat { n } => vec![*n],
                    };
                    steps.push(PStep::Drop { di, rate: *rate, shape });
                    di += 1;
                }
            }
            prev = shapes[i].clone();
        }
        if awaiting_spike {
            // the classifier head must not spike; reaching here with a
            // pending spike means a non-final weighted layer lacked a ReLU
            return Err(Error::Config("weighted layer without ReLU; not convertible".into()));
        }
        if si != n_weighted - 1 {
            return Err(Error::Config(format!(
                "{} spiking stages for {} weighted layers; every non-head layer needs exactly one ReLU",
                si, n_weighted
            )));
        }
        Ok(SnnProgram {
            steps,
            n_weighted,
            n_spiking: si,
            drop_count: di,
            geoms,
        })
    }

    /// Conv-style geometry of every weighted layer (linear layers as 1x1).
    pub fn weighted_geoms(&self) -> &[ConvGeom] {
        &self.geoms
    }

    /// Per-sample shapes the dropout masks must have, in step order.
    pub fn dropout_shapes(&self) -> Vec<(f64, Vec<usize>)> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                PStep::Drop { rate, shape, .. } => Some((*rate, shape.clone())),
                _ => None,
            })
            .collect()
    }
}

/// SNN parameters: the ANN weights/masks plus per-layer threshold and leak
/// for every spiking stage.
#[derive(Debug, Clone)]
pub struct SnnModel<F: Scalar> {
    pub spec: ModelSpec,
    pub state: ModelState<F>,
    pub v_th: Vec<F>,
    pub leak: Vec<F>,
    pub program: SnnProgram,
}

impl<F: Scalar> SnnModel<F> {
    /// Wrap trained ANN parameters; thresholds start at 1 (calibration
    /// overwrites them) and leaks at 1.
    pub fn from_ann(state: ModelState<F>, spec: ModelSpec) -> Result<Self> {
        let program = SnnProgram::compile(&spec)?;
        let n = program.n_spiking;
        Ok(SnnModel {
            spec,
            state,
            v_th: vec![F::one(); n],
            leak: vec![F::one(); n],
            program,
        })
    }
}

/// A batch of input windows sharing T.
pub enum BatchWindow<F> {
    Direct { frames: Tensor<F>, steps: usize },
    Poisson { frames: Vec<Tensor<F>> },
}

impl<F: Scalar> BatchWindow<F> {
    pub fn steps(&self) -> usize {
        match self {
            BatchWindow::Direct { steps, .. } => *steps,
            BatchWindow::Poisson { frames } => frames.len(),
        }
    }

    pub fn frame(&self, t: usize) -> &Tensor<F> {
        match self {
            BatchWindow::Direct { frames, .. } => frames,
            BatchWindow::Poisson { frames } => &frames[t],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.frame(0).shape()[0]
    }

    pub fn encoding(&self) -> Encoding {
        match self {
            BatchWindow::Direct { .. } => Encoding::Direct,
            BatchWindow::Poisson { .. } => Encoding::Poisson,
        }
    }
}

/// Encode one image batch `[N,C,H,W]`. Poisson seeds derive from
/// `(seed_base, sample index)` so batch composition never shifts a sample's
/// spike train.
pub fn encode_batch<F: Scalar>(
    images: &Tensor<F>,
    encoding: Encoding,
    steps: usize,
    seed_base: u64,
) -> Result<BatchWindow<F>> {
    match encoding {
        Encoding::Direct => Ok(BatchWindow::Direct { frames: images.clone(), steps }),
        Encoding::Poisson => {
            let n = images.shape()[0];
            let per = images.numel() / n;
            let shape = images.shape()[1..].to_vec();
            let splitter = SeedSplitter::new(seed_base);
            let mut windows = Vec::with_capacity(n);
            for s in 0..n {
                let img = Tensor::new(shape.clone(), images.data()[s * per..(s + 1) * per].to_vec())?;
                windows.push(poisson_encode(&img, steps, splitter.seed(Purpose::Poisson, s as u64))?);
            }
            let mut frames = Vec::with_capacity(steps);
            let mut bshape = vec![n];
            bshape.extend_from_slice(&shape);
            for t in 0..steps {
                let mut data = Vec::with_capacity(n * per);
                for w in &windows {
                    data.extend_from_slice(w.frame(t).data());
                }
                frames.push(Tensor::new(bshape.clone(), data)?);
            }
            Ok(BatchWindow::Poisson { frames })
        }
    }
}

/// Turn a single-sample [`InputWindow`] into a batch of one.
pub fn window_to_batch<F: Scalar>(win: &InputWindow<F>) -> Result<BatchWindow<F>> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(win.frame(0).shape());
    match win {
        InputWindow::Direct { frame, steps } => Ok(BatchWindow::Direct {
            frames: frame.reshape(shape)?,
            steps: *steps,
        }),
        InputWindow::Poisson { frames } => Ok(BatchWindow::Poisson {
            frames: frames
                .iter()
                .map(|f| f.reshape(shape.clone()))
                .collect::<Result<Vec<_>>>()?,
        }),
    }
}

/// Saved forward state for one batch, enough for the per-step backward.
pub struct SnnTrace<F> {
    pub steps: usize,
    /// `[t][weighted]` input tensor of each weighted layer.
    pub inputs: Vec<Vec<Tensor<F>>>,
    /// `[t][spiking]` accumulated membrane before reset.
    pub u_acc: Vec<Vec<Tensor<F>>>,
    /// `[t][spiking]` membrane entering the leak multiply.
    pub u_prev: Vec<Vec<Tensor<F>>>,
}

/// Forward results for one batch.
pub struct SnnOutput<F> {
    /// Accumulated head inputs over all T steps, `[N, classes]`.
    pub scores: Tensor<F>,
    pub record: SpikeRecord,
    pub trace: Option<SnnTrace<F>>,
}

/// Options for [`snn_forward`].
pub struct ForwardOptions<'a, F> {
    pub record_trace: bool,
    /// One mask per dropout step (batch-shaped); `None` runs inference mode.
    pub dropout_masks: Option<&'a [Tensor<F>]>,
}

impl<F> Default for ForwardOptions<'_, F> {
    fn default() -> Self {
        ForwardOptions {
            record_trace: false,
            dropout_masks: None,
        }
    }
}

fn batch_shape(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(per_sample);
    s
}

/// Sum of magnitudes over the batch axis, producing a per-sample-shaped f64
/// map. Binary spikes sum to exact counts; analog direct frames contribute
/// their magnitude so the map stays a nonnegative event measure.
fn fold_batch<F: Scalar>(t: &Tensor<F>) -> Tensor<f64> {
    let n = t.shape()[0];
    let per = t.numel() / n;
    let mut out = Tensor::<f64>::zeros(&t.shape()[1..]);
    for s in 0..n {
        for i in 0..per {
            out.data_mut()[i] += t.data()[s * per + i].as_f64().abs();
        }
    }
    out
}

/// Run the spiking network over all T steps of a batch window.
///
/// Layer 1 consumes the frames as-is (analog under direct coding, so it is
/// the one multiply-accumulate layer); deeper layers see binary spikes,
/// possibly average-pooled. The classifier head accumulates its raw weighted
/// input over all steps; no threshold, leak, or spikes apply to it.
pub fn snn_forward<F: Scalar>(
    model: &SnnModel<F>,
    window: &BatchWindow<F>,
    opts: &ForwardOptions<'_, F>,
) -> Result<SnnOutput<F>> {
    let program = &model.program;
    let steps = window.steps();
    let n = window.batch_size();
    let classes = model.spec.classes;

    if let Some(masks) = opts.dropout_masks {
        if masks.len() != program.drop_count {
            return Err(Error::Invariant(format!(
                "{} dropout masks for {} dropout steps",
                masks.len(),
                program.drop_count
            )));
        }
    }

    // membrane per spiking stage, lazily shaped on the first step
    let mut membranes: Vec<Option<Tensor<F>>> = vec![None; program.n_spiking];
    let mut scores = Tensor::<F>::zeros(&[n, classes]);

    let mut record = SpikeRecord::new(steps);
    record.samples = n;
    record.outputs = (0..program.n_spiking)
        .map(|si| LayerActivity {
            name: model.state.params[si].name.clone(),
            spikes: 0.0,
            neurons: 0,
        })
        .collect();
    let mut input_maps: Vec<Option<Tensor<f64>>> = vec![None; program.n_weighted];

    let mut trace = if opts.record_trace {
        Some(SnnTrace {
            steps,
            inputs: Vec::with_capacity(steps),
            u_acc: Vec::with_capacity(steps),
            u_prev: Vec::with_capacity(steps),
        })
    } else {
        None
    };

    for t in 0..steps {
        let mut cur = window.frame(t).clone();
        if let Some(tr) = trace.as_mut() {
            tr.inputs.push(Vec::with_capacity(program.n_weighted));
            tr.u_acc.push(Vec::with_capacity(program.n_spiking));
            tr.u_prev.push(Vec::with_capacity(program.n_spiking));
        }
        for step in &program.steps {
            match step {
                PStep::Conv { pi, stride, pad } => {
                    note_input(&mut input_maps, *pi, &cur);
                    if let Some(tr) = trace.as_mut() {
                        tr.inputs[t].push(cur.clone());
                    }
                    cur = conv2d_forward(&cur, &model.state.params[*pi].weight, *stride, *pad)?;
                }
                PStep::Linear { pi } => {
                    note_input(&mut input_maps, *pi, &cur);
                    if let Some(tr) = trace.as_mut() {
                        tr.inputs[t].push(cur.clone());
                    }
                    cur = linear_forward(&cur, &model.state.params[*pi].weight)?;
                }
                PStep::Flatten { .. } => {
                    let per = cur.numel() / n;
                    cur = cur.reshape(vec![n, per])?;
                }
                PStep::Spike { si } => {
                    let u = membranes[*si]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(cur.shape()));
                    if let Some(tr) = trace.as_mut() {
                        tr.u_prev[t].push(u.clone());
                    }
                    let leak = model.leak[*si];
                    let v_th = model.v_th[*si];
                    let u_acc = u.zip_map(&cur, "lif", |uu, ii| leak * uu + ii)?;
                    u_acc.check_finite("lif").map_err(|e| located(e, *si, t))?;
                    let spikes = u_acc.map(|v| if v > v_th { F::one() } else { F::zero() });
                    let u_next = u_acc.zip_map(&spikes, "lif", |v, s| v - v_th * s)?;
                    if let Some(tr) = trace.as_mut() {
                        tr.u_acc[t].push(u_acc);
                    }
                    membranes[*si] = Some(u_next);
                    let la = &mut record.outputs[*si];
                    la.neurons = spikes.numel() / n;
                    la.spikes += spikes.sum().as_f64();
                    cur = spikes;
                }
                PStep::Pool { k, stride, .. } => {
                    cur = avgpool2d_forward(&cur, *k, *stride)?;
                }
                PStep::Drop { di, rate, .. } => {
                    if let Some(masks) = opts.dropout_masks {
                        let keep = F::from_f64(1.0 - rate);
                        cur = cur.zip_map(&masks[*di], "snn_dropout", |v, m| v * m / keep)?;
                    }
                }
            }
        }
        // after the program, `cur` is the head's weighted input at step t
        scores.add_assign(&cur)?;
    }
    scores.check_finite("snn_scores")?;
    record.input_maps = input_maps.into_iter().map(|m| m.expect("input map")).collect();

    Ok(SnnOutput {
        scores,
        record,
        trace,
    })
}

fn note_input<F: Scalar>(maps: &mut [Option<Tensor<f64>>], pi: usize, cur: &Tensor<F>) {
    let folded = fold_batch(cur);
    match &mut maps[pi] {
        Some(m) => m.add_assign(&folded).expect("congruent input map"),
        slot @ None => *slot = Some(folded),
    }
}

fn located(e: Error, layer: usize, t: usize) -> Error {
    match e {
        Error::NonFinite { op, location } => Error::NonFinite {
            op,
            location: format!("spiking layer {}, step {}: {}", layer, t, location),
        },
        other => other,
    }
}

/// Gradients of the SNN parameters.
pub struct SnnGrads<F: Scalar> {
    pub weights: Vec<Tensor<F>>,
    pub v_th: Vec<F>,
    pub leak: Vec<F>,
}

/// Backward pass from per-step gradients of the accumulated head input.
///
/// `d_scores` holds dL/d(head input at step t): either one tensor applied at
/// every step (the accumulated-score case) or one per step. Weight gradients
/// come back already masked.
pub fn snn_backward<F: Scalar>(
    model: &SnnModel<F>,
    trace: &SnnTrace<F>,
    d_scores: &[Tensor<F>],
    gamma: f64,
    dropout_masks: Option<&[Tensor<F>]>,
) -> Result<SnnGrads<F>> {
    let program = &model.program;
    if d_scores.len() != 1 && d_scores.len() != trace.steps {
        return Err(Error::Invariant(format!(
            "{} per-step gradients for {} steps",
            d_scores.len(),
            trace.steps
        )));
    }
    if trace.inputs.len() != trace.steps {
        return Err(Error::Invariant("trace/T mismatch".into()));
    }
    let g = F::from_f64(gamma);
    let mut dw: Vec<Tensor<F>> = model
        .state
        .params
        .iter()
        .map(|p| Tensor::zeros(p.weight.shape()))
        .collect();
    let mut dvth = vec![F::zero(); program.n_spiking];
    let mut dleak = vec![F::zero(); program.n_spiking];

    let n = trace.inputs[0][0].shape()[0];

    for t in 0..trace.steps {
        let mut cur = d_scores[if d_scores.len() == 1 { 0 } else { t }].clone();
        for step in program.steps.iter().rev() {
            match step {
                PStep::Linear { pi } => {
                    let x = &trace.inputs[t][*pi];
                    let (dx, dwi) = linear_backward(x, &model.state.params[*pi].weight, &cur)?;
                    dw[*pi].add_assign(&dwi)?;
                    cur = dx;
                }
                PStep::Conv { pi, stride, pad } => {
                    let x = &trace.inputs[t][*pi];
                    let (dx, dwi) =
                        conv2d_backward(x, &model.state.params[*pi].weight, &cur, *stride, *pad)?;
                    dw[*pi].add_assign(&dwi)?;
                    if *pi == 0 {
                        break; // nothing upstream of the input layer
                    }
                    cur = dx;
                }
                PStep::Flatten { from } => {
                    cur = cur.reshape(batch_shape(n, from))?;
                }
                PStep::Spike { si } => {
                    let u_acc = &trace.u_acc[t][*si];
                    let u_prev = &trace.u_prev[t][*si];
                    let v_th = model.v_th[*si];
                    let inv_vth = F::one() / v_th;
                    let neg_inv_vth2 = -inv_vth * inv_vth;
                    // gz = dL/dO * surrogate(z), z = u_acc/v_th - 1
                    let gz = cur.zip_map(u_acc, "snn_bwd", |go, ua| {
                        let z = ua * inv_vth - F::one();
                        go * surrogate_grad(z, g)
                    })?;
                    // threshold path: dz/dv_th = -u_acc / v_th^2
                    let mut acc_vth = F::zero();
                    for (&gzi, &ua) in gz.data().iter().zip(u_acc.data()) {
                        acc_vth += gzi * ua * neg_inv_vth2;
                    }
                    dvth[*si] += acc_vth;
                    // membrane path: du/dI = 1, dz/du = 1/v_th
                    let gu = gz.scale(inv_vth);
                    // leak path: du_acc/dleak = u_prev
                    let mut acc_leak = F::zero();
                    for (&gui, &up) in gu.data().iter().zip(u_prev.data()) {
                        acc_leak += gui * up;
                    }
                    dleak[*si] += acc_leak;
                    cur = gu;
                }
                PStep::Pool { k, stride, in_shape } => {
                    cur = avgpool2d_backward(&batch_shape(n, in_shape), &cur, *k, *stride);
                }
                PStep::Drop { di, rate, .. } => {
                    if let Some(masks) = dropout_masks {
                        let keep = F::from_f64(1.0 - rate);
                        cur = cur.zip_map(&masks[*di], "snn_dropout_bwd", |v, m| v * m / keep)?;
                    }
                }
            }
        }
    }
    // the fixed prune mask gates every weight gradient
    for (dwi, p) in dw.iter_mut().zip(&model.state.params) {
        for (gv, i) in dwi.data_mut().iter_mut().zip(0..) {
            if !p.mask.get(i) {
                *gv = F::zero();
            }
        }
    }
    Ok(SnnGrads {
        weights: dw,
        v_th: dvth,
        leak: dleak,
    })
}

/// Linear-interpolation percentile of unsorted values; `q` in `[0,100]`.
/// `q = 100` reduces to the maximum.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (q / 100.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        let frac = rank - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    }
}

/// Sequential threshold calibration.
///
/// Layer by layer: run the partially calibrated network over all T steps of
/// the calibration window, collect every weighted-input value entering the
/// layer, and set `v_th = scale * percentile(distribution)`. Leak is pinned
/// to one while calibrating; callers re-initialize it to one for training.
/// An all-zero distribution falls back to `v_th = 1` and is counted.
pub fn calibrate_thresholds<F: Scalar>(
    model: &mut SnnModel<F>,
    window: &BatchWindow<F>,
    pct: f64,
    scale: f64,
    diag: &mut Diagnostics,
) -> Result<Vec<f64>> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Config(format!("percentile {} outside [0,100]", pct)));
    }
    if scale <= 0.0 {
        return Err(Error::Config(format!("threshold scale {} must be positive", scale)));
    }
    let steps = window.steps();
    let n_spiking = model.program.n_spiking;
    let unit_leak = vec![F::one(); n_spiking];
    let saved_leak = std::mem::replace(&mut model.leak, unit_leak);

    for k in 0..n_spiking {
        let mut collected: Vec<f64> = Vec::new();
        // prefix run: spiking layers < k use their calibrated thresholds
        let mut membranes: Vec<Option<Tensor<F>>> = vec![None; n_spiking];
        for t in 0..steps {
            let mut cur = window.frame(t).clone();
            'prog: for step in &model.program.steps {
                match step {
                    PStep::Conv { pi, stride, pad } => {
                        cur = conv2d_forward(&cur, &model.state.params[*pi].weight, *stride, *pad)?;
                        if *pi == k {
                            collected.extend(cur.data().iter().map(|v| v.as_f64()));
                            break 'prog;
                        }
                    }
                    PStep::Linear { pi } => {
                        cur = linear_forward(&cur, &model.state.params[*pi].weight)?;
                        if *pi == k {
                            collected.extend(cur.data().iter().map(|v| v.as_f64()));
                            break 'prog;
                        }
                    }
                    PStep::Flatten { .. } => {
                        let n = cur.shape()[0];
                        let per = cur.numel() / n;
                        cur = cur.reshape(vec![n, per])?;
                    }
                    PStep::Spike { si } => {
                        let u = membranes[*si]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(cur.shape()));
                        let (u_next, spikes) = lif_step(&u, &cur, F::one(), model.v_th[*si])?;
                        membranes[*si] = Some(u_next);
                        cur = spikes;
                    }
                    PStep::Pool { k: pk, stride, .. } => {
                        cur = avgpool2d_forward(&cur, *pk, *stride)?;
                    }
                    PStep::Drop { .. } => {} // calibration runs inference mode
                }
            }
        }
        let vth = if collected.iter().all(|&v| v == 0.0) {
            diag.calib_zero_layers += 1;
            1.0
        } else {
            scale * percentile(&mut collected, pct)
        };
        if vth <= 0.0 {
            // a negative percentile would make the threshold unusable
            diag.calib_zero_layers += 1;
            model.v_th[k] = F::one();
        } else {
            model.v_th[k] = F::from_f64(vth);
        }
    }
    model.leak = saved_leak;
    Ok(model.v_th.iter().map(|v| v.as_f64()).collect())
}

/// Hyperparameters of the SNN fine-tuning stage.
#[derive(Debug, Clone)]
pub struct SnnTrainConfig {
    pub steps: usize,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub milestones: Vec<(usize, f64)>,
    pub batch: usize,
    pub train_weights: bool,
    pub train_vth: bool,
    pub train_leak: bool,
    pub encoding: Encoding,
}

impl Default for SnnTrainConfig {
    fn default() -> Self {
        SnnTrainConfig {
            steps: 10,
            gamma: 0.3,
            lr: 1e-4,
            epochs: 20,
            milestones: vec![(12, 0.5), (16, 0.5), (18, 0.5)],
            batch: 32,
            train_weights: true,
            train_vth: true,
            train_leak: true,
            encoding: Encoding::Direct,
        }
    }
}

impl SnnTrainConfig {
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
        if self.steps < 1 {
            return Err(Error::Config("need at least one time step".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("surrogate damping gamma must be positive".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("snn learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const V_TH_FLOOR: f64 = 1e-3;
const LEAK_FLOOR: f64 = 1e-4;

/// ADAM moments for weights, thresholds and leaks.
pub struct AdamState<F: Scalar> {
    pub step: u64,
    m_w: Vec<Tensor<F>>,
    v_w: Vec<Tensor<F>>,
    m_vth: Vec<f64>,
    v_vth: Vec<f64>,
    m_leak: Vec<f64>,
    v_leak: Vec<f64>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(model: &SnnModel<F>) -> Self {
        AdamState {
            step: 0,
            m_w: model.state.params.iter().map(|p| Tensor::zeros(p.weight.shape())).collect(),
            v_w: model.state.params.iter().map(|p| Tensor::zeros(p.weight.shape())).collect(),
            m_vth: vec![0.0; model.v_th.len()],
            v_vth: vec![0.0; model.v_th.len()],
            m_leak: vec![0.0; model.leak.len()],
            v_leak: vec![0.0; model.leak.len()],
        }
    }
}

/// One ADAM update over the trainable parameter groups. Leak is clamped back
/// into `(0,1]` and thresholds kept positive; masks are re-applied.
pub fn adam_step<F: Scalar>(
    model: &mut SnnModel<F>,
    adam: &mut AdamState<F>,
    grads: &SnnGrads<F>,
    lr: f64,
    cfg: &SnnTrainConfig,
) -> Result<()> {
    adam.step += 1;
    let t = adam.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);

    if cfg.train_weights {
        for ((p, g), (m, v)) in model
            .state
            .params
            .iter_mut()
            .zip(&grads.weights)
            .zip(adam.m_w.iter_mut().zip(adam.v_w.iter_mut()))
        {
            g.check_finite("adam_step")?;
            for (((wv, &gv), mv), vv) in p
                .weight
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let mhat = mv.as_f64() / bc1;
                let vhat = vv.as_f64() / bc2;
                *wv = F::from_f64(wv.as_f64() - lr * mhat / (vhat.sqrt() + ADAM_EPS));
            }
            p.mask.apply(&mut p.weight);
        }
    }
    if cfg.train_vth {
        for i in 0..model.v_th.len() {
            let g = grads.v_th[i].as_f64();
            adam.m_vth[i] = ADAM_BETA1 * adam.m_vth[i] + (1.0 - ADAM_BETA1) * g;
            adam.v_vth[i] = ADAM_BETA2 * adam.v_vth[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = adam.m_vth[i] / bc1;
            let vhat = adam.v_vth[i] / bc2;
            let next = model.v_th[i].as_f64() - lr * mhat / (vhat.sqrt() + ADAM_EPS);
            model.v_th[i] = F::from_f64(next.max(V_TH_FLOOR));
        }
    }
    if cfg.train_leak {
        for i in 0..model.leak.len() {
            let g = grads.leak[i].as_f64();
            adam.m_leak[i] = ADAM_BETA1 * adam.m_leak[i] + (1.0 - ADAM_BETA1) * g;
            adam.v_leak[i] = ADAM_BETA2 * adam.v_leak[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = adam.m_leak[i] / bc1;
            let vhat = adam.v_leak[i] / bc2;
            let next = model.leak[i].as_f64() - lr * mhat / (vhat.sqrt() + ADAM_EPS);
            model.leak[i] = F::from_f64(next.clamp(LEAK_FLOOR, 1.0));
        }
    }
    Ok(())
}

/// Per-epoch training metrics.
#[derive(Debug, Clone)]
pub struct SnnEpochMetrics {
    pub mean_loss: f64,
    pub batches: usize,
}

/// One fine-tuning epoch: shuffled mini-batches, taped CE loss over the
/// accumulated scores, per-step backward, ADAM. `initial_loss` anchors the
/// divergence detector across epochs (loss above 10x aborts).
#[allow(clippy::too_many_arguments)]
pub fn snn_train_epoch<F: Scalar>(
    model: &mut SnnModel<F>,
    adam: &mut AdamState<F>,
    images: &Tensor<F>,
    labels: &[usize],
    cfg: &SnnTrainConfig,
    epoch: usize,
    seed: u64,
    initial_loss: &mut Option<f64>,
) -> Result<SnnEpochMetrics> {
    cfg.validate()?;
    let n = images.shape()[0];
    let per = images.numel() / n;
    let splitter = SeedSplitter::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = splitter.rng(Purpose::Shuffle, 1_000_000 + epoch as u64);
    shuffle(&mut order, &mut shuffle_rng);

    let lr = cfg.lr_at(epoch);
    let drop_shapes = model.program.dropout_shapes();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;

    for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
        let bn = chunk.len();
        let mut data = Vec::with_capacity(bn * per);
        let mut targets = Vec::with_capacity(bn);
        for &s in chunk {
            data.extend_from_slice(&images.data()[s * per..(s + 1) * per]);
            targets.push(labels[s]);
        }
        let batch = Tensor::new(batch_shape(bn, &images.shape()[1..]), data)?;
        let enc_seed = splitter.seed(Purpose::Poisson, (epoch as u64) << 32 | bi as u64);
        let window = encode_batch(&batch, cfg.encoding, cfg.steps, enc_seed)?;

        // one dropout mask per (batch, layer), reused across all T steps
        let mut drop_rng = splitter.rng(Purpose::Dropout, (epoch as u64) << 32 | bi as u64);
        let masks: Vec<Tensor<F>> = drop_shapes
            .iter()
            .map(|(rate, shape)| bernoulli_mask(&batch_shape(bn, shape), 1.0 - rate, &mut drop_rng))
            .collect();

        let out = snn_forward(
            model,
            &window,
            &ForwardOptions {
                record_trace: true,
                dropout_masks: Some(&masks),
            },
        )?;

        // taped CE over the accumulated scores gives dL/d(scores)
        let mut tape = OpTape::new();
        let scores_ref = tape.value(out.scores.clone());
        let loss_ref = tape.softmax_cross_entropy(scores_ref, &targets)?;
        let loss = tape.get(loss_ref).item().as_f64();
        let tape_grads = tape.backward(loss_ref)?;
        let d_scores = tape_grads
            .wrt(scores_ref)
            .ok_or_else(|| Error::Invariant("missing score gradient".into()))?
            .clone();

        let anchor = *initial_loss.get_or_insert(loss.max(1e-6));
        if loss > 10.0 * anchor && loss > 1.0 {
            return Err(Error::Train(format!(
                "divergence detected at epoch {} batch {}: loss {:.4} vs initial {:.4}",
                epoch, bi, loss, anchor
            )));
        }

        let trace = out.trace.as_ref().expect("trace requested");
        let grads = snn_backward(model, trace, &[d_scores], cfg.gamma, Some(&masks))?;
        if lr > 0.0 {
            adam_step(model, adam, &grads, lr, cfg)?;
        }
        loss_sum += loss;
        batches += 1;
    }
    Ok(SnnEpochMetrics {
        mean_loss: loss_sum / batches.max(1) as f64,
        batches,
    })
}

fn shuffle(order: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Inference accuracy over a dataset, batched, dropout off. Also returns the
/// merged spike record for profiling.
pub fn snn_eval<F: Scalar>(
    model: &SnnModel<F>,
    images: &Tensor<F>,
    labels: &[usize],
    cfg: &SnnTrainConfig,
    seed: u64,
) -> Result<(f64, SpikeRecord)> {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let splitter = SeedSplitter::new(seed);
    let mut hits = 0usize;
    let mut record = SpikeRecord::new(cfg.steps);
    for (bi, start) in (0..n).step_by(cfg.batch).enumerate() {
        let end = (start + cfg.batch).min(n);
        let bn = end - start;
        let batch = Tensor::new(
            batch_shape(bn, &images.shape()[1..]),
            images.data()[start * per..end * per].to_vec(),
        )?;
        let enc_seed = splitter.seed(Purpose::Poisson, 0xEAA0_0000 | bi as u64);
        let window = encode_batch(&batch, cfg.encoding, cfg.steps, enc_seed)?;
        let out = snn_forward(model, &window, &ForwardOptions::default())?;
        record.merge(&out.record)?;
        let k = model.spec.classes;
        for i in 0..bn {
            let row = &out.scores.data()[i * k..(i + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == labels[start + i] {
                hits += 1;
            }
        }
    }
    Ok((hits as f64 / n as f64, record))
}

//! Non-iterative prune/regrow scheduling driven by momentum redistribution.
//!
//! Two modes share one pipeline: irregular (per-weight) pruning over conv and
//! linear layers, and structured channel pruning over conv layers only. Each
//! epoch: prune the least-magnitude fraction per layer, split the freed
//! budget across layers proportionally to their momentum mass, regrow the
//! strongest masked candidates.

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{Purpose, SeedSplitter};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Pruning granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Irregular,
    Channel,
}

/// Binary mask congruent to a weight tensor. In channel mode, conv masks are
/// constant across `(C_o, k, k)` within each input-channel slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    shape: Vec<usize>,
    on: Vec<u8>,
    mode: MaskMode,
}

impl PruneMask {
    pub fn all_ones(shape: Vec<usize>, mode: MaskMode) -> Self {
        let n = shape.iter().product();
        PruneMask {
            shape,
            on: vec![1; n],
            mode,
        }
    }

    pub fn new_off(shape: Vec<usize>, mode: MaskMode) -> Self {
        let n = shape.iter().product();
        PruneMask {
            shape,
            on: vec![0; n],
            mode,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.on.len()
    }

    pub fn is_empty(&self) -> bool {
        self.on.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.on[i] == 1
    }

    pub fn set_index(&mut self, i: usize, on: bool) {
        self.on[i] = on as u8;
    }

    pub fn nnz(&self) -> usize {
        self.on.iter().map(|&b| b as usize).sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.on.iter().all(|&b| b == 1)
    }

    /// Zero the weight at every masked-off position.
    pub fn apply<F: Scalar>(&self, weight: &mut Tensor<F>) {
        debug_assert_eq!(weight.numel(), self.on.len());
        for (w, &b) in weight.data_mut().iter_mut().zip(&self.on) {
            if b == 0 {
                *w = F::zero();
            }
        }
    }

    /// Mask as a 0/1 tensor for elementwise math.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(
            self.shape.clone(),
            self.on.iter().map(|&b| if b == 1 { F::one() } else { F::zero() }).collect(),
        )
        .expect("mask shape")
    }

    /// For a conv mask `[C_o,C_i,k,k]`: is input channel `ci` fully on?
    pub fn channel_on(&self, ci: usize) -> bool {
        self.channel_indices(ci).all(|i| self.on[i] == 1)
    }

    /// Flat indices of one input-channel slice of a conv mask.
    fn channel_indices(&self, ci: usize) -> impl Iterator<Item = usize> + '_ {
        let (co, cin, kh, kw) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let kk = kh * kw;
        (0..co).flat_map(move |o| {
            let base = (o * cin + ci) * kk;
            base..base + kk
        })
    }

    fn set_channel(&mut self, ci: usize, on: bool) {
        let idx: Vec<usize> = self.channel_indices(ci).collect();
        for i in idx {
            self.on[i] = on as u8;
        }
    }

    /// Channel-structure invariant: every input-channel slice is constant.
    pub fn is_channel_constant(&self) -> bool {
        if self.shape.len() != 4 {
            return true;
        }
        (0..self.shape[1]).all(|ci| {
            let mut it = self.channel_indices(ci);
            let first = match it.next() {
                Some(i) => self.on[i],
                None => return true,
            };
            it.all(|i| self.on[i] == first)
        })
    }

    /// Pack to 8 mask bits per byte, little-endian within the byte.
    pub fn pack_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; (self.on.len() + 7) / 8];
        for (i, &b) in self.on.iter().enumerate() {
            if b == 1 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed_bits(shape: Vec<usize>, mode: MaskMode, bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != (n + 7) / 8 {
            return Err(Error::Checkpoint(format!(
                "mask byte count {} for {} bits",
                bytes.len(),
                n
            )));
        }
        let on = (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        Ok(PruneMask { shape, on, mode })
    }
}

/// Target density and prune-rate schedule for a sparse run.
#[derive(Debug, Clone)]
pub struct SparsitySchedule {
    pub density: f64,
    pub p0: f64,
    pub epochs: usize,
    pub mode: MaskMode,
}

impl SparsitySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside (0,1]", self.density)));
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(Error::Config(format!("prune rate p0 {} outside [0,1]", self.p0)));
        }
        Ok(())
    }
}

/// Counter block for rare-but-legal events.
#[derive(Debug, Clone, Copy, Default)]
pub struct Diagnostics {
    pub degenerate_maps: u64,
    pub mask_floor_events: u64,
    pub cold_start_redistributions: u64,
    pub calib_zero_layers: u64,
}

/// Per-epoch prune rate: linear decay from `p0` to zero at the final epoch.
pub fn linear_decay(p0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return 0.0;
    }
    (p0 * (1.0 - epoch as f64 / total_epochs as f64)).max(0.0)
}

/// Squared Frobenius norm of each input-channel slice of a 4-D tensor.
pub fn channel_fnorm<F: Scalar>(w: &Tensor<F>) -> Vec<f64> {
    let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let kk = kh * kw;
    let mut out = vec![0.0f64; ci];
    for o in 0..co {
        for c in 0..ci {
            let base = (o * ci + c) * kk;
            for t in 0..kk {
                let v = w.data()[base + t].as_f64();
                out[c] += v * v;
            }
        }
    }
    out
}

fn prunable(state_shape: &[usize], mode: MaskMode) -> bool {
    match mode {
        MaskMode::Irregular => true,
        MaskMode::Channel => state_shape.len() == 4,
    }
}

/// Random masks meeting the global budget: irregular keeps `round(d*n_l)`
/// weights per layer, channel keeps `round(d*C_i)` whole channels per conv
/// layer. Layers floored at one weight/channel are rebalanced against the
/// largest layers and counted in `diag`.
pub fn init_masks<F: Scalar>(
    state: &mut ModelState<F>,
    schedule: &SparsitySchedule,
    seed: u64,
    diag: &mut Diagnostics,
) -> Result<()> {
    schedule.validate()?;
    let d = schedule.density;
    let mode = schedule.mode;
    let splitter = SeedSplitter::new(seed);

    if (d - 1.0).abs() < f64::EPSILON {
        for p in &mut state.params {
            p.mask = PruneMask::all_ones(p.weight.shape().to_vec(), mode);
        }
        return Ok(());
    }

    match mode {
        MaskMode::Irregular => {
            let idxs: Vec<usize> = (0..state.params.len()).collect();
            let mut keeps: Vec<usize> = idxs
                .iter()
                .map(|&i| (d * state.params[i].weight.numel() as f64).round() as usize)
                .collect();
            // floor at one weight per layer, taking the excess back from the
            // biggest allocations
            let mut excess = 0usize;
            for k in keeps.iter_mut() {
                if *k == 0 {
                    *k = 1;
                    excess += 1;
                    diag.mask_floor_events += 1;
                }
            }
            while excess > 0 {
                let (imax, _) = keeps
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &k)| k)
                    .expect("nonempty");
                if keeps[imax] <= 1 {
                    break;
                }
                keeps[imax] -= 1;
                excess -= 1;
            }
            for (li, p) in state.params.iter_mut().enumerate() {
                let n = p.weight.numel();
                let mut rng = splitter.rng(Purpose::MaskInit, li as u64);
                let chosen = sample_without_replacement(n, keeps[li], &mut rng);
                p.mask = PruneMask::new_off(p.weight.shape().to_vec(), mode);
                for i in chosen {
                    p.mask.set_index(i, true);
                }
                p.mask.apply(&mut p.weight);
            }
        }
        MaskMode::Channel => {
            for (li, p) in state.params.iter_mut().enumerate() {
                if !prunable(p.weight.shape(), mode) {
                    p.mask = PruneMask::all_ones(p.weight.shape().to_vec(), mode);
                    continue;
                }
                let ci = p.weight.shape()[1];
                let mut keep = (d * ci as f64).round() as usize;
                if keep == 0 {
                    keep = 1;
                    diag.mask_floor_events += 1;
                }
                let mut rng = splitter.rng(Purpose::MaskInit, li as u64);
                let chosen = sample_without_replacement(ci, keep, &mut rng);
                p.mask = PruneMask::new_off(p.weight.shape().to_vec(), mode);
                for c in chosen {
                    p.mask.set_channel(c, true);
                }
                p.mask.apply(&mut p.weight);
            }
        }
    }
    Ok(())
}

fn sample_without_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    // partial Fisher-Yates
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + rng.gen_range(0..n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// What one prune pass freed.
#[derive(Debug, Clone, Default)]
pub struct PruneOutcome {
    /// Total weights freed across layers (`pT`).
    pub freed_weights: usize,
    /// Total whole channels freed (channel mode only).
    pub freed_channels: usize,
    pub per_layer: Vec<LayerPrune>,
}

#[derive(Debug, Clone)]
pub struct LayerPrune {
    pub pruned_weights: usize,
    pub pruned_channels: usize,
}

/// Zero out the lowest-ranked active weights (irregular: by |w|; channel: by
/// channel F-norm). A layer never drops below one active weight/channel.
pub fn prune_step<F: Scalar>(
    state: &mut ModelState<F>,
    p_i: f64,
    mode: MaskMode,
) -> Result<PruneOutcome> {
    let mut outcome = PruneOutcome::default();
    for p in &mut state.params {
        if !prunable(p.weight.shape(), mode) || p_i <= 0.0 {
            outcome.per_layer.push(LayerPrune {
                pruned_weights: 0,
                pruned_channels: 0,
            });
            continue;
        }
        match mode {
            MaskMode::Irregular => {
                let active: Vec<usize> = (0..p.weight.numel()).filter(|&i| p.mask.get(i)).collect();
                let na = active.len();
                let want = (p_i * na as f64).ceil() as usize;
                let kill = want.min(na.saturating_sub(1));
                // ascending |w|, ties to the lower flat index
                let mut ranked = active;
                ranked.sort_by(|&a, &b| {
                    let wa = p.weight.data()[a].abs();
                    let wb = p.weight.data()[b].abs();
                    wa.partial_cmp(&wb).unwrap().then(a.cmp(&b))
                });
                for &i in ranked.iter().take(kill) {
                    p.mask.set_index(i, false);
                }
                p.mask.apply(&mut p.weight);
                outcome.freed_weights += kill;
                outcome.per_layer.push(LayerPrune {
                    pruned_weights: kill,
                    pruned_channels: 0,
                });
            }
            MaskMode::Channel => {
                let ci = p.weight.shape()[1];
                let fnorms = channel_fnorm(&p.weight);
                let active: Vec<usize> = (0..ci).filter(|&c| p.mask.channel_on(c)).collect();
                let na = active.len();
                let want = (p_i * na as f64).round() as usize;
                let kill = want.min(na.saturating_sub(1));
                let mut ranked = active;
                ranked.sort_by(|&a, &b| fnorms[a].partial_cmp(&fnorms[b]).unwrap().then(a.cmp(&b)));
                let wpc = p.weight.numel() / ci;
                for &c in ranked.iter().take(kill) {
                    p.mask.set_channel(c, false);
                }
                p.mask.apply(&mut p.weight);
                outcome.freed_weights += kill * wpc;
                outcome.freed_channels += kill;
                outcome.per_layer.push(LayerPrune {
                    pruned_weights: kill * wpc,
                    pruned_channels: kill,
                });
            }
        }
    }
    Ok(outcome)
}

/// Regrow quotas per layer. Irregular quotas are weight counts summing to
/// `pT`; channel quotas are whole-channel counts (weight quotas converted by
/// each layer's weights-per-channel, corrected to conserve the freed channel
/// count).
pub fn momentum_redistribution<F: Scalar>(
    state: &ModelState<F>,
    outcome: &PruneOutcome,
    mode: MaskMode,
    diag: &mut Diagnostics,
) -> Vec<usize> {
    let masses: Vec<f64> = state
        .params
        .iter()
        .map(|p| {
            if !prunable(p.weight.shape(), mode) {
                return 0.0;
            }
            (0..p.weight.numel())
                .filter(|&i| p.mask.get(i))
                .map(|i| p.momentum.data()[i].as_f64().abs())
                .sum()
        })
        .collect();
    let tm: f64 = masses.iter().sum();

    let shares: Vec<f64> = if tm == 0.0 {
        diag.cold_start_redistributions += 1;
        let k = state
            .params
            .iter()
            .filter(|p| prunable(p.weight.shape(), mode))
            .count()
            .max(1);
        state
            .params
            .iter()
            .map(|p| {
                if prunable(p.weight.shape(), mode) {
                    1.0 / k as f64
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        masses.iter().map(|m| m / tm).collect()
    };

    match mode {
        MaskMode::Irregular => {
            let targets: Vec<f64> = shares.iter().map(|s| s * outcome.freed_weights as f64).collect();
            largest_remainder(&targets, outcome.freed_weights)
        }
        MaskMode::Channel => {
            // weight quotas, then whole-channel conversion per layer
            let weight_targets: Vec<f64> = shares.iter().map(|s| s * outcome.freed_weights as f64).collect();
            let channel_targets: Vec<f64> = state
                .params
                .iter()
                .zip(&weight_targets)
                .map(|(p, &wt)| {
                    if p.weight.shape().len() == 4 {
                        let wpc = p.weight.numel() / p.weight.shape()[1];
                        wt / wpc as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            largest_remainder(&channel_targets, outcome.freed_channels)
        }
    }
}

/// Integer apportionment: floors plus largest fractional remainders, so the
/// result sums exactly to `total`. Ties break to the lower index.
pub fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = targets.iter().map(|&t| t.max(0.0).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    if assigned >= total {
        // floors overshoot only when targets oversum from rounding noise;
        // trim from the smallest remainders
        let mut excess = assigned - total;
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fa.partial_cmp(&fb).unwrap().then(b.cmp(&a))
        });
        for &i in &order {
            if excess == 0 {
                break;
            }
            if out[i] > 0 {
                out[i] -= 1;
                excess -= 1;
            }
        }
        return out;
    }
    let mut rest = total - assigned;
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    // if every fractional bucket is exhausted, spread round-robin
    let mut i = 0;
    let n = out.len();
    while rest > 0 && n > 0 {
        out[i % n] += 1;
        rest -= 1;
        i += 1;
    }
    out
}

/// Enable the strongest masked candidates per layer. Irregular: positions by
/// |momentum|; channel: whole channels by momentum F-norm. Surplus quota
/// spills to the next layer in descending-quota order. Regrown weights start
/// at zero with momentum preserved.
pub fn regrow<F: Scalar>(
    state: &mut ModelState<F>,
    quotas: &[usize],
    mode: MaskMode,
) -> Result<Vec<usize>> {
    if quotas.len() != state.params.len() {
        return Err(Error::Invariant(format!(
            "{} quotas for {} layers",
            quotas.len(),
            state.params.len()
        )));
    }
    let mut grown = vec![0usize; quotas.len()];
    // descending quota, ties to the lower layer index
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].cmp(&quotas[a]).then(a.cmp(&b)));

    let mut carry = 0usize;
    let mut remaining: Vec<usize> = order.clone();
    let mut pass = 0;
    loop {
        let mut next_remaining = Vec::new();
        for &li in &remaining {
            let quota = if pass == 0 { quotas[li] + take(&mut carry) } else { take(&mut carry) };
            if quota == 0 {
                next_remaining.push(li);
                continue;
            }
            let took = regrow_layer(&mut state.params[li], quota, mode);
            grown[li] += took;
            if took < quota {
                carry += quota - took;
            } else {
                next_remaining.push(li);
            }
        }
        if carry == 0 || next_remaining.is_empty() {
            break;
        }
        remaining = next_remaining;
        pass += 1;
        if pass > quotas.len() + 2 {
            break; // no capacity left anywhere
        }
    }
    Ok(grown)
}

fn take(v: &mut usize) -> usize {
    std::mem::replace(v, 0)
}

fn regrow_layer<F: Scalar>(p: &mut crate::model::ParamLayer<F>, quota: usize, mode: MaskMode) -> usize {
    match mode {
        MaskMode::Irregular => {
            let mut cands: Vec<usize> = (0..p.weight.numel()).filter(|&i| !p.mask.get(i)).collect();
            cands.sort_by(|&a, &b| {
                let ma = p.momentum.data()[a].abs();
                let mb = p.momentum.data()[b].abs();
                mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
            });
            let took = quota.min(cands.len());
            for &i in cands.iter().take(took) {
                p.mask.set_index(i, true);
                p.weight.data_mut()[i] = F::zero();
            }
            took
        }
        MaskMode::Channel => {
            if p.weight.shape().len() != 4 {
                return 0;
            }
            let ci = p.weight.shape()[1];
            let mom_fn = channel_fnorm(&p.momentum);
            let mut cands: Vec<usize> = (0..ci).filter(|&c| !p.mask.channel_on(c)).collect();
            cands.sort_by(|&a, &b| mom_fn[b].partial_cmp(&mom_fn[a]).unwrap().then(a.cmp(&b)));
            let took = quota.min(cands.len());
            let kk = p.weight.shape()[2] * p.weight.shape()[3];
            let co = p.weight.shape()[0];
            for &c in cands.iter().take(took) {
                p.mask.set_channel(c, true);
                for o in 0..co {
                    let base = (o * ci + c) * kk;
                    for t in 0..kk {
                        p.weight.data_mut()[base + t] = F::zero();
                    }
                }
            }
            took
        }
    }
}

/// Per-layer row of the per-epoch sparsity report.
#[derive(Debug, Clone)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub active: usize,
    pub pruned: usize,
    pub regrown: usize,
}

/// Outcome of one end-of-epoch mask update.
#[derive(Debug, Clone)]
pub struct EpochSparsity {
    pub p_i: f64,
    pub freed: usize,
    pub regrown: usize,
    pub per_layer: Vec<LayerSparsity>,
}

/// End-of-epoch composite: prune, redistribute by momentum, regrow, re-apply
/// masks.
pub fn epoch_update<F: Scalar>(
    state: &mut ModelState<F>,
    mode: MaskMode,
    p_i: f64,
    diag: &mut Diagnostics,
) -> Result<EpochSparsity> {
    let outcome = prune_step(state, p_i, mode)?;
    let quotas = momentum_redistribution(state, &outcome, mode, diag);
    let grown = regrow(state, &quotas, mode)?;
    state.apply_masks();
    let per_layer = state
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| LayerSparsity {
            name: p.name.clone(),
            total: p.weight.numel(),
            active: p.mask.nnz(),
            pruned: outcome.per_layer[i].pruned_weights,
            regrown: grown[i],
        })
        .collect();
    Ok(EpochSparsity {
        p_i,
        freed: outcome.freed_weights,
        regrown: grown.iter().sum(),
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Layer, ModelSpec};

    fn two_conv_spec() -> ModelSpec {
        ModelSpec {
            input: (4, 6, 6),
            classes: 3,
            layers: vec![
                Layer::Conv { out_channels: 6, kernel: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::Linear { out_features: 3 },
            ],
        }
    }

    #[test]
    fn density_one_gives_all_ones() {
        let spec = two_conv_spec();
        let mut state = build_model::<f32>(&spec, 0).unwrap();
        let sched = SparsitySchedule { density: 1.0, p0: 0.5, epochs: 10, mode: MaskMode::Irregular };
        let mut diag = Diagnostics::default();
        init_masks(&mut state, &sched, 0, &mut diag).unwrap();
        assert!(state.params.iter().all(|p| p.mask.is_all_ones()));
    }

    #[test]
    fn irregular_init_hits_exact_per_layer_budget() {
        let spec = ModelSpec {
            input: (10, 10, 10),
            classes: 10,
            layers: vec![Layer::Linear { out_features: 10 }], // 1000 weights wait: 10*10*10 -> 10 = 10000
        };
        let mut state = build_model::<f32>(&spec, 0).unwrap();
        // force a 1000-weight layer
        state.params[0].weight = Tensor::zeros(&[1, 1000]);
        state.params[0].momentum = Tensor::zeros(&[1, 1000]);
        state.params[0].mask = PruneMask::all_ones(vec![1, 1000], MaskMode::Irregular);
        let sched = SparsitySchedule { density: 0.1, p0: 0.5, epochs: 10, mode: MaskMode::Irregular };
        let mut diag = Diagnostics::default();
        init_masks(&mut state, &sched, 7, &mut diag).unwrap();
        assert_eq!(state.params[0].mask.nnz(), 100);
    }

    #[test]
    fn channel_init_keeps_whole_channels() {
        let spec = ModelSpec {
            input: (64, 4, 4),
            classes: 3,
            layers: vec![
                Layer::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::Linear { out_features: 3 },
            ],
        };
        let mut state = build_model::<f32>(&spec, 0).unwrap();
        let sched = SparsitySchedule { density: 0.25, p0: 0.5, epochs: 10, mode: MaskMode::Channel };
        let mut diag = Diagnostics::default();
        init_masks(&mut state, &sched, 3, &mut diag).unwrap();
        let conv = &state.params[0];
        assert!(conv.mask.is_channel_constant());
        let on = (0..64).filter(|&c| conv.mask.channel_on(c)).count();
        assert_eq!(on, 16);
        // linear masks stay all-ones in channel mode
        assert!(state.params[1].mask.is_all_ones());
    }

    #[test]
    fn channel_fnorm_examples() {
        // all-ones W with C_o=2, k=3: every channel scores 2*9 = 18
        let w = Tensor::<f64>::full(&[2, 3, 3, 3], 1.0);
        assert_eq!(channel_fnorm(&w), vec![18.0, 18.0, 18.0]);
        // zero channel scores 0
        let mut w2 = Tensor::<f64>::full(&[2, 2, 3, 3], 1.0);
        for o in 0..2 {
            for t in 0..9 {
                w2.data_mut()[(o * 2 + 1) * 9 + t] = 0.0;
            }
        }
        assert_eq!(channel_fnorm(&w2), vec![18.0, 0.0]);
    }

    #[test]
    fn channel_fnorm_matches_triple_loop_oracle() {
        use rand::Rng;
        let mut rng = SeedSplitter::new(11).rng(Purpose::Data, 0);
        let shape = [3usize, 5, 3, 3];
        let data: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::new(shape.to_vec(), data.clone()).unwrap();
        let got = channel_fnorm(&w);
        // independent naive loop
        for c in 0..5 {
            let mut acc = 0.0;
            for o in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let v = data[((o * 5 + c) * 3 + i) * 3 + j];
                        acc += v * v;
                    }
                }
            }
            assert!((got[c] - acc).abs() < 1e-12);
        }
    }

    fn linear_state(weights: &[f64]) -> ModelState<f64> {
        let spec = ModelSpec {
            input: (1, 1, weights.len()),
            classes: 2,
            layers: vec![Layer::Linear { out_features: 2 }],
        };
        let mut state = build_model::<f64>(&spec, 0).unwrap();
        state.params[0].weight = Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap();
        state.params[0].momentum = Tensor::zeros(&[1, weights.len()]);
        state.params[0].mask = PruneMask::all_ones(vec![1, weights.len()], MaskMode::Irregular);
        state.params.truncate(1);
        state
    }

    #[test]
    fn prune_rate_zero_changes_nothing() {
        let mut state = linear_state(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let out = prune_step(&mut state, 0.0, MaskMode::Irregular).unwrap();
        assert_eq!(out.freed_weights, 0);
        assert_eq!(state.params[0].mask.nnz(), 5);
    }

    #[test]
    fn prune_kills_smallest_magnitudes() {
        let mut state = linear_state(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let out = prune_step(&mut state, 0.4, MaskMode::Irregular).unwrap();
        assert_eq!(out.freed_weights, 2);
        let mask = &state.params[0].mask;
        assert!(mask.get(0) && mask.get(1) && mask.get(2));
        assert!(!mask.get(3) && !mask.get(4)); // weights 2 and 1 pruned
        assert_eq!(state.params[0].weight.data()[3], 0.0);
    }

    #[test]
    fn channel_prune_lowest_fnorm() {
        // F-norms [0.1, 9, 4] with p_i = 0.34: one channel pruned, channel 0
        let spec = ModelSpec {
            input: (3, 4, 4),
            classes: 2,
            layers: vec![
                Layer::Conv { out_channels: 1, kernel: 1, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::Linear { out_features: 2 },
            ],
        };
        let mut state = build_model::<f64>(&spec, 0).unwrap();
        state.params[0].weight =
            Tensor::new(vec![1, 3, 1, 1], vec![0.1f64.sqrt(), 3.0, 2.0]).unwrap();
        state.params[0].mask = PruneMask::all_ones(vec![1, 3, 1, 1], MaskMode::Channel);
        let out = prune_step(&mut state, 0.34, MaskMode::Channel).unwrap();
        assert_eq!(out.freed_channels, 1);
        assert!(!state.params[0].mask.channel_on(0));
        assert!(state.params[0].mask.channel_on(1));
        assert!(state.params[0].mask.channel_on(2));
    }

    #[test]
    fn redistribution_is_proportional() {
        // two layers with momentum masses 3 and 1, pT = 8 -> quotas 6 and 2
        let spec = ModelSpec {
            input: (1, 1, 4),
            classes: 4,
            layers: vec![Layer::Linear { out_features: 4 }, Layer::Relu, Layer::Linear { out_features: 4 }],
        };
        let mut state = build_model::<f64>(&spec, 0).unwrap();
        state.params[0].momentum = Tensor::new(vec![4, 4], vec![3.0 / 16.0; 16]).unwrap();
        state.params[1].momentum = Tensor::new(vec![4, 4], vec![1.0 / 16.0; 16]).unwrap();
        let outcome = PruneOutcome {
            freed_weights: 8,
            freed_channels: 0,
            per_layer: vec![
                LayerPrune { pruned_weights: 4, pruned_channels: 0 },
                LayerPrune { pruned_weights: 4, pruned_channels: 0 },
            ],
        };
        let mut diag = Diagnostics::default();
        let quotas = momentum_redistribution(&state, &outcome, MaskMode::Irregular, &mut diag);
        assert_eq!(quotas, vec![6, 2]);
    }

    #[test]
    fn single_layer_gets_whole_quota() {
        let mut state = linear_state(&[1.0, 2.0, 3.0, 4.0]);
        state.params[0].momentum = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let outcome = PruneOutcome {
            freed_weights: 3,
            freed_channels: 0,
            per_layer: vec![LayerPrune { pruned_weights: 3, pruned_channels: 0 }],
        };
        let mut diag = Diagnostics::default();
        let quotas = momentum_redistribution(&state, &outcome, MaskMode::Irregular, &mut diag);
        assert_eq!(quotas, vec![3]);
    }

    #[test]
    fn cold_start_gives_uniform_quotas() {
        let spec = ModelSpec {
            input: (1, 1, 4),
            classes: 4,
            layers: vec![Layer::Linear { out_features: 4 }, Layer::Relu, Layer::Linear { out_features: 4 }],
        };
        let state = build_model::<f64>(&spec, 0).unwrap();
        let outcome = PruneOutcome {
            freed_weights: 4,
            freed_channels: 0,
            per_layer: vec![
                LayerPrune { pruned_weights: 2, pruned_channels: 0 },
                LayerPrune { pruned_weights: 2, pruned_channels: 0 },
            ],
        };
        let mut diag = Diagnostics::default();
        let quotas = momentum_redistribution(&state, &outcome, MaskMode::Irregular, &mut diag);
        assert_eq!(quotas.iter().sum::<usize>(), 4);
        assert_eq!(diag.cold_start_redistributions, 1);
        assert_eq!(quotas, vec![2, 2]);
    }

    #[test]
    fn regrow_picks_largest_momentum() {
        // masked positions with |mu| = [0.9, 0.1, 0.5] and quota 2:
        // the first and third candidates come back
        let mut state = linear_state(&[1.0, 0.0, 0.0, 0.0, 2.0]);
        let mut mask = PruneMask::all_ones(vec![1, 5], MaskMode::Irregular);
        mask.set_index(1, false);
        mask.set_index(2, false);
        mask.set_index(3, false);
        state.params[0].mask = mask;
        state.params[0].momentum =
            Tensor::new(vec![1, 5], vec![9.0, 0.9, 0.1, 0.5, 9.0]).unwrap();
        let grown = regrow(&mut state, &[2], MaskMode::Irregular).unwrap();
        assert_eq!(grown, vec![2]);
        assert!(state.params[0].mask.get(1));
        assert!(!state.params[0].mask.get(2));
        assert!(state.params[0].mask.get(3));
        // regrown weights start at zero
        assert_eq!(state.params[0].weight.data()[1], 0.0);
    }

    #[test]
    fn quota_zero_everywhere_changes_nothing() {
        let mut state = linear_state(&[1.0, 2.0, 3.0]);
        let before = state.params[0].mask.clone();
        regrow(&mut state, &[0], MaskMode::Irregular).unwrap();
        assert_eq!(state.params[0].mask, before);
    }

    #[test]
    fn prune_regrow_conserves_active_count() {
        let spec = two_conv_spec();
        let mut state = build_model::<f64>(&spec, 9).unwrap();
        let sched = SparsitySchedule { density: 0.3, p0: 0.5, epochs: 20, mode: MaskMode::Irregular };
        let mut diag = Diagnostics::default();
        init_masks(&mut state, &sched, 3, &mut diag).unwrap();
        // fake momentum so redistribution has signal
        for p in &mut state.params {
            let n = p.momentum.numel();
            p.momentum = Tensor::new(
                p.momentum.shape().to_vec(),
                (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) / 100.0).collect(),
            )
            .unwrap();
        }
        for epoch in 0..20 {
            let before = state.active_weights();
            let p_i = linear_decay(0.5, epoch, 20);
            let rep = epoch_update(&mut state, MaskMode::Irregular, p_i, &mut diag).unwrap();
            assert_eq!(state.active_weights(), before, "epoch {}", epoch);
            assert_eq!(rep.freed, rep.regrown);
        }
    }

    #[test]
    fn channel_epoch_update_preserves_structure_and_channel_count() {
        let spec = two_conv_spec();
        let mut state = build_model::<f64>(&spec, 9).unwrap();
        let sched = SparsitySchedule { density: 0.5, p0: 0.5, epochs: 10, mode: MaskMode::Channel };
        let mut diag = Diagnostics::default();
        init_masks(&mut state, &sched, 3, &mut diag).unwrap();
        for p in &mut state.params {
            let n = p.momentum.numel();
            p.momentum = Tensor::new(
                p.momentum.shape().to_vec(),
                (0..n).map(|i| ((i * 53 % 97) as f64 - 48.0) / 97.0).collect(),
            )
            .unwrap();
        }
        let channels_before: usize = state
            .params
            .iter()
            .filter(|p| p.weight.shape().len() == 4)
            .map(|p| (0..p.weight.shape()[1]).filter(|&c| p.mask.channel_on(c)).count())
            .sum();
        for epoch in 0..10 {
            let p_i = linear_decay(0.5, epoch, 10);
            epoch_update(&mut state, MaskMode::Channel, p_i, &mut diag).unwrap();
            for p in &state.params {
                assert!(p.mask.is_channel_constant());
                if p.weight.shape().len() == 2 {
                    assert!(p.mask.is_all_ones());
                }
            }
        }
        let channels_after: usize = state
            .params
            .iter()
            .filter(|p| p.weight.shape().len() == 4)
            .map(|p| (0..p.weight.shape()[1]).filter(|&c| p.mask.channel_on(c)).count())
            .sum();
        assert_eq!(channels_before, channels_after);
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(linear_decay(0.5, 0, 240), 0.5);
        assert_eq!(linear_decay(0.5, 240, 240), 0.0);
        assert_eq!(linear_decay(0.5, 120, 240), 0.25);
    }

    #[test]
    fn mask_bit_packing_roundtrip() {
        let mut mask = PruneMask::all_ones(vec![3, 5], MaskMode::Irregular);
        mask.set_index(0, false);
        mask.set_index(7, false);
        mask.set_index(14, false);
        let packed = mask.pack_bits();
        assert_eq!(packed.len(), 2);
        let back = PruneMask::from_packed_bits(vec![3, 5], MaskMode::Irregular, &packed).unwrap();
        assert_eq!(back, mask);
    }

    use crate::rng::{Purpose, SeedSplitter};
}

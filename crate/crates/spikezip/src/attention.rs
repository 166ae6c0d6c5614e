//! Activation-based attention maps and the attention-guided loss coupling a
//! compressed model to a frozen unpruned meta model.

use crate::error::{Error, Result};
use crate::sparse::Diagnostics;
use crate::tape::{attention_map_forward, OpTape, ValueRef};
use crate::tensor::{Scalar, Tensor};

/// Which outer norm the pair loss uses. The unsquared l2 distance is the
/// default; the squared form is available as a config switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgNorm {
    L2,
    L2Squared,
}

/// Layer pairing plus the loss hyperparameters.
#[derive(Debug, Clone)]
pub struct AttentionPairing {
    /// `(relu layer index in compressed spec, relu layer index in meta spec)`.
    pub pairs: Vec<(usize, usize)>,
    /// Attention power `p >= 1`.
    pub power: u32,
    /// Loss scale; zero disables the attention term.
    pub alpha: f64,
    /// The attention term is dropped entirely from this epoch on.
    pub cutoff_epoch: usize,
    pub norm: AgNorm,
}

impl AttentionPairing {
    /// Is the attention term active at this epoch? `Bool(i < epsilon)`
    /// semantics: the term and its gradient vanish exactly at the cutoff.
    pub fn active(&self, epoch: usize) -> bool {
        self.alpha > 0.0 && epoch < self.cutoff_epoch && !self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.power < 1 {
            return Err(Error::Config("attention power p must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("attention alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Conv stages of a model, described by the relu layer index that closes each
/// stage and the spatial size of its activation. A stage is a maximal run of
/// conv activations at one resolution; the pairing convention takes the last
/// conv layer of each stage.
fn stage_closers(spec: &crate::model::ModelSpec) -> Result<Vec<(usize, (usize, usize))>> {
    use crate::model::{FlowShape, Layer};
    let shapes = spec.validate()?;
    let mut relu_maps: Vec<(usize, (usize, usize))> = Vec::new();
    let mut prev_conv = false;
    for (i, l) in spec.layers.iter().enumerate() {
        match l {
            Layer::Conv { .. } => prev_conv = true,
            Layer::Relu => {
                if prev_conv {
                    if let FlowShape::Map { h, w, .. } = shapes[i] {
                        relu_maps.push((i, (h, w)));
                    }
                }
                prev_conv = false;
            }
            _ => prev_conv = false,
        }
    }
    // last activation per resolution run
    let mut closers = Vec::new();
    for (k, &(i, hw)) in relu_maps.iter().enumerate() {
        let next_same = relu_maps.get(k + 1).map(|&(_, hw2)| hw2 == hw).unwrap_or(false);
        if !next_same {
            closers.push((i, hw));
        }
    }
    Ok(closers)
}

/// Default pairing: the last conv activation of each same-resolution stage,
/// matched across the two models by equal spatial size.
pub fn auto_pairs(
    spec_c: &crate::model::ModelSpec,
    spec_m: &crate::model::ModelSpec,
) -> Result<Vec<(usize, usize)>> {
    let c = stage_closers(spec_c)?;
    let m = stage_closers(spec_m)?;
    let mut pairs = Vec::new();
    for (ci, chw) in c {
        if let Some(&(mi, _)) = m.iter().find(|&&(_, mhw)| mhw == chw) {
            pairs.push((ci, mi));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config(
            "no attention pairs: the two models share no conv stage resolution".into(),
        ));
    }
    Ok(pairs)
}

/// Attention map of a batch of activations, off-tape (used for the frozen
/// meta model and by oracles). `[N,C,H,W] -> [N,H*W]`.
pub fn attention_map_batch<F: Scalar>(a: &Tensor<F>, p: u32) -> Result<Tensor<F>> {
    attention_map_forward(a, p)
}

/// Attention map of a single activation block. `[C,H,W] -> [H,W]`.
pub fn attention_map_single<F: Scalar>(a: &Tensor<F>, p: u32) -> Result<Tensor<F>> {
    if a.shape().len() != 3 {
        return Err(Error::shape(
            "attention_map",
            format!("expected [C,H,W], got {:?}", a.shape()),
        ));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let batched = a.reshape(vec![1, c, h, w])?;
    attention_map_forward(&batched, p)?.reshape(vec![h, w])
}

/// Build the scaled attention-guided loss on the tape:
/// `(alpha/2) * sum_pairs mean_batch ||qc_hat - qm_hat||`.
///
/// `acts_c` are tape refs of the compressed model's post-ReLU conv
/// activations keyed by layer index; `acts_m` are the meta model's, as plain
/// tensors (the meta model is frozen, so no gradient flows into it).
pub fn ag_loss<F: Scalar>(
    tape: &mut OpTape<F>,
    acts_c: &[(usize, ValueRef)],
    acts_m: &[(usize, Tensor<F>)],
    pairing: &AttentionPairing,
    diag: &mut Diagnostics,
) -> Result<ValueRef> {
    pairing.validate()?;
    let mut total: Option<ValueRef> = None;
    for &(lc, lm) in &pairing.pairs {
        let &(_, vc) = acts_c
            .iter()
            .find(|(i, _)| *i == lc)
            .ok_or_else(|| Error::Invariant(format!("no activation for pair layer {}", lc)))?;
        let am = &acts_m
            .iter()
            .find(|(i, _)| *i == lm)
            .ok_or_else(|| Error::Invariant(format!("no meta activation for pair layer {}", lm)))?
            .1;
        let sc = tape.get(vc).shape();
        if sc[2..] != am.shape()[2..] {
            return Err(Error::shape(
                "ag_loss",
                format!(
                    "pair ({},{}): spatial dims {:?} vs {:?} must be equal",
                    lc,
                    lm,
                    &sc[2..],
                    &am.shape()[2..]
                ),
            ));
        }
        let qc = tape.attention_map(vc, pairing.power)?;
        let qm = attention_map_forward(am, pairing.power)?;
        let before = tape.degenerate_map_events();
        let pair = tape.ag_pair(qc, &qm, pairing.norm == AgNorm::L2Squared)?;
        diag.degenerate_maps += tape.degenerate_map_events() - before;
        total = Some(match total {
            Some(t) => tape.add(t, pair)?,
            None => pair,
        });
    }
    let total = total.ok_or_else(|| Error::Config("attention pairing has no pairs".into()))?;
    tape.scale(total, F::from_f64(pairing.alpha / 2.0))
}

/// Combine cross-entropy with the (already scaled) attention term.
/// From the cutoff epoch on, the result is the CE ref itself: the attention
/// term and its gradient are absent, not merely zeroed.
pub fn combined_loss<F: Scalar>(
    tape: &mut OpTape<F>,
    ce: ValueRef,
    ag: Option<ValueRef>,
    epoch: usize,
    cutoff_epoch: usize,
) -> Result<ValueRef> {
    match ag {
        Some(ag) if epoch < cutoff_epoch => tape.add(ce, ag),
        _ => Ok(ce),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    fn pairing(pairs: Vec<(usize, usize)>, alpha: f64) -> AttentionPairing {
        AttentionPairing {
            pairs,
            power: 2,
            alpha,
            cutoff_epoch: 100,
            norm: AgNorm::L2,
        }
    }

    #[test]
    fn auto_pairs_on_identical_specs() {
        let spec = preset("vgg-mini", (1, 8, 8), 10, 0.0, 0.0).unwrap();
        let pairs = auto_pairs(&spec, &spec).unwrap();
        // vgg-mini has two resolution stages (8x8 and 4x4)
        assert_eq!(pairs.len(), 2);
        for (a, b) in pairs {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn auto_pairs_between_different_depths() {
        let mini = preset("vgg-mini", (1, 32, 32), 10, 0.0, 0.0).unwrap();
        let vgg9 = preset("vgg9", (1, 32, 32), 10, 0.0, 0.0).unwrap();
        let pairs = auto_pairs(&mini, &vgg9).unwrap();
        assert_eq!(pairs.len(), 2); // 32x32 and 16x16 stages exist in both
    }

    #[test]
    fn identical_maps_give_zero_loss() {
        let mut tape = OpTape::<f64>::new();
        let act = Tensor::from_f64s(vec![2, 3, 2, 2], &(0..24).map(|i| i as f64 / 7.0).collect::<Vec<_>>()).unwrap();
        let vc = tape.value(act.clone());
        let mut diag = Diagnostics::default();
        let l = ag_loss(
            &mut tape,
            &[(1, vc)],
            &[(1, act)],
            &pairing(vec![(1, 1)], 100.0),
            &mut diag,
        )
        .unwrap();
        assert!(tape.get(l).item().abs() < 1e-9);
    }

    #[test]
    fn orthogonal_maps_hand_value() {
        // Qc = [1,0], Qm = [0,1], alpha = 100, one pair:
        // loss = 100/2 * sqrt(2) = 70.71...
        // Build activations whose p=1 maps are those vectors.
        let mut tape = OpTape::<f64>::new();
        let ac = Tensor::from_f64s(vec![1, 1, 1, 2], &[1.0, 0.0]).unwrap();
        let am = Tensor::from_f64s(vec![1, 1, 1, 2], &[0.0, 1.0]).unwrap();
        let vc = tape.value(ac);
        let mut diag = Diagnostics::default();
        let mut p = pairing(vec![(0, 0)], 100.0);
        p.power = 1;
        let l = ag_loss(&mut tape, &[(0, vc)], &[(0, am)], &p, &mut diag).unwrap();
        assert!((tape.get(l).item() - 50.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((tape.get(l).item() - 70.71).abs() < 0.01);
    }

    #[test]
    fn loss_invariant_under_map_rescaling() {
        let base: Vec<f64> = (0..8).map(|i| (i as f64 - 3.0) / 2.0).collect();
        let guide: Vec<f64> = (0..8).map(|i| ((i * 3 % 8) as f64) / 4.0 + 0.1).collect();
        let mut losses = Vec::new();
        for scale in [1.0, 3.7, 120.0] {
            let mut tape = OpTape::<f64>::new();
            let ac = Tensor::from_f64s(vec![1, 2, 2, 2], &base.iter().map(|x| x * scale).collect::<Vec<_>>()).unwrap();
            let am = Tensor::from_f64s(vec![1, 2, 2, 2], &guide).unwrap();
            let vc = tape.value(ac);
            let mut diag = Diagnostics::default();
            let l = ag_loss(&mut tape, &[(0, vc)], &[(0, am)], &pairing(vec![(0, 0)], 2.0), &mut diag).unwrap();
            losses.push(tape.get(l).item());
        }
        for w in losses.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "{:?}", losses);
        }
    }

    #[test]
    fn abs_symmetry_of_attention_map() {
        let a = Tensor::from_f64s(vec![3, 2, 2], &(0..12).map(|i| i as f64 - 5.5).collect::<Vec<_>>()).unwrap();
        let neg = a.scale(-1.0);
        for p in [1, 2, 3] {
            let qa = attention_map_single(&a, p).unwrap();
            let qb = attention_map_single(&neg, p).unwrap();
            assert_eq!(qa.data(), qb.data());
        }
    }

    #[test]
    fn combined_loss_boundary_at_cutoff() {
        // epoch == cutoff: CE only, exactly (same tape value)
        let mut tape = OpTape::<f64>::new();
        let a = tape.value(Tensor::scalar(2.3));
        let b = tape.value(Tensor::scalar(70.71));
        let ce = tape.scale(a, 1.0).unwrap();
        let ag = tape.scale(b, 1.0).unwrap();
        let at_cutoff = combined_loss(&mut tape, ce, Some(ag), 100, 100).unwrap();
        assert_eq!(at_cutoff, ce);
        let before = combined_loss(&mut tape, ce, Some(ag), 0, 100).unwrap();
        assert!((tape.get(before).item() - 73.01).abs() < 1e-9);
    }
}

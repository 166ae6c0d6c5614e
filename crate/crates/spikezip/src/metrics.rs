//! Spiking-activity statistics, FLOPs accounting, the AC/MAC energy model,
//! and compression ratios.

use crate::error::{Error, Result};
use crate::sparse::PruneMask;
use crate::tensor::Tensor;
use std::io::Write;

/// Output spike totals of one spiking layer, accumulated over a batch.
#[derive(Debug, Clone)]
pub struct LayerActivity {
    pub name: String,
    /// Total spikes over all samples, neurons and T steps.
    pub spikes: f64,
    /// Neurons per sample.
    pub neurons: usize,
}

/// Spike statistics accumulated over T steps and a set of samples.
///
/// `input_maps[w]` is the per-position sum of everything that entered
/// weighted layer `w`, over all samples and steps. For binary spike inputs
/// these are exact spike counts; divided by the sample count they are the
/// per-position activity the position-resolved FLOPs formula consumes.
#[derive(Debug, Clone)]
pub struct SpikeRecord {
    pub steps: usize,
    pub samples: usize,
    pub outputs: Vec<LayerActivity>,
    pub input_maps: Vec<Tensor<f64>>,
}

impl SpikeRecord {
    pub fn new(steps: usize) -> Self {
        SpikeRecord {
            steps,
            samples: 0,
            outputs: Vec::new(),
            input_maps: Vec::new(),
        }
    }

    /// Merge a batch record into an accumulator. Integer sums, so the merge
    /// is associative and order-independent.
    pub fn merge(&mut self, other: &SpikeRecord) -> Result<()> {
        if self.samples == 0 && self.outputs.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.steps != other.steps || self.outputs.len() != other.outputs.len() {
            return Err(Error::Invariant("merging incompatible spike records".into()));
        }
        self.samples += other.samples;
        for (a, b) in self.outputs.iter_mut().zip(&other.outputs) {
            a.spikes += b.spikes;
        }
        for (a, b) in self.input_maps.iter_mut().zip(&other.input_maps) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Average spikes per neuron over T steps, per spiking layer.
    pub fn zeta(&self) -> Vec<f64> {
        self.outputs
            .iter()
            .map(|l| l.spikes / (l.neurons as f64 * self.samples.max(1) as f64))
            .collect()
    }

    /// Per-position input activity of weighted layer `w`: average count per
    /// sample over the full T-step window.
    pub fn input_activity(&self, w: usize) -> Tensor<f64> {
        self.input_maps[w].scale(1.0 / self.samples.max(1) as f64)
    }

    /// Scalar input activity of weighted layer `w` (spatial mean of the
    /// per-position map).
    pub fn input_zeta(&self, w: usize) -> f64 {
        let m = &self.input_maps[w];
        m.sum() / (m.numel() as f64 * self.samples.max(1) as f64)
    }
}

/// Conv geometry, as the FLOPs formulas index it. Linear layers use the same
/// formulas with `k = 1` and 1x1 output.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub k: usize,
    pub h_o: usize,
    pub w_o: usize,
    pub c_o: usize,
    pub c_i: usize,
    pub h_i: usize,
    pub w_i: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn for_linear(inputs: usize, outputs: usize) -> Self {
        ConvGeom {
            k: 1,
            h_o: 1,
            w_o: 1,
            c_o: outputs,
            c_i: inputs,
            h_i: 1,
            w_i: 1,
            stride: 1,
            pad: 0,
        }
    }
}

/// Dense ANN FLOPs: `k^2 * H_o * W_o * C_o * C_i`.
pub fn flops_ann(g: &ConvGeom) -> f64 {
    (g.k * g.k * g.h_o * g.w_o * g.c_o * g.c_i) as f64
}

/// Compressed ANN FLOPs: dense times the layer's parameter density.
pub fn flops_ann_c(g: &ConvGeom, density: f64) -> f64 {
    flops_ann(g) * density
}

/// Uncompressed SNN FLOPs: dense times the spiking activity of the layer's
/// input.
pub fn flops_snn(g: &ConvGeom, zeta_in: f64) -> f64 {
    flops_ann(g) * zeta_in
}

/// Position-resolved compressed-SNN FLOPs:
/// `sum_{x,y,p,n,i,j} zeta[n, x*s+i-P, y*s+j-P] * m[p,n,i,j]`,
/// with the activity map zero outside the input bounds. `zeta_map` is the
/// per-position input activity `[C_i, H_i, W_i]`; `mask` the layer's prune
/// mask `[C_o, C_i, k, k]`.
pub fn flops_snn_c(g: &ConvGeom, zeta_map: &Tensor<f64>, mask: &PruneMask) -> Result<f64> {
    if zeta_map.numel() != g.c_i * g.h_i * g.w_i {
        return Err(Error::shape(
            "flops_snn_c",
            format!(
                "activity map has {} entries, geometry wants {}x{}x{}",
                zeta_map.numel(),
                g.c_i,
                g.h_i,
                g.w_i
            ),
        ));
    }
    if mask.shape() != [g.c_o, g.c_i, g.k, g.k] {
        return Err(Error::shape(
            "flops_snn_c",
            format!("mask {:?} vs geometry [{},{},{},{}]", mask.shape(), g.c_o, g.c_i, g.k, g.k),
        ));
    }
    // collapse the output-channel axis of the mask first
    let kk = g.k * g.k;
    let mut msum = vec![0.0f64; g.c_i * kk];
    for p in 0..g.c_o {
        for n in 0..g.c_i {
            for t in 0..kk {
                if mask.get((p * g.c_i + n) * kk + t) {
                    msum[n * kk + t] += 1.0;
                }
            }
        }
    }
    let zm = zeta_map.data();
    let mut total = 0.0f64;
    for n in 0..g.c_i {
        for i in 0..g.k {
            for j in 0..g.k {
                let ms = msum[n * kk + i * g.k + j];
                if ms == 0.0 {
                    continue;
                }
                let mut zsum = 0.0f64;
                for x in 0..g.h_o {
                    let ih = (x * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h_i as isize {
                        continue;
                    }
                    for y in 0..g.w_o {
                        let iw = (y * g.stride + j) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w_i as isize {
                            continue;
                        }
                        zsum += zm[(n * g.h_i + ih as usize) * g.w_i + iw as usize];
                    }
                }
                total += ms * zsum;
            }
        }
    }
    Ok(total)
}

/// Abstract energy per operation. Defaults: one AC unit, 32 units per MAC.
#[derive(Debug, Clone, Copy)]
pub struct EnergyModel {
    pub e_ac: f64,
    pub e_mac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_ac: 1.0, e_mac: 32.0 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > self.e_ac && self.e_ac > 0.0) {
            return Err(Error::Config(format!(
                "energy model needs e_mac > e_ac > 0, got {} / {}",
                self.e_mac, self.e_ac
            )));
        }
        Ok(())
    }
}

/// Per-layer FLOPs of one layer under all applicable variants.
#[derive(Debug, Clone)]
pub struct LayerFlops {
    pub name: String,
    pub density: f64,
    pub zeta_in: f64,
    pub ann: f64,
    pub ann_c: f64,
    pub snn: Option<f64>,
    pub snn_c: Option<f64>,
}

/// Total compute energy of an SNN run plus the per-layer breakdown.
///
/// Direct input bills the first layer at `FL_ANN_C * E_MAC` (it performs
/// multiply-accumulates on analog frames); every other layer, and every
/// layer under rate coding, bills `FL_SNN_C * E_AC`.
pub fn snn_energy(
    layers: &[LayerFlops],
    model: &EnergyModel,
    direct_input: bool,
) -> Result<(f64, Vec<(String, f64)>)> {
    model.validate()?;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut total = 0.0;
    for (i, l) in layers.iter().enumerate() {
        let snn_c = l
            .snn_c
            .ok_or_else(|| Error::Invariant(format!("layer {} missing position-resolved flops", l.name)))?;
        let e = if direct_input && i == 0 {
            l.ann_c * model.e_mac
        } else {
            snn_c * model.e_ac
        };
        per_layer.push((l.name.clone(), e));
        total += e;
    }
    Ok((total, per_layer))
}

/// Dense-ANN energy of the same architecture: every layer at full FLOPs and
/// MAC billing.
pub fn ann_energy(layers: &[LayerFlops], model: &EnergyModel) -> Result<f64> {
    model.validate()?;
    Ok(layers.iter().map(|l| l.ann * model.e_mac).sum())
}

/// Weight and channel compression ratios of a parameter set.
pub fn compression_ratios<F: crate::tensor::Scalar>(
    params: &[crate::model::ParamLayer<F>],
) -> (f64, f64) {
    let total: usize = params.iter().map(|p| p.weight.numel()).sum();
    let nnz: usize = params.iter().map(|p| p.mask.nnz()).sum();
    let weight_ratio = total as f64 / nnz.max(1) as f64;

    let mut chans = 0usize;
    let mut live = 0usize;
    for p in params {
        if p.weight.shape().len() != 4 {
            continue;
        }
        let fnorms = crate::sparse::channel_fnorm(&p.weight);
        chans += fnorms.len();
        live += fnorms.iter().filter(|&&f| f > 0.0).count();
    }
    let channel_ratio = if chans == 0 {
        1.0
    } else {
        chans as f64 / live.max(1) as f64
    };
    (weight_ratio, channel_ratio)
}

/// Write the per-layer metrics CSV. One row per (layer, FLOPs variant); the
/// `energy_units` column carries that variant's energy-equivalent under the
/// billing rules, so summing the `FL_SNN_C` rows reproduces the SNN energy
/// total.
pub fn write_metrics_csv(
    out: &mut impl Write,
    layers: &[LayerFlops],
    model: &EnergyModel,
    direct_input: bool,
) -> Result<()> {
    writeln!(out, "layer,density,zeta,flops_variant,energy_units")?;
    for (i, l) in layers.iter().enumerate() {
        let mut row = |variant: &str, energy: f64| -> Result<()> {
            writeln!(
                out,
                "{},{:.6},{:.6},{},{:.6}",
                l.name, l.density, l.zeta_in, variant, energy
            )?;
            Ok(())
        };
        row("FL_ANN", l.ann * model.e_mac)?;
        row("FL_ANN_C", l.ann_c * model.e_mac)?;
        if let Some(snn) = l.snn {
            row("FL_SNN", snn * model.e_ac)?;
        }
        if let Some(snn_c) = l.snn_c {
            let e = if direct_input && i == 0 {
                l.ann_c * model.e_mac
            } else {
                snn_c * model.e_ac
            };
            row("FL_SNN_C", e)?;
        }
    }
    Ok(())
}

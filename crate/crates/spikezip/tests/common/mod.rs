//! Shared test oracles, independent of the library's implementation paths.

#![allow(dead_code)]

use spikezip::tape::{OpTape, ValueRef};
use spikezip::tensor::Tensor;

/// Naive six-nested-loop convolution: the reference the optimized path must
/// match bit-for-bit in f64.
pub fn conv2d_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for ni in 0..n {
        for coi in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for cii in 0..ci {
                        for i in 0..k {
                            for j in 0..k {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * ci + cii) * h + ih as usize) * wd + iw as usize]
                                    * w.data()[((coi * ci + cii) * k + i) * k + j];
                            }
                        }
                    }
                    out.data_mut()[((ni * co + coi) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

/// Brute-force per-pixel attention map of one sample `[C,H,W]`.
pub fn attention_map_naive(a: &Tensor<f64>, p: u32) -> Vec<f64> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out[y * w + x] += a.data()[(ci * h + y) * w + x].abs().powi(p as i32);
            }
        }
    }
    out
}

/// Event-driven accumulate-operation counter: walks every input spike and
/// counts one op per (output position it reaches) x (unmasked weight).
pub fn event_driven_ops(
    counts: &Tensor<f64>, // [C_i,H_i,W_i] integer spike counts
    mask: &spikezip::sparse::PruneMask,
    c_o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_o: usize,
    w_o: usize,
) -> u64 {
    let (c_i, h_i, w_i) = (counts.shape()[0], counts.shape()[1], counts.shape()[2]);
    let kk = k * k;
    let mut ops = 0u64;
    for n in 0..c_i {
        for hi in 0..h_i {
            for wi in 0..w_i {
                let c = counts.data()[(n * h_i + hi) * w_i + wi];
                if c == 0.0 {
                    continue;
                }
                let c = c as u64;
                // every kernel application (x,y,i,j) that reads (hi,wi)
                for i in 0..k {
                    let xs = hi as isize + pad as isize - i as isize;
                    if xs < 0 || xs % stride as isize != 0 {
                        continue;
                    }
                    let x = (xs / stride as isize) as usize;
                    if x >= h_o {
                        continue;
                    }
                    for j in 0..k {
                        let ys = wi as isize + pad as isize - j as isize;
                        if ys < 0 || ys % stride as isize != 0 {
                            continue;
                        }
                        let y = (ys / stride as isize) as usize;
                        if y >= w_o {
                            continue;
                        }
                        for p in 0..c_o {
                            if mask.get((p * c_i + n) * kk + i * k + j) {
                                ops += c;
                            }
                        }
                    }
                }
            }
        }
    }
    ops
}

/// Central-difference gradient check. `build` reconstructs the computation
/// from scratch for every evaluation; the returned value is the worst
/// relative error across all elements of all inputs.
pub fn grad_check(
    build: &dyn Fn(&mut OpTape<f64>, &[ValueRef]) -> ValueRef,
    inputs: &[Tensor<f64>],
    h: f64,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = OpTape::new();
        let refs: Vec<ValueRef> = tensors.iter().map(|t| tape.value(t.clone())).collect();
        let out = build(&mut tape, &refs);
        tape.get(out).item()
    };
    // analytic gradients
    let mut tape = OpTape::new();
    let refs: Vec<ValueRef> = inputs.iter().map(|t| tape.value(t.clone())).collect();
    let out = build(&mut tape, &refs);
    assert_eq!(tape.get(out).numel(), 1, "grad_check needs a scalar output");
    let grads = tape.backward(out).expect("backward");

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zero(refs[ti], t.shape());
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            let rel = (a - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Random tensor in `(lo, hi)` from a seeded generator.
pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random tensor avoiding a margin around zero (for kinked ops).
pub fn rand_tensor_off_zero(
    shape: &[usize],
    margin: f64,
    rng: &mut impl rand::Rng,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(margin..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Hand-derived per-step gradients of a chain of spiking stages driven by
/// per-step head gradients. Everything is scalar arithmetic written straight
/// from the update equations; no library calls.
///
/// `stages[k] = (w, v_th, leak)`; `head` is the head weight column (one
/// entry per class); `frames` the scalar input per step; `c[t][class]` the
/// gradient of the loss with respect to the head input at step t.
pub struct HandChain {
    pub stages: Vec<(f64, f64, f64)>,
    pub head: Vec<f64>,
    pub gamma: f64,
}

pub struct HandGrads {
    pub dw: Vec<f64>,
    pub dhead: Vec<f64>,
    pub dvth: Vec<f64>,
    pub dleak: Vec<f64>,
    pub scores: Vec<f64>,
    pub spikes: Vec<Vec<f64>>, // [stage][t]
}

impl HandChain {
    pub fn run(&self, frames: &[f64], c: &[Vec<f64>]) -> HandGrads {
        let steps = frames.len();
        let k = self.stages.len();
        let classes = self.head.len();
        let surr = |z: f64| self.gamma * (1.0 - z.abs()).max(0.0);

        // forward, keeping every intermediate
        let mut u_prev = vec![vec![0.0; k]; steps + 1];
        let mut u_acc = vec![vec![0.0; k]; steps];
        let mut o = vec![vec![0.0; k]; steps];
        let mut scores = vec![0.0; classes];
        for t in 0..steps {
            let mut x = frames[t];
            for (s, &(w, vth, leak)) in self.stages.iter().enumerate() {
                let ua = leak * u_prev[t][s] + w * x;
                let spike = if ua > vth { 1.0 } else { 0.0 };
                u_acc[t][s] = ua;
                o[t][s] = spike;
                u_prev[t + 1][s] = ua - vth * spike;
                x = spike;
            }
            for cl in 0..classes {
                scores[cl] += self.head[cl] * x;
            }
        }

        // backward: per-step spatial chain only
        let mut dw = vec![0.0; k];
        let mut dhead = vec![0.0; classes];
        let mut dvth = vec![0.0; k];
        let mut dleak = vec![0.0; k];
        for t in 0..steps {
            let last_spike = o[t][k - 1];
            let mut g_o = 0.0;
            for cl in 0..classes {
                dhead[cl] += c[t][cl] * last_spike;
                g_o += c[t][cl] * self.head[cl];
            }
            // walk stages top-down
            for s in (0..k).rev() {
                let (w, vth, leak) = self.stages[s];
                let _ = leak;
                let z = u_acc[t][s] / vth - 1.0;
                let gz = g_o * surr(z);
                dvth[s] += gz * (-u_acc[t][s] / (vth * vth));
                let gu = gz / vth;
                dleak[s] += gu * u_prev[t][s];
                let input = if s == 0 { frames[t] } else { o[t][s - 1] };
                dw[s] += gu * input;
                g_o = gu * w;
            }
        }
        let spikes = (0..k).map(|s| (0..steps).map(|t| o[t][s]).collect()).collect();
        HandGrads {
            dw,
            dhead,
            dvth,
            dleak,
            scores,
            spikes,
        }
    }
}

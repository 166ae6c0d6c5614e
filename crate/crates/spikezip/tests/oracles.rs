//! Independent-oracle comparisons: naive reference implementations and
//! hand-derived gradient chains, written against the public API.

mod common;

use common::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikezip::encoding::{direct_encode, poisson_encode};
use spikezip::model::{build_model, Layer, ModelSpec};
use spikezip::snn::{snn_backward, snn_forward, BatchWindow, ForwardOptions, SnnModel};
use spikezip::sparse::largest_remainder;
use spikezip::tape::OpTape;
use spikezip::tensor::Tensor;

#[test]
fn conv2d_matches_naive_reference_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // the spec's shape plus a spread of geometries
    let cases = [
        (1usize, 3usize, 4usize, 4usize, 2usize, 3usize, 1usize, 0usize),
        (2, 2, 5, 5, 4, 3, 1, 1),
        (1, 1, 7, 6, 3, 2, 2, 0),
        (3, 4, 6, 6, 2, 3, 2, 1),
        (2, 3, 8, 8, 5, 1, 1, 0),
    ];
    for (n, ci, h, w, co, k, stride, pad) in cases {
        let x = rand_tensor(&[n, ci, h, w], -1.0, 1.0, &mut rng);
        let wt = rand_tensor(&[co, ci, k, k], -1.0, 1.0, &mut rng);
        let mut tape = OpTape::new();
        let xr = tape.value(x.clone());
        let wr = tape.value(wt.clone());
        let out = tape.conv2d(xr, wr, stride, pad).unwrap();
        let naive = conv2d_naive(&x, &wt, stride, pad);
        assert_eq!(tape.get(out).shape(), naive.shape());
        for (a, b) in tape.get(out).data().iter().zip(naive.data()) {
            assert_eq!(a, b, "conv2d differs from the naive reference");
        }
    }
}

#[test]
fn attention_map_matches_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[8, 5, 4], -2.0, 2.0, &mut rng);
    let got = spikezip::attention::attention_map_single(&a, 2).unwrap();
    let want = attention_map_naive(&a, 2);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn ag_loss_gradient_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let act = rand_tensor_off_zero(&[2, 3, 3, 3], 0.1, &mut rng);
    let guide = rand_tensor(&[2, 3, 3, 3], 0.05, 1.0, &mut rng);
    let qm = spikezip::attention::attention_map_batch(&guide, 2).unwrap();
    for squared in [false, true] {
        let worst = grad_check(
            &|tape, refs| {
                let q = tape.attention_map(refs[0], 2).unwrap();
                tape.ag_pair(q, &qm, squared).unwrap()
            },
            &[act.clone()],
            1e-5,
        );
        assert!(worst < 1e-5, "ag grad rel err {} (squared={})", worst, squared);
    }
}

#[test]
fn redistribution_quotas_match_largest_remainder_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let n = 1 + (case % 7);
        let total = rand::Rng::gen_range(&mut rng, 0..500usize);
        let targets: Vec<f64> = (0..n)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            .collect();
        let sum: f64 = targets.iter().sum();
        let scaled: Vec<f64> = targets.iter().map(|t| t / sum * total as f64).collect();
        let quotas = largest_remainder(&scaled, total);
        assert_eq!(quotas.iter().sum::<usize>(), total, "case {}", case);
        for (q, t) in quotas.iter().zip(&scaled) {
            // every quota is the floor or ceiling of its target
            assert!(
                *q as f64 >= t.floor() - 1e-9 && (*q as f64) <= t.ceil() + 1e-9,
                "quota {} for target {}",
                q,
                t
            );
        }
    }
}

fn chain_spec(stages: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for _ in 0..stages {
        layers.push(Layer::Linear { out_features: 1 });
        layers.push(Layer::Relu);
    }
    layers.push(Layer::Linear { out_features: 2 });
    ModelSpec {
        input: (1, 1, 1),
        classes: 2,
        layers,
    }
}

fn chain_model(stages: &[(f64, f64, f64)], head: &[f64]) -> SnnModel<f64> {
    let spec = chain_spec(stages.len());
    let mut state = build_model::<f64>(&spec, 0).unwrap();
    for (i, &(w, _, _)) in stages.iter().enumerate() {
        state.params[i].weight = Tensor::new(vec![1, 1], vec![w]).unwrap();
    }
    let hn = head.len();
    state.params[stages.len()].weight = Tensor::new(vec![hn, 1], head.to_vec()).unwrap();
    let mut model = SnnModel::from_ann(state, spec).unwrap();
    for (i, &(_, vth, leak)) in stages.iter().enumerate() {
        model.v_th[i] = vth;
        model.leak[i] = leak;
    }
    model
}

fn run_engine_chain(
    model: &SnnModel<f64>,
    frames: &[f64],
    c: &[Vec<f64>],
    gamma: f64,
) -> (Tensor<f64>, spikezip::snn::SnnGrads<f64>) {
    let window = BatchWindow::Poisson {
        frames: frames
            .iter()
            .map(|&x| Tensor::new(vec![1, 1, 1, 1], vec![x]).unwrap())
            .collect(),
    };
    let out = snn_forward(
        model,
        &window,
        &ForwardOptions {
            record_trace: true,
            dropout_masks: None,
        },
    )
    .unwrap();
    let d: Vec<Tensor<f64>> = c
        .iter()
        .map(|row| Tensor::new(vec![1, row.len()], row.clone()).unwrap())
        .collect();
    let grads = snn_backward(model, out.trace.as_ref().unwrap(), &d, gamma, None).unwrap();
    (out.scores, grads)
}

#[test]
fn bptt_matches_hand_derivation_one_neuron_t2() {
    let gamma = 0.3;
    let chain = HandChain {
        stages: vec![(0.8, 1.0, 0.9)],
        head: vec![0.5, -0.3],
        gamma,
    };
    let frames = [0.9, 1.1];
    let c = vec![vec![0.6, 0.2], vec![-0.4, 0.9]];
    let hand = chain.run(&frames, &c);
    // the system must actually spike somewhere for the test to mean anything
    assert_eq!(hand.spikes[0], vec![0.0, 1.0]);

    let model = chain_model(&chain.stages, &chain.head);
    let (scores, grads) = run_engine_chain(&model, &frames, &c, gamma);

    for (cl, s) in hand.scores.iter().enumerate() {
        assert!((scores.data()[cl] - s).abs() < 1e-12);
    }
    assert!((grads.weights[0].data()[0] - hand.dw[0]).abs() < 1e-10, "dw");
    for cl in 0..2 {
        assert!((grads.weights[1].data()[cl] - hand.dhead[cl]).abs() < 1e-10, "dhead");
    }
    assert!((grads.v_th[0] - hand.dvth[0]).abs() < 1e-10, "dvth");
    assert!((grads.leak[0] - hand.dleak[0]).abs() < 1e-10, "dleak");
}

#[test]
fn bptt_matches_hand_derivation_two_neurons_t3() {
    let gamma = 0.3;
    let chain = HandChain {
        stages: vec![(0.9, 0.8, 0.7), (0.65, 0.5, 0.9)],
        head: vec![0.4, -0.3],
        gamma,
    };
    let frames = [1.0, 0.4, 1.2];
    let c = vec![vec![0.3, -0.2], vec![-0.5, 0.7], vec![0.2, 0.1]];
    let hand = chain.run(&frames, &c);
    // both stages spike at least once, and at least one step stays quiet
    for s in &hand.spikes {
        assert!(s.iter().any(|&v| v == 1.0));
        assert!(s.iter().any(|&v| v == 0.0));
    }

    let model = chain_model(&chain.stages, &chain.head);
    let (scores, grads) = run_engine_chain(&model, &frames, &c, gamma);

    for (cl, s) in hand.scores.iter().enumerate() {
        assert!((scores.data()[cl] - s).abs() < 1e-12);
    }
    for s in 0..2 {
        assert!(
            (grads.weights[s].data()[0] - hand.dw[s]).abs() < 1e-10,
            "dw[{}]: {} vs {}",
            s,
            grads.weights[s].data()[0],
            hand.dw[s]
        );
        assert!((grads.v_th[s] - hand.dvth[s]).abs() < 1e-10, "dvth[{}]", s);
        assert!((grads.leak[s] - hand.dleak[s]).abs() < 1e-10, "dleak[{}]", s);
    }
    for cl in 0..2 {
        assert!((grads.weights[2].data()[cl] - hand.dhead[cl]).abs() < 1e-10);
    }
}

#[test]
fn snn_forward_matches_hand_unrolled_two_layer_t3() {
    // pure forward check of the same two-stage chain
    let chain = HandChain {
        stages: vec![(1.1, 0.9, 1.0), (0.8, 0.6, 0.8)],
        head: vec![0.25, 0.75],
        gamma: 0.3,
    };
    let frames = [0.9, 0.9, 0.9];
    let c = vec![vec![0.0, 0.0]; 3];
    let hand = chain.run(&frames, &c);
    let model = chain_model(&chain.stages, &chain.head);
    let (scores, _) = run_engine_chain(&model, &frames, &c, 0.3);
    for (cl, s) in hand.scores.iter().enumerate() {
        assert!((scores.data()[cl] - s).abs() < 1e-12);
    }
}

#[test]
fn poisson_mean_approaches_direct_frame() {
    // law-of-large-numbers check at T = 10^4, within 0.01 per pixel
    let steps = 10_000;
    let img = Tensor::<f64>::new(
        vec![1, 2, 2],
        vec![0.13, 0.42, 0.77, 0.98],
    )
    .unwrap();
    let win = poisson_encode(&img, steps, 8).unwrap();
    let direct = direct_encode(&img, steps).unwrap();
    let mut mean = vec![0.0; 4];
    for t in 0..steps {
        for (i, &v) in win.frame(t).data().iter().enumerate() {
            mean[i] += v;
        }
    }
    for (i, m) in mean.iter().enumerate() {
        let rate = m / steps as f64;
        assert!(
            (rate - direct.frame(0).data()[i]).abs() < 0.01,
            "pixel {}: rate {} vs {}",
            i,
            rate,
            direct.frame(0).data()[i]
        );
    }
}

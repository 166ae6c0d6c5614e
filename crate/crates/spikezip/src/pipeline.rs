//! Pipeline orchestration behind the four CLI commands.
//!
//! Each stage has an in-memory core (`run_*`) that the CLI wraps with file
//! loading, checkpoint persistence and CSV emission; tests and examples call
//! the cores directly.

use crate::attention::{ag_loss, auto_pairs, combined_loss, AttentionPairing};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{Normalize, RunConfig};
use crate::dataset::{load_dir, Dataset};
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::metrics::{
    ann_energy, compression_ratios, flops_ann, flops_ann_c, flops_snn, flops_snn_c, snn_energy,
    write_metrics_csv, LayerFlops, SpikeRecord,
};
use crate::model::{
    accuracy, ann_forward, build_model, forward_eval, sgd_momentum_step, ModelSpec, ModelState,
    Mode, SgdConfig,
};
use crate::rng::{Purpose, SeedSplitter};
use crate::snn::{
    calibrate_thresholds, encode_batch, snn_eval, snn_train_epoch, AdamState, SnnModel,
    SnnProgram,
};
use crate::sparse::{epoch_update, init_masks, linear_decay, Diagnostics, SparsitySchedule};
use crate::tape::OpTape;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Input preparation for a stage: Poisson rates need raw intensities, every
/// other consumer sees the configured normalization. The ANN trains on
/// whatever the SNN will see, so conversion is consistent.
pub fn stage_normalize(cfg: &RunConfig) -> Normalize {
    match cfg.snn.encoding {
        Encoding::Poisson => Normalize::None,
        Encoding::Direct => cfg.normalize,
    }
}

fn prepared_inputs(cfg: &RunConfig, ds: &Dataset, stats: &(Vec<f64>, Vec<f64>)) -> Tensor<f32> {
    ds.prepared(stage_normalize(cfg), stats)
}

fn slice_batch(images: &Tensor<f32>, order: &[usize]) -> Result<Tensor<f32>> {
    let per = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(order.len() * per);
    for &s in order {
        data.extend_from_slice(&images.data()[s * per..(s + 1) * per]);
    }
    let mut shape = vec![order.len()];
    shape.extend_from_slice(&images.shape()[1..]);
    Tensor::new(shape, data)
}

/// Batched tape-free evaluation accuracy.
pub fn eval_ann(
    state: &ModelState<f32>,
    spec: &ModelSpec,
    images: &Tensor<f32>,
    labels: &[usize],
    batch: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    let mut hits = 0.0;
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let b = slice_batch(images, &idx)?;
        let (logits, _) = forward_eval(state, spec, &b)?;
        hits += accuracy(&logits, &labels[start..end]) * (end - start) as f64;
    }
    Ok(hits / n as f64)
}

/// One epoch line of the ANN log.
#[derive(Debug, Clone)]
pub struct AnnEpochRow {
    pub epoch: usize,
    pub ce: f64,
    pub ag: f64,
    pub loss: f64,
    pub test_acc: f64,
    pub density: f64,
    pub active_before_update: usize,
    pub active_after_update: usize,
    pub freed: usize,
    pub regrown: usize,
    pub per_layer: Vec<crate::sparse::LayerSparsity>,
}

/// Outcome of the ANN stage.
pub struct AnnRunReport {
    pub rows: Vec<AnnEpochRow>,
    pub final_test_acc: f64,
    pub diag: Diagnostics,
}

/// Attention-guided sparse ANN training.
pub fn run_train_ann(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    meta: Option<&Checkpoint>,
) -> Result<(ModelState<f32>, ModelSpec, AnnRunReport)> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    train.check_labels(cfg.classes)?;
    test.check_labels(cfg.classes)?;
    if train.geometry() != cfg.input {
        return Err(Error::Data(format!(
            "dataset geometry {:?} vs model input {:?}",
            train.geometry(),
            cfg.input
        )));
    }

    let meta_parts = match (cfg.alpha > 0.0, meta) {
        (true, Some(ck)) => {
            let mspec = ck.spec.clone();
            let mstate = ck.to_model_state()?;
            let pairs = auto_pairs(&spec, &mspec)?;
            Some((mstate, mspec, pairs))
        }
        (true, None) => {
            return Err(Error::Config(
                "attn.alpha > 0 needs a meta-model checkpoint (--meta); set attn.alpha=0 to train without guidance".into(),
            ))
        }
        (false, _) => None,
    };
    let pairing = meta_parts.as_ref().map(|(_, _, pairs)| AttentionPairing {
        pairs: pairs.clone(),
        power: cfg.power,
        alpha: cfg.alpha,
        cutoff_epoch: cfg.epsilon,
        norm: cfg.ag_norm,
    });

    let stats = train.channel_stats();
    let train_inputs = prepared_inputs(cfg, train, &stats);
    let test_inputs = prepared_inputs(cfg, test, &stats);

    let mut state = build_model::<f32>(&spec, cfg.seed)?;
    let mut diag = Diagnostics::default();
    let schedule = SparsitySchedule {
        density: cfg.density,
        p0: cfg.p0,
        epochs: cfg.ann.epochs,
        mode: cfg.mode,
    };
    let sparse_active = cfg.density < 1.0;
    if sparse_active {
        init_masks(&mut state, &schedule, cfg.seed, &mut diag)?;
    }

    let sgd = SgdConfig {
        lr: cfg.ann.lr,
        momentum: cfg.ann.momentum,
        weight_decay: cfg.ann.weight_decay,
        milestones: cfg.ann.milestones.clone(),
    };
    sgd.validate()?;

    let splitter = SeedSplitter::new(cfg.seed);
    let n = train.len();
    let total_weights = state.total_weights();
    let mut rows = Vec::with_capacity(cfg.ann.epochs);

    for epoch in 0..cfg.ann.epochs {
        let lr = sgd.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = splitter.rng(Purpose::Shuffle, epoch as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut srng, 0..=i);
            order.swap(i, j);
        }
        let ag_on = pairing.as_ref().map(|p| p.active(epoch)).unwrap_or(false);
        let mut ce_sum = 0.0;
        let mut ag_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for (bi, chunk) in order.chunks(cfg.ann.batch).enumerate() {
            let batch = slice_batch(&train_inputs, chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&s| train.labels[s]).collect();

            let mut tape = OpTape::new();
            let mut drng = splitter.rng(Purpose::Dropout, ((epoch as u64) << 32) | bi as u64);
            let fwd = ann_forward(&mut tape, &state, &spec, &batch, Mode::Train, &mut drng)?;
            let ce = tape.softmax_cross_entropy(fwd.logits, &targets)?;
            let ce_val = tape.get(ce).item() as f64;

            let (loss_ref, ag_val) = if ag_on {
                let (mstate, mspec, _) = meta_parts.as_ref().expect("meta required when ag is on");
                let (_, macts32) = forward_eval(mstate, mspec, &batch)?;
                let p = pairing.as_ref().expect("pairing");
                let ag = ag_loss(&mut tape, &fwd.activations, &macts32, p, &mut diag)?;
                let ag_val = tape.get(ag).item() as f64;
                (combined_loss(&mut tape, ce, Some(ag), epoch, cfg.epsilon)?, ag_val)
            } else {
                (ce, 0.0)
            };
            let loss_val = tape.get(loss_ref).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch, bi
                )));
            }

            let grads = tape.backward(loss_ref)?;
            let wgrads: Vec<Tensor<f32>> = fwd
                .weight_refs
                .iter()
                .zip(&state.params)
                .map(|(r, p)| grads.wrt_or_zero(*r, p.weight.shape()))
                .collect();
            sgd_momentum_step(&mut state, &wgrads, &sgd, lr)?;

            ce_sum += ce_val;
            ag_sum += ag_val;
            loss_sum += loss_val;
            batches += 1;
        }

        let active_before = state.active_weights();
        let (freed, regrown, per_layer) = if sparse_active {
            let p_i = linear_decay(cfg.p0, epoch, cfg.ann.epochs);
            let rep = epoch_update(&mut state, cfg.mode, p_i, &mut diag)?;
            (rep.freed, rep.regrown, rep.per_layer)
        } else {
            (0, 0, Vec::new())
        };
        let active_after = state.active_weights();

        let test_acc = eval_ann(&state, &spec, &test_inputs, &test.labels, 256)?;
        rows.push(AnnEpochRow {
            epoch,
            ce: ce_sum / batches.max(1) as f64,
            ag: ag_sum / batches.max(1) as f64,
            loss: loss_sum / batches.max(1) as f64,
            test_acc,
            density: active_after as f64 / total_weights as f64,
            active_before_update: active_before,
            active_after_update: active_after,
            freed,
            regrown,
            per_layer,
        });
    }

    let final_test_acc = rows.last().map(|r| r.test_acc).unwrap_or(0.0);
    Ok((
        state,
        spec,
        AnnRunReport {
            rows,
            final_test_acc,
            diag,
        },
    ))
}

/// Outcome of conversion.
pub struct ConvertReport {
    pub v_th: Vec<f64>,
    /// Raw-conversion test accuracy at the configured T.
    pub test_acc: f64,
    pub diag: Diagnostics,
}

/// ANN-to-SNN conversion: copy weights and masks, calibrate thresholds
/// sequentially on a calibration batch, initialize leaks to one.
pub fn run_convert(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
) -> Result<(SnnModel<f32>, ConvertReport)> {
    if ckpt.stage != Stage::Ann {
        return Err(Error::Checkpoint(format!(
            "convert wants an ann-stage checkpoint, got {:?} (converting twice is rejected)",
            ckpt.stage.name()
        )));
    }
    let state = ckpt.to_model_state()?;
    let mut model = SnnModel::from_ann(state, ckpt.spec.clone())?;

    let stats = train.channel_stats();
    let train_inputs = prepared_inputs(cfg, train, &stats);

    // deterministic calibration subset of the training images
    let splitter = SeedSplitter::new(cfg.seed);
    let n = train.len();
    let take = cfg.calib.batch.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = splitter.rng(Purpose::Data, 0xCA11B);
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    order.truncate(take);
    let calib = slice_batch(&train_inputs, &order)?;
    let window = encode_batch(
        &calib,
        cfg.snn.encoding,
        cfg.snn.steps,
        splitter.seed(Purpose::Poisson, 0xCA11B),
    )?;

    let mut diag = Diagnostics::default();
    let v_th = calibrate_thresholds(&mut model, &window, cfg.calib.percentile, cfg.calib.scale, &mut diag)?;
    for l in model.leak.iter_mut() {
        *l = 1.0;
    }

    let test_inputs = prepared_inputs(cfg, test, &stats);
    let (test_acc, _) = snn_eval(&model, &test_inputs, &test.labels, &cfg.snn, cfg.seed)?;

    Ok((model, ConvertReport { v_th, test_acc, diag }))
}

/// One epoch line of the SNN log.
#[derive(Debug, Clone)]
pub struct SnnEpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

pub struct SnnRunReport {
    pub rows: Vec<SnnEpochRow>,
    pub final_test_acc: f64,
    /// Set when the configured T differs from the calibration T.
    pub t_mismatch_warning: Option<String>,
}

/// Sparse-learning SNN fine-tuning from a converted (or snn) checkpoint.
pub fn run_train_snn(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
) -> Result<(SnnModel<f32>, SnnRunReport)> {
    if ckpt.stage == Stage::Ann {
        return Err(Error::Checkpoint(
            "train-snn wants a converted or snn checkpoint; run convert first".into(),
        ));
    }
    let mut model = ckpt.to_snn_model()?;
    let t_mismatch_warning = if ckpt.calib_steps != 0 && ckpt.calib_steps as usize != cfg.snn.steps {
        Some(format!(
            "snn.timesteps = {} differs from calibration T = {}; thresholds may be miscalibrated",
            cfg.snn.steps, ckpt.calib_steps
        ))
    } else {
        None
    };

    let stats = train.channel_stats();
    let train_inputs = prepared_inputs(cfg, train, &stats);
    let test_inputs = prepared_inputs(cfg, test, &stats);

    let mut adam = AdamState::new(&model);
    let mut initial_loss = None;
    let mut rows = Vec::with_capacity(cfg.snn_epochs);
    for epoch in 0..cfg.snn_epochs {
        let m = snn_train_epoch(
            &mut model,
            &mut adam,
            &train_inputs,
            &train.labels,
            &cfg.snn,
            epoch,
            cfg.seed,
            &mut initial_loss,
        )?;
        let (test_acc, _) = snn_eval(&model, &test_inputs, &test.labels, &cfg.snn, cfg.seed)?;
        rows.push(SnnEpochRow {
            epoch,
            mean_loss: m.mean_loss,
            test_acc,
            lr: cfg.snn.lr_at(epoch),
        });
    }
    let final_test_acc = match rows.last() {
        Some(r) => r.test_acc,
        None => snn_eval(&model, &test_inputs, &test.labels, &cfg.snn, cfg.seed)?.0,
    };
    Ok((
        model,
        SnnRunReport {
            rows,
            final_test_acc,
            t_mismatch_warning,
        },
    ))
}

/// Everything the profile command measures.
pub struct ProfileReport {
    pub stage: Stage,
    pub layers: Vec<LayerFlops>,
    pub weight_ratio: f64,
    pub channel_ratio: f64,
    pub accuracy: f64,
    pub energy_snn: Option<f64>,
    pub energy_per_layer: Vec<(String, f64)>,
    pub energy_ann_dense: f64,
    pub direct_input: bool,
    pub record: Option<SpikeRecord>,
}

/// Profile a checkpoint on (a slice of) the test set: spike activity,
/// all FLOPs variants, energy totals, compression ratios. Read-only.
pub fn run_profile(cfg: &RunConfig, ckpt: &Checkpoint, test: &Dataset) -> Result<ProfileReport> {
    let program = SnnProgram::compile(&ckpt.spec)?;
    let geoms = program.weighted_geoms().to_vec();
    let state = ckpt.to_model_state()?;
    let densities: Vec<f64> = state
        .params
        .iter()
        .map(|p| p.mask.nnz() as f64 / p.weight.numel() as f64)
        .collect();
    let (weight_ratio, channel_ratio) = compression_ratios(&state.params);

    let stats = test.channel_stats();
    let take = cfg.profile_batch.min(test.len());
    let idx: Vec<usize> = (0..take).collect();
    let labels = &test.labels[..take];
    let direct_input = cfg.snn.encoding == Encoding::Direct;

    let mut layers: Vec<LayerFlops> = geoms
        .iter()
        .zip(&state.params)
        .zip(&densities)
        .map(|((g, p), &d)| LayerFlops {
            name: p.name.clone(),
            density: d,
            zeta_in: 0.0,
            ann: flops_ann(g),
            ann_c: flops_ann_c(g, d),
            snn: None,
            snn_c: None,
        })
        .collect();
    let energy_ann_dense = ann_energy(&layers, &cfg.energy)?;

    if ckpt.stage == Stage::Ann {
        let inputs = slice_batch(&test.prepared(cfg.normalize, &stats), &idx)?;
        let acc = eval_ann(&state, &ckpt.spec, &inputs, labels, 256)?;
        return Ok(ProfileReport {
            stage: ckpt.stage,
            layers,
            weight_ratio,
            channel_ratio,
            accuracy: acc,
            energy_snn: None,
            energy_per_layer: Vec::new(),
            energy_ann_dense,
            direct_input,
            record: None,
        });
    }

    let model = ckpt.to_snn_model()?;
    let mut snn_cfg = cfg.snn.clone();
    if ckpt.calib_steps != 0 {
        snn_cfg.steps = ckpt.calib_steps as usize;
    }
    let prepared = prepared_inputs(cfg, test, &stats);
    let inputs = slice_batch(&prepared, &idx)?;
    let (acc, record) = snn_eval(&model, &inputs, labels, &snn_cfg, cfg.seed)?;

    for (w, layer) in layers.iter_mut().enumerate() {
        let zeta_in = record.input_zeta(w);
        layer.zeta_in = zeta_in;
        layer.snn = Some(flops_snn(&geoms[w], zeta_in));
        let activity = record.input_activity(w);
        layer.snn_c = Some(flops_snn_c(&geoms[w], &activity, &state.params[w].mask)?);
    }
    let (energy_snn, energy_per_layer) = snn_energy(&layers, &cfg.energy, direct_input)?;

    Ok(ProfileReport {
        stage: ckpt.stage,
        layers,
        weight_ratio,
        channel_ratio,
        accuracy: acc,
        energy_snn: Some(energy_snn),
        energy_per_layer,
        energy_ann_dense,
        direct_input,
        record: Some(record),
    })
}

// ---------------------------------------------------------------------------
// file-backed command wrappers

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(std::fs::File::create(path)?)
}

fn write_ann_logs(dir: &Path, report: &AnnRunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut log = create(&dir.join("train_log.csv"))?;
    writeln!(log, "epoch,ce,ag,loss,test_acc,density")?;
    for r in &report.rows {
        writeln!(
            log,
            "{},{:.6},{:.6},{:.6},{:.4},{:.6}",
            r.epoch, r.ce, r.ag, r.loss, r.test_acc, r.density
        )?;
    }
    let mut sp = create(&dir.join("sparsity.csv"))?;
    writeln!(sp, "epoch,layer,density,pruned,regrown")?;
    for r in &report.rows {
        for l in &r.per_layer {
            writeln!(
                sp,
                "{},{},{:.6},{},{}",
                r.epoch,
                l.name,
                l.active as f64 / l.total as f64,
                l.pruned,
                l.regrown
            )?;
        }
    }
    Ok(())
}

/// `train-ann --config F [--meta CKPT]`
pub fn cmd_train_ann(
    cfg: &RunConfig,
    meta_path: Option<&Path>,
    out: &Path,
    log_dir: &Path,
) -> Result<AnnRunReport> {
    let (train, test) = load_dir(&cfg.data_dir, cfg.data_format)?;
    let meta = meta_path.map(Checkpoint::load).transpose()?;
    let (state, spec, report) = run_train_ann(cfg, &train, &test, meta.as_ref())?;
    let ck = Checkpoint::from_ann(&state, &spec, cfg.mode, cfg.hash());
    ck.save(out)?;
    write_ann_logs(log_dir, &report)?;
    Ok(report)
}

/// `convert --in CKPT --config F`
pub fn cmd_convert(cfg: &RunConfig, input: &Path, out: &Path) -> Result<ConvertReport> {
    let ckpt = Checkpoint::load(input)?;
    let (train, test) = load_dir(&cfg.data_dir, cfg.data_format)?;
    let (model, report) = run_convert(cfg, &ckpt, &train, &test)?;
    let ck = Checkpoint::from_snn(
        &model,
        Stage::Converted,
        ckpt.mode,
        cfg.hash(),
        cfg.snn.steps as u32,
    );
    ck.save(out)?;
    Ok(report)
}

/// `train-snn --in CKPT --config F`
pub fn cmd_train_snn(cfg: &RunConfig, input: &Path, out: &Path, log_dir: &Path) -> Result<SnnRunReport> {
    let ckpt = Checkpoint::load(input)?;
    let (train, test) = load_dir(&cfg.data_dir, cfg.data_format)?;
    let (model, report) = run_train_snn(cfg, &ckpt, &train, &test)?;
    if let Some(w) = &report.t_mismatch_warning {
        eprintln!("warning: {}", w);
    }
    let ck = Checkpoint::from_snn(&model, Stage::Snn, ckpt.mode, cfg.hash(), ckpt.calib_steps);
    ck.save(out)?;
    std::fs::create_dir_all(log_dir)?;
    let mut log = create(&log_dir.join("snn_log.csv"))?;
    writeln!(log, "epoch,mean_loss,test_acc,lr")?;
    for r in &report.rows {
        writeln!(log, "{},{:.6},{:.4},{:.6}", r.epoch, r.mean_loss, r.test_acc, r.lr)?;
    }
    Ok(report)
}

/// `profile --in CKPT --data D --out DIR`
pub fn cmd_profile(cfg: &RunConfig, input: &Path, data_dir: &Path, out_dir: &Path) -> Result<ProfileReport> {
    let ckpt = Checkpoint::load(input)?;
    let mut cfg = cfg.clone();
    cfg.data_dir = data_dir.to_path_buf();
    let (_, test) = load_dir(&cfg.data_dir, cfg.data_format)?;
    let report = run_profile(&cfg, &ckpt, &test)?;

    std::fs::create_dir_all(out_dir)?;
    let mut metrics = create(&out_dir.join("metrics.csv"))?;
    write_metrics_csv(&mut metrics, &report.layers, &cfg.energy, report.direct_input)?;

    let mut summary = create(&out_dir.join("summary.csv"))?;
    writeln!(summary, "key,value")?;
    writeln!(summary, "stage,{}", report.stage.name())?;
    writeln!(summary, "accuracy,{:.4}", report.accuracy)?;
    writeln!(summary, "weight_compression_ratio,{:.4}", report.weight_ratio)?;
    writeln!(summary, "channel_compression_ratio,{:.4}", report.channel_ratio)?;
    let tot = |f: &dyn Fn(&LayerFlops) -> f64| report.layers.iter().map(|l| f(l)).sum::<f64>();
    writeln!(summary, "total_fl_ann,{:.2}", tot(&|l| l.ann))?;
    writeln!(summary, "total_fl_ann_c,{:.2}", tot(&|l| l.ann_c))?;
    if report.energy_snn.is_some() {
        writeln!(summary, "total_fl_snn,{:.2}", tot(&|l| l.snn.unwrap_or(0.0)))?;
        writeln!(summary, "total_fl_snn_c,{:.2}", tot(&|l| l.snn_c.unwrap_or(0.0)))?;
    }
    if let Some(e) = report.energy_snn {
        writeln!(summary, "energy_snn_units,{:.2}", e)?;
        writeln!(summary, "energy_ratio_vs_dense_ann,{:.2}", report.energy_ann_dense / e)?;
    }
    writeln!(summary, "energy_ann_dense_units,{:.2}", report.energy_ann_dense)?;
    Ok(report)
}

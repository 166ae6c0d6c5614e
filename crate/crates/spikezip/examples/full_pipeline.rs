//! End-to-end run on the bundled toy dataset: train a dense meta model,
//! train a compressed ANN under attention guidance, convert it to an SNN
//! with calibrated thresholds, fine-tune the SNN, and compare energy.
//!
//! ```bash
//! cargo run --release -p spikezip --example full_pipeline
//! ```

use spikezip::checkpoint::{Checkpoint, Stage};
use spikezip::config::RunConfig;
use spikezip::dataset::{generate_toy, ToyConfig};
use spikezip::pipeline::{run_convert, run_profile, run_train_ann, run_train_snn};

fn main() -> spikezip::Result<()> {
    let (train, test) = generate_toy(&ToyConfig::default())?;
    println!("toy dataset: {} train / {} test samples", train.len(), test.len());

    // compressed-run configuration, desk-scale schedules
    let cfg = RunConfig::parse(
        "seed=42\n\
         model=vgg-mini\n\
         model.input=1x8x8\n\
         model.classes=10\n\
         prune.mode=irregular\n\
         prune.density=0.1\n\
         ann.epochs=30\n\
         ann.lr=0.02\n\
         ann.milestones=18:0.1,25:0.1\n\
         snn.timesteps=10\n\
         snn.epochs=5\n\
         snn.lr=2e-3\n\
         snn.milestones=3:0.5\n\
         attn.alpha=100\n\
         attn.epsilon=100\n",
    )?;

    // the meta model: an unpruned run of the same architecture
    let mut meta_cfg = cfg.clone();
    meta_cfg.alpha = 0.0;
    meta_cfg.density = 1.0;
    meta_cfg.ann.epochs = 15;
    meta_cfg.ann.milestones = vec![(10, 0.1)];
    println!("== meta model (dense) ==");
    let (meta_state, meta_spec, meta_rep) = run_train_ann(&meta_cfg, &train, &test, None)?;
    println!("meta test accuracy: {:.2}%", meta_rep.final_test_acc * 100.0);
    let meta_ck = Checkpoint::from_ann(&meta_state, &meta_spec, meta_cfg.mode, meta_cfg.hash());

    println!("== compressed ANN (density {}) ==", cfg.density);
    let (state, spec, ann_rep) = run_train_ann(&cfg, &train, &test, Some(&meta_ck))?;
    println!("compressed ANN test accuracy: {:.2}%", ann_rep.final_test_acc * 100.0);
    let ann_ck = Checkpoint::from_ann(&state, &spec, cfg.mode, cfg.hash());

    println!("== conversion ==");
    let (snn, conv_rep) = run_convert(&cfg, &ann_ck, &train, &test)?;
    println!(
        "thresholds: [{}]",
        conv_rep.v_th.iter().map(|v| format!("{:.3}", v)).collect::<Vec<_>>().join(", ")
    );
    println!(
        "raw conversion accuracy at T={}: {:.2}%",
        cfg.snn.steps,
        conv_rep.test_acc * 100.0
    );
    let conv_ck = Checkpoint::from_snn(&snn, Stage::Converted, cfg.mode, cfg.hash(), cfg.snn.steps as u32);

    println!("== SNN fine-tuning ==");
    let (snn_model, snn_rep) = run_train_snn(&cfg, &conv_ck, &train, &test)?;
    for r in &snn_rep.rows {
        println!(
            "epoch {}: loss {:.4}, test accuracy {:.2}%",
            r.epoch,
            r.mean_loss,
            r.test_acc * 100.0
        );
    }
    println!(
        "fine-tuned SNN accuracy: {:.2}% (raw conversion was {:.2}%)",
        snn_rep.final_test_acc * 100.0,
        conv_rep.test_acc * 100.0
    );

    let snn_ck = Checkpoint::from_snn(&snn_model, Stage::Snn, cfg.mode, cfg.hash(), cfg.snn.steps as u32);
    let profile = run_profile(&cfg, &snn_ck, &test)?;
    println!("== profile ==");
    println!(
        "weight compression {:.1}x, channel compression {:.2}x",
        profile.weight_ratio, profile.channel_ratio
    );
    if let Some(e) = profile.energy_snn {
        println!(
            "energy: compressed SNN {:.0} units vs dense ANN {:.0} units ({:.1}x better)",
            e,
            profile.energy_ann_dense,
            profile.energy_ann_dense / e
        );
    }
    Ok(())
}

use spikezip::checkpoint::{Checkpoint, Stage};
use spikezip::config::RunConfig;
use spikezip::dataset::{generate_toy, ToyConfig};
use spikezip::pipeline::{run_convert, run_train_ann, run_train_snn};

fn main() -> spikezip::Result<()> {
    let (train, test) = generate_toy(&ToyConfig::default())?;
    let base = "model=vgg-mini\nmodel.input=1x8x8\nmodel.classes=10\nprune.density=0.1\nann.epochs=12\nann.milestones=none\nsnn.epochs=5\nsnn.milestones=3:0.5\n";

    let mut meta_cfg = RunConfig::parse(base)?;
    meta_cfg.alpha = 0.0;
    meta_cfg.density = 1.0;
    meta_cfg.ann.epochs = 10;
    meta_cfg.ann.lr = 0.02;
    let (ms, mp, mr) = run_train_ann(&meta_cfg, &train, &test, None)?;
    println!("meta acc {:.3}", mr.final_test_acc);
    let meta = Checkpoint::from_ann(&ms, &mp, meta_cfg.mode, meta_cfg.hash());

    // winner config through the full pipeline
    let mut cfg = RunConfig::parse(base)?;
    cfg.alpha = 10.0;
    cfg.ann.lr = 0.01;
    cfg.ann.epochs = 30;
    let (st, sp, rep) = run_train_ann(&cfg, &train, &test, Some(&meta))?;
    println!("agc ann acc {:.3}", rep.final_test_acc);
    let ck = Checkpoint::from_ann(&st, &sp, cfg.mode, cfg.hash());
    for snn_lr in [2e-3, 5e-3, 1e-2] {
        let mut c2 = cfg.clone();
        c2.snn.lr = snn_lr;
        let (snn, conv) = run_convert(&c2, &ck, &train, &test)?;
        let cck = Checkpoint::from_snn(&snn, Stage::Converted, c2.mode, c2.hash(), 10);
        let (_, srep) = run_train_snn(&c2, &cck, &train, &test)?;
        let accs: Vec<String> = srep.rows.iter().map(|r| format!("{:.3}", r.test_acc)).collect();
        println!(
            "snn lr={}: conv acc {:.3} -> snn accs [{}]",
            snn_lr,
            conv.test_acc,
            accs.join(",")
        );
    }
    Ok(())
}

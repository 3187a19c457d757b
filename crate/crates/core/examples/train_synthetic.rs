//! Small end-to-end run: k-fold training on synthetic textures, evaluation of
//! the best checkpoint, a save/load round trip and the report files.
//!
//! Uses a reduced image size so it finishes in seconds; pass `full` to train
//! the desk-scale model instead (several minutes).

use multifusion::harness::cli::write_run;
use multifusion::harness::{
    build_report, evaluate_model, generate_synthetic_dataset, load_checkpoint, train_model, Checkpoint, TrainConfig,
};
use multifusion::textknow::Fixture;

fn main() -> multifusion::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let full = std::env::args().any(|a| a == "full");
    let cfg = if full {
        TrainConfig { batch: 4, lr: 3e-3, epochs: 12, max_folds: Some(1), ..TrainConfig::desk_scale() }
    } else {
        TrainConfig {
            d: 8,
            image_size: 32,
            patch_sizes: vec![8, 16],
            knn: vec![3, 2],
            ode_heads: 2,
            ode_steps: 4,
            heads: 2,
            d_h: 4,
            batch: 4,
            lr: 1e-2,
            epochs: 8,
            folds: 5,
            max_folds: Some(1),
            ..TrainConfig::default()
        }
    };
    let ds = generate_synthetic_dataset(3, 10, if full { 112 } else { 32 }, 7)?;
    let outcome = train_model(&ds, &cfg, &Fixture::bundled())?;
    let fold = &outcome.folds[0];
    let model = &fold.checkpoint.model;
    println!("best epoch {} of {}", fold.checkpoint.epoch, fold.epochs_run);
    println!("train top1 {:.3}", evaluate_model(model, &ds, &fold.fold.train)?.top1());
    println!("held-out top1 {:.3}", evaluate_model(model, &ds, &fold.fold.val)?.top1());

    let dir = tempfile_dir()?;
    write_run(&outcome, &dir)?;
    let back: Checkpoint<f32> = load_checkpoint(&dir.join("fold0.ckpt"))?;
    println!("checkpoint round trip equal: {}", back == fold.checkpoint);
    let files = build_report(&dir)?;
    println!("report: {} and {} charts under {}", files.summary.display(), files.plots.len(), dir.display());
    Ok(())
}

fn tempfile_dir() -> multifusion::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("multifusion-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

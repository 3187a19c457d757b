//! The layered fusion network on one image: per layer, a patch sequence and
//! a vision graph are encoded and mixed by a two-expert gate.

use multifusion::harness::{generate_synthetic_dataset, TrainConfig};
use multifusion::hnf::{hnf_forward, init_hnf};
use multifusion::nn;
use multifusion::patcher::preprocess_image;

fn main() -> multifusion::Result<()> {
    let cfg = TrainConfig::desk_scale().hnf();
    println!("layers {:?}, d = {}", cfg.layers, cfg.d);
    let params = init_hnf::<f32>(&cfg, &mut nn::rng(0))?;
    println!("{} tensors, {} parameters", params.len(), params.numel());

    let ds = generate_synthetic_dataset(3, 1, 112, 7)?;
    let img = preprocess_image::<f32>(&ds.items[0].0, cfg.image_size)?;
    let t = std::time::Instant::now();
    let out = hnf_forward(&img, &params, &cfg)?;
    println!("fused embedding {:?} in {:.2?}", out.h_fus.shape(), t.elapsed());
    for (i, [sequence, graph]) in out.gate_history.iter().enumerate() {
        println!("layer {i}: gate weights sequence {sequence:.3}, graph {graph:.3}");
    }
    Ok(())
}

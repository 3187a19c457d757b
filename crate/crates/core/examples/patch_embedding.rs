//! Multi-scale patch tokenization: resize a raster, cut it into 16/28/32
//! pixel patches and embed each scale as a cls-prefixed token sequence.

use multifusion::harness::generate_synthetic_dataset;
use multifusion::nn;
use multifusion::patcher::{build_scale_pyramid, init_pyramid, patch_count, preprocess_image, tokenize_patches};

fn main() -> multifusion::Result<()> {
    let ds = generate_synthetic_dataset(3, 1, 150, 1)?;
    let (micrograph, label) = &ds.items[0];
    let img = preprocess_image::<f32>(micrograph, 224)?;
    println!("raw {:?} -> preprocessed {:?} (label {})", micrograph.pixels.shape(), img.shape(), ds.label_map[*label]);

    let sizes = [16, 28, 32];
    for p in sizes {
        let patches = tokenize_patches(&img, p)?;
        println!("p = {p:2}: {} patches of {} values", patch_count(224, p)?, patches.shape()[1]);
    }
    let scales = init_pyramid::<f32>(&mut nn::rng(3), &sizes, 1, 224, 16)?;
    for seq in build_scale_pyramid(&img, &scales)? {
        println!("scale {} (p = {}): tokens {:?}", seq.scale_index, seq.patch_size, seq.tokens.shape());
    }
    Ok(())
}

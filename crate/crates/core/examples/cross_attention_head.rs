//! Cross-modal attention between the matched text embedding and the fused
//! image embedding, followed by the softmax classifier.

use multifusion::fusionhead::{classify, cross_modal_attention, FusionConfig, FusionParams};
use multifusion::nn::{self, uniform};
use multifusion::diffcore::Tensor;

fn main() -> multifusion::Result<()> {
    let mut r = nn::rng(0);
    let (d, classes) = (64, 10);
    let params = FusionParams::<f64>::init(&mut r, FusionConfig::default(), d, classes)?;
    for (name, t) in [("W_q (text)", &params.text.wq), ("W_o", &params.wo), ("classifier", &params.classifier)] {
        println!("{name}: {:?}", t.shape());
    }
    let h_text: Tensor<f64> = uniform(&mut r, &[1, d], 1.0);
    let h_fus: Tensor<f64> = uniform(&mut r, &[1, d], 1.0);
    let att = cross_modal_attention(&h_text, &h_fus, &params)?;
    for (h, [text, image]) in att.weights.iter().enumerate() {
        println!("head {h}: attends text {text:.3}, image {image:.3}");
    }
    let (probs, pred) = classify(&att.y, &params.classifier)?;
    println!("class {pred}, probabilities sum to {:.12}", probs.iter().sum::<f64>());
    Ok(())
}

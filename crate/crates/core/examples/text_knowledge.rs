//! Language path: prompt suite, replayed descriptions, masked-LM
//! pretraining, pooled per-category embeddings and image/text matching.

use multifusion::diffcore::{ParamSet, Tensor};
use multifusion::nn::{self, uniform};
use multifusion::textknow::{
    init_text_heads, match_text_embedding, mlm_pretrain, render_cot_prompts, replay_documents, Fixture, LmConfig, MlmOptions,
    SmallLm, TextCorpus, TextKnowledgeBank,
};

fn main() -> multifusion::Result<()> {
    let fixture = Fixture::bundled();
    let suite = render_cot_prompts("MEMS")?;
    let docs = replay_documents(&suite, &fixture)?;
    println!("{} prompts; first: {}", suite.prompts.len(), suite.prompts[0]);
    println!("first reply starts: {}...", docs[0].chars().take(80).collect::<String>());

    let corpus = TextCorpus::from_fixture(&fixture)?;
    println!("vocabulary of {} tokens over {} categories", corpus.vocab_size(), fixture.categories().len());
    let cfg = LmConfig { d: 16, heads: 4, ff_width: 32, max_len: 64 };
    let lm = SmallLm::<f32>::init(cfg, corpus.vocab_size(), &mut nn::rng(1))?;
    let opts = MlmOptions { epochs: 2, lr: 3e-3, ..MlmOptions::default() };
    let (lm, trace) = mlm_pretrain(&corpus, &lm, &opts)?;
    println!("masked-LM loss per epoch: {trace:.3?}");

    let mut heads = ParamSet::new();
    init_text_heads(&mut heads, cfg.d);
    let categories: Vec<String> = ["MEMS", "nanowires", "powder"].map(String::from).to_vec();
    let bank = TextKnowledgeBank::build(&corpus, &lm, &heads, &categories)?;
    let h_fus: Tensor<f32> = uniform(&mut nn::rng(4), &[1, cfg.d], 1.0);
    let m = match_text_embedding(&h_fus, &bank)?;
    println!("bank {:?}; random image embedding matches `{}` with p = {:.3?}", bank.h_text.shape(), categories[m.beta], m.probs);
    Ok(())
}

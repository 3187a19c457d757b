use rayon::prelude::*;

use super::config::TrainConfig;
use super::dataset::Dataset;
use super::metrics::Metrics;
use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusionhead::{self, FusionParams, FusionVars};
use crate::hnf;
use crate::nn;
use crate::patcher::preprocess_image;
use crate::textknow::{self, SmallLm, LM_PREFIX, MATCH_NAME, POOL_NAME};

/// Checkpoint name of the cached `c×d` text bank.
pub const BANK_NAME: &str = "text.bank";

/// Parameters updated through the text bank rather than per item: the
/// language model and the pooling vector.
pub fn is_text_param(name: &str) -> bool {
    name == POOL_NAME || name.strip_prefix(LM_PREFIX).is_some_and(|r| r.starts_with('.'))
}

/// The full classifier: image encoder, text bank, fusion head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element> {
    pub cfg: TrainConfig,
    /// Label order.
    pub categories: Vec<String>,
    /// `hnf.*`, `fusion.*`, `text.u`, `text.v`, `text.lm.*`.
    pub params: ParamSet<T>,
    /// `c×d` text embeddings produced by the current language model.
    pub bank: Tensor<T>,
}

impl<T: Element> Model<T> {
    /// Fresh encoder and fusion weights from `seed`; `lm` supplies the
    /// language model. The bank starts at zero until [`Model::refresh_bank`].
    pub fn init(cfg: &TrainConfig, categories: &[String], lm: &SmallLm<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if categories.len() < 2 {
            return Err(Error::TooFewItems(format!("{} categories", categories.len())));
        }
        if lm.cfg != cfg.lm() {
            return Err(Error::IncompatibleConfig(format!(
                "language model {:?} vs configuration {:?}",
                lm.cfg,
                cfg.lm()
            )));
        }
        let mut rng = nn::rng(seed);
        let mut params = hnf::init_hnf(&cfg.hnf(), &mut rng)?;
        FusionParams::init(&mut rng, cfg.fusion(), cfg.d, categories.len())?
            .insert_into(&mut params, fusionhead::PREFIX);
        textknow::init_text_heads(&mut params, cfg.d);
        params.extend(lm.params.clone());
        Ok(Model {
            cfg: cfg.clone(),
            categories: categories.to_vec(),
            params,
            bank: Tensor::zeros([categories.len(), cfg.d]),
        })
    }

    pub fn classes(&self) -> usize {
        self.categories.len()
    }

    /// Parameters trained per item.
    pub fn vision_params(&self) -> ParamSet<T> {
        self.params
            .iter()
            .filter(|(n, _)| !is_text_param(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn text_params(&self) -> ParamSet<T> {
        self.params
            .iter()
            .filter(|(n, _)| is_text_param(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Re-encodes the category documents with the current language model.
    pub fn refresh_bank(&mut self, lists: &[Option<Vec<Vec<usize>>>]) -> Result<()> {
        let mut g = Graph::new();
        let bound = self.text_params().bind(&mut g);
        let bank = textknow::record_bank(&mut g, &bound, &self.cfg.lm(), lists)?;
        self.bank = g.value(bank).clone();
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        let c = self.classes();
        if self.bank.shape() != [c, self.cfg.d] {
            return Err(Error::IncompleteBank(format!(
                "bank {:?} for {c} categories of width {}",
                self.bank.shape(),
                self.cfg.d
            )));
        }
        FusionParams::from_params(&self.params, fusionhead::PREFIX, self.cfg.fusion())?;
        for n in [POOL_NAME, MATCH_NAME] {
            self.params.get(n)?;
        }
        Ok(())
    }
}

/// How the text row fed to the fusion head is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Row of the given (true) label.
    Label(usize),
    /// Row with the highest match score.
    Matched,
}

/// Graph handles of one item.
#[derive(Clone, Copy, Debug)]
pub struct ItemVars {
    pub h_fus: Var,
    /// `1×c` match scores and their softmax.
    pub scores: Var,
    pub match_probs: Var,
    /// `1×c` class probabilities.
    pub probs: Var,
    /// Index of the bank row that was fed to the fusion head.
    pub selected: usize,
    /// `CE(p, y) + aux·CE(match, y)` when a target is given.
    pub loss: Option<Var>,
}

/// Records the whole classifier on one preprocessed image. `bank` is the
/// `c×d` text bank, usually a leaf so its cotangent can be collected.
pub fn record_item<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &TrainConfig,
    img: &Tensor<T>,
    bank: Var,
    selection: Selection,
    target: Option<usize>,
) -> Result<ItemVars> {
    let layers = hnf::record_hnf(g, bound, &cfg.hnf(), img)?;
    let h_fus = layers
        .last()
        .ok_or_else(|| Error::InvalidArgument("no encoder layers".into()))?
        .gate
        .fused;
    let (scores, match_probs) = textknow::record_match_scores(g, h_fus, bank, bound.var(MATCH_NAME)?)?;
    let c = g.shape(bank)[0];
    let selected = match selection {
        Selection::Label(y) if y < c => y,
        Selection::Label(y) => return Err(Error::InvalidArgument(format!("label {y} ≥ {c} classes"))),
        Selection::Matched => nn::argmax(g.value(scores).data()),
    };
    let h_text = g.slice(bank, 0, selected, selected + 1)?;
    let vars = FusionVars::from_bound(bound, fusionhead::PREFIX)?;
    let cross = fusionhead::record_cross_modal_attention(g, h_text, h_fus, &vars, &cfg.fusion())?;
    let probs = fusionhead::record_classify(g, cross.y, vars.classifier)?;
    let loss = match target {
        Some(y) => {
            let main = nn::cross_entropy(g, probs, &[y])?;
            if cfg.aux_match_weight > 0.0 {
                let aux = nn::cross_entropy(g, match_probs, &[y])?;
                let aux = g.scale(aux, cfg.aux_match_weight)?;
                Some(g.add(main, aux)?)
            } else {
                Some(main)
            }
        }
        None => None,
    };
    Ok(ItemVars {
        h_fus,
        scores,
        match_probs,
        probs,
        selected,
        loss,
    })
}

/// Inference result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Predicted class; the lowest index wins ties.
    pub class: usize,
    /// Matched text category.
    pub beta: usize,
    pub match_probs: Vec<f64>,
    /// Inference-mode loss against the label, when one was given.
    pub loss: Option<f64>,
}

/// Runs the model on a preprocessed image with matched text selection.
pub fn predict<T: Element>(model: &Model<T>, vision: &ParamSet<T>, img: &Tensor<T>, target: Option<usize>) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = vision.bind(&mut g);
    let bank = g.constant(model.bank.clone());
    let v = record_item(&mut g, &bound, &model.cfg, img, bank, Selection::Matched, target)?;
    let probs = g.value(v.probs).to_f64_vec();
    Ok(Prediction {
        class: nn::argmax(&probs),
        beta: v.selected,
        match_probs: g.value(v.match_probs).to_f64_vec(),
        loss: v.loss.map(|l| g.value(l).data()[0].f64()),
        probs,
    })
}

/// [`predict`] over many images in parallel; results keep input order.
pub fn predict_batch<T: Element>(model: &Model<T>, images: &[&Tensor<T>], targets: Option<&[usize]>) -> Result<Vec<Prediction>> {
    let vision = model.vision_params();
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| predict(model, &vision, img, targets.map(|t| t[i])))
        .collect()
}

/// Metrics of `model` on the items of `ds` at `split`.
pub fn evaluate_model<T: Element>(model: &Model<T>, ds: &Dataset, split: &[usize]) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    if ds.label_map != model.categories {
        return Err(Error::IncompatibleConfig(format!(
            "dataset categories {:?} differ from model categories {:?}",
            ds.label_map, model.categories
        )));
    }
    let images = split
        .par_iter()
        .map(|&i| {
            let (m, _) = ds
                .items
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("item {i} out of range")))?;
            preprocess_image::<T>(m, model.cfg.image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let preds = predict_batch(model, &refs, None)?;
    let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs).collect();
    let labels: Vec<usize> = split.iter().map(|&i| ds.items[i].1).collect();
    Metrics::from_predictions(&probs, &labels, model.classes())
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::Dataset;
use super::kfold::{kfold_split, Fold};
use super::metrics::MetricRow;
use super::model::{predict_batch, record_item, Model, Selection};
use crate::diffcore::{Element, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::nn::{self, Adam};
use crate::patcher::preprocess_image;
use crate::textknow::{self, Fixture, MlmOptions, SmallLm, TextCorpus};

/// Preprocessed images and tokenized category documents shared by all folds.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub categories: Vec<String>,
    /// Token ids of each category's documents, in label order.
    pub lists: Vec<Option<Vec<Vec<usize>>>>,
}

impl PreparedData {
    pub fn new(ds: &Dataset, cfg: &TrainConfig, corpus: &TextCorpus) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::TooFewItems("empty dataset".into()));
        }
        let images = ds
            .items
            .par_iter()
            .map(|(m, _)| preprocess_image::<f32>(m, cfg.image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedData {
            images,
            labels: ds.labels(),
            categories: ds.label_map.clone(),
            lists: textknow::category_token_lists(corpus, &ds.label_map),
        })
    }
}

/// Initial language model for `cfg`, masked-LM pretrained on `corpus`.
/// Returns the model and the per-epoch pretraining loss.
pub fn pretrain_language_model(corpus: &TextCorpus, cfg: &TrainConfig) -> Result<(SmallLm<f32>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(LM_STREAM);
    let lm = SmallLm::init(cfg.lm(), corpus.vocab_size(), &mut rng)?;
    if cfg.mlm_epochs == 0 {
        return Ok((lm, Vec::new()));
    }
    let opts = MlmOptions {
        mask_rate: cfg.mask_rate,
        epochs: cfg.mlm_epochs,
        seed: cfg.seed,
        lr: cfg.mlm_lr,
    };
    textknow::mlm_pretrain(corpus, &lm, &opts)
}

const LM_STREAM: u64 = 1 << 32;
const SHUFFLE_STREAM: u64 = 2 << 32;

/// Summary of one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean training loss. Training selects the text row of the true label.
    pub train_loss: f64,
    /// Top-1 of the training forward passes (true-label text row).
    pub train_top1: f64,
    /// Inference-mode loss and Top-1 on the validation split.
    pub val_loss: f64,
    pub val_top1: f64,
    pub improved: bool,
    pub stop: bool,
}

struct ItemStep {
    loss: f64,
    correct: bool,
    grads: Vec<(String, Tensor<f32>)>,
    bank_grad: Option<Tensor<f32>>,
}

fn item_step(cfg: &TrainConfig, vision: &ParamSet<f32>, bank: &Tensor<f32>, img: &Tensor<f32>, y: usize) -> Result<ItemStep> {
    let mut g = Graph::new();
    let bound = vision.bind(&mut g);
    let bank_var = g.leaf(bank.clone());
    let v = record_item(&mut g, &bound, cfg, img, bank_var, Selection::Label(y), Some(y))?;
    let loss = v.loss.expect("target given");
    let value = g.value(loss).data()[0].f64();
    let correct = nn::argmax(g.value(v.probs).data()) == y;
    let mut grads = g.backward(loss, Tensor::scalar(1.0))?;
    let named = bound
        .iter()
        .filter_map(|(n, var)| grads.take(var).map(|t| (n.to_string(), t)))
        .collect();
    Ok(ItemStep {
        loss: value,
        correct,
        grads: named,
        bank_grad: grads.take(bank_var),
    })
}

fn first_non_finite(grads: &ParamSet<f32>) -> Option<String> {
    grads.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.to_string())
}

/// Training state of one fold. Each call to [`FoldTrainer::run_epoch`]
/// makes one pass over the training split.
pub struct FoldTrainer<'a> {
    data: &'a PreparedData,
    pub cfg: TrainConfig,
    pub fold_index: usize,
    pub fold: Fold,
    pub model: Model<f32>,
    vision_opt: Adam<f32>,
    text_opt: Adam<f32>,
    rng: ChaCha8Rng,
    pub lr: f64,
    pub epoch: usize,
    best_val: f64,
    best: Option<(Model<f32>, usize)>,
    since_plateau: usize,
    since_best: usize,
    stopped: bool,
    /// Mean loss of every training batch so far.
    pub loss_trace: Vec<f64>,
    pub history: Vec<MetricRow>,
}

impl<'a> FoldTrainer<'a> {
    pub fn new(data: &'a PreparedData, cfg: &TrainConfig, lm: &SmallLm<f32>, fold_index: usize, fold: Fold) -> Result<Self> {
        if fold.train.is_empty() || fold.val.is_empty() {
            return Err(Error::EmptySplit);
        }
        let mut model = Model::init(cfg, &data.categories, lm, cfg.seed.wrapping_add(fold_index as u64))?;
        model.refresh_bank(&data.lists)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM + fold_index as u64);
        Ok(FoldTrainer {
            data,
            cfg: cfg.clone(),
            fold_index,
            fold,
            model,
            vision_opt: Adam::new(cfg.lr),
            text_opt: Adam::new(cfg.lr),
            rng,
            lr: cfg.lr,
            epoch: 0,
            best_val: f64::INFINITY,
            best: None,
            since_plateau: 0,
            since_best: 0,
            stopped: false,
            loss_trace: Vec::new(),
            history: Vec::new(),
        })
    }

    /// True once early stopping fired or the epoch budget is spent.
    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.cfg.epochs
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        self.epoch += 1;
        let epoch = self.epoch;
        let lr = self.lr;
        self.vision_opt.lr = lr;
        self.text_opt.lr = lr;

        // The bank graph lives for the whole epoch; its cotangent is
        // collected from every item and applied once at the end.
        let text = self.model.text_params();
        let mut bank_graph = Graph::new();
        let text_bound = text.bind(&mut bank_graph);
        let bank_var = textknow::record_bank(&mut bank_graph, &text_bound, &self.cfg.lm(), &self.data.lists)?;
        let bank = bank_graph.value(bank_var).clone();
        let mut bank_cotangent = Tensor::zeros_like(&bank);

        let mut order = self.fold.train.clone();
        order.shuffle(&mut self.rng);
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch).collect();
        let (mut total, mut correct) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let vision = self.model.vision_params();
            let steps = batch
                .par_iter()
                .map(|&i| item_step(&self.cfg, &vision, &bank, &self.data.images[i], self.data.labels[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    // A non-finite forward value stops the graph; blame the
                    // first non-finite parameter if there is one.
                    Error::NonFiniteResult(op) => Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        param: first_non_finite(&vision).unwrap_or(op),
                    },
                    other => other,
                })?;
            let mut grads = vision.zeros_like();
            let mut batch_loss = 0.0;
            let inv = 1.0 / batch.len() as f32;
            for s in &steps {
                batch_loss += s.loss;
                correct += s.correct as usize;
                for (n, t) in &s.grads {
                    grads.get_mut(n)?.axpy(inv, t)?;
                }
                if let Some(t) = &s.bank_grad {
                    bank_cotangent.axpy(inv / batches.len() as f32, t)?;
                }
            }
            let non_finite = |param: String| Error::NonFiniteLoss { epoch, batch: b, param };
            if !batch_loss.is_finite() {
                return Err(non_finite(first_non_finite(&grads).unwrap_or_else(|| "loss".into())));
            }
            if let Some(p) = first_non_finite(&grads) {
                return Err(non_finite(p));
            }
            total += batch_loss;
            self.loss_trace.push(batch_loss / batch.len() as f64);
            self.vision_opt.step(&mut self.model.params, &grads)?;
        }

        let text_grads = bank_graph.backward(bank_var, bank_cotangent)?;
        let mut tg = ParamSet::new();
        for (n, var) in text_bound.iter() {
            if let Some(t) = text_grads.get(var) {
                tg.insert(n, t.clone());
            }
        }
        if let Some(p) = first_non_finite(&tg) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batches.len(),
                param: p,
            });
        }
        self.text_opt.step(&mut self.model.params, &tg)?;
        self.model.refresh_bank(&self.data.lists)?;

        let (val_loss, val_top1) = self.evaluate_split(&self.fold.val)?;
        let n = order.len() as f64;
        let (train_loss, train_top1) = (total / n, correct as f64 / n);

        let improved = val_loss < self.best_val;
        if improved {
            self.best_val = val_loss;
            self.best = Some((self.model.clone(), epoch));
            self.since_plateau = 0;
            self.since_best = 0;
        } else {
            self.since_plateau += 1;
            self.since_best += 1;
            if self.since_plateau >= self.cfg.plateau_patience {
                self.lr *= self.cfg.lr_factor;
                self.since_plateau = 0;
                log::info!("fold {}: learning rate lowered to {}", self.fold_index, self.lr);
            }
            if self.since_best >= self.cfg.early_stop_patience {
                self.stopped = true;
            }
        }
        let f = self.fold_index;
        self.history.extend([
            MetricRow::new(f, epoch, "train", "loss", train_loss),
            MetricRow::new(f, epoch, "train", "top1", train_top1),
            MetricRow::new(f, epoch, "train", "lr", lr),
            MetricRow::new(f, epoch, "val", "loss", val_loss),
            MetricRow::new(f, epoch, "val", "top1", val_top1),
        ]);
        log::info!(
            "fold {f} epoch {epoch}: train loss {train_loss:.4} top1 {train_top1:.3}, val loss {val_loss:.4} top1 {val_top1:.3}"
        );
        Ok(EpochReport {
            epoch,
            lr,
            train_loss,
            train_top1,
            val_loss,
            val_top1,
            improved,
            stop: self.finished(),
        })
    }

    /// Inference-mode mean loss and Top-1 of the current model on `indices`.
    pub fn evaluate_split(&self, indices: &[usize]) -> Result<(f64, f64)> {
        if indices.is_empty() {
            return Err(Error::EmptySplit);
        }
        let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.data.images[i]).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.data.labels[i]).collect();
        let preds = predict_batch(&self.model, &images, Some(&labels))?;
        let n = preds.len() as f64;
        let loss = preds.iter().map(|p| p.loss.expect("target given")).sum::<f64>() / n;
        let top1 = preds.iter().zip(&labels).filter(|(p, &y)| p.class == y).count() as f64 / n;
        Ok((loss, top1))
    }

    /// Runs epochs until [`FoldTrainer::finished`].
    pub fn run(mut self) -> Result<FoldOutcome> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> FoldOutcome {
        let (model, epoch) = self.best.unwrap_or((self.model, self.epoch));
        FoldOutcome {
            fold_index: self.fold_index,
            fold: self.fold,
            epochs_run: self.epoch,
            checkpoint: Checkpoint {
                model,
                epoch,
                history: self.history,
            },
            loss_trace: self.loss_trace,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold_index: usize,
    pub fold: Fold,
    pub epochs_run: usize,
    /// Parameters of the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint<f32>,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Per-epoch masked-LM pretraining loss.
    pub lm_trace: Vec<f64>,
}

impl TrainOutcome {
    /// Metric rows of every fold, in fold order.
    pub fn history(&self) -> Vec<MetricRow> {
        self.folds.iter().flat_map(|f| f.checkpoint.history.iter().cloned()).collect()
    }
}

/// Stratified k-fold training. The language model is pretrained once and
/// shared as the starting point of every fold.
pub fn train_model(ds: &Dataset, cfg: &TrainConfig, fixture: &Fixture) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = TextCorpus::from_fixture(fixture)?;
    let (lm, lm_trace) = pretrain_language_model(&corpus, cfg)?;
    train_with_language_model(ds, cfg, &corpus, &lm, lm_trace, |_, _| {})
}

/// [`train_model`] from an already pretrained language model. `on_epoch`
/// sees every finished epoch as `(fold_index, report)`.
pub fn train_with_language_model(
    ds: &Dataset,
    cfg: &TrainConfig,
    corpus: &TextCorpus,
    lm: &SmallLm<f32>,
    lm_trace: Vec<f64>,
    mut on_epoch: impl FnMut(usize, &EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if lm.cfg != cfg.lm() {
        return Err(Error::IncompatibleConfig(format!(
            "language model {:?} vs configuration {:?}",
            lm.cfg,
            cfg.lm()
        )));
    }
    let data = PreparedData::new(ds, cfg, corpus)?;
    let folds = kfold_split(ds, cfg.folds, cfg.seed)?;
    let limit = cfg.max_folds.unwrap_or(folds.len()).min(folds.len());
    let mut out = Vec::with_capacity(limit);
    for (i, fold) in folds.into_iter().take(limit).enumerate() {
        let mut t = FoldTrainer::new(&data, cfg, lm, i, fold)?;
        while !t.finished() {
            let r = t.run_epoch()?;
            on_epoch(i, &r);
        }
        out.push(t.into_outcome());
    }
    Ok(TrainOutcome { folds: out, lm_trace })
}

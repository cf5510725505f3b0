//! SGD with momentum and weight decay, plus the two-stage training
//! procedure: cross-entropy pretraining of each branch on its own domain,
//! tying, then joint training under the combined loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset, PairBatch};
use crate::error::{Error, Result};
use crate::losses::{self, HybridBatch, LossWeights};
use crate::model::Semi3Model;
use crate::params::ParameterStore;
use crate::tensor::{GradMap, Recording, Tensor};

/// Numeric training knobs. The sharing plan and attention toggle live on
/// the model; both come from the same run configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 2e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            pretrain_epochs: 3,
            joint_epochs: 30,
            seed: 1,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_run(run: &crate::config::RunConfig) -> TrainConfig {
        TrainConfig {
            lr: run.lr,
            momentum: run.momentum,
            weight_decay: run.weight_decay,
            batch_size: run.batch_size,
            pretrain_epochs: run.pretrain_epochs,
            joint_epochs: run.joint_epochs,
            seed: run.seed,
            weights: run.loss_weights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.weights.validate()
    }
}

/// One logged step: the unweighted components and the recorded total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub ce_s: f64,
    pub ce_i: f64,
    pub ce_e: f64,
    pub l_si: f64,
    pub l_align: f64,
    pub l_se: f64,
    pub total: f64,
}

/// Per-step loss log; rows strictly increase in step index.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) {
        debug_assert!(self.rows.last().map_or(true, |last| row.step > last.step));
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,CE_S,CE_I,CE_E,L_SI,L_align,L_SE,total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step, r.ce_s, r.ce_i, r.ce_e, r.l_si, r.l_align, r.l_se, r.total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "step,CE_S,CE_I,CE_E,L_SI,L_align,L_SE,total" {
            return Err(Error::Format(format!("bad log header `{header}`")));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<&str> = line.split(',').collect();
            if v.len() != 8 {
                return Err(Error::Format(format!("log line {}: bad field count", lineno + 2)));
            }
            let f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("log line {}: bad number", lineno + 2)))
            };
            rows.push(LogRow {
                step: v[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("log line {}: bad step", lineno + 2)))?,
                ce_s: f(v[1])?,
                ce_i: f(v[2])?,
                ce_e: f(v[3])?,
                l_si: f(v[4])?,
                l_align: f(v[5])?,
                l_se: f(v[6])?,
                total: f(v[7])?,
            });
        }
        Ok(TrainLog { rows })
    }
}

/// One SGD step over every distinct storage slot:
/// v <- momentum * v + grad + weight_decay * p; p <- p - lr * v.
/// Aliased names share one slot, so shared tensors update exactly once with
/// the summed gradient; parameters the loss never reached get a zero grad
/// (weight decay still applies).
pub fn sgd_step(store: &mut ParameterStore, grads: &GradMap, cfg: &TrainConfig) -> Result<()> {
    for slot in store.unique_slots() {
        let grad = grads.grad_for_key(slot as u64);
        if let Some(g) = grad {
            if g.shape() != store.slot_shape(slot) {
                return Err(Error::dim(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    store.slot_shape(slot)
                )));
            }
        }
        let p = store.slot_data(slot).to_vec();
        let mut new_p = vec![0.0; p.len()];
        {
            let velocity = store.slot_momentum_mut(slot);
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                velocity[i] = cfg.momentum * velocity[i] + g + cfg.weight_decay * p[i];
                new_p[i] = p[i] - cfg.lr * velocity[i];
            }
        }
        store.replace_slot_data(slot, new_p);
    }
    Ok(())
}

// splitmix64; derives per-purpose RNG seeds from (seed, tags)
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(b.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Stage one: every branch trains on its own domain with cross-entropy
/// only, attention bypassed, no tying. The three losses touch disjoint
/// parameters, so summing them trains the branches independently in one
/// pass. Tying runs at the end; the sketch branch donates the shared values.
pub fn pretrain(model: &mut Semi3Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if model.is_tied() {
        return Err(Error::contract("pretrain must run before tying".into()));
    }
    let train = dataset.train_indices();
    if train.is_empty() {
        return Err(Error::contract("dataset has no train split".into()));
    }
    let k = model.config.num_classes;
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.pretrain_epochs {
        let mut order = train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x11, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (s, i, e, categories) = data::stack_samples(dataset, chunk)?;
            let onehot = losses::one_hot(&categories, k)?;
            let rec = Recording::new();
            let result = (|| -> Result<(Tensor, f64, f64, f64)> {
                let (_, logits_s) = model.forward_single(&rec, crate::backbone::Role::Sketch, &s)?;
                let (_, logits_i) = model.forward_single(&rec, crate::backbone::Role::Image, &i)?;
                let (_, logits_e) = model.forward_single(&rec, crate::backbone::Role::Edgemap, &e)?;
                let ce_s = losses::cross_entropy_loss(&rec, &logits_s, &onehot)?;
                let ce_i = losses::cross_entropy_loss(&rec, &logits_i, &onehot)?;
                let ce_e = losses::cross_entropy_loss(&rec, &logits_e, &onehot)?;
                let total = crate::tensor::ops::add(
                    &rec,
                    &crate::tensor::ops::add(&rec, &ce_s, &ce_i)?,
                    &ce_e,
                )?;
                Ok((total, ce_s.item()?, ce_i.item()?, ce_e.item()?))
            })()
            .map_err(|e| diverged(step, e))?;
            let (total, ce_s, ce_i, ce_e) = result;
            let grads = rec.backward(&total).map_err(|e| diverged(step, e))?;
            sgd_step(&mut model.store, &grads, cfg)?;
            log.push(LogRow {
                step,
                ce_s,
                ce_i,
                ce_e,
                l_si: 0.0,
                l_align: 0.0,
                l_se: 0.0,
                total: total.item()?,
            });
            step += 1;
        }
    }
    model.tie()?;
    Ok(log)
}

fn forward_hybrid(
    model: &Semi3Model,
    rec: &Recording,
    batch: &PairBatch,
    weights: &LossWeights,
) -> Result<(Tensor, losses::LossBreakdown)> {
    let out = model.forward_triple(rec, &batch.sketches, &batch.images, &batch.edgemaps)?;
    let k = model.config.num_classes;
    let onehot_s = losses::one_hot(&batch.sketch_categories, k)?;
    let onehot_i = losses::one_hot(&batch.image_categories, k)?;
    let l_sim = Tensor::new(vec![batch.l_sim.len()], batch.l_sim.clone())?;
    losses::hybrid_loss(
        rec,
        &HybridBatch {
            f_s: &out.f_s,
            f_i: &out.f_i,
            f_e: &out.f_e,
            logits_s: &out.logits_s,
            logits_i: &out.logits_i,
            logits_e: &out.logits_e,
            onehot_s: &onehot_s,
            onehot_i: &onehot_i,
            l_sim: &l_sim,
        },
        weights,
    )
}

/// Stage two: joint training of the tied model under the combined loss.
/// `on_epoch_end` runs after each epoch (checkpoint cadence and the like).
pub fn train_joint_with(
    model: &mut Semi3Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch_end: impl FnMut(usize, &Semi3Model) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if !model.is_tied() {
        return Err(Error::contract("train_joint requires a tied model".into()));
    }
    let train_count = dataset.train_indices().len();
    if train_count == 0 {
        return Err(Error::contract("dataset has no train split".into()));
    }
    let steps_per_epoch = (train_count / cfg.batch_size).max(1);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.joint_epochs {
        for s in 0..steps_per_epoch {
            let batch_seed = derive_seed(cfg.seed, 0x22 + epoch as u64, s as u64);
            let batch = data::sample_pairs(dataset, cfg.batch_size, batch_seed)?;
            let rec = Recording::new();
            let (total, breakdown) =
                forward_hybrid(model, &rec, &batch, &cfg.weights).map_err(|e| diverged(step, e))?;
            let grads = rec.backward(&total).map_err(|e| diverged(step, e))?;
            sgd_step(&mut model.store, &grads, cfg)?;
            log.push(LogRow {
                step,
                ce_s: breakdown.ce_sketch,
                ce_i: breakdown.ce_image,
                ce_e: breakdown.ce_edgemap,
                l_si: breakdown.l_si,
                l_align: breakdown.l_align,
                l_se: breakdown.l_se,
                total: breakdown.total,
            });
            step += 1;
        }
        on_epoch_end(epoch, model)?;
    }
    Ok(log)
}

pub fn train_joint(model: &mut Semi3Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_joint_with(model, dataset, cfg, |_, _| Ok(()))
}

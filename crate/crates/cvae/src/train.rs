//! Minibatch SGD with momentum, gradient-norm clipping and KL warm-up.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tunegram_core::encoding::TrainingSegment;

use crate::model::{warmup_beta, CvaeConfig, CvaeModel, Example};
use crate::tensor::Mat;
use crate::CvaeError;

/// Losses of one optimizer step, averaged over the minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub reproduction: f64,
    pub kl: f64,
    pub beta: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.reproduction + self.beta * self.kl
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `step,reproduction,kl` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,reproduction,kl\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.reproduction, r.kl);
        }
        out
    }

    /// Mean of `f` over the records in `[from, to)` fractions of the history.
    pub fn window_mean(&self, from: f64, to: f64, f: impl Fn(&LossRecord) -> f64) -> f64 {
        let n = self.records.len();
        let a = ((n as f64 * from).floor() as usize).min(n);
        let b = ((n as f64 * to).ceil() as usize).clamp(a, n);
        if a == b {
            return f64::NAN;
        }
        self.records[a..b].iter().map(f).sum::<f64>() / (b - a) as f64
    }
}

/// Owns the model while training, with optimizer state and the data order.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CvaeModel,
    pub history: LossHistory,
    velocity: Vec<Mat>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: CvaeModel) -> Self {
        let velocity = model.params.zeros_like();
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x7472_6169_6e00_0000);
        Trainer {
            model,
            history: LossHistory::default(),
            velocity,
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.model.config.batch_size.min(n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer step. On a non-finite loss or gradient the model is
    /// left untouched and returned inside the error.
    pub fn step(&mut self, data: &[TrainingSegment]) -> Result<LossRecord, CvaeError> {
        if data.is_empty() {
            return Err(CvaeError::EmptyDataset);
        }
        let idx = self.next_batch(data.len());
        let batch: Vec<Example<'_>> = idx
            .iter()
            .map(|&i| Example {
                grid: &data[i].grid,
                condition: &data[i].condition,
            })
            .collect();
        let cfg = &self.model.config;
        let latent = cfg.latent_dim;
        let eps = Mat::from_vec(
            batch.len(),
            latent,
            (0..batch.len() * latent).map(|_| self.rng.sample(StandardNormal)).collect(),
        );
        let step = self.model.step;
        let beta = warmup_beta(step, cfg);
        let (parts, mut grads) = self.model.batch_gradients(&batch, &eps, beta)?;
        let fail = |what: &str, model: &CvaeModel| CvaeError::NonFinite {
            step,
            what: what.to_string(),
            snapshot: Box::new(model.clone()),
        };
        if !parts.total.is_finite() {
            return Err(fail("loss", &self.model));
        }
        let norm = grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(fail("gradient", &self.model));
        }
        let cfg = &self.model.config;
        if norm > cfg.clip_norm {
            let k = cfg.clip_norm / norm;
            grads.iter_mut().for_each(|g| g.scale(k));
        }
        let (lr, mu) = (cfg.learning_rate, cfg.momentum);
        for ((p, v), g) in self.model.params.values.iter_mut().zip(&mut self.velocity).zip(&grads) {
            for ((p, v), g) in p.data.iter_mut().zip(&mut v.data).zip(&g.data) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        self.model.step += 1;
        let rec = LossRecord {
            step,
            reproduction: parts.reproduction,
            kl: parts.kl,
            beta,
        };
        self.history.records.push(rec);
        Ok(rec)
    }

    pub fn run(&mut self, data: &[TrainingSegment], steps: u64) -> Result<(), CvaeError> {
        for _ in 0..steps {
            self.step(data)?;
        }
        Ok(())
    }
}

/// Trains a fresh model for `config.steps` steps.
pub fn train(data: &[TrainingSegment], config: &CvaeConfig) -> Result<(CvaeModel, LossHistory), CvaeError> {
    if data.is_empty() {
        return Err(CvaeError::EmptyDataset);
    }
    let mut trainer = Trainer::new(CvaeModel::new(config.clone())?);
    trainer.run(data, config.steps)?;
    Ok((trainer.model, trainer.history))
}

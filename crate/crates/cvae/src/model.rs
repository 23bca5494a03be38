//! Conditional variational recurrent autoencoder over melody grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use tunegram_core::encoding::{
    ConditionVector, MelodyGrid, CATEGORIES, CHANNELS, STEPS_PER_MEASURE, STEP_CONDITION,
};

use crate::tape::{softmax_into, NodeId, ParamStore, Tape, PROB_EPS};
use crate::tensor::Mat;
use crate::CvaeError;

/// Number of time chunks the encoder aggregates before the latent heads.
pub const AGGREGATE_CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    /// Hidden units per direction of each recurrent layer.
    pub hidden_dim: usize,
    pub recurrent_layers_per_coder: usize,
    /// Layers `l` with `l % period == 0` also receive the coder input.
    pub residual_injection_period: usize,
    /// Width of each aggregated time chunk in the encoder.
    pub aggregate_dim: usize,
    /// Width of the decoder's latent expansion.
    pub expand_dim: usize,
    /// Measures per segment.
    pub measures: usize,
    pub warmup_midpoint_steps: f64,
    pub warmup_steepness: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            latent_dim: 16,
            hidden_dim: 64,
            recurrent_layers_per_coder: 6,
            residual_injection_period: 3,
            aggregate_dim: 32,
            expand_dim: 64,
            measures: 8,
            warmup_midpoint_steps: 2000.0,
            warmup_steepness: 250.0,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: 5.0,
            batch_size: 8,
            steps: 10_000,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    /// Full-scale sizes: 12 layers per coder, 600 hidden units (300 per
    /// direction), 800-dimensional latent.
    pub fn full_scale() -> Self {
        CvaeConfig {
            latent_dim: 800,
            hidden_dim: 300,
            recurrent_layers_per_coder: 12,
            aggregate_dim: 300,
            expand_dim: 600,
            ..Default::default()
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        CvaeConfig {
            latent_dim: 4,
            hidden_dim: 8,
            recurrent_layers_per_coder: 2,
            residual_injection_period: 1,
            aggregate_dim: 4,
            expand_dim: 8,
            measures: 1,
            batch_size: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), CvaeError> {
        let bad = |m: &str| Err(CvaeError::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.residual_injection_period == 0 {
            return bad("residual_injection_period must be at least 1");
        }
        if self.hidden_dim == 0 || self.recurrent_layers_per_coder == 0 {
            return bad("hidden_dim and recurrent_layers_per_coder must be positive");
        }
        if self.aggregate_dim == 0 || self.expand_dim == 0 || self.measures == 0 || self.batch_size == 0 {
            return bad("aggregate_dim, expand_dim, measures and batch_size must be positive");
        }
        if self.warmup_steepness.is_nan() || self.warmup_steepness <= 0.0 || !self.warmup_midpoint_steps.is_finite() {
            return bad("warmup_steepness must be positive and the midpoint finite");
        }
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || !(0.0..1.0).contains(&self.momentum)
            || self.clip_norm.is_nan()
            || self.clip_norm <= 0.0
        {
            return bad("learning_rate >= 0, momentum in [0, 1) and clip_norm > 0 required");
        }
        Ok(())
    }

    pub fn time_steps(&self) -> usize {
        self.measures * STEPS_PER_MEASURE
    }

    fn injects(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.residual_injection_period)
    }
}

/// KL weight at a training step: a logistic ramp.
pub fn warmup_beta(step: u64, config: &CvaeConfig) -> f64 {
    1.0 / (1.0 + (-(step as f64 - config.warmup_midpoint_steps) / config.warmup_steepness).exp())
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentDistribution {
    pub fn from_std(mean: Vec<f64>, std: &[f64]) -> Self {
        let logvar = std.iter().map(|s| 2.0 * s.ln()).collect();
        LatentDistribution { mean, logvar }
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `mean + std * eps` with `eps ~ N(0, I)`.
pub fn sample<R: Rng + ?Sized>(dist: &LatentDistribution, rng: &mut R) -> Vec<f64> {
    dist.mean
        .iter()
        .zip(dist.std())
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect()
}

/// KL divergence from the unit Gaussian.
pub fn kl_divergence(dist: &LatentDistribution) -> f64 {
    dist.mean
        .iter()
        .zip(&dist.logvar)
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum()
}

/// Per-step output distributions of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedGrid {
    /// Row-major `steps x 35`: 34 category probabilities, then the attack probability.
    pub probs: Vec<f64>,
}

impl DecodedGrid {
    pub fn steps(&self) -> usize {
        self.probs.len() / CHANNELS
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * CHANNELS..(t + 1) * CHANNELS]
    }

    pub fn harden(&self) -> MelodyGrid {
        MelodyGrid::harden(&self.probs).expect("decoder output has whole measures")
    }

    /// Uniform categories and even attack odds.
    pub fn uniform(steps: usize) -> Self {
        let mut probs = vec![1.0 / CATEGORIES as f64; steps * CHANNELS];
        for t in 0..steps {
            probs[t * CHANNELS + CATEGORIES] = 0.5;
        }
        DecodedGrid { probs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reproduction: f64,
    pub kl: f64,
}

/// Summed per-step cross-entropy of the categories plus attack BCE, with
/// probabilities floored at `1e-9`.
pub fn reproduction_loss(grid: &MelodyGrid, decoded: &DecodedGrid) -> f64 {
    grid.steps()
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let row = decoded.row(t);
            let a = row[CATEGORIES];
            let attack = if s.attack { a } else { 1.0 - a };
            -row[usize::from(s.slot)].max(PROB_EPS).ln() - attack.max(PROB_EPS).ln()
        })
        .sum()
}

pub fn loss(grid: &MelodyGrid, decoded: &DecodedGrid, dist: &LatentDistribution, beta: f64) -> LossParts {
    let reproduction = reproduction_loss(grid, decoded);
    let kl = kl_divergence(dist);
    LossParts {
        total: reproduction + beta * kl,
        reproduction,
        kl,
    }
}

/// One training example as the model sees it.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub grid: &'a MelodyGrid,
    pub condition: &'a ConditionVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub config: CvaeConfig,
    pub params: ParamStore,
    /// Optimizer steps taken so far.
    pub step: u64,
}

fn uniform_mat(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(dist)).collect())
}

fn dense(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize, zero: bool) {
    let w = if zero {
        Mat::zeros(fan_in, out)
    } else {
        uniform_mat(fan_in, out, 1.0 / (fan_in as f64).sqrt(), rng)
    };
    params.push(format!("{name}.w"), w);
    params.push(format!("{name}.b"), Mat::zeros(1, out));
}

/// Column layout of a per-sample sequence into the time-major batch layout.
fn interleave(samples: &[Vec<f64>], width: usize) -> Mat {
    let b = samples.len();
    let steps = samples[0].len() / width;
    let mut m = Mat::zeros(steps * b, width);
    for (bi, s) in samples.iter().enumerate() {
        for t in 0..steps {
            m.row_mut(t * b + bi).copy_from_slice(&s[t * width..(t + 1) * width]);
        }
    }
    m
}

impl CvaeModel {
    pub fn new(config: CvaeConfig) -> Result<Self, CvaeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let chunk = config.time_steps() / AGGREGATE_CHUNKS;
        for (coder, input) in [("enc", CHANNELS), ("dec", config.expand_dim)] {
            if coder == "dec" {
                dense(&mut params, &mut rng, "dec.expand", config.latent_dim, config.expand_dim, false);
            }
            for l in 0..config.recurrent_layers_per_coder {
                let fan_in = if l > 0 { 2 * h } else { 0 }
                    + STEP_CONDITION
                    + if config.injects(l) { input } else { 0 };
                for dir in ["fwd", "bwd"] {
                    let name = format!("{coder}.{l}.{dir}");
                    params.push(format!("{name}.w"), uniform_mat(fan_in, 3 * h, 1.0 / (fan_in as f64).sqrt(), &mut rng));
                    params.push(format!("{name}.u"), uniform_mat(h, 3 * h, 1.0 / (h as f64).sqrt(), &mut rng));
                    params.push(format!("{name}.b"), Mat::zeros(1, 3 * h));
                }
            }
            if coder == "enc" {
                dense(&mut params, &mut rng, "enc.aggregate", chunk * 2 * h, config.aggregate_dim, false);
                let flat = AGGREGATE_CHUNKS * config.aggregate_dim;
                dense(&mut params, &mut rng, "enc.mean", flat, config.latent_dim, false);
                dense(&mut params, &mut rng, "enc.logvar", flat, config.latent_dim, false);
            }
        }
        dense(&mut params, &mut rng, "dec.out", 2 * h, CHANNELS, true);
        Ok(CvaeModel { config, params, step: 0 })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_shapes(&self, grid: Option<&MelodyGrid>, cond: &ConditionVector) -> Result<(), CvaeError> {
        let m = self.config.measures;
        if let Some(g) = grid {
            if g.measures() != m {
                return Err(CvaeError::Shape(format!("grid has {} measures, model expects {m}", g.measures())));
            }
        }
        if cond.measures() != m {
            return Err(CvaeError::Shape(format!(
                "condition has {} measures, model expects {m}",
                cond.measures()
            )));
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape, name: &str) -> NodeId {
        let i = self.params.index(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        tape.param(&self.params, i)
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, name: &str) -> NodeId {
        let w = self.p(tape, &format!("{name}.w"));
        let b = self.p(tape, &format!("{name}.b"));
        tape.linear(x, w, b)
    }

    /// Bidirectional recurrent stack; every layer sees the condition and
    /// layers on the injection period also see `input`.
    fn stack(&self, tape: &mut Tape, coder: &str, input: NodeId, cond: NodeId, batch: usize) -> NodeId {
        let mut h: Option<NodeId> = None;
        for l in 0..self.config.recurrent_layers_per_coder {
            let mut parts: Vec<NodeId> = h.into_iter().collect();
            parts.push(cond);
            if self.config.injects(l) {
                parts.push(input);
            }
            let x = tape.concat(&parts);
            let mut dirs = [0; 2];
            for (k, dir) in ["fwd", "bwd"].into_iter().enumerate() {
                let name = format!("{coder}.{l}.{dir}");
                let w = self.p(tape, &format!("{name}.w"));
                let u = self.p(tape, &format!("{name}.u"));
                let b = self.p(tape, &format!("{name}.b"));
                dirs[k] = tape.gru(x, w, u, b, batch, k == 1);
            }
            h = Some(tape.concat(&dirs));
        }
        h.expect("at least one layer")
    }

    fn encoder(&self, tape: &mut Tape, x: NodeId, cond: NodeId, batch: usize) -> (NodeId, NodeId) {
        let h = self.stack(tape, "enc", x, cond, batch);
        let chunk = self.config.time_steps() / AGGREGATE_CHUNKS;
        let rows = (0..batch)
            .flat_map(|b| (0..AGGREGATE_CHUNKS).map(move |c| (0..chunk).map(|k| (c * chunk + k) * batch + b).collect()))
            .collect();
        let chunks = tape.regroup(h, rows);
        let agg = self.linear(tape, chunks, "enc.aggregate");
        let agg = tape.elu(agg);
        let flat = tape.regroup(
            agg,
            (0..batch)
                .map(|b| (0..AGGREGATE_CHUNKS).map(|c| b * AGGREGATE_CHUNKS + c).collect())
                .collect(),
        );
        (self.linear(tape, flat, "enc.mean"), self.linear(tape, flat, "enc.logvar"))
    }

    fn decoder(&self, tape: &mut Tape, z: NodeId, cond: NodeId, batch: usize) -> NodeId {
        let e = self.linear(tape, z, "dec.expand");
        let e = tape.elu(e);
        let steps = self.config.time_steps();
        let e = tape.regroup(e, (0..steps * batch).map(|r| vec![r % batch]).collect());
        let h = self.stack(tape, "dec", e, cond, batch);
        self.linear(tape, h, "dec.out")
    }

    fn cond_input(&self, tape: &mut Tape, conds: &[&ConditionVector]) -> NodeId {
        let feats: Vec<Vec<f64>> = conds.iter().map(|c| c.step_features()).collect();
        tape.input(interleave(&feats, STEP_CONDITION))
    }

    pub fn encode(&self, grid: &MelodyGrid, cond: &ConditionVector) -> Result<LatentDistribution, CvaeError> {
        self.check_shapes(Some(grid), cond)?;
        let mut tape = Tape::new();
        let x = tape.input(interleave(&[grid.to_dense()], CHANNELS));
        let c = self.cond_input(&mut tape, &[cond]);
        let (mu, lv) = self.encoder(&mut tape, x, c, 1);
        Ok(LatentDistribution {
            mean: tape.value(mu).data.clone(),
            logvar: tape.value(lv).data.clone(),
        })
    }

    pub fn decode(&self, z: &[f64], cond: &ConditionVector) -> Result<DecodedGrid, CvaeError> {
        self.check_shapes(None, cond)?;
        if z.len() != self.config.latent_dim {
            return Err(CvaeError::Shape(format!(
                "latent has {} entries, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let zi = tape.input(Mat::from_vec(1, z.len(), z.to_vec()));
        let c = self.cond_input(&mut tape, &[cond]);
        let logits = self.decoder(&mut tape, zi, c, 1);
        let lv = tape.value(logits);
        let mut probs = vec![0.0; lv.data.len()];
        for (row, out) in lv.data.chunks(CHANNELS).zip(probs.chunks_mut(CHANNELS)) {
            softmax_into(&row[..CATEGORIES], &mut out[..CATEGORIES]);
            out[CATEGORIES] = 1.0 / (1.0 + (-row[CATEGORIES]).exp());
        }
        Ok(DecodedGrid { probs })
    }

    /// Encodes, samples with the given noise and decodes.
    pub fn reconstruct(&self, grid: &MelodyGrid, cond: &ConditionVector, eps: &[f64]) -> Result<DecodedGrid, CvaeError> {
        let dist = self.encode(grid, cond)?;
        let z: Vec<f64> = dist.mean.iter().zip(dist.std()).zip(eps).map(|((m, s), e)| m + s * e).collect();
        self.decode(&z, cond)
    }

    fn batch_graph(&self, batch: &[Example<'_>], eps: &Mat, beta: f64) -> Result<(Tape, [NodeId; 3]), CvaeError> {
        if batch.is_empty() {
            return Err(CvaeError::EmptyDataset);
        }
        for ex in batch {
            self.check_shapes(Some(ex.grid), ex.condition)?;
        }
        let b = batch.len();
        if eps.shape() != (b, self.config.latent_dim) {
            return Err(CvaeError::Shape(format!("noise is {:?}, expected ({b}, {})", eps.shape(), self.config.latent_dim)));
        }
        let mut tape = Tape::new();
        let dense: Vec<Vec<f64>> = batch.iter().map(|e| e.grid.to_dense()).collect();
        let x = tape.input(interleave(&dense, CHANNELS));
        let conds: Vec<&ConditionVector> = batch.iter().map(|e| e.condition).collect();
        let c = self.cond_input(&mut tape, &conds);
        let (mu, lv) = self.encoder(&mut tape, x, c, b);
        let z = tape.reparam(mu, lv, eps.clone());
        let logits = self.decoder(&mut tape, z, c, b);
        let steps = self.config.time_steps();
        let targets = (0..steps * b)
            .map(|r| {
                let s = batch[r % b].grid.steps()[r / b];
                (s.slot, s.attack)
            })
            .collect();
        let rep = tape.reproduction(logits, targets);
        let kl = tape.kl(mu, lv);
        let inv = 1.0 / b as f64;
        let total = tape.weighted_sum(&[(rep, inv), (kl, beta * inv)]);
        Ok((tape, [total, rep, kl]))
    }

    /// Batch-mean loss for fixed reparameterization noise `eps` (`batch x latent`).
    pub fn batch_loss(&self, batch: &[Example<'_>], eps: &Mat, beta: f64) -> Result<LossParts, CvaeError> {
        let (tape, [t, r, k]) = self.batch_graph(batch, eps, beta)?;
        Ok(parts(&tape, [t, r, k], batch.len()))
    }

    /// Batch-mean loss and its gradient for every parameter tensor.
    pub fn batch_gradients(
        &self,
        batch: &[Example<'_>],
        eps: &Mat,
        beta: f64,
    ) -> Result<(LossParts, Vec<Mat>), CvaeError> {
        let (tape, ids) = self.batch_graph(batch, eps, beta)?;
        let mut grads = self.params.zeros_like();
        tape.backward(ids[0], &mut grads);
        Ok((parts(&tape, ids, batch.len()), grads))
    }
}

fn parts(tape: &Tape, [t, r, k]: [NodeId; 3], b: usize) -> LossParts {
    let n = b as f64;
    LossParts {
        total: tape.value(t).data[0],
        reproduction: tape.value(r).data[0] / n,
        kl: tape.value(k).data[0] / n,
    }
}

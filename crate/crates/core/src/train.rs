//! Minibatch ERM on the unbiased estimator and on hallucinated labels.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features};
use crate::error::{Error, Result};
use crate::estimator::{plugin_split, Estimator, EstimatorConfig, Moments, PluginMode};
use crate::loss::{LossDecomposition, LossKind};
use crate::math::Prior;
use crate::model::{Architecture, Hypothesis, Scratch};
use crate::sim::{hallucination_dataset, AttributionSet, HallucinationMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Unbiased,
    Random,
    MaxPrior,
    /// Trains on the true labels; a reference point, not a learner on attribution sets.
    Supervised,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Unbiased => "unbiased",
            Algorithm::Random => "random",
            Algorithm::MaxPrior => "max_prior",
            Algorithm::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Logistic,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl ModelSpec {
    pub fn architecture(&self, inputs: usize) -> Architecture {
        match self {
            ModelSpec::Logistic => Architecture::Logistic { inputs },
            ModelSpec::Mlp { hidden } => Architecture::Mlp {
                inputs,
                hidden: hidden.clone(),
                activation: crate::model::Activation::Relu,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub batch_sets: usize,
    pub batch_features: usize,
    /// Minibatch size for label-based training.
    pub batch_examples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: LossKind,
    pub model: ModelSpec,
    pub plugin: PluginMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Unbiased,
            batch_sets: 128,
            batch_features: 128,
            batch_examples: 128,
            epochs: 50,
            lr: 1e-2,
            optimizer: Optimizer::Adam,
            seed: 0,
            loss: LossKind::ClippedLog { clip: 0.01 },
            model: ModelSpec::Logistic,
            plugin: PluginMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sets == 0 || self.batch_features == 0 || self.batch_examples == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        LossDecomposition::from_kind(self.loss)?;
        Ok(())
    }
}

/// What the learner is given.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    AttributionSets {
        sets: &'a [AttributionSet],
        prior: &'a Prior,
        /// Conversions among the first n/2 stream points; only read in split mode.
        first_half_conversions: usize,
    },
    Labels(&'a [u8]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean loss of the configured decomposition (clipped log loss by default).
    pub log_loss: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch objective over the epoch.
    pub objective: f64,
    /// Mean minibatch gradient norm over the epoch.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub algorithm: Algorithm,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub architecture: Architecture,
    pub parameters: Vec<f64>,
    pub metrics: Option<Metrics>,
    pub diagnostics: Option<crate::estimator::Diagnostics>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn hypothesis(&self) -> Result<Hypothesis> {
        Hypothesis::new(self.architecture.clone(), self.parameters.clone())
    }
}

/// Accuracy with ties at 0.5 predicted negative, mean loss, and F1 on the positive class.
pub fn evaluate(h: &Hypothesis, test: &Dataset, loss: &LossDecomposition) -> Result<Metrics> {
    let preds = h.predict_all(&test.features)?;
    metrics_from_predictions(&preds, &test.labels, loss)
}

pub fn metrics_from_predictions(preds: &[f64], labels: &[u8], loss: &LossDecomposition) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut total_loss = 0.0;
    for (&h, &y) in preds.iter().zip(labels) {
        let predicted = h > 0.5;
        let actual = y == 1;
        correct += (predicted == actual) as usize;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
        total_loss += loss.loss(h, actual);
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        log_loss: total_loss / labels.len() as f64,
        f1,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn step(opt: Optimizer, state: &mut Adam, params: &mut [f64], grad: &[f64], lr: f64) {
    match opt {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            state.t += 1;
            let c1 = 1.0 - BETA1.powi(state.t);
            let c2 = 1.0 - BETA2.powi(state.t);
            for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }
}

/// Unbiased-estimator training problem over one stream.
pub struct EstimatorObjective<'a> {
    pub estimator: Estimator,
    pub features: &'a Features,
    /// Sets indexed relative to `offset` in `features`.
    pub sets: Vec<AttributionSet>,
    pub offset: usize,
    /// Feature rows used for the moment estimates.
    pub pool: std::ops::Range<usize>,
}

impl<'a> EstimatorObjective<'a> {
    pub fn new(
        features: &'a Features,
        sets: &[AttributionSet],
        prior: &Prior,
        first_half_conversions: usize,
        mode: PluginMode,
        loss: LossDecomposition,
    ) -> Result<Self> {
        let plan = plugin_split(features.len(), sets, first_half_conversions, mode)?;
        if plan.p_hat > 0.5 {
            return Err(Error::Config(format!(
                "estimated conversion rate {:.3} exceeds 1/2",
                plan.p_hat
            )));
        }
        let config = EstimatorConfig::new(plan.n, plan.p_hat, prior.clone())?;
        Ok(Self {
            estimator: Estimator::new(config, loss)?,
            features,
            sets: plan.sets,
            offset: plan.offset,
            pool: plan.pool,
        })
    }

    /// Ordinals in [k, M_UPPER].
    pub fn ordinals(&self) -> Vec<usize> {
        let cfg = self.estimator.config();
        match cfg.m_upper(self.sets.len()) {
            Some(upper) => (cfg.k..=upper).collect(),
            None => Vec::new(),
        }
    }

    fn row(&self, set: &AttributionSet, i: usize) -> &[f64] {
        self.features.row(self.offset + set.indices[i])
    }

    /// Objective and gradient over ordinals `batch`, scaled by `scale`, with moments from
    /// the pool rows `pool_rows`.
    pub fn batch_gradient(
        &self,
        h: &Hypothesis,
        batch: &[usize],
        scale: f64,
        pool_rows: &[usize],
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let loss = self.estimator.loss();
        let k = self.estimator.config().k;
        let (mut c1, mut c2, mut value) = (0.0, 0.0, 0.0);
        for &j in batch {
            let row = self.estimator.coefficients(j).expect("ordinal in range");
            let set = &self.sets[j - 1];
            debug_assert_eq!(set.indices.len(), k);
            for (&i, &w) in row.positions.iter().zip(&row.weights) {
                let x = self.row(set, i);
                let hv = h.forward(x, scratch);
                value += scale * w * loss.f2(hv);
                let d = loss.f2_prime(hv);
                if d != 0.0 {
                    h.accumulate_gradient(x, scale * w * d, grad, scratch);
                }
            }
            c1 += scale * row.c1;
            c2 += scale * row.c2;
        }
        let inv = 1.0 / pool_rows.len().max(1) as f64;
        let (mut e1, mut e2) = (0.0, 0.0);
        for &r in pool_rows {
            let x = self.features.row(r);
            let hv = h.forward(x, scratch);
            e1 += loss.f1(hv) * inv;
            e2 += loss.f2(hv) * inv;
            let d = c1 * loss.f1_prime(hv) + c2 * loss.f2_prime(hv);
            if d != 0.0 {
                h.accumulate_gradient(x, d * inv, grad, scratch);
            }
        }
        value + c1 * e1 + c2 * e2
    }

    /// The full-data objective with moments over the whole pool, and its gradient.
    pub fn full_gradient(&self, h: &Hypothesis) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; h.params().len()];
        let ordinals = self.ordinals();
        let pool: Vec<usize> = self.pool.clone().collect();
        let scale = 1.0 / self.estimator.config().normalizer();
        let value = self.batch_gradient(h, &ordinals, scale, &pool, &mut grad, &mut Scratch::default());
        (value, grad)
    }

    /// Full-data objective through the estimator's own aggregate.
    pub fn value(&self, h: &Hypothesis) -> Result<f64> {
        let n = self.estimator.config().n;
        let mut scratch = Scratch::default();
        let preds: Vec<f64> = (0..n).map(|t| h.forward(self.features.row(self.offset + t), &mut scratch)).collect();
        let pool: Vec<f64> = self.pool.clone().map(|r| h.forward(self.features.row(r), &mut scratch)).collect();
        let moments = Moments::from_predictions(&pool, self.estimator.loss());
        Ok(self.estimator.aggregate_estimate(&self.sets, &preds, moments)?.value)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs one training job. `test`, when given, is only used for the final metrics.
pub fn train(
    features: &Features,
    supervision: Supervision<'_>,
    config: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<TrainReport> {
    config.validate()?;
    let started = Instant::now();
    let loss = LossDecomposition::from_kind(config.loss)?;
    let arch = config.model.architecture(features.dim());
    let mut h = Hypothesis::init(arch.clone(), config.seed ^ 0x5151_5151)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam {
        m: vec![0.0; h.params().len()],
        v: vec![0.0; h.params().len()],
        t: 0,
    };
    let mut grad = vec![0.0; h.params().len()];
    let mut scratch = Scratch::default();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut diagnostics = None;
    let mut global_step = 0usize;

    match (config.algorithm, supervision) {
        (
            Algorithm::Unbiased,
            Supervision::AttributionSets {
                sets,
                prior,
                first_half_conversions,
            },
        ) => {
            let objective =
                EstimatorObjective::new(features, sets, prior, first_half_conversions, config.plugin, loss)?;
            diagnostics = Some(objective.estimator.diagnostics(objective.sets.len()));
            let mut ordinals = objective.ordinals();
            if ordinals.is_empty() {
                return Err(Error::Config("no attribution sets fall in the usable ordinal range".into()));
            }
            let total = ordinals.len() as f64;
            let norm_const = objective.estimator.config().normalizer();
            let pool_len = objective.pool.len();
            for epoch in 0..config.epochs {
                let t0 = Instant::now();
                ordinals.shuffle(&mut rng);
                let (mut obj_sum, mut gn_sum, mut batches) = (0.0, 0.0, 0usize);
                for batch in ordinals.chunks(config.batch_sets) {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let pool_rows: Vec<usize> = (0..config.batch_features)
                        .map(|_| objective.pool.start + rng.gen_range(0..pool_len))
                        .collect();
                    let scale = total / (norm_const * batch.len() as f64);
                    let value = objective.batch_gradient(&h, batch, scale, &pool_rows, &mut grad, &mut scratch);
                    global_step += 1;
                    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::Divergence { step: global_step });
                    }
                    obj_sum += value;
                    gn_sum += norm(&grad);
                    batches += 1;
                    step(config.optimizer, &mut adam, h.params_mut(), &grad, config.lr);
                }
                epochs.push(EpochRecord {
                    epoch,
                    objective: obj_sum / batches as f64,
                    grad_norm: gn_sum / batches as f64,
                    seconds: t0.elapsed().as_secs_f64(),
                });
            }
        }
        (Algorithm::Random | Algorithm::MaxPrior | Algorithm::Supervised, supervision) => {
            let examples: Vec<(usize, u8)> = match (config.algorithm, supervision) {
                (Algorithm::Supervised, Supervision::Labels(labels)) => {
                    if labels.len() != features.len() {
                        return Err(Error::Dimension {
                            expected: features.len(),
                            got: labels.len(),
                        });
                    }
                    labels.iter().enumerate().map(|(i, &y)| (i, y)).collect()
                }
                (alg, Supervision::AttributionSets { sets, prior, .. }) if alg != Algorithm::Supervised => {
                    let mode = if alg == Algorithm::Random {
                        HallucinationMode::Random
                    } else {
                        HallucinationMode::MaxPrior
                    };
                    hallucination_dataset(sets, features.len(), prior, mode, config.seed ^ 0xa11c)
                        .into_iter()
                        .map(|e| (e.index, e.label))
                        .collect()
                }
                (alg, _) => {
                    return Err(Error::Config(format!(
                        "algorithm '{}' does not match the supplied supervision",
                        alg.name()
                    )))
                }
            };
            let mut order: Vec<usize> = (0..examples.len()).collect();
            for epoch in 0..config.epochs {
                let t0 = Instant::now();
                order.shuffle(&mut rng);
                let (mut obj_sum, mut gn_sum, mut batches) = (0.0, 0.0, 0usize);
                for batch in order.chunks(config.batch_examples) {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let inv = 1.0 / batch.len() as f64;
                    let mut value = 0.0;
                    for &e in batch {
                        let (idx, y) = examples[e];
                        let x = features.row(idx);
                        let hv = h.forward(x, &mut scratch);
                        value += loss.loss(hv, y == 1) * inv;
                        let d = loss.loss_prime(hv, y == 1);
                        if d != 0.0 {
                            h.accumulate_gradient(x, d * inv, &mut grad, &mut scratch);
                        }
                    }
                    global_step += 1;
                    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::Divergence { step: global_step });
                    }
                    obj_sum += value;
                    gn_sum += norm(&grad);
                    batches += 1;
                    step(config.optimizer, &mut adam, h.params_mut(), &grad, config.lr);
                }
                epochs.push(EpochRecord {
                    epoch,
                    objective: obj_sum / batches.max(1) as f64,
                    grad_norm: gn_sum / batches.max(1) as f64,
                    seconds: t0.elapsed().as_secs_f64(),
                });
            }
        }
        (Algorithm::Unbiased, Supervision::Labels(_)) => {
            return Err(Error::Config("the unbiased learner needs attribution sets".into()))
        }
    }

    let metrics = test.map(|t| evaluate(&h, t, &loss)).transpose()?;
    Ok(TrainReport {
        algorithm: config.algorithm,
        config: config.clone(),
        epochs,
        architecture: arch,
        parameters: h.params().to_vec(),
        metrics,
        diagnostics,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// `count` learning rates log-spaced over [lo, hi].
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Picks the learning rate whose runs have the best mean of `metric`; returns
/// (lr, mean, sample std).
pub fn best_by_mean(results: &[(f64, Vec<f64>)], higher_is_better: bool) -> Option<(f64, f64, f64)> {
    results
        .iter()
        .filter(|(_, xs)| !xs.is_empty())
        .map(|(lr, xs)| {
            let (m, s) = mean_and_sample_std(xs);
            (*lr, m, s)
        })
        .max_by(|a, b| {
            let ord = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
            if higher_is_better {
                ord
            } else {
                ord.reverse()
            }
        })
}

/// Replaces a metric below the trivial level by the trivial level, for reporting only.
pub fn floor_at_trivial(value: f64, trivial: f64) -> f64 {
    value.max(trivial)
}

/// Row indices for a minibatch drawn without replacement.
pub fn sample_without_replacement<R: Rng>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    index::sample(rng, len, amount.min(len)).into_vec()
}

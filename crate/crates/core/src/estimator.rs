//! The unbiased population-loss estimator built from attribution sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossDecomposition;
use crate::math::{pairwise_sum, BetaCoefficients, CoefficientForm, CoefficientTable, Prior};
use crate::sim::AttributionSet;

/// Default confidence parameter of the small-weight filter.
pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// The prior is the one the adversary uses.
    #[default]
    Exact,
    /// The prior is an estimate of it.
    Estimated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub n: usize,
    pub k: usize,
    pub p: f64,
    pub prior: Prior,
    pub prior_mode: PriorMode,
    /// Positions with prior weight below this are dropped.
    pub min_weight: f64,
    /// Largest conversion ordinal used, before truncation by the realized count.
    pub j_max: usize,
    pub form: CoefficientForm,
}

impl EstimatorConfig {
    /// Defaults: ordinals up to floor(np/2) - k and the filter threshold e^{-np}/(delta p).
    pub fn new(n: usize, p: f64, prior: Prior) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("stream length must be positive".into()));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("p = {p} is outside (0, 1)")));
        }
        let k = prior.k();
        let np = n as f64 * p;
        let j_max = (np / 2.0).floor() as i64 - k as i64;
        if j_max < k as i64 {
            return Err(Error::Config(format!(
                "floor(np/2) - 2k + 1 = {} <= 0 (n = {n}, p = {p}, k = {k}): too few expected conversions",
                j_max - k as i64 + 1
            )));
        }
        Ok(Self {
            n,
            k,
            p,
            prior,
            prior_mode: PriorMode::Exact,
            min_weight: (-np).exp() / (DEFAULT_DELTA * p),
            j_max: j_max as usize,
            form: CoefficientForm::Exact,
        })
    }

    /// Every admissible ordinal (cap n - k) and no weight filter.
    pub fn wide(n: usize, p: f64, prior: Prior) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("p = {p} is outside (0, 1)")));
        }
        let k = prior.k();
        if n < 2 * k {
            return Err(Error::Config(format!("n = {n} leaves no ordinal for k = {k}")));
        }
        Ok(Self {
            n,
            k,
            p,
            prior,
            prior_mode: PriorMode::Exact,
            min_weight: 0.0,
            j_max: n - k,
            form: CoefficientForm::Exact,
        })
    }

    /// Overrides the ordinal cap; any cap with k <= j_max <= n - k keeps the estimator unbiased.
    pub fn with_j_max(mut self, j_max: usize) -> Result<Self> {
        if j_max < self.k || j_max + self.k > self.n {
            return Err(Error::Config(format!(
                "ordinal cap {j_max} outside [{}, {}]",
                self.k,
                self.n.saturating_sub(self.k)
            )));
        }
        self.j_max = j_max;
        Ok(self)
    }

    pub fn with_min_weight(mut self, tau: f64) -> Self {
        self.min_weight = tau;
        self
    }

    pub fn with_form(mut self, form: CoefficientForm) -> Self {
        self.form = form;
        self
    }

    pub fn with_prior_mode(mut self, mode: PriorMode) -> Self {
        self.prior_mode = mode;
        self
    }

    /// Number of ordinals in [k, j_max]; equals floor(np/2) - 2k + 1 by default.
    pub fn normalizer(&self) -> f64 {
        (self.j_max + 1 - self.k) as f64
    }

    /// True when k > np/8, outside the range where the regret analysis applies.
    pub fn outside_regime(&self) -> bool {
        self.k as f64 > self.n as f64 * self.p / 8.0
    }

    /// min(j_max, m - k), or None when that is below k.
    pub fn m_upper(&self, m: usize) -> Option<usize> {
        let upper = self.j_max.min(m.saturating_sub(self.k));
        (m >= self.k && upper >= self.k).then_some(upper)
    }

    /// Positions that survive the weight filter.
    pub fn kept_positions(&self) -> Vec<usize> {
        self.prior
            .weights()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0 && w >= self.min_weight)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Expectations of f1(h(X)) and f2(h(X)), exact or estimated from a pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub e_f1: f64,
    pub e_f2: f64,
}

impl Moments {
    pub fn from_predictions(predictions: &[f64], loss: &LossDecomposition) -> Self {
        let m = predictions.len().max(1) as f64;
        let f1: Vec<f64> = predictions.iter().map(|&h| loss.f1(h)).collect();
        let f2: Vec<f64> = predictions.iter().map(|&h| loss.f2(h)).collect();
        Self {
            e_f1: pairwise_sum(&f1) / m,
            e_f2: pairwise_sum(&f2) / m,
        }
    }
}

/// set_estimate(j) = sum_i weights[i] f2(h(A_j[positions[i]])) + c1 E[f1] + c2 E[f2].
#[derive(Clone, Debug, PartialEq)]
pub struct SetCoefficients {
    pub j: usize,
    pub positions: Vec<usize>,
    pub betas: Vec<BetaCoefficients>,
    pub weights: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    /// Sum of squared prior weights over `positions`.
    pub sigma_kept: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sigma: f64,
    pub sigma_kept: f64,
    pub m: usize,
    pub m_upper: Option<usize>,
    pub truncated: bool,
    pub min_beta1: f64,
    pub dropped_pairs: usize,
    pub outside_regime: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateEstimate {
    pub value: f64,
    pub diagnostics: Diagnostics,
}

/// The aggregate as an explicit affine function of the f2 values at stream indices.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateWeights {
    pub terms: Vec<(usize, f64)>,
    pub c1: f64,
    pub c2: f64,
}

impl AggregateWeights {
    pub fn evaluate(&self, h: &[f64], loss: &LossDecomposition, moments: Moments) -> f64 {
        let parts: Vec<f64> = self.terms.iter().map(|&(idx, w)| w * loss.f2(h[idx])).collect();
        pairwise_sum(&parts) + self.c1 * moments.e_f1 + self.c2 * moments.e_f2
    }
}

/// Precomputed coefficients for every ordinal in [k, j_max].
#[derive(Clone, Debug)]
pub struct Estimator {
    config: EstimatorConfig,
    loss: LossDecomposition,
    rows: Vec<SetCoefficients>,
    sigma_kept: f64,
    min_beta1: f64,
    dropped_pairs: usize,
}

impl Estimator {
    pub fn new(config: EstimatorConfig, loss: LossDecomposition) -> Result<Self> {
        let kept = config.kept_positions();
        if kept.is_empty() {
            return Err(Error::Config(format!(
                "no window position has prior weight >= {:e}",
                config.min_weight
            )));
        }
        if config.prior.k() != config.k {
            return Err(Error::Config("prior size differs from k".into()));
        }
        let table = CoefficientTable::new(config.n as u64, config.p, config.form)?;
        let pi = config.prior.weights();
        let sigma_kept: f64 = kept.iter().map(|&i| pi[i] * pi[i]).sum();
        let mut rows = Vec::with_capacity(config.j_max + 1 - config.k);
        let mut min_beta1 = f64::INFINITY;
        let mut dropped_pairs = 0;
        for j in config.k..=config.j_max {
            let mut positions = Vec::with_capacity(kept.len());
            let mut betas = Vec::with_capacity(kept.len());
            for &i in &kept {
                match table.beta(j, config.k, pi[i]) {
                    Ok(b) => {
                        min_beta1 = min_beta1.min(b.beta1);
                        positions.push(i);
                        betas.push(b);
                    }
                    // A non-positive beta1 is handled like a small prior weight: the
                    // position is skipped for this ordinal.
                    Err(Error::Degenerate(_)) => dropped_pairs += 1,
                    Err(e) => return Err(e),
                }
            }
            if positions.is_empty() {
                return Err(Error::Degenerate(format!("every position is degenerate at j = {j}")));
            }
            let sigma_j: f64 = positions.iter().map(|&i| pi[i] * pi[i]).sum();
            let tail = betas[0].tail;
            let weights = positions
                .iter()
                .zip(&betas)
                .map(|(&i, b)| pi[i] * pi[i] / (sigma_j * b.beta1))
                .collect();
            let c2 = -positions
                .iter()
                .zip(&betas)
                .map(|(&i, b)| pi[i] * pi[i] * b.beta0 / (b.beta1 * tail))
                .sum::<f64>()
                / sigma_j;
            rows.push(SetCoefficients {
                j,
                positions,
                betas,
                weights,
                c1: 1.0 / tail,
                c2,
                sigma_kept: sigma_j,
            });
        }
        if config.outside_regime() {
            log::debug!(
                "k = {} exceeds np/8 = {:.2}; the estimator stays unbiased but its variance grows",
                config.k,
                config.n as f64 * config.p / 8.0
            );
        }
        Ok(Self {
            config,
            loss,
            rows,
            sigma_kept,
            min_beta1,
            dropped_pairs,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn loss(&self) -> &LossDecomposition {
        &self.loss
    }

    pub fn coefficients(&self, j: usize) -> Result<&SetCoefficients> {
        if j < self.config.k || j > self.config.j_max {
            return Err(Error::Config(format!(
                "ordinal {j} outside [{}, {}]",
                self.config.k, self.config.j_max
            )));
        }
        Ok(&self.rows[j - self.config.k])
    }

    /// Single-position estimate at ordinal j and window position i, given h at A_j[i].
    pub fn pointwise_estimate(&self, h_value: f64, j: usize, i: usize, moments: Moments) -> Result<f64> {
        let row = self.coefficients(j)?;
        let slot = row
            .positions
            .iter()
            .position(|&q| q == i)
            .ok_or_else(|| Error::Config(format!("position {i} is filtered out at ordinal {j}")))?;
        let b = row.betas[slot];
        Ok(self.loss.f2(h_value) / b.beta1 + moments.e_f1 / b.tail
            - b.beta0 * moments.e_f2 / (b.beta1 * b.tail))
    }

    /// Weighted combination over the kept positions; `h_window[i]` is h at A_j[i].
    pub fn set_estimate(&self, h_window: &[f64], j: usize, moments: Moments) -> Result<f64> {
        if h_window.len() != self.config.k {
            return Err(Error::Dimension {
                expected: self.config.k,
                got: h_window.len(),
            });
        }
        let row = self.coefficients(j)?;
        Ok(self.row_value(row, |i| h_window[i], moments))
    }

    fn row_value(&self, row: &SetCoefficients, h_at: impl Fn(usize) -> f64, moments: Moments) -> f64 {
        let mut acc = row.c1 * moments.e_f1 + row.c2 * moments.e_f2;
        for (&i, &w) in row.positions.iter().zip(&row.weights) {
            acc += w * self.loss.f2(h_at(i));
        }
        acc
    }

    pub fn diagnostics(&self, m: usize) -> Diagnostics {
        let m_upper = self.config.m_upper(m);
        Diagnostics {
            sigma: self.config.prior.sigma(),
            sigma_kept: self.sigma_kept,
            m,
            m_upper,
            truncated: m < self.config.j_max + self.config.k,
            min_beta1: self.min_beta1,
            dropped_pairs: self.dropped_pairs,
            outside_regime: self.config.outside_regime(),
        }
    }

    fn check_sets(&self, sets: &[AttributionSet], upper: usize) -> Result<()> {
        for set in &sets[self.config.k - 1..upper] {
            if set.indices.len() != self.config.k {
                return Err(Error::Dimension {
                    expected: self.config.k,
                    got: set.indices.len(),
                });
            }
        }
        for (ord, set) in sets.iter().enumerate() {
            if set.j != ord + 1 {
                return Err(Error::Config(format!(
                    "sets must be ordered by ordinal; found j = {} at position {}",
                    set.j,
                    ord + 1
                )));
            }
        }
        Ok(())
    }

    /// Average of set estimates over j in [k, M_UPPER], divided by the ordinal count.
    /// `h[t]` is the prediction at stream index t.
    pub fn aggregate_estimate(
        &self,
        sets: &[AttributionSet],
        h: &[f64],
        moments: Moments,
    ) -> Result<AggregateEstimate> {
        let diagnostics = self.diagnostics(sets.len());
        let Some(upper) = diagnostics.m_upper else {
            return Ok(AggregateEstimate {
                value: 0.0,
                diagnostics,
            });
        };
        self.check_sets(sets, upper)?;
        let values: Vec<f64> = (self.config.k..=upper)
            .map(|j| {
                let set = &sets[j - 1];
                self.row_value(&self.rows[j - self.config.k], |i| h[set.indices[i]], moments)
            })
            .collect();
        Ok(AggregateEstimate {
            value: pairwise_sum(&values) / self.config.normalizer(),
            diagnostics,
        })
    }

    /// The aggregate written as explicit weights on f2 values plus moment coefficients.
    pub fn aggregate_weights(&self, sets: &[AttributionSet]) -> Result<AggregateWeights> {
        let norm = self.config.normalizer();
        let mut out = AggregateWeights {
            terms: Vec::new(),
            c1: 0.0,
            c2: 0.0,
        };
        let Some(upper) = self.config.m_upper(sets.len()) else {
            return Ok(out);
        };
        self.check_sets(sets, upper)?;
        for j in self.config.k..=upper {
            let row = &self.rows[j - self.config.k];
            for (&i, &w) in row.positions.iter().zip(&row.weights) {
                out.terms.push((sets[j - 1].indices[i], w / norm));
            }
            out.c1 += row.c1 / norm;
            out.c2 += row.c2 / norm;
        }
        Ok(out)
    }
}

/// Coefficients computed with an estimated prior weight in place of the true one.
pub fn robust_coefficients(n: u64, p: f64, j: usize, k: usize, pi_hat_i: f64) -> Result<BetaCoefficients> {
    crate::math::beta_coefficients(n, p, j, k, pi_hat_i)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginMode {
    /// Rate and moments from the first half; the estimator runs on the second half.
    Split,
    /// Rate from the whole stream; moments from fresh subsamples.
    #[default]
    Full,
}

/// How the stream is divided between plug-in estimation and the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginPlan {
    pub p_hat: f64,
    /// Stream indices the moments are estimated from.
    pub pool: std::ops::Range<usize>,
    /// Stream index where the estimator's sub-stream begins.
    pub offset: usize,
    /// Length of the estimator's sub-stream.
    pub n: usize,
    /// Sets renumbered and re-indexed relative to `offset`.
    pub sets: Vec<AttributionSet>,
}

pub fn plugin_split(
    n: usize,
    sets: &[AttributionSet],
    first_half_conversions: usize,
    mode: PluginMode,
) -> Result<PluginPlan> {
    if n < 2 {
        return Err(Error::Config("plug-in estimation needs n >= 2".into()));
    }
    match mode {
        PluginMode::Full => {
            let floor = 0.5 / n as f64;
            Ok(PluginPlan {
                p_hat: (sets.len() as f64 / n as f64).clamp(floor, 1.0 - floor),
                pool: 0..n,
                offset: 0,
                n,
                sets: sets.to_vec(),
            })
        }
        PluginMode::Split => {
            let half = n / 2;
            if first_half_conversions > sets.len() {
                return Err(Error::Config("more first-half conversions than sets".into()));
            }
            let last = (n - half - 1) as i64;
            let rebased = sets[first_half_conversions..]
                .iter()
                .map(|s| AttributionSet {
                    j: s.j - first_half_conversions,
                    start: s.start - half as i64,
                    indices: s
                        .indices
                        .iter()
                        .map(|&t| (t as i64 - half as i64).clamp(0, last) as usize)
                        .collect(),
                })
                .collect();
            let floor = 0.5 / half as f64;
            Ok(PluginPlan {
                p_hat: (first_half_conversions as f64 / half as f64).clamp(floor, 1.0 - floor),
                pool: 0..half,
                offset: half,
                n: n - half,
                sets: rebased,
            })
        }
    }
}

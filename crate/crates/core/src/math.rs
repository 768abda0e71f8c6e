//! Binomial tails, priors over window positions, and the estimator coefficients.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Sums with a fixed pairwise tree so the result does not depend on how callers chunk work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().copied().collect::<CompensatedSum>().value();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// ln(n!) using a direct sum for small n and the Stirling series beyond.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 32 {
        return (2..=n).map(|i| (i as f64).ln()).collect::<CompensatedSum>().value();
    }
    let x = n as f64;
    let x2 = x * x;
    let series = 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x2 * x2 * x)
        - 1.0 / (1680.0 * x2 * x2 * x2 * x);
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + series
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialTailParams {
    pub n: u64,
    pub p: f64,
    pub threshold: u64,
}

/// P(Bin(n, p) >= threshold).
pub fn binomial_tail(params: BinomialTailParams) -> Result<f64> {
    Ok(BinomialTails::new(params.n, params.p)?.tail(params.threshold as i64))
}

/// All upper tails of Bin(n, p) at once.
#[derive(Clone, Debug)]
pub struct BinomialTails {
    n: u64,
    p: f64,
    pmf: Vec<f64>,
    tail: Vec<f64>,
}

impl BinomialTails {
    pub fn new(n: u64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("p = {p} is outside (0, 1)")));
        }
        if n < 1 {
            return Err(Error::Domain("n must be at least 1".into()));
        }
        let len = n as usize + 1;
        let (lp, lq) = (p.ln(), (-p).ln_1p());
        let log_pmf: Vec<f64> = (0..=n)
            .map(|m| ln_choose(n, m) + m as f64 * lp + (n - m) as f64 * lq)
            .collect();
        let (mode, lmax) = log_pmf
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (m, v)| if v > best.1 { (m, v) } else { best });
        let w: Vec<f64> = log_pmf.iter().map(|&v| (v - lmax).exp()).collect();
        let total = w.iter().copied().collect::<CompensatedSum>().value();

        // Tails above the mode are summed from the top; tails at or below it as one minus the
        // lower sum, so that each side only ever adds terms smaller than the result.
        let mut tail = vec![0.0; len + 1];
        let mut upper = CompensatedSum::new();
        for t in (mode + 1..len).rev() {
            upper.add(w[t]);
            tail[t] = upper.value() / total;
        }
        let mut lower = CompensatedSum::new();
        for t in 0..=mode {
            tail[t] = (1.0 - lower.value() / total).clamp(0.0, 1.0);
            lower.add(w[t]);
        }
        let pmf = w.iter().map(|&x| x / total).collect();
        Ok(Self { n, p, pmf, tail })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// P(Bin(n, p) >= threshold); 1 for threshold <= 0 and 0 above n.
    pub fn tail(&self, threshold: i64) -> f64 {
        if threshold <= 0 {
            1.0
        } else if threshold as u64 > self.n {
            0.0
        } else {
            self.tail[threshold as usize]
        }
    }

    pub fn pmf(&self, m: i64) -> f64 {
        if m < 0 || m as u64 > self.n {
            0.0
        } else {
            self.pmf[m as usize]
        }
    }
}

/// A distribution over the k positions of a window; position `k - 1` is the one adjacent
/// to the conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Prior {
    weights: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Prior {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Prior::new(weights)
    }
}

impl From<Prior> for Vec<f64> {
    fn from(prior: Prior) -> Self {
        prior.weights
    }
}

impl Prior {
    /// Accepts any non-negative vector whose entries sum to 1 within 1e-9, renormalized.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("prior must have at least one position".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("prior weights must be finite and non-negative".into()));
        }
        let total = weights.iter().copied().collect::<CompensatedSum>().value();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("prior weights sum to {total}, not 1")));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    fn from_unnormalized(raw: Vec<f64>) -> Self {
        let total = raw.iter().copied().collect::<CompensatedSum>().value();
        Self {
            weights: raw.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "k must be positive");
        Self::from_unnormalized(vec![1.0; k])
    }

    /// pi proportional to (2^-k, ..., 2^-2, 2^-1).
    pub fn exponential(k: usize) -> Self {
        assert!(k > 0, "k must be positive");
        Self::from_unnormalized((0..k).map(|r| 0.5f64.powi((k - r) as i32)).collect())
    }

    /// All mass on `position`.
    pub fn singleton(k: usize, position: usize) -> Self {
        assert!(position < k, "position out of range");
        let mut weights = vec![0.0; k];
        weights[position] = 1.0;
        Self { weights }
    }

    /// Last-touch attribution: the converting impression closes the window.
    pub fn singleton_last(k: usize) -> Self {
        Self::singleton(k, k - 1)
    }

    /// pi proportional to (1, 2, ..., k).
    pub fn linear_decay(k: usize) -> Self {
        assert!(k > 0, "k must be positive");
        Self::from_unnormalized((1..=k).map(|r| r as f64).collect())
    }

    /// (1 - eps) * self + eps * other.
    pub fn mix(&self, other: &Prior, eps: f64) -> Result<Self> {
        if self.k() != other.k() {
            return Err(Error::Config("cannot mix priors of different sizes".into()));
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Domain(format!("mixing weight {eps} outside [0, 1]")));
        }
        Ok(Self::from_unnormalized(
            self.weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| (1.0 - eps) * a + eps * b)
                .collect(),
        ))
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, position: usize) -> f64 {
        self.weights[position]
    }

    pub fn sigma(&self) -> f64 {
        prior_sigma(self)
    }

    /// Most likely position; the lowest one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.weights).expect("validated prior")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler().sample(rng)
    }

    pub fn l1_distance(&self, other: &Prior) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn l2_distance(&self, other: &Prior) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Named prior shapes, instantiated for a given k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    Uniform,
    Exponential,
    SingletonLast,
    LinearDecay,
    Custom(Vec<f64>),
}

impl PriorFamily {
    pub fn build(&self, k: usize) -> Result<Prior> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        match self {
            PriorFamily::Uniform => Ok(Prior::uniform(k)),
            PriorFamily::Exponential => Ok(Prior::exponential(k)),
            PriorFamily::SingletonLast => Ok(Prior::singleton_last(k)),
            PriorFamily::LinearDecay => Ok(Prior::linear_decay(k)),
            PriorFamily::Custom(w) => {
                if w.len() != k {
                    return Err(Error::Config(format!("custom prior has {} weights, k = {k}", w.len())));
                }
                Prior::new(w.clone())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriorFamily::Uniform => "uniform",
            PriorFamily::Exponential => "exponential",
            PriorFamily::SingletonLast => "singleton_last",
            PriorFamily::LinearDecay => "linear_decay",
            PriorFamily::Custom(_) => "custom",
        }
    }
}

pub fn prior_sigma(prior: &Prior) -> f64 {
    prior.weights.iter().map(|w| w * w).collect::<CompensatedSum>().value()
}

/// How the label-0 mass entering the coefficients is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientForm {
    /// P(Y = 0, j <= M - k) = B(n, p, j+k) - p B(n-1, p, j+k-1). Exactly unbiased.
    #[default]
    Exact,
    /// Uses the large-np limit 1 - p B(n-1, p, j+k-1) for the label-0 mass. The error is
    /// of order 1 - B(n, p, j+k), negligible once j + k is well below np but visible at small n.
    UnitMass,
    /// Negates beta0. Only useful to check that verification catches a broken estimator.
    #[doc(hidden)]
    FlippedBeta0,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaCoefficients {
    pub beta1: f64,
    pub beta0: f64,
    /// B(n, p, j+k) = P(j <= M - k).
    pub tail: f64,
}

/// Coefficients for one (n, p): tails of Bin(n, p) and Bin(n-1, p) computed once and
/// reused for every (j, i).
#[derive(Clone, Debug)]
pub struct CoefficientTable {
    full: BinomialTails,
    reduced: Option<BinomialTails>,
    form: CoefficientForm,
}

impl CoefficientTable {
    pub fn new(n: u64, p: f64, form: CoefficientForm) -> Result<Self> {
        let full = BinomialTails::new(n, p)?;
        let reduced = if n > 1 {
            Some(BinomialTails::new(n - 1, p)?)
        } else {
            None
        };
        Ok(Self {
            full,
            reduced,
            form,
        })
    }

    pub fn n(&self) -> u64 {
        self.full.n
    }

    pub fn p(&self) -> f64 {
        self.full.p
    }

    fn reduced_tail(&self, threshold: i64) -> f64 {
        match &self.reduced {
            Some(t) => t.tail(threshold),
            None => {
                if threshold <= 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn reduced_pmf(&self, m: i64) -> f64 {
        match &self.reduced {
            Some(t) => t.pmf(m),
            None => {
                if m == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tail(&self, threshold: i64) -> f64 {
        self.full.tail(threshold)
    }

    pub fn beta(&self, j: usize, k: usize, pi_i: f64) -> Result<BetaCoefficients> {
        if j < 1 || k < 1 {
            return Err(Error::Domain(format!("need j >= 1 and k >= 1, got j = {j}, k = {k}")));
        }
        if !(0.0..=1.0).contains(&pi_i) {
            return Err(Error::Domain(format!("prior weight {pi_i} outside [0, 1]")));
        }
        let p = self.p();
        let t = (j + k) as i64;
        let b = self.full.tail(t);
        let b_reduced = self.reduced_tail(t - 1);
        // B(n-1, p, t-1) - B(n, p, t) = (1 - p) P(Bin(n-1, p) = t-1) and
        // B(n, p, t) - p B(n-1, p, t-1) = (1 - p) B(n-1, p, t); both are used in the
        // cancellation-free form.
        let (beta1, beta0) = match self.form {
            CoefficientForm::Exact | CoefficientForm::FlippedBeta0 => (
                pi_i * b / p + (1.0 - pi_i) * self.reduced_pmf(t - 1),
                (1.0 - pi_i) * self.reduced_tail(t),
            ),
            CoefficientForm::UnitMass => {
                let zero_mass = (1.0 - p * b_reduced) / (1.0 - p);
                (
                    pi_i * b / p + (b_reduced - zero_mass) * (1.0 - pi_i),
                    zero_mass * (1.0 - pi_i),
                )
            }
        };
        let beta0 = if self.form == CoefficientForm::FlippedBeta0 {
            -beta0
        } else {
            beta0
        };
        if !(beta1 > 0.0) || !(b > 0.0) {
            return Err(Error::Degenerate(format!(
                "beta1 = {beta1:e}, tail = {b:e} at n = {}, p = {p}, j = {j}, k = {k}, pi = {pi_i}",
                self.n()
            )));
        }
        Ok(BetaCoefficients {
            beta1,
            beta0,
            tail: b,
        })
    }
}

/// Coefficients (beta1, beta0) for conversion ordinal j and a position with prior weight pi_i.
pub fn beta_coefficients(n: u64, p: f64, j: usize, k: usize, pi_i: f64) -> Result<BetaCoefficients> {
    beta_coefficients_with(CoefficientForm::Exact, n, p, j, k, pi_i)
}

pub fn beta_coefficients_with(
    form: CoefficientForm,
    n: u64,
    p: f64,
    j: usize,
    k: usize,
    pi_i: f64,
) -> Result<BetaCoefficients> {
    CoefficientTable::new(n, p, form)?.beta(j, k, pi_i)
}

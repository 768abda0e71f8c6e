//! Exact verification by enumerating every label string of a small instance.

use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Features;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig, Moments};
use crate::loss::{LossDecomposition, LossKind};
use crate::math::{CoefficientForm, CompensatedSum, Prior, PriorFamily};
use crate::sim::{generate_attribution_sets, LabeledStream};

/// Largest stream length the enumerations accept.
pub const MAX_N: usize = 14;

/// Conditional laws of X given Y over a finite feature domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDomain {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl FeatureDomain {
    pub fn size(&self) -> usize {
        self.positive.len()
    }

    fn validate(&self) -> Result<()> {
        let ok = |law: &[f64]| {
            law.iter().all(|&q| q >= 0.0) && (law.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        if self.positive.len() != self.negative.len() || self.positive.is_empty() || self.size() > 4 {
            return Err(Error::Config("feature domain must have 1 to 4 points in both laws".into()));
        }
        if !ok(&self.positive) || !ok(&self.negative) {
            return Err(Error::Config("conditional laws must be probability vectors".into()));
        }
        Ok(())
    }

    pub fn law(&self, label: bool) -> &[f64] {
        if label {
            &self.positive
        } else {
            &self.negative
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationInstance {
    pub n: usize,
    pub p: f64,
    /// The adversary's prior.
    pub prior: Prior,
    pub domain: FeatureDomain,
    /// h(x) for each domain point.
    pub hypothesis: Vec<f64>,
    pub loss: LossDecomposition,
}

impl EnumerationInstance {
    pub fn new(
        n: usize,
        p: f64,
        prior: Prior,
        domain: FeatureDomain,
        hypothesis: Vec<f64>,
        loss: LossDecomposition,
    ) -> Result<Self> {
        if n > MAX_N {
            return Err(Error::TooLarge { n, limit: MAX_N });
        }
        domain.validate()?;
        if hypothesis.len() != domain.size() || hypothesis.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::Config("hypothesis table must map each domain point into [0, 1]".into()));
        }
        if !(p > 0.0 && p < 1.0) || n == 0 {
            return Err(Error::Domain(format!("need n >= 1 and p in (0, 1), got n = {n}, p = {p}")));
        }
        Ok(Self {
            n,
            p,
            prior,
            domain,
            hypothesis,
            loss,
        })
    }

    pub fn k(&self) -> usize {
        self.prior.k()
    }

    /// E[f1(h(X))] and E[f2(h(X))] under the marginal law of X.
    pub fn moments(&self) -> Moments {
        let (mut e_f1, mut e_f2) = (0.0, 0.0);
        for (x, &h) in self.hypothesis.iter().enumerate() {
            let px = self.p * self.domain.positive[x] + (1.0 - self.p) * self.domain.negative[x];
            e_f1 += px * self.loss.f1(h);
            e_f2 += px * self.loss.f2(h);
        }
        Moments { e_f1, e_f2 }
    }

    /// E[f2(h(X)) | Y = label].
    fn conditional_f2(&self, label: bool) -> f64 {
        self.domain
            .law(label)
            .iter()
            .zip(&self.hypothesis)
            .map(|(q, &h)| q * self.loss.f2(h))
            .sum()
    }
}

/// L(h) = sum over y and x of P(y) P(x | y) loss(h(x), y).
pub fn exact_population_loss(inst: &EnumerationInstance) -> f64 {
    let mut total = 0.0;
    for (x, &h) in inst.hypothesis.iter().enumerate() {
        total += inst.p * inst.domain.positive[x] * inst.loss.loss(h, true);
        total += (1.0 - inst.p) * inst.domain.negative[x] * inst.loss.loss(h, false);
    }
    total
}

/// Placement-averaged label moments of one (n, p, prior), shared by all hypotheses:
/// `mass[j] = P(j <= M - k)` and `ones[j][i] = P(Y at A_j[i] = 1, j <= M - k)`.
#[derive(Clone, Debug)]
pub struct LabelTable {
    n: usize,
    k: usize,
    mass: Vec<f64>,
    ones: Vec<Vec<f64>>,
}

fn string_probabilities(n: usize, p: f64) -> Vec<f64> {
    (0..=n).map(|m| p.powi(m as i32) * (1.0 - p).powi((n - m) as i32)).collect()
}

impl LabelTable {
    pub fn new(n: usize, p: f64, prior: &Prior) -> Result<Self> {
        if n > MAX_N {
            return Err(Error::TooLarge { n, limit: MAX_N });
        }
        let k = prior.k();
        let pi = prior.weights();
        let prob = string_probabilities(n, p);
        let mut mass = vec![CompensatedSum::new(); n + 1];
        let mut ones = vec![vec![CompensatedSum::new(); k]; n + 1];
        let mut conv = Vec::with_capacity(n);
        for bits in 0u32..(1u32 << n) {
            conv.clear();
            conv.extend((0..n).filter(|&t| bits >> t & 1 == 1));
            let m = conv.len();
            if m < 2 * k {
                continue;
            }
            let ps = prob[m];
            for j in k..=m - k {
                let c = conv[j - 1] as i64;
                mass[j].add(ps);
                for i in 0..k {
                    let q: f64 = (0..k)
                        .map(|r| {
                            let idx = (c + i as i64 - r as i64).clamp(0, n as i64 - 1) as usize;
                            pi[r] * (bits >> idx & 1) as f64
                        })
                        .sum();
                    ones[j][i].add(ps * q);
                }
            }
        }
        Ok(Self {
            n,
            k,
            mass: mass.iter().map(|s| s.value()).collect(),
            ones: ones.iter().map(|row| row.iter().map(|s| s.value()).collect()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Pointwise { j: usize, i: usize },
    Set { j: usize },
    Aggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationOptions {
    /// Prior plugged into the coefficients; the instance prior when None.
    pub prior_used: Option<Prior>,
    /// Ordinal cap of the aggregate; the estimator default when None.
    pub j_max: Option<usize>,
    pub form: CoefficientForm,
}

impl Default for ExpectationOptions {
    fn default() -> Self {
        Self {
            prior_used: None,
            j_max: None,
            form: CoefficientForm::Exact,
        }
    }
}

/// Exact expectations of every estimator target for one instance.
pub struct Expectations<'a> {
    inst: &'a EnumerationInstance,
    table: &'a LabelTable,
    wide: Result<Estimator>,
    aggregate: Result<Estimator>,
    moments: Moments,
    m1: f64,
    m0: f64,
}

impl<'a> Expectations<'a> {
    pub fn new(inst: &'a EnumerationInstance, table: &'a LabelTable, opts: &ExpectationOptions) -> Result<Self> {
        if table.n != inst.n || table.k != inst.k() {
            return Err(Error::Config("label table does not match the instance".into()));
        }
        let prior = opts.prior_used.clone().unwrap_or_else(|| inst.prior.clone());
        if inst.n < 2 * inst.k() {
            return Err(Error::Config("instance too short for any ordinal".into()));
        }
        let base = EstimatorConfig {
            n: inst.n,
            k: inst.k(),
            p: inst.p,
            prior: prior.clone(),
            prior_mode: if opts.prior_used.is_some() {
                crate::estimator::PriorMode::Estimated
            } else {
                crate::estimator::PriorMode::Exact
            },
            min_weight: 0.0,
            j_max: inst.n - inst.k(),
            form: opts.form,
        };
        let wide = Estimator::new(base.clone(), inst.loss);
        let aggregate = match opts.j_max {
            Some(cap) => base.clone().with_j_max(cap),
            None => EstimatorConfig::new(inst.n, inst.p, prior).map(|c| EstimatorConfig {
                min_weight: 0.0,
                form: opts.form,
                prior_mode: base.prior_mode,
                ..c
            }),
        }
        .and_then(|c| Estimator::new(c, inst.loss));
        Ok(Self {
            inst,
            table,
            wide,
            aggregate,
            moments: inst.moments(),
            m1: inst.conditional_f2(true),
            m0: inst.conditional_f2(false),
        })
    }

    /// E[pointwise(j, i) 1{j <= M - k}], through the estimator's pointwise function.
    fn wide(&self) -> Result<&Estimator> {
        self.wide.as_ref().map_err(|e| Error::Degenerate(e.to_string()))
    }

    pub fn pointwise(&self, j: usize, i: usize) -> Result<f64> {
        let wide = self.wide()?;
        wide.coefficients(j)?;
        let mut v = [0.0; 2];
        for (label, slot) in [(false, 0), (true, 1)] {
            for (x, &q) in self.inst.domain.law(label).iter().enumerate() {
                v[slot] += q * wide.pointwise_estimate(self.inst.hypothesis[x], j, i, self.moments)?;
            }
        }
        let ones = self.table.ones[j][i];
        Ok(ones * v[1] + (self.table.mass[j] - ones) * v[0])
    }

    fn set_with(&self, est: &Estimator, j: usize) -> Result<f64> {
        let row = est.coefficients(j)?;
        let mass = self.table.mass[j];
        let mut total = mass * (row.c1 * self.moments.e_f1 + row.c2 * self.moments.e_f2);
        for (&i, &w) in row.positions.iter().zip(&row.weights) {
            let ones = self.table.ones[j][i];
            total += w * (self.m0 * (mass - ones) + self.m1 * ones);
        }
        Ok(total)
    }

    pub fn set(&self, j: usize) -> Result<f64> {
        self.set_with(self.wide()?, j)
    }

    pub fn aggregate(&self) -> Result<f64> {
        let est = self.aggregate.as_ref().map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(m.clone()),
            other => Error::Config(other.to_string()),
        })?;
        let cfg = est.config();
        let parts = (cfg.k..=cfg.j_max).map(|j| self.set_with(est, j)).collect::<Result<Vec<_>>>()?;
        Ok(parts.iter().copied().collect::<CompensatedSum>().value() / cfg.normalizer())
    }

    pub fn get(&self, target: Target) -> Result<f64> {
        match target {
            Target::Pointwise { j, i } => self.pointwise(j, i),
            Target::Set { j } => self.set(j),
            Target::Aggregate => self.aggregate(),
        }
    }

    /// Positions the estimator keeps at ordinal j.
    pub fn positions(&self, j: usize) -> Result<Vec<usize>> {
        Ok(self.wide()?.coefficients(j)?.positions.clone())
    }
}

/// E[estimate 1{j <= M - k}] for one target.
pub fn exact_estimator_expectation(
    inst: &EnumerationInstance,
    target: Target,
    opts: &ExpectationOptions,
) -> Result<f64> {
    let table = LabelTable::new(inst.n, inst.p, &inst.prior)?;
    Expectations::new(inst, &table, opts)?.get(target)
}

pub fn rational(p: f64) -> BigRational {
    BigRational::from_float(p).expect("finite probability")
}

fn pow(base: &BigRational, e: usize) -> BigRational {
    let mut out = BigRational::one();
    for _ in 0..e {
        out *= base;
    }
    out
}

fn binomial(n: usize, k: usize) -> BigInt {
    let mut out = BigInt::one();
    for i in 0..k {
        out = out * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    out
}

/// P(Bin(n, p) >= threshold) in exact arithmetic.
pub fn exact_tail(n: usize, p: &BigRational, threshold: usize) -> BigRational {
    let q = BigRational::one() - p;
    let mut total = BigRational::zero();
    for m in threshold..=n {
        total += BigRational::from_integer(binomial(n, m)) * pow(p, m) * pow(&q, n - m);
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// t positions before the conversion.
    Before,
    /// t positions after the conversion.
    After,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalCheck {
    pub n: usize,
    pub j: usize,
    pub k: usize,
    pub t: usize,
    pub side: Side,
    pub enumerated: BigRational,
    pub closed_form: BigRational,
}

impl MarginalCheck {
    pub fn holds(&self) -> bool {
        self.enumerated == self.closed_form
    }
}

/// Counts of label strings with j <= M - k and a 1 at i_j -+ t, bucketed by M.
fn counts_by_m(n: usize, j: usize, k: usize, offset: i64) -> Vec<u64> {
    let mut counts = vec![0u64; n + 1];
    for bits in 0u32..(1u32 << n) {
        let m = bits.count_ones() as usize;
        if m < j + k {
            continue;
        }
        let mut seen = 0;
        let mut conv = 0;
        for t in 0..n {
            if bits >> t & 1 == 1 {
                seen += 1;
                if seen == j {
                    conv = t as i64;
                    break;
                }
            }
        }
        let idx = conv + offset;
        if idx >= 0 && (idx as usize) < n && bits >> idx & 1 == 1 {
            counts[m] += 1;
        }
    }
    counts
}

fn weighted(counts: &[u64], p: &BigRational) -> BigRational {
    let q = BigRational::one() - p;
    let n = counts.len() - 1;
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(m, &c)| BigRational::from_integer(BigInt::from(c)) * pow(p, m) * pow(&q, n - m))
        .fold(BigRational::zero(), |a, b| a + b)
}

/// Enumerated P(Y at i_j -+ t = 1, j <= M - k) against p B(n-1, p, j+k-1). The identity needs
/// 1 <= t <= j - 1, and t <= k after the conversion.
pub fn verify_marginal_identity(n: usize, p: &BigRational, j: usize, k: usize, t: usize, side: Side) -> Result<MarginalCheck> {
    if n > MAX_N {
        return Err(Error::TooLarge { n, limit: MAX_N });
    }
    if t + 1 > j {
        return Err(Error::Domain(format!("need t + 1 <= j, got t = {t}, j = {j}")));
    }
    let offset = match side {
        Side::Before => -(t as i64),
        Side::After => t as i64,
    };
    let enumerated = weighted(&counts_by_m(n, j, k, offset), p);
    let closed_form = if j + k > n {
        BigRational::zero()
    } else {
        p * exact_tail(n - 1, p, j + k - 1)
    };
    Ok(MarginalCheck {
        n,
        j,
        k,
        t,
        side,
        enumerated,
        closed_form,
    })
}

/// At the conversion itself (t = 0) the probability is B(n, p, j+k) instead.
pub fn marginal_at_conversion(n: usize, p: &BigRational, j: usize, k: usize) -> (BigRational, BigRational) {
    (weighted(&counts_by_m(n, j, k, 0), p), exact_tail(n, p, j + k))
}

/// Every marginal-identity check for n <= `max_n`, p in `ps`, k in `ks`.
pub fn marginal_identity_grid(max_n: usize, ps: &[BigRational], ks: &[usize]) -> Result<Vec<MarginalCheck>> {
    let mut out = Vec::new();
    for n in 2..=max_n {
        for p in ps {
            for &k in ks {
                for j in 2..=n {
                    for t in 1..j {
                        out.push(verify_marginal_identity(n, p, j, k, t, Side::Before)?);
                        if t <= k {
                            out.push(verify_marginal_identity(n, p, j, k, t, Side::After)?);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalLaw {
    pub j: usize,
    pub t: usize,
    pub side: Side,
    pub label: bool,
    pub event_probability: f64,
    /// None when the conditioning event has probability zero.
    pub law: Option<Vec<f64>>,
    pub total_variation: Option<f64>,
}

/// Law of X at i_j -+ t given {Y there = label, j <= M - k}, by enumerating every joint
/// (label, feature) sequence. Covers t = 0 and, after the conversion, t <= k.
pub fn conditional_laws(inst: &EnumerationInstance) -> Result<Vec<ConditionalLaw>> {
    let n = inst.n;
    let d = inst.domain.size();
    let radix = 2 * d;
    let total = (radix as u64).checked_pow(n as u32).filter(|&t| t <= 1 << 24).ok_or(Error::TooLarge {
        n,
        limit: 10,
    })?;
    let k = inst.k();
    // index: (j, t, side, label) -> accumulators over the domain plus event mass
    let key = |j: usize, t: usize, side: usize, label: usize| ((j * n + t) * 2 + side) * 2 + label;
    let slots = (n + 1) * n * 4;
    let mut acc = vec![vec![0.0; d + 1]; slots];
    let mut labels = vec![false; n];
    let mut xs = vec![0usize; n];
    let mut conv = Vec::with_capacity(n);
    for code in 0..total {
        let mut c = code;
        let mut prob = 1.0;
        conv.clear();
        for t in 0..n {
            let digit = (c % radix as u64) as usize;
            c /= radix as u64;
            labels[t] = digit >= d;
            xs[t] = digit % d;
            let py = if labels[t] { inst.p } else { 1.0 - inst.p };
            prob *= py * inst.domain.law(labels[t])[xs[t]];
            if labels[t] {
                conv.push(t);
            }
        }
        if prob == 0.0 || conv.len() < 2 * k {
            continue;
        }
        let m = conv.len();
        for j in 1..=m - k {
            let ij = conv[j - 1];
            for t in 0..j {
                for (side, idx) in [(0usize, ij as i64 - t as i64), (1, ij as i64 + t as i64)] {
                    if side == 1 && (t == 0 || t > k) {
                        continue;
                    }
                    if idx < 0 || idx >= n as i64 {
                        continue;
                    }
                    let idx = idx as usize;
                    let slot = &mut acc[key(j, t, side, labels[idx] as usize)];
                    slot[xs[idx]] += prob;
                    slot[d] += prob;
                }
            }
        }
    }
    let mut out = Vec::new();
    for j in 1..=n {
        for t in 0..j {
            for side in 0..2 {
                if side == 1 && (t == 0 || t > k) {
                    continue;
                }
                for label in [false, true] {
                    let slot = &acc[key(j, t, side, label as usize)];
                    let mass = slot[d];
                    let (law, tv) = if mass > 0.0 {
                        let law: Vec<f64> = slot[..d].iter().map(|v| v / mass).collect();
                        let tv = 0.5
                            * law
                                .iter()
                                .zip(inst.domain.law(label))
                                .map(|(a, b)| (a - b).abs())
                                .sum::<f64>();
                        (Some(law), Some(tv))
                    } else {
                        (None, None)
                    };
                    out.push(ConditionalLaw {
                        j,
                        t,
                        side: if side == 0 { Side::Before } else { Side::After },
                        label,
                        event_probability: mass,
                        law,
                        total_variation: tv,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// One conditional law; see [`conditional_laws`].
pub fn verify_conditional_law(
    inst: &EnumerationInstance,
    j: usize,
    t: usize,
    side: Side,
    label: bool,
) -> Result<ConditionalLaw> {
    if t + 1 > j {
        return Err(Error::Domain(format!("need t + 1 <= j, got t = {t}, j = {j}")));
    }
    conditional_laws(inst)?
        .into_iter()
        .find(|c| c.j == j && c.t == t && c.side == side && c.label == label)
        .ok_or_else(|| Error::Domain("no such grid point (after-side needs 1 <= t <= k)".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustCheck {
    pub eps: f64,
    pub l1: f64,
    pub l2: f64,
    pub sigma: f64,
    pub bias: f64,
    pub bound: f64,
}

/// |E[estimate with prior_hat] - L(h)| against 16 p F2 (l1 / sigma + l2 / sigma^1.5).
pub fn robust_bias(inst: &EnumerationInstance, prior_hat: &Prior, j_max: Option<usize>) -> Result<RobustCheck> {
    let table = LabelTable::new(inst.n, inst.p, &inst.prior)?;
    let opts = ExpectationOptions {
        prior_used: Some(prior_hat.clone()),
        j_max,
        ..ExpectationOptions::default()
    };
    let value = Expectations::new(inst, &table, &opts)?.aggregate()?;
    let sigma = inst.prior.sigma();
    let l1 = inst.prior.l1_distance(prior_hat);
    let l2 = inst.prior.l2_distance(prior_hat);
    Ok(RobustCheck {
        eps: f64::NAN,
        l1,
        l2,
        sigma,
        bias: (value - exact_population_loss(inst)).abs(),
        bound: 16.0 * inst.p * inst.loss.f2_bound * (l1 / sigma + l2 / sigma.powf(1.5)),
    })
}

/// Expectation when moments come from an independent first half of the stream and the
/// estimator runs on the second half, enumerating the first half's labels and features.
pub fn split_mode_expectation(inst: &EnumerationInstance) -> Result<f64> {
    let half = inst.n / 2;
    let rest = inst.n - half;
    let k = inst.k();
    let second = EnumerationInstance {
        n: rest,
        ..inst.clone()
    };
    let table = LabelTable::new(rest, inst.p, &inst.prior)?;
    let opts = ExpectationOptions {
        j_max: Some(rest - k),
        ..ExpectationOptions::default()
    };
    let d = inst.domain.size();
    let mut total = CompensatedSum::new();
    // Joint law of one first-half point over (y, x); moments are averages over the half.
    let point: Vec<(f64, f64)> = (0..2 * d)
        .map(|code| {
            let (y, x) = (code >= d, code % d);
            let pr = if y { inst.p } else { 1.0 - inst.p } * inst.domain.law(y)[x];
            (pr, inst.hypothesis[x])
        })
        .collect();
    let combos = (2 * d).pow(half as u32);
    for code in 0..combos {
        let mut c = code;
        let mut prob = 1.0;
        let mut preds = Vec::with_capacity(half);
        for _ in 0..half {
            let (pr, h) = point[c % (2 * d)];
            c /= 2 * d;
            prob *= pr;
            preds.push(h);
        }
        if prob == 0.0 {
            continue;
        }
        let moments = Moments::from_predictions(&preds, &inst.loss);
        let mut exp = Expectations::new(&second, &table, &opts)?;
        exp.moments = moments;
        total.add(prob * exp.aggregate()?);
    }
    Ok(total.value())
}

/// Expectation when the rate is estimated from the same stream as M / n (kept inside (0, 1))
/// and the moments are exact, with the ordinal cap n - k.
pub fn full_mode_expectation(inst: &EnumerationInstance) -> Result<f64> {
    let n = inst.n;
    let k = inst.k();
    let pi = inst.prior.weights();
    let moments = inst.moments();
    let (m1, m0) = (inst.conditional_f2(true), inst.conditional_f2(false));
    let prob = string_probabilities(n, inst.p);
    let floor = 0.5 / n as f64;
    let mut per_m: Vec<Option<Estimator>> = vec![None; n + 1];
    let mut total = CompensatedSum::new();
    for bits in 0u32..(1u32 << n) {
        let conv: Vec<usize> = (0..n).filter(|&t| bits >> t & 1 == 1).collect();
        let m = conv.len();
        if m < 2 * k {
            continue;
        }
        if per_m[m].is_none() {
            let p_hat = (m as f64 / n as f64).clamp(floor, 1.0 - floor);
            let cfg = EstimatorConfig {
                n,
                k,
                p: p_hat,
                prior: inst.prior.clone(),
                prior_mode: crate::estimator::PriorMode::Exact,
                min_weight: 0.0,
                j_max: n - k,
                form: CoefficientForm::Exact,
            };
            per_m[m] = Some(Estimator::new(cfg, inst.loss)?);
        }
        let est = per_m[m].as_ref().expect("built above");
        let mut value = 0.0;
        for j in k..=m - k {
            let row = est.coefficients(j)?;
            value += row.c1 * moments.e_f1 + row.c2 * moments.e_f2;
            for (&i, &w) in row.positions.iter().zip(&row.weights) {
                let q: f64 = (0..k)
                    .map(|r| {
                        let idx = (conv[j - 1] as i64 + i as i64 - r as i64).clamp(0, n as i64 - 1) as usize;
                        pi[r] * (bits >> idx & 1) as f64
                    })
                    .sum();
                value += w * (m0 + (m1 - m0) * q);
            }
        }
        total.add(prob[m] * value / est.config().normalizer());
    }
    Ok(total.value())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub replicates: usize,
    pub mean: f64,
    pub standard_error: f64,
    pub exact: f64,
}

impl MonteCarloResult {
    pub fn z_score(&self) -> f64 {
        (self.mean - self.exact) / self.standard_error
    }
}

/// Runs the simulator and the aggregate estimator `replicates` times and compares the mean
/// with the exact expectation.
pub fn monte_carlo(inst: &EnumerationInstance, j_max: Option<usize>, replicates: usize, seed: u64) -> Result<MonteCarloResult> {
    let table = LabelTable::new(inst.n, inst.p, &inst.prior)?;
    let opts = ExpectationOptions {
        j_max,
        ..ExpectationOptions::default()
    };
    let exact = Expectations::new(inst, &table, &opts)?.aggregate()?;
    let config = match j_max {
        Some(cap) => EstimatorConfig::wide(inst.n, inst.p, inst.prior.clone())?.with_j_max(cap)?,
        None => EstimatorConfig::new(inst.n, inst.p, inst.prior.clone())?,
    }
    .with_min_weight(0.0);
    let est = Estimator::new(config, inst.loss)?;
    let moments = inst.moments();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sumsq) = (CompensatedSum::new(), CompensatedSum::new());
    let mut labels = vec![0u8; inst.n];
    let mut xs = vec![0.0; inst.n];
    let mut preds = vec![0.0; inst.n];
    for r in 0..replicates {
        for t in 0..inst.n {
            let y = rng.gen::<f64>() < inst.p;
            labels[t] = y as u8;
            let law = inst.domain.law(y);
            let mut u = rng.gen::<f64>();
            let mut x = law.len() - 1;
            for (v, &q) in law.iter().enumerate() {
                if u < q {
                    x = v;
                    break;
                }
                u -= q;
            }
            xs[t] = x as f64;
            preds[t] = inst.hypothesis[x];
        }
        let stream = LabeledStream::new(Features::new(1, xs.clone())?, labels.clone())?;
        let sets = generate_attribution_sets(&stream, &inst.prior, seed ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).sets;
        let value = est.aggregate_estimate(&sets, &preds, moments)?.value;
        sum.add(value);
        sumsq.add(value * value);
    }
    let count = replicates as f64;
    let mean = sum.value() / count;
    let var = (sumsq.value() - count * mean * mean) / (count - 1.0);
    Ok(MonteCarloResult {
        replicates,
        mean,
        standard_error: (var.max(0.0) / count).sqrt(),
        exact,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LossSpec {
    Square,
    Logloss { clip: f64 },
}

impl LossSpec {
    pub fn build(&self) -> Result<LossDecomposition> {
        LossDecomposition::from_kind(match self {
            LossSpec::Square => LossKind::Square,
            LossSpec::Logloss { clip } => LossKind::ClippedLog { clip: *clip },
        })
    }

    pub fn label(&self) -> String {
        match self {
            LossSpec::Square => "square".into(),
            LossSpec::Logloss { clip } => format!("logloss({clip})"),
        }
    }
}

/// The unbiasedness grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub p: Vec<f64>,
    pub k: Vec<usize>,
    pub priors: Vec<PriorFamily>,
    pub losses: Vec<LossSpec>,
    pub domain: FeatureDomain,
    pub hypotheses: Vec<Vec<f64>>,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustSpec {
    pub n: usize,
    pub p: Vec<f64>,
    pub k: Vec<usize>,
    pub priors: Vec<PriorFamily>,
    /// Estimated priors are (1 - eps) pi + eps q for q from this family.
    pub perturbation: PriorFamily,
    pub levels: Vec<f64>,
    pub losses: Vec<LossSpec>,
    pub domain: FeatureDomain,
    pub hypotheses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloFixture {
    pub name: String,
    pub n: usize,
    pub p: f64,
    pub k: usize,
    pub prior: PriorFamily,
    pub loss: LossSpec,
    pub domain: FeatureDomain,
    pub hypothesis: Vec<f64>,
    #[serde(default)]
    pub j_max: Option<usize>,
}

impl MonteCarloFixture {
    pub fn instance(&self) -> Result<EnumerationInstance> {
        EnumerationInstance::new(
            self.n,
            self.p,
            self.prior.build(self.k)?,
            self.domain.clone(),
            self.hypothesis.clone(),
            self.loss.build()?,
        )
    }
}

/// Fixture directory: `ATTRSETS_FIXTURES` or the one shipped with the crate.
pub fn fixtures_dir() -> PathBuf {
    std::env::var_os("ATTRSETS_FIXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures")))
}

pub fn load_fixture<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        offset: 0,
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub n: usize,
    pub p: f64,
    pub k: usize,
    pub prior: String,
    pub loss: String,
    pub hypothesis: usize,
    pub target: String,
    pub expected: f64,
    pub population: f64,
    pub error: f64,
    pub pass: bool,
}

/// Every admissible (j, i), every set and both aggregate caps (default when admissible, and
/// n - k) for every cell of the grid.
pub fn run_grid(spec: &GridSpec, form: CoefficientForm) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &n in &spec.n {
        for &p in &spec.p {
            for &k in &spec.k {
                if n < 2 * k {
                    continue;
                }
                for family in &spec.priors {
                    let prior = family.build(k)?;
                    let table = LabelTable::new(n, p, &prior)?;
                    for loss_spec in &spec.losses {
                        let loss = loss_spec.build()?;
                        for (hi, hyp) in spec.hypotheses.iter().enumerate() {
                            let inst =
                                EnumerationInstance::new(n, p, prior.clone(), spec.domain.clone(), hyp.clone(), loss)?;
                            let population = exact_population_loss(&inst);
                            let opts = ExpectationOptions {
                                form,
                                ..ExpectationOptions::default()
                            };
                            let exp = Expectations::new(&inst, &table, &opts)?;
                            let mut push = |target: String, expected: f64| {
                                let error = (expected - population).abs();
                                rows.push(GridRow {
                                    n,
                                    p,
                                    k,
                                    prior: family.name().into(),
                                    loss: loss_spec.label(),
                                    hypothesis: hi,
                                    target,
                                    expected,
                                    population,
                                    error,
                                    pass: error <= spec.tolerance,
                                });
                            };
                            for j in k..=n - k {
                                for i in exp.positions(j)? {
                                    push(format!("pointwise(j={j},i={i})"), exp.pointwise(j, i)?);
                                }
                                push(format!("set(j={j})"), exp.set(j)?);
                            }
                            if let Ok(v) = exp.aggregate() {
                                push("aggregate(default cap)".into(), v);
                            }
                            let wide = Expectations::new(
                                &inst,
                                &table,
                                &ExpectationOptions {
                                    j_max: Some(n - k),
                                    form,
                                    ..ExpectationOptions::default()
                                },
                            )?;
                            push(format!("aggregate(cap={})", n - k), wide.aggregate()?);
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Robust-prior checks for each instance of the spec, one entry per perturbation level.
pub fn run_robust(spec: &RobustSpec) -> Result<Vec<(String, Vec<RobustCheck>)>> {
    let mut out = Vec::new();
    for &p in &spec.p {
        for &k in &spec.k {
            for family in &spec.priors {
                let prior = family.build(k)?;
                let target = spec.perturbation.build(k)?;
                for loss_spec in &spec.losses {
                    let loss = loss_spec.build()?;
                    for (hi, hyp) in spec.hypotheses.iter().enumerate() {
                        let inst = EnumerationInstance::new(spec.n, p, prior.clone(), spec.domain.clone(), hyp.clone(), loss)?;
                        let mut checks = Vec::new();
                        for &eps in &spec.levels {
                            let hat = prior.mix(&target, eps)?;
                            let mut check = robust_bias(&inst, &hat, Some(spec.n - k))?;
                            check.eps = eps;
                            checks.push(check);
                        }
                        let name = format!(
                            "n={} p={p} k={k} prior={} loss={} h={hi}",
                            spec.n,
                            family.name(),
                            loss_spec.label()
                        );
                        out.push((name, checks));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{clipped_log_loss, square_loss};
    use crate::math::{BinomialTailParams, binomial_tail};
    use approx::assert_relative_eq;

    fn domain() -> FeatureDomain {
        FeatureDomain {
            positive: vec![0.7, 0.3],
            negative: vec![0.2, 0.8],
        }
    }

    fn inst(n: usize, p: f64, prior: Prior, loss: LossDecomposition) -> EnumerationInstance {
        EnumerationInstance::new(n, p, prior, domain(), vec![0.8, 0.25], loss).unwrap()
    }

    #[test]
    fn population_loss_examples() {
        let mk = |h: f64| EnumerationInstance::new(6, 0.3, Prior::uniform(1), domain(), vec![h, h], square_loss()).unwrap();
        assert_relative_eq!(exact_population_loss(&mk(0.0)), 0.3, max_relative = 1e-15);
        assert_relative_eq!(exact_population_loss(&mk(0.3)), 0.3 * 0.7, max_relative = 1e-14);
        // direct table sum for the 2-point instance
        let i = inst(6, 0.3, Prior::uniform(1), square_loss());
        let direct = 0.3 * (0.7 * 0.2f64.powi(2) + 0.3 * 0.75f64.powi(2)) + 0.7 * (0.2 * 0.64 + 0.8 * 0.0625);
        assert_relative_eq!(exact_population_loss(&i), direct, max_relative = 1e-14);
    }

    #[test]
    fn exact_tail_agrees_with_float_path() {
        for n in 1..=30usize {
            for p in [0.05, 0.3, 0.5, 0.77] {
                let pr = rational(p);
                for t in 0..=n + 1 {
                    let exact = to_f64(&exact_tail(n, &pr, t));
                    let float = binomial_tail(BinomialTailParams { n: n as u64, p, threshold: t as u64 }).unwrap();
                    assert!((exact - float).abs() <= 1e-12 * exact.max(1e-300), "n={n} p={p} t={t}");
                }
            }
        }
    }

    #[test]
    fn pointwise_unbiased_small() {
        // n = 8, p = 1/2, k = 2, uniform prior
        let i = inst(8, 0.5, Prior::uniform(2), clipped_log_loss(0.01).unwrap());
        let l = exact_population_loss(&i);
        for j in 2..=6 {
            for pos in 0..2 {
                let v = exact_estimator_expectation(&i, Target::Pointwise { j, i: pos }, &ExpectationOptions::default()).unwrap();
                assert!((v - l).abs() <= 1e-10, "j={j} i={pos}: {v} vs {l}");
            }
            let v = exact_estimator_expectation(&i, Target::Set { j }, &ExpectationOptions::default()).unwrap();
            assert!((v - l).abs() <= 1e-10);
        }
        let v = exact_estimator_expectation(&i, Target::Aggregate, &ExpectationOptions::default());
        assert!(v.is_err(), "default cap is empty at n = 8, p = 1/2, k = 2");
    }

    #[test]
    fn printed_limit_form_is_biased_at_small_n() {
        let i = inst(12, 0.5, Prior::uniform(2), square_loss());
        let l = exact_population_loss(&i);
        let opts = ExpectationOptions { form: CoefficientForm::UnitMass, j_max: Some(4), ..Default::default() };
        let v = exact_estimator_expectation(&i, Target::Aggregate, &opts).unwrap();
        assert!((v - l).abs() > 1e-3, "{v} vs {l}");
        let low = inst(10, 0.3, Prior::uniform(2), square_loss());
        let opts = ExpectationOptions { form: CoefficientForm::UnitMass, j_max: Some(8), ..Default::default() };
        assert!(matches!(exact_estimator_expectation(&low, Target::Aggregate, &opts), Err(Error::Degenerate(_))));
        let flipped = ExpectationOptions { form: CoefficientForm::FlippedBeta0, j_max: Some(7), ..Default::default() };
        let v = exact_estimator_expectation(&i, Target::Aggregate, &flipped).unwrap();
        assert!((v - l).abs() > 1e-3);
    }

    /// Enumerates labels, features and every placement, calling the aggregate directly.
    fn brute_force(inst: &EnumerationInstance, j_max: usize) -> f64 {
        let n = inst.n;
        let k = inst.k();
        let cfg = EstimatorConfig::wide(n, inst.p, inst.prior.clone()).unwrap().with_j_max(j_max).unwrap().with_min_weight(0.0);
        let est = Estimator::new(cfg, inst.loss).unwrap();
        let moments = inst.moments();
        let mut total = 0.0;
        for bits in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|t| (bits >> t & 1) as u8).collect();
            let conv: Vec<usize> = (0..n).filter(|&t| labels[t] == 1).collect();
            let m = conv.len();
            let pl = inst.p.powi(m as i32) * (1.0 - inst.p).powi((n - m) as i32);
            for xbits in 0u32..(1 << n) {
                let xs: Vec<usize> = (0..n).map(|t| (xbits >> t & 1) as usize).collect();
                let px: f64 = (0..n).map(|t| inst.domain.law(labels[t] == 1)[xs[t]]).product();
                if px == 0.0 {
                    continue;
                }
                let preds: Vec<f64> = xs.iter().map(|&x| inst.hypothesis[x]).collect();
                let placements = k.pow(m as u32);
                for code in 0..placements {
                    let mut c = code;
                    let mut pp = 1.0;
                    let mut sets = Vec::with_capacity(m);
                    for (ord, &cv) in conv.iter().enumerate() {
                        let r = c % k;
                        c /= k;
                        pp *= inst.prior.weight(r);
                        let (start, indices) = crate::sim::window(cv, r, k, n);
                        sets.push(crate::sim::AttributionSet { j: ord + 1, start, indices });
                    }
                    if pp == 0.0 {
                        continue;
                    }
                    total += pl * px * pp * est.aggregate_estimate(&sets, &preds, moments).unwrap().value;
                }
            }
        }
        total
    }

    #[test]
    fn brute_force_matches_fast_path_and_population() {
        for (prior, loss) in [
            (Prior::new(vec![0.3, 0.7]).unwrap(), square_loss()),
            (Prior::uniform(1), clipped_log_loss(0.01).unwrap()),
        ] {
            let k = prior.k();
            let i = inst(6, 0.4, prior, loss);
            let bf = brute_force(&i, 6 - k);
            let fast = exact_estimator_expectation(&i, Target::Aggregate, &ExpectationOptions { j_max: Some(6 - k), ..Default::default() }).unwrap();
            assert!((bf - fast).abs() <= 1e-12, "{bf} vs {fast}");
            assert!((bf - exact_population_loss(&i)).abs() <= 1e-12);
        }
    }

    #[test]
    fn marginal_identity_examples() {
        let half = rational(0.5);
        let c = verify_marginal_identity(6, &half, 2, 1, 1, Side::Before).unwrap();
        assert!(c.holds());
        assert_eq!(c.closed_form, &half * exact_tail(5, &half, 2));
        let c = verify_marginal_identity(6, &half, 5, 2, 1, Side::Before).unwrap();
        assert!(c.enumerated.is_zero() && c.closed_form.is_zero());
        // at t = 0 the probability is the full tail, not the closed form
        let (at, tail) = marginal_at_conversion(6, &half, 2, 1);
        assert_eq!(at, tail);
        assert_ne!(at, verify_marginal_identity(6, &half, 2, 1, 1, Side::Before).unwrap().closed_form);
        // after the conversion the identity stops at t = k
        let c = verify_marginal_identity(8, &rational(0.3), 4, 1, 2, Side::After).unwrap();
        assert!(!c.holds());
        assert!(verify_marginal_identity(6, &half, 1, 1, 1, Side::Before).is_err());
    }

    #[test]
    fn conditional_law_examples() {
        let i = inst(6, 0.3, Prior::uniform(2), square_loss());
        let pos = verify_conditional_law(&i, 3, 1, Side::Before, true).unwrap();
        assert!(pos.total_variation.unwrap() <= 1e-12);
        let neg = verify_conditional_law(&i, 3, 2, Side::After, false).unwrap();
        assert!(neg.total_variation.unwrap() <= 1e-12);
        let single = inst(5, 0.3, Prior::singleton_last(1), square_loss());
        let at = verify_conditional_law(&single, 2, 0, Side::Before, true).unwrap();
        assert_relative_eq!(at.law.unwrap()[0], 0.7, max_relative = 1e-12);
        let never = verify_conditional_law(&single, 2, 0, Side::Before, false).unwrap();
        assert!(never.law.is_none() && never.event_probability == 0.0);
    }

    #[test]
    fn robust_equals_plain_at_true_prior() {
        let i = inst(10, 0.3, Prior::uniform(2), square_loss());
        let c = robust_bias(&i, &Prior::uniform(2), Some(8)).unwrap();
        assert!(c.bias <= 1e-12);
        assert_eq!(c.l1, 0.0);
    }

    #[test]
    fn split_is_unbiased_and_full_is_not() {
        let i = inst(12, 0.3, Prior::uniform(2), clipped_log_loss(0.01).unwrap());
        let l = exact_population_loss(&i);
        let split = split_mode_expectation(&i).unwrap();
        assert!((split - l).abs() <= 1e-10, "{split} vs {l}");
        let full = full_mode_expectation(&i).unwrap();
        assert!((full - l).abs() > 1e-6, "{full} vs {l}");
    }

    #[test]
    fn too_large_is_refused() {
        assert!(matches!(
            EnumerationInstance::new(15, 0.3, Prior::uniform(1), domain(), vec![0.5, 0.5], square_loss()),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn bundled_fixtures_parse() {
        let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"));
        let _: GridSpec = load_fixture(&dir, "grid.json").unwrap();
        let _: RobustSpec = load_fixture(&dir, "robust.json").unwrap();
        let mc: Vec<MonteCarloFixture> = load_fixture(&dir, "monte_carlo.json").unwrap();
        assert_eq!(mc.len(), 6);
        for f in &mc {
            f.instance().unwrap();
        }
    }
}

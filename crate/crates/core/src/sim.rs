//! Hidden labeled streams and the adversary that turns conversions into attribution sets.

use std::io::{BufRead, Write};

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features};
use crate::error::{Error, Result};
use crate::math::Prior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn single(mean: Vec<f64>, std: f64) -> Self {
        Self {
            components: vec![GaussianComponent {
                weight: 1.0,
                mean,
                std,
            }],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("mixture has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        for c in &self.components {
            if c.mean.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if !(c.weight >= 0.0) || !(c.std.is_finite() && c.std >= 0.0) {
                return Err(Error::Config("mixture weights and scales must be non-negative".into()));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config("mixture means must be finite".into()));
            }
        }
        if !(total > 0.0) {
            return Err(Error::Config("mixture weights sum to zero".into()));
        }
        Ok(())
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            if u < c.weight {
                chosen = c;
                break;
            }
            u -= c.weight;
        }
        for &m in &chosen.mean {
            let z: f64 = StandardNormal.sample(rng);
            out.push(m + chosen.std * z);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub positive_rate: f64,
    pub dim: usize,
    pub positive: GaussianMixture,
    pub negative: GaussianMixture,
}

impl SyntheticTask {
    pub fn new(
        positive_rate: f64,
        dim: usize,
        positive: GaussianMixture,
        negative: GaussianMixture,
    ) -> Result<Self> {
        let task = Self {
            positive_rate,
            dim,
            positive,
            negative,
        };
        task.validate()?;
        Ok(task)
    }

    /// Unit-variance Gaussians in `dim` dimensions whose means are `separation` apart along
    /// the all-ones direction.
    pub fn shifted_gaussians(dim: usize, positive_rate: f64, separation: f64) -> Result<Self> {
        let shift = separation / (dim as f64).sqrt();
        Self::new(
            positive_rate,
            dim,
            GaussianMixture::single(vec![shift; dim], 1.0),
            GaussianMixture::single(vec![0.0; dim], 1.0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.positive_rate > 0.0 && self.positive_rate <= 0.5) {
            return Err(Error::Config(format!(
                "positive rate {} outside (0, 1/2]",
                self.positive_rate
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        self.positive.validate(self.dim)?;
        self.negative.validate(self.dim)
    }

    /// Draws `n` labeled points; used for held-out test sets as well as streams.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let stream = sample_stream(self, n, seed);
        Dataset {
            features: stream.features,
            labels: stream.labels,
        }
    }
}

/// The hidden sequence (X_i, Y_i). Only the simulator, the oracle and evaluation see labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStream {
    pub features: Features,
    pub labels: Vec<u8>,
    conversions: Vec<usize>,
}

impl LabeledStream {
    pub fn new(features: Features, labels: Vec<u8>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Dimension {
                expected: features.len(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Config("stream labels must be 0 or 1".into()));
        }
        let conversions = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            features,
            labels,
            conversions,
        })
    }

    /// Replays a (shuffled) dataset as the stream.
    pub fn from_dataset(data: Dataset) -> Result<Self> {
        Self::new(data.features, data.labels)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of conversions M.
    pub fn m(&self) -> usize {
        self.conversions.len()
    }

    /// Stream indices of the conversions, increasing.
    pub fn conversions(&self) -> &[usize] {
        &self.conversions
    }
}

pub fn sample_stream(task: &SyntheticTask, n: usize, seed: u64) -> LabeledStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * task.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen::<f64>() < task.positive_rate;
        labels.push(y as u8);
        let law = if y { &task.positive } else { &task.negative };
        law.sample_into(&mut rng, &mut values);
    }
    let features = Features::new(task.dim, values).expect("sampled rows have the task dimension");
    LabeledStream::new(features, labels).expect("labels are bits")
}

/// The window attached to conversion ordinal `j` (1-based). `start` is the unclamped stream
/// index of window position 0 and may fall outside the stream near its ends.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionSet {
    pub j: usize,
    pub start: i64,
    pub indices: Vec<usize>,
}

impl AttributionSet {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Output of the adversary: the learner-facing sets plus the placements it drew.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub sets: Vec<AttributionSet>,
    /// Window position of the conversion in each set. Never part of the learner path.
    pub true_positions: Vec<usize>,
}

/// Per-item generator derived from a master seed, independent of iteration order.
pub(crate) fn item_rng(seed: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng
}

/// Window for a conversion at stream index `conversion` placed at position `r`.
pub fn window(conversion: usize, r: usize, k: usize, n: usize) -> (i64, Vec<usize>) {
    let start = conversion as i64 - r as i64;
    let last = n as i64 - 1;
    let indices = (0..k as i64).map(|i| (start + i).clamp(0, last) as usize).collect();
    (start, indices)
}

pub fn generate_attribution_sets(stream: &LabeledStream, prior: &Prior, seed: u64) -> Attribution {
    let sampler = prior.sampler();
    let k = prior.k();
    let n = stream.n();
    let mut sets = Vec::with_capacity(stream.m());
    let mut true_positions = Vec::with_capacity(stream.m());
    for (ord, &conv) in stream.conversions().iter().enumerate() {
        let j = ord + 1;
        let r = sampler.sample(&mut item_rng(seed, j as u64));
        let (start, indices) = window(conv, r, k, n);
        sets.push(AttributionSet { j, start, indices });
        true_positions.push(r);
    }
    Attribution {
        sets,
        true_positions,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationMode {
    Random,
    MaxPrior,
}

/// A stream index with a guessed label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledIndex {
    pub index: usize,
    pub label: u8,
}

/// Per set, one position is labeled 1 and the rest 0; stream points outside every set are 0.
/// Points covered by several sets appear once per set.
pub fn hallucination_dataset(
    sets: &[AttributionSet],
    n: usize,
    prior: &Prior,
    mode: HallucinationMode,
    seed: u64,
) -> Vec<LabeledIndex> {
    let sampler = prior.sampler();
    let fixed = prior.argmax();
    let mut covered = vec![false; n];
    let mut out = Vec::with_capacity(sets.iter().map(|s| s.k()).sum::<usize>() + n);
    for set in sets {
        let chosen = match mode {
            HallucinationMode::Random => sampler.sample(&mut item_rng(seed, set.j as u64)),
            HallucinationMode::MaxPrior => fixed,
        };
        for (pos, &index) in set.indices.iter().enumerate() {
            covered[index] = true;
            out.push(LabeledIndex {
                index,
                label: (pos == chosen) as u8,
            });
        }
    }
    out.extend(
        covered
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(index, _)| LabeledIndex { index, label: 0 }),
    );
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LearnerRecord {
    Header {
        n: usize,
        p_hat: f64,
        k: usize,
        prior: Vec<f64>,
    },
    Set {
        j: usize,
        start: i64,
        indices: Vec<usize>,
    },
}

/// Learner-facing description of a simulated run: no labels, no placements.
#[derive(Clone, Debug, PartialEq)]
pub struct SetFile {
    pub n: usize,
    pub p_hat: f64,
    pub k: usize,
    pub prior: Prior,
    pub sets: Vec<AttributionSet>,
}

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: "<records>".into(),
        offset,
        message: message.into(),
    }
}

/// Reads `(byte offset, line)` pairs, skipping blank lines.
fn lines<R: BufRead>(mut reader: R) -> impl Iterator<Item = Result<(u64, String)>> {
    let mut offset = 0u64;
    std::iter::from_fn(move || loop {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) => return None,
            Ok(len) => {
                let at = offset;
                offset += len as u64;
                if !line.trim().is_empty() {
                    return Some(Ok((at, line)));
                }
            }
            Err(e) => return Some(Err(parse_err(offset, e.to_string()))),
        }
    })
}

impl SetFile {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = LearnerRecord::Header {
            n: self.n,
            p_hat: self.p_hat,
            k: self.k,
            prior: self.prior.weights().to_vec(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io("<records>", e))?;
        for s in &self.sets {
            let rec = LearnerRecord::Set {
                j: s.j,
                start: s.start,
                indices: s.indices.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("<records>", e))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut header = None;
        let mut sets = Vec::new();
        for item in lines(reader) {
            let (offset, line) = item?;
            let rec: LearnerRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(offset, e.to_string()))?;
            match rec {
                LearnerRecord::Header { n, p_hat, k, prior } => {
                    if header.is_some() {
                        return Err(parse_err(offset, "duplicate header"));
                    }
                    header = Some((n, p_hat, k, Prior::new(prior)?));
                }
                LearnerRecord::Set { j, start, indices } => {
                    let Some((n, _, k, _)) = &header else {
                        return Err(parse_err(offset, "set record before header"));
                    };
                    if indices.len() != *k || indices.iter().any(|&i| i >= *n) {
                        return Err(parse_err(offset, "set indices do not match the header"));
                    }
                    sets.push(AttributionSet { j, start, indices });
                }
            }
        }
        let (n, p_hat, k, prior) = header.ok_or_else(|| parse_err(0, "missing header"))?;
        Ok(Self {
            n,
            p_hat,
            k,
            prior,
            sets,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OracleRecord {
    Labels { labels: String },
    Placement { j: usize, true_position: usize },
}

/// Simulator-private record of the hidden labels and the adversary's draws.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFile {
    pub labels: Vec<u8>,
    pub true_positions: Vec<usize>,
}

impl OracleFile {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let labels = self.labels.iter().map(|&y| if y == 1 { '1' } else { '0' }).collect();
        let io = |e| Error::io("<oracle>", e);
        writeln!(w, "{}", serde_json::to_string(&OracleRecord::Labels { labels })?).map_err(io)?;
        for (ord, &r) in self.true_positions.iter().enumerate() {
            let rec = OracleRecord::Placement {
                j: ord + 1,
                true_position: r,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut labels = None;
        let mut true_positions = Vec::new();
        for item in lines(reader) {
            let (offset, line) = item?;
            let rec: OracleRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(offset, e.to_string()))?;
            match rec {
                OracleRecord::Labels { labels: text } => {
                    let bits = text
                        .chars()
                        .map(|c| match c {
                            '0' => Ok(0),
                            '1' => Ok(1),
                            _ => Err(parse_err(offset, "label string must be 0/1")),
                        })
                        .collect::<Result<Vec<u8>>>()?;
                    labels = Some(bits);
                }
                OracleRecord::Placement { j, true_position } => {
                    if j != true_positions.len() + 1 {
                        return Err(parse_err(offset, "placements out of order"));
                    }
                    true_positions.push(true_position);
                }
            }
        }
        Ok(Self {
            labels: labels.ok_or_else(|| parse_err(0, "missing labels record"))?,
            true_positions,
        })
    }
}

//! Affine decompositions l(h, y) = f1(h) + y f2(h) of binary losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LossKind {
    Square,
    #[serde(rename = "logloss")]
    ClippedLog { clip: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDecomposition {
    kind: LossKind,
    /// sup |f1| on the clipped range.
    pub f1_bound: f64,
    /// sup |f2| on the clipped range.
    pub f2_bound: f64,
    /// Lipschitz constant of f2.
    pub lipschitz: f64,
    pub clip: f64,
}

pub fn square_loss() -> LossDecomposition {
    LossDecomposition {
        kind: LossKind::Square,
        f1_bound: 1.0,
        f2_bound: 1.0,
        lipschitz: 2.0,
        clip: 0.0,
    }
}

pub fn clipped_log_loss(clip: f64) -> Result<LossDecomposition> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::Domain(format!("clip {clip} outside (0, 0.5)")));
    }
    Ok(LossDecomposition {
        kind: LossKind::ClippedLog { clip },
        f1_bound: -clip.ln(),
        f2_bound: 2.0 * ((1.0 - clip) / clip).ln(),
        lipschitz: 2.0 / clip,
        clip,
    })
}

impl LossDecomposition {
    pub fn from_kind(kind: LossKind) -> Result<Self> {
        match kind {
            LossKind::Square => Ok(square_loss()),
            LossKind::ClippedLog { clip } => clipped_log_loss(clip),
        }
    }

    /// Looks a loss up by its configuration name.
    pub fn by_name(name: &str, clip: f64) -> Result<Self> {
        match name {
            "square" => Ok(square_loss()),
            "logloss" => clipped_log_loss(clip),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    fn clamp(&self, h: f64) -> f64 {
        h.clamp(self.clip, 1.0 - self.clip)
    }

    fn interior(&self, h: f64) -> bool {
        h >= self.clip && h <= 1.0 - self.clip
    }

    pub fn f1(&self, h: f64) -> f64 {
        let h = self.clamp(h);
        match self.kind {
            LossKind::Square => h * h,
            LossKind::ClippedLog { .. } => -(-h).ln_1p(),
        }
    }

    pub fn f2(&self, h: f64) -> f64 {
        let h = self.clamp(h);
        match self.kind {
            LossKind::Square => 1.0 - 2.0 * h,
            LossKind::ClippedLog { .. } => (-h).ln_1p() - h.ln(),
        }
    }

    /// Derivative of f1; zero where clipping is active.
    pub fn f1_prime(&self, h: f64) -> f64 {
        if !self.interior(h) {
            return 0.0;
        }
        match self.kind {
            LossKind::Square => 2.0 * h,
            LossKind::ClippedLog { .. } => 1.0 / (1.0 - h),
        }
    }

    /// Derivative of f2; zero where clipping is active.
    pub fn f2_prime(&self, h: f64) -> f64 {
        if !self.interior(h) {
            return 0.0;
        }
        match self.kind {
            LossKind::Square => -2.0,
            LossKind::ClippedLog { .. } => -1.0 / (1.0 - h) - 1.0 / h,
        }
    }

    pub fn loss(&self, h: f64, y: bool) -> f64 {
        let h = self.clamp(h);
        match (self.kind, y) {
            (LossKind::Square, true) => (1.0 - h) * (1.0 - h),
            (LossKind::Square, false) => h * h,
            (LossKind::ClippedLog { .. }, true) => -h.ln(),
            (LossKind::ClippedLog { .. }, false) => -(-h).ln_1p(),
        }
    }

    /// d loss / dh.
    pub fn loss_prime(&self, h: f64, y: bool) -> f64 {
        self.f1_prime(h) + if y { self.f2_prime(h) } else { 0.0 }
    }
}

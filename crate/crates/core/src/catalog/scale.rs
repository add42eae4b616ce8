use serde::{Deserialize, Serialize};

use super::CatalogError;

const ON_SCALE_EPS: f64 = 1e-9;

/// Discrete rating scale: ratings are `min + i * step` for `i` in `0..levels`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScaleSpec", into = "ScaleSpec")]
pub struct RatingScale {
    min: f64,
    max: f64,
    step: f64,
    levels: usize,
}

#[derive(Serialize, Deserialize)]
struct ScaleSpec {
    min: f64,
    max: f64,
    step: f64,
}

impl TryFrom<ScaleSpec> for RatingScale {
    type Error = CatalogError;

    fn try_from(s: ScaleSpec) -> Result<Self, Self::Error> {
        RatingScale::new(s.min, s.max, s.step)
    }
}

impl From<RatingScale> for ScaleSpec {
    fn from(s: RatingScale) -> Self {
        ScaleSpec { min: s.min, max: s.max, step: s.step }
    }
}

impl RatingScale {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self, CatalogError> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) || step <= 0.0 || max < min {
            return Err(CatalogError::InvalidScale { min, max, step });
        }
        let span = (max - min) / step;
        if (span - span.round()).abs() > ON_SCALE_EPS * span.max(1.0) {
            return Err(CatalogError::InvalidScale { min, max, step });
        }
        Ok(Self { min, max, step, levels: span.round() as usize + 1 })
    }

    /// 0.5 to 5.0 in half-star steps (10 levels).
    pub fn movies() -> Self {
        Self::new(0.5, 5.0, 0.5).expect("static scale")
    }

    /// 1 to 5 in whole steps (5 levels).
    pub fn books() -> Self {
        Self::new(1.0, 5.0, 1.0).expect("static scale")
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Level index of an on-scale rating, `None` when the rating is off-scale.
    pub fn level_index(&self, rating: f64) -> Option<usize> {
        if !rating.is_finite() {
            return None;
        }
        let k = (rating - self.min) / self.step;
        let nearest = k.round();
        if (k - nearest).abs() > ON_SCALE_EPS || nearest < 0.0 || nearest as usize >= self.levels {
            return None;
        }
        Some(nearest as usize)
    }

    /// Canonical rating value of a level. Panics on an out-of-range level.
    pub fn level_to_rating(&self, level: usize) -> f64 {
        assert!(level < self.levels, "level {level} out of range for {} levels", self.levels);
        self.min + level as f64 * self.step
    }

    /// Snap an on-scale rating to its canonical value.
    pub fn canonical(&self, rating: f64) -> Option<f64> {
        self.level_index(rating).map(|l| self.level_to_rating(l))
    }
}

use serde::{Deserialize, Serialize};

use crate::error::LayoutError;

/// Multiplier between object size and the square root of its mask area.
pub const DEFAULT_SIZE_MULTIPLIER: f64 = 2.5;

/// How a point label's size is chosen when the user does not give one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeStrategy {
    /// Ground truth from the object mask; only available for annotated data.
    Gt,
    #[default]
    Median,
    Mean,
}

impl std::str::FromStr for SizeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gt" => Ok(SizeStrategy::Gt),
            "median" => Ok(SizeStrategy::Median),
            "mean" => Ok(SizeStrategy::Mean),
            other => Err(format!("unknown size strategy '{other}' (expected gt, median or mean)")),
        }
    }
}

/// `m * sqrt(A)` for a mask of `mask_area` pixels.
pub fn ground_truth_size(mask_area: u64, m: f64) -> Result<f64, LayoutError> {
    if mask_area == 0 {
        return Err(LayoutError::Geometry("object mask has zero area".into()));
    }
    if m <= 0.0 || !m.is_finite() {
        return Err(LayoutError::Geometry(format!("size multiplier must be positive, got {m}")));
    }
    Ok(m * (mask_area as f64).sqrt())
}

/// Per-class object sizes observed in training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    m: f64,
    sizes: Vec<Vec<f64>>,
}

impl SizeStats {
    pub fn new(num_classes: usize, m: f64) -> Self {
        Self { m, sizes: vec![Vec::new(); num_classes] }
    }

    pub fn multiplier(&self) -> f64 {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.sizes.len()
    }

    pub fn observations(&self, class_id: usize) -> &[f64] {
        self.sizes.get(class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Records one object by mask area; the stored size is `m * sqrt(area)`.
    pub fn record_area(&mut self, class_id: usize, mask_area: u64) -> Result<f64, LayoutError> {
        let s = ground_truth_size(mask_area, self.m)?;
        self.record_size(class_id, s)?;
        Ok(s)
    }

    pub fn record_size(&mut self, class_id: usize, size: f64) -> Result<(), LayoutError> {
        if size <= 0.0 || !size.is_finite() {
            return Err(LayoutError::Geometry(format!("size must be positive, got {size}")));
        }
        let k = self.sizes.len();
        self.sizes.get_mut(class_id).ok_or(LayoutError::UnknownClassId { class_id, k })?.push(size);
        Ok(())
    }

    /// The same observations with every size multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> SizeStats {
        SizeStats { m: self.m, sizes: self.sizes.iter().map(|v| v.iter().map(|s| s * factor).collect()).collect() }
    }

    pub fn median(&self, class_id: usize) -> Result<f64, LayoutError> {
        let obs = self.non_empty(class_id)?;
        let mut sorted = obs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        Ok(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
    }

    pub fn mean(&self, class_id: usize) -> Result<f64, LayoutError> {
        let obs = self.non_empty(class_id)?;
        Ok(obs.iter().sum::<f64>() / obs.len() as f64)
    }

    fn non_empty(&self, class_id: usize) -> Result<&[f64], LayoutError> {
        match self.sizes.get(class_id) {
            Some(v) if !v.is_empty() => Ok(v),
            Some(_) => Err(LayoutError::MissingStats { class_id }),
            None => Err(LayoutError::UnknownClassId { class_id, k: self.sizes.len() }),
        }
    }
}

/// Class-level default size for a point label.
pub fn default_size(class_id: usize, stats: &SizeStats, strategy: SizeStrategy) -> Result<f64, LayoutError> {
    match strategy {
        SizeStrategy::Median => stats.median(class_id),
        SizeStrategy::Mean => stats.mean(class_id),
        SizeStrategy::Gt => Err(LayoutError::Geometry(
            "ground-truth sizes need an annotated mask; use median or mean for defaults".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_examples() {
        assert_eq!(ground_truth_size(400, 2.5).unwrap(), 50.0);
        assert_eq!(ground_truth_size(1, 1.0).unwrap(), 1.0);
        assert_eq!(ground_truth_size(10_000, 4.0).unwrap(), 400.0);
        assert!(ground_truth_size(0, 2.5).is_err());
        assert!(ground_truth_size(4, 0.0).is_err());
    }

    #[test]
    fn median_and_mean_of_three_areas() {
        let mut s = SizeStats::new(3, DEFAULT_SIZE_MULTIPLIER);
        for a in [100, 400, 900] {
            s.record_area(1, a).unwrap();
        }
        assert_eq!(s.observations(1), &[25.0, 50.0, 75.0]);
        assert_eq!(default_size(1, &s, SizeStrategy::Median).unwrap(), 50.0);
        assert_eq!(default_size(1, &s, SizeStrategy::Mean).unwrap(), 50.0);
    }

    #[test]
    fn single_observation() {
        let mut s = SizeStats::new(2, 2.5);
        s.record_size(0, 40.0).unwrap();
        assert_eq!(s.median(0).unwrap(), 40.0);
        assert_eq!(s.mean(0).unwrap(), 40.0);
    }

    #[test]
    fn missing_and_even() {
        let mut s = SizeStats::new(2, 2.5);
        assert_eq!(s.median(1), Err(LayoutError::MissingStats { class_id: 1 }));
        s.record_size(1, 10.0).unwrap();
        s.record_size(1, 30.0).unwrap();
        assert_eq!(s.median(1).unwrap(), 20.0);
        assert!(s.record_size(5, 1.0).is_err());
        assert!(s.record_size(0, -1.0).is_err());
        assert!(default_size(1, &s, SizeStrategy::Gt).is_err());
    }
}

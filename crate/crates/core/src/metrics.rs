//! Fréchet and kernel distances between sets of image embeddings.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbPlanes;

/// Relative tolerance for eigenvalues that should be non-negative.
pub const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `N x D` embeddings of one image set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub source: FeatureSource,
    pub extractor_id: String,
}

#[derive(Serialize, Deserialize)]
struct FeatureFile {
    extractor_id: String,
    features: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], source: FeatureSource, extractor_id: impl Into<String>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Metric("feature rows have differing lengths".into()));
        }
        let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Ok(Self { features, source, extractor_id: extractor_id.into() })
    }

    /// Reads embeddings computed elsewhere: `{"extractor_id": .., "features": [[..], ..]}`.
    pub fn load_json(path: &Path, source: FeatureSource) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: FeatureFile = serde_json::from_str(&text)?;
        Self::from_rows(&f.features, source, f.extractor_id)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = FeatureFile {
            extractor_id: self.extractor_id.clone(),
            features: self.features.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        std::fs::write(path, serde_json::to_string(&f)?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn subset(&self, rows: &[usize]) -> DMatrix<f64> {
        self.features.select_rows(rows)
    }
}

/// Deterministic image embedding with a fixed output width.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &RgbPlanes) -> Result<Vec<f64>>;
}

/// Per-channel mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChannelMeanExtractor;

impl FeatureExtractor for ChannelMeanExtractor {
    fn id(&self) -> &str {
        "channel-mean"
    }

    fn dim(&self) -> usize {
        3
    }

    fn embed(&self, image: &RgbPlanes) -> Result<Vec<f64>> {
        let n = image.width * image.height;
        if n == 0 {
            return Err(Error::Metric("cannot embed an empty image".into()));
        }
        Ok((0..3).map(|c| image.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64).collect())
    }
}

/// Channel means over a `grid x grid` partition of the image.
#[derive(Debug, Clone, Copy)]
pub struct PooledColorExtractor {
    pub grid: usize,
}

impl Default for PooledColorExtractor {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl FeatureExtractor for PooledColorExtractor {
    fn id(&self) -> &str {
        "pooled-rgb-4x4"
    }

    fn dim(&self) -> usize {
        3 * self.grid * self.grid
    }

    fn embed(&self, image: &RgbPlanes) -> Result<Vec<f64>> {
        let g = self.grid;
        let (w, h) = (image.width, image.height);
        if w < g || h < g {
            return Err(Error::Metric(format!("image {w}x{h} is smaller than the {g}x{g} pooling grid")));
        }
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..3 {
            for gy in 0..g {
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                for gx in 0..g {
                    let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += image.get(c, x, y) as f64;
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Looks up a built-in extractor.
pub fn extractor_by_id(id: &str) -> Result<Box<dyn FeatureExtractor>> {
    match id {
        "channel-mean" => Ok(Box::new(ChannelMeanExtractor)),
        "pooled-rgb-4x4" => Ok(Box::new(PooledColorExtractor::default())),
        "inception" | "inception-v3" => Err(Error::Metric(
            "the 2048-d inception extractor is not bundled. Embed the images with an external \
             inception-v3 pool3 model and pass the results as feature files \
             ({\"extractor_id\": \"inception-v3\", \"features\": [[...], ...]}) via --real-features / --fake-features"
                .into(),
        )),
        other => Err(Error::Metric(format!(
            "unknown feature extractor {other:?}; built-in extractors are channel-mean and pooled-rgb-4x4"
        ))),
    }
}

pub fn extract_features(
    images: &[RgbPlanes],
    extractor: &dyn FeatureExtractor,
    source: FeatureSource,
) -> Result<FeatureSet> {
    let d = extractor.dim();
    let rows = images
        .iter()
        .map(|img| {
            let r = extractor.embed(img)?;
            if r.len() != d {
                return Err(Error::Metric(format!("extractor {} returned {} values, expected {d}", extractor.id(), r.len())));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(FeatureSet { features, source, extractor_id: extractor.id().to_string() })
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("feature widths differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.extractor_id != b.extractor_id {
        return Err(Error::Metric(format!(
            "feature sets come from different extractors: {} vs {}",
            a.extractor_id, b.extractor_id
        )));
    }
    Ok(())
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Eigenvalues of a symmetric matrix, clamped at zero. Values below
/// `-PSD_TOLERANCE * max(1, |lambda|_max)` are reported as an error.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE * scale {
        let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalues span [{min:.3e}, {max:.3e}]"
        )));
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Fréchet distance between Gaussians fitted to the two sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(format!("FID needs at least 2 samples per set, got {} and {}", a.len(), b.len())));
    }
    let (mu_a, cov_a) = mean_and_cov(&a.features);
    let (mu_b, cov_b) = mean_and_cov(&b.features);
    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)).
    let ea = psd_eigen(&cov_a, "first covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = psd_eigen(&(&sqrt_a * &cov_b * &sqrt_a), "covariance product")?;
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    let scale = cov_a.trace() + cov_b.trace() + 1.0;
    if d < -PSD_TOLERANCE * scale {
        return Err(Error::Numeric(format!("Fréchet distance evaluated to {d:.3e}")));
    }
    Ok(d.max(0.0))
}

/// Cubic polynomial kernel `(x.y / D + 1)^3`.
pub fn polynomial_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased squared MMD between two equally sized samples:
/// `1 / (m (m - 1)) * sum_{i != j} [k(x_i, x_j) + k(y_i, y_j) - k(x_i, y_j) - k(x_j, y_i)]`.
pub fn mmd2_unbiased(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let m = x.nrows();
    if y.nrows() != m || m < 2 {
        return Err(Error::Metric(format!("MMD needs two samples of equal size >= 2, got {} and {}", m, y.nrows())));
    }
    let d = x.ncols() as f64;
    let k = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(3));
    let kxx = k(x * x.transpose());
    let kyy = k(y * y.transpose());
    let kxy = k(x * y.transpose());
    let off = |mat: &DMatrix<f64>| mat.sum() - mat.trace();
    Ok((off(&kxx) + off(&kyy) - 2.0 * off(&kxy)) / (m * (m - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidOptions {
    /// `None` means `min(1000, |a|, |b|)`.
    pub subset_size: Option<usize>,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidOptions {
    fn default() -> Self {
        Self { subset_size: None, n_subsets: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub mean: f64,
    pub std: f64,
    pub subset_size: usize,
    pub n_subsets: usize,
}

/// Kernel distance: mean of the unbiased MMD estimate over random subsets,
/// drawn without replacement and independently for each set. When the
/// subset covers both sets the full sets are used once, in order.
pub fn kid(a: &FeatureSet, b: &FeatureSet, opts: &KidOptions) -> Result<KidEstimate> {
    check_pair(a, b)?;
    let m = opts.subset_size.unwrap_or_else(|| 1000.min(a.len()).min(b.len()));
    if m > a.len() || m > b.len() {
        return Err(Error::Metric(format!(
            "KID subset size {m} exceeds the set sizes ({} and {})",
            a.len(),
            b.len()
        )));
    }
    if m < 2 {
        return Err(Error::Metric(format!("KID subset size must be at least 2, got {m}")));
    }
    if m == a.len() && m == b.len() {
        let v = mmd2_unbiased(&a.features, &b.features)?;
        return Ok(KidEstimate { mean: v, std: 0.0, subset_size: m, n_subsets: 1 });
    }
    if opts.n_subsets == 0 {
        return Err(Error::Metric("KID needs at least one subset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let values = (0..opts.n_subsets)
        .map(|_| {
            let ia = rand::seq::index::sample(&mut rng, a.len(), m).into_vec();
            let ib = rand::seq::index::sample(&mut rng, b.len(), m).into_vec();
            mmd2_unbiased(&a.subset(&ia), &b.subset(&ib))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(KidEstimate { mean, std: var.sqrt(), subset_size: m, n_subsets: values.len() })
}

/// Evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub kid: f64,
    pub kid_x1000: f64,
    pub kid_std: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor_id: String,
}

impl MetricReport {
    pub fn compute(real: &FeatureSet, fake: &FeatureSet, kid_opts: &KidOptions) -> Result<Self> {
        let f = fid(real, fake)?;
        let k = kid(real, fake, kid_opts)?;
        Ok(Self {
            fid: f,
            kid: k.mean,
            kid_x1000: k.mean * 1000.0,
            kid_std: k.std,
            n_real: real.len(),
            n_fake: fake.len(),
            extractor_id: real.extractor_id.clone(),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FID {:.3} / KIDx10^3 {:.3} ({} real, {} generated, extractor {})",
            self.fid, self.kid_x1000, self.n_real, self.n_fake, self.extractor_id
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[Vec<f64>]) -> FeatureSet {
        FeatureSet::from_rows(rows, FeatureSource::Real, "t").unwrap()
    }

    #[test]
    fn channel_mean_of_constant_image() {
        let img = RgbPlanes::filled(5, 4, [0.25, -0.5, 1.0]);
        assert_eq!(ChannelMeanExtractor.embed(&img).unwrap(), vec![0.25, -0.5, 1.0]);
        let fs = extract_features(&[img.clone(), img], &ChannelMeanExtractor, FeatureSource::Real).unwrap();
        assert_eq!(fs.features.shape(), (2, 3));
        assert_eq!(fs.features.row(0), fs.features.row(1));
    }

    #[test]
    fn pooled_extractor_shape() {
        let img = RgbPlanes::filled(8, 8, [0.1, 0.2, 0.3]);
        let v = PooledColorExtractor::default().embed(&img).unwrap();
        assert_eq!(v.len(), 48);
        assert!((v[47] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn inception_needs_provisioning() {
        match extractor_by_id("inception-v3") {
            Err(Error::Metric(msg)) => assert!(msg.contains("--real-features")),
            _ => panic!("expected a provisioning error"),
        }
    }

    #[test]
    fn fid_scalar_case() {
        // Exact sample moments: mean 0, variance 1 and 4.
        let a = set(&[vec![-1.0], vec![1.0], vec![-1.0], vec![1.0], vec![0.0]]);
        let b = set(&[vec![-2.0], vec![2.0], vec![-2.0], vec![2.0], vec![0.0]]);
        let (var_a, var_b) = (4.0 / 4.0, 16.0 / 4.0);
        let want: f64 = var_a + var_b - 2.0 * f64::sqrt(var_a * var_b);
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kid_rejects_oversized_subsets() {
        let a = set(&[vec![0.0], vec![1.0]]);
        let opts = KidOptions { subset_size: Some(3), ..KidOptions::default() };
        assert!(matches!(kid(&a, &a, &opts), Err(Error::Metric(_))));
    }

    #[test]
    fn mismatched_extractors() {
        let a = set(&[vec![0.0], vec![1.0]]);
        let mut b = a.clone();
        b.extractor_id = "other".into();
        assert!(fid(&a, &b).is_err());
    }

    #[test]
    fn report_formatting() {
        let r = MetricReport {
            fid: 15.1079,
            kid: 0.006797,
            kid_x1000: 6.797,
            kid_std: 0.0,
            n_real: 10,
            n_fake: 10,
            extractor_id: "channel-mean".into(),
        };
        assert!(r.to_string().starts_with("FID 15.108 / KIDx10^3 6.797"));
        let json: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["fid", "kid", "kid_x1000", "n_real", "n_fake", "extractor_id"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}

//! Evaluation metrics over frozen-embedder features: Fréchet distance,
//! perceptual diversity across branches, an inception-style class score,
//! and caption retrieval precision averaged over branches.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as zero before taking square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Gaussian fit of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fewer samples than dimensions gives a rank-deficient covariance.
    pub fn is_undersampled(&self) -> bool {
        self.n < self.dim()
    }
}

/// Sample mean and unbiased covariance of `n × d` row-major features.
pub fn fit_stats(features: &[f64], d: usize) -> Result<FeatureStats> {
    if d == 0 || features.len() % d != 0 {
        return Err(Error::Shape(format!("{} values do not form rows of width {d}", features.len())));
    }
    let n = features.len() / d;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let x = DMatrix::from_row_slice(n, d, features);
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(FeatureStats { mean, cov, n })
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let roots = e.eigenvalues.map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the root
/// taken from the eigenvalues of `Σa^½ Σb Σa^½`. Clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", a.dim(), b.dim())));
    }
    let finite = |s: &FeatureStats| s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::Numerical("feature statistics are not finite".into()));
    }
    let diff = &a.mean - &b.mean;
    let root_a = sqrt_psd(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let tr_root: f64 = sym_eigen(&inner).eigenvalues.iter().map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() }).sum();
    let fid = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    Ok(fid.max(0.0))
}

/// Activations of one layer for a batch: `[n, channels, positions]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub data: Vec<f64>,
    pub channels: usize,
    pub positions: usize,
}

impl LayerActivations {
    fn item(&self, i: usize) -> &[f64] {
        let per = self.channels * self.positions;
        &self.data[i * per..(i + 1) * per]
    }

    pub fn count(&self) -> usize {
        self.data.len() / (self.channels * self.positions).max(1)
    }
}

/// Channel vectors scaled to unit length at every position.
fn normalize_positions(a: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut out = a.to_vec();
    for p in 0..positions {
        let norm = (0..channels).map(|c| a[c * positions + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for c in 0..channels {
            out[c * positions + p] /= norm;
        }
    }
    out
}

/// Perceptual distance between items `i` and `j` of the given layers: mean
/// over layers and positions of the mean squared difference of
/// position-normalized channel vectors.
pub fn perceptual_distance(layers: &[LayerActivations], i: usize, j: usize) -> f64 {
    let mut total = 0.0;
    for l in layers {
        let a = normalize_positions(l.item(i), l.channels, l.positions);
        let b = normalize_positions(l.item(j), l.channels, l.positions);
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        total += sq / (l.channels * l.positions) as f64;
    }
    total / layers.len() as f64
}

/// Mean pairwise perceptual distance of each set, summarized over sets.
/// `sets[s]` holds the layer activations of that set's K images.
pub fn perceptual_diversity(sets: &[Vec<LayerActivations>]) -> Result<MeanStd> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no image sets".into()));
    }
    let mut scores = Vec::with_capacity(sets.len());
    for layers in sets {
        let k = layers.first().map_or(0, LayerActivations::count);
        if k < 2 {
            return Err(Error::InvalidArgument(format!("perceptual diversity needs K >= 2 images per set, got {k}")));
        }
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..k {
            for j in i + 1..k {
                sum += perceptual_distance(layers, i, j);
                pairs += 1;
            }
        }
        scores.push(sum / pairs as f64);
    }
    Ok(MeanStd::of(&scores))
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` over `splits` contiguous splits of the
/// `[N, Y]` probabilities, clamped to `[1, Y]`.
pub fn inception_style_score(probs: &[f64], classes: usize, splits: usize) -> Result<MeanStd> {
    if classes == 0 || probs.len() % classes != 0 {
        return Err(Error::Shape("probability rows do not match the class count".into()));
    }
    let n = probs.len() / classes;
    if splits == 0 || n < splits {
        return Err(Error::InvalidArgument(format!("{n} images cannot fill {splits} splits")));
    }
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
        let rows = &probs[lo * classes..hi * classes];
        let m = (hi - lo) as f64;
        let marginal: Vec<f64> = (0..classes).map(|y| rows.iter().skip(y).step_by(classes).sum::<f64>() / m).collect();
        let mut kl = 0.0;
        for row in rows.chunks(classes) {
            for y in 0..classes {
                kl += xlogy(row[y], row[y]) - xlogy(row[y], marginal[y]);
            }
        }
        scores.push((kl / m).exp().clamp(1.0, classes as f64));
    }
    Ok(MeanStd::of(&scores))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Whether the true caption (pool slot 0) ranks first; exact ties are
/// broken uniformly at random.
fn retrieval_hit(image: &[f64], pool: &[&[f64]], rng: &mut ChaCha8Rng) -> bool {
    let scores: Vec<f64> = pool.iter().map(|c| cosine(image, c)).collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores[0] < best {
        return false;
    }
    let ties = scores.iter().filter(|&&s| s == best).count();
    ties == 1 || rng.random_range(0..ties) == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RPrecision {
    /// Mean over branches, with the standard deviation across branches.
    pub summary: MeanStd,
    pub per_branch: Vec<f64>,
}

/// Caption retrieval precision for each branch, then averaged over branches.
///
/// `image_features[i][k]` is the global feature of branch k's image for
/// item i; `true_caption[i]` indexes `captions`, the sentence features of
/// all distinct captions. Each image is ranked against its true caption and
/// `pool_size − 1` distinct distractors drawn uniformly from the rest.
pub fn r_precision(
    image_features: &[Vec<Vec<f64>>],
    true_caption: &[usize],
    captions: &[Vec<f64>],
    pool_size: usize,
    seed: u64,
) -> Result<RPrecision> {
    if pool_size < 2 {
        return Err(Error::InvalidArgument("pool size must be at least 2".into()));
    }
    if captions.len() < pool_size {
        return Err(Error::InvalidArgument(format!(
            "{} distinct captions cannot fill a pool of {pool_size}",
            captions.len()
        )));
    }
    if image_features.is_empty() || image_features.len() != true_caption.len() {
        return Err(Error::Shape("one true caption per item is required".into()));
    }
    let k = image_features[0].len();
    if k == 0 || image_features.iter().any(|f| f.len() != k) {
        return Err(Error::Shape("every item needs the same number of branch images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; k];
    for (feats, &truth) in image_features.iter().zip(true_caption) {
        if truth >= captions.len() {
            return Err(Error::InvalidArgument(format!("caption index {truth} out of range")));
        }
        for (b, img) in feats.iter().enumerate() {
            let others = rand::seq::index::sample(&mut rng, captions.len() - 1, pool_size - 1);
            let mut pool: Vec<&[f64]> = vec![captions[truth].as_slice()];
            pool.extend(others.iter().map(|o| captions[if o >= truth { o + 1 } else { o }].as_slice()));
            if retrieval_hit(img, &pool, &mut rng) {
                hits[b] += 1;
            }
        }
    }
    let per_branch: Vec<f64> = hits.iter().map(|&h| h as f64 / image_features.len() as f64).collect();
    let summary = MeanStd::of(&per_branch);
    Ok(RPrecision { summary, per_branch })
}

/// Metrics of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub perceptual_diversity: MeanStd,
    pub inception_style: MeanStd,
    pub r_precision: MeanStd,
    pub r_precision_per_branch: Vec<f64>,
    /// Held-out accuracy of the frozen head on generated images.
    pub sample_accuracy: f64,
    pub num_captions: usize,
    pub samples_per_caption: usize,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        [
            self.fid,
            self.perceptual_diversity.mean,
            self.perceptual_diversity.std,
            self.inception_style.mean,
            self.inception_style.std,
            self.r_precision.mean,
            self.r_precision.std,
            self.sample_accuracy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats1(mean: f64, var: f64) -> FeatureStats {
        FeatureStats { mean: DVector::from_element(1, mean), cov: DMatrix::from_element(1, 1, var), n: 100 }
    }

    #[test]
    fn fit_stats_examples() {
        let s = fit_stats(&[0.0, 2.0], 1).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let c = fit_stats(&[3.0, 1.0, 3.0, 1.0, 3.0, 1.0], 2).unwrap();
        assert!(c.cov.iter().all(|&v| v == 0.0));
        assert!(fit_stats(&[1.0], 1).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        assert!(frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 1.0)).unwrap() < 1e-12);
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        let mut wide = stats1(0.0, 1.0);
        wide.mean = DVector::zeros(2);
        assert!(frechet_distance(&wide, &stats1(0.0, 1.0)).is_err());
    }

    #[test]
    fn inception_degenerate_cases() {
        let y = 4;
        let uniform = vec![0.25; 40 * y];
        assert_eq!(inception_style_score(&uniform, y, 10).unwrap().mean, 1.0);
        let mut onehot = vec![0.0; 40 * y];
        for i in 0..40 {
            onehot[i * y + i % y] = 1.0;
        }
        let s = inception_style_score(&onehot, y, 10).unwrap();
        assert!((s.mean - y as f64).abs() < 1e-12, "{s:?}");
        assert!(inception_style_score(&uniform[..5 * y], y, 10).is_err());
    }

    #[test]
    fn perceptual_identical_images_is_zero() {
        let layer = LayerActivations { data: [0.3, -0.2, 0.9, 0.1].repeat(3), channels: 2, positions: 2 };
        assert_eq!(perceptual_diversity(&[vec![layer]]).unwrap().mean, 0.0);
    }

    #[test]
    fn r_precision_needs_enough_captions() {
        let err = r_precision(&[vec![vec![1.0]]], &[0], &[vec![1.0]], 2, 0);
        assert!(err.is_err());
    }
}

//! Loss kernels: image–text matching, branch diversity, conditional
//! adversarial, relativistic, and category-consistency terms, plus their
//! assembly into generator and discriminator objectives.
//!
//! Every kernel takes and returns autograd tensors so the trainer can
//! differentiate through it. Batch expectations are mini-batch means.

use autograd::{softplus_f64, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing factors of the attention-based matching score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Sharpness of the per-word attention over regions.
    pub gamma1: f64,
    /// Sharpness of the word-to-caption relevance aggregation.
    pub gamma2: f64,
    /// Scale of the batch softmax.
    pub gamma3: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { gamma1: 5.0, gamma2: 5.0, gamma3: 10.0 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.gamma1, self.gamma2, self.gamma3].iter().all(|g| g.is_finite() && *g > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("smoothing factors must be positive, got {self:?}")))
        }
    }
}

/// Region and global features of a batch of images.
#[derive(Debug, Clone)]
pub struct ImageFeatureBatch {
    /// `[B, R, D]`
    pub regions: Tensor,
    /// `[B, D]`
    pub global: Tensor,
}

/// Per-word attention over regions, `[B, T, R]`, for `regions: [B, R, D]`
/// and `words: [T, D]`. Raw word–region scores are first normalized over
/// words, then sharpened by `gamma1` and normalized over regions, so every
/// `[b, t, :]` row is a distribution.
pub fn word_attention(regions: &Tensor, words: &Tensor, gamma1: f64) -> Tensor {
    let scores = regions.matmul(&words.transpose(0, 1)); // [B, R, T]
    scores.softmax(2).transpose(1, 2).scale(gamma1).softmax(2)
}

/// Relevance of one caption to each image in a batch: `[B]`.
///
/// Each word attends over the regions; the attended context is compared
/// with the word by cosine, and the per-word cosines are pooled with a
/// `gamma2`-smoothed maximum `ln(Σ exp(γ2·cos)) / γ2`.
pub fn word_relevance(regions: &Tensor, words: &Tensor, cfg: &MatchConfig) -> Tensor {
    let (b, t, d) = (regions.dim(0), words.dim(0), words.dim(1));
    let alpha = word_attention(regions, words, cfg.gamma1);
    let context = alpha.matmul(regions); // [B, T, D]
    let cos = context.cosine_similarity(&words.unsqueeze(0).broadcast_to(&[b, t, d]), 2, false);
    cos.scale(cfg.gamma2).logsumexp(1, false).scale(1.0 / cfg.gamma2)
}

/// Additive mask hiding off-diagonal pairs that share a group (the same
/// caption text), which would otherwise be scored as negatives.
fn group_mask(groups: Option<&[usize]>, b: usize) -> Option<Tensor> {
    let groups = groups?;
    let mut data = vec![0.0; b * b];
    let mut any = false;
    for i in 0..b {
        for j in 0..b {
            if i != j && groups[i] == groups[j] {
                data[i * b + j] = -1e9;
                any = true;
            }
        }
    }
    any.then(|| Tensor::new(data, &[b, b]))
}

/// `(−mean log P(caption|image), −mean log P(image|caption))` of a score
/// matrix whose rows are images and columns captions; matches on the diagonal.
fn bidirectional_nll(scores: &Tensor) -> (Tensor, Tensor) {
    let b = scores.dim(0);
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = Tensor::new(eye, &[b, b]);
    let nll = |axis: usize| scores.log_softmax(axis).mul(&eye).sum_all().scale(-1.0 / b as f64);
    (nll(0), nll(1))
}

/// The four matching terms for one batch of images against their captions.
#[derive(Debug, Clone)]
pub struct MatchTerms {
    /// Word level, image given caption.
    pub word_image: Tensor,
    /// Word level, caption given image.
    pub word_caption: Tensor,
    /// Sentence level, image given caption.
    pub sentence_image: Tensor,
    /// Sentence level, caption given image.
    pub sentence_caption: Tensor,
}

impl MatchTerms {
    pub fn total(&self) -> Tensor {
        self.word_image.add(&self.word_caption).add(&self.sentence_image).add(&self.sentence_caption)
    }
}

/// Matching terms for image `j` paired with caption `j`. `words[j]` is the
/// unpadded `[T_j, D]` word matrix, `sentences` is `[B, D]`. `groups`, when
/// given, assigns each item a caption id; distinct items with the same id
/// are excluded from each other's negatives.
pub fn match_terms(
    images: &ImageFeatureBatch,
    words: &[Tensor],
    sentences: &Tensor,
    cfg: &MatchConfig,
    groups: Option<&[usize]>,
) -> Result<MatchTerms> {
    cfg.validate()?;
    let b = images.regions.dim(0);
    if b < 2 {
        return Err(Error::InvalidArgument("matching loss needs a batch of at least 2".into()));
    }
    if words.len() != b || sentences.dim(0) != b || images.global.dim(0) != b {
        return Err(Error::Shape(format!(
            "batch sizes disagree: {b} images, {} word matrices, {} sentences",
            words.len(),
            sentences.dim(0)
        )));
    }
    if let Some(g) = groups {
        if g.len() != b {
            return Err(Error::Shape(format!("{} group ids for a batch of {b}", g.len())));
        }
    }
    let mask = group_mask(groups, b);
    let masked = |s: Tensor| match &mask {
        Some(m) => s.add(m),
        None => s,
    };

    // column i: relevance of caption i to every image
    let columns: Vec<Tensor> = words.iter().map(|w| word_relevance(&images.regions, w, cfg)).collect();
    let word_scores = masked(Tensor::stack(&columns, 1).scale(cfg.gamma3));
    let (word_image, word_caption) = bidirectional_nll(&word_scores);

    let g = images.global.unsqueeze(1).broadcast_to(&[b, b, sentences.dim(1)]);
    let s = sentences.unsqueeze(0).broadcast_to(&[b, b, sentences.dim(1)]);
    let sent_scores = masked(g.cosine_similarity(&s, 2, false).scale(cfg.gamma3));
    let (sentence_image, sentence_caption) = bidirectional_nll(&sent_scores);

    Ok(MatchTerms { word_image, word_caption, sentence_image, sentence_caption })
}

/// Matching loss summed over the K image batches (one per generator branch).
pub fn similarity_loss(
    images: &[ImageFeatureBatch],
    words: &[Tensor],
    sentences: &Tensor,
    cfg: &MatchConfig,
    groups: Option<&[usize]>,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for batch in images {
        let t = match_terms(batch, words, sentences, cfg, groups)?.total();
        total = Some(match total {
            Some(acc) => acc.add(&t),
            None => t,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no image batches given".into()))
}

/// Which neighbor each branch is compared against in the diversity ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityReduce {
    #[default]
    Max,
    Min,
}

#[derive(Debug, Clone)]
pub struct DiversityOutput {
    /// Training term `−Σ_k ratio_k` (batch mean).
    pub term: Tensor,
    /// Reported magnitude `Σ_k ratio_k`.
    pub magnitude: f64,
}

/// Image-to-noise distance ratios between branches.
///
/// `images`: `[K, B, ...]`, `noise`: `[K, B, D_z]`. For each branch k and
/// item b, `ratio = reduce_{k'≠k} d_I / (d_z + epsilon)` with mean absolute
/// differences as distances.
pub fn diversity_loss(images: &Tensor, noise: &Tensor, epsilon: f64, reduce: DiversityReduce) -> Result<DiversityOutput> {
    let k = images.dim(0);
    if k < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 branches, got {k}")));
    }
    if noise.dim(0) != k || noise.dim(1) != images.dim(1) {
        return Err(Error::Shape(format!("noise {:?} does not align with images {:?}", noise.shape(), images.shape())));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
    }
    let b = images.dim(1);
    let pairwise = |t: &Tensor| {
        let flat = t.reshape(&[k, b, t.numel() / (k * b)]);
        let n = flat.dim(2);
        let a = flat.unsqueeze(1).broadcast_to(&[k, k, b, n]);
        let c = flat.unsqueeze(0).broadcast_to(&[k, k, b, n]);
        a.sub(&c).abs().mean_axis(3, false) // [K, K, B]
    };
    let d_img = pairwise(images);
    let d_z = pairwise(noise);

    let mut diag = vec![0.0; k * k * b];
    for i in 0..k {
        diag[(i * k + i) * b..(i * k + i + 1) * b].fill(1.0);
    }
    let diag = Tensor::new(diag, &[k, k, b]);
    // the diagonal compares a branch with itself; give it a unit denominator
    // and push it out of the reduction
    let ratio = d_img.div(&d_z.add_scalar(epsilon).add(&diag));
    let per_branch = match reduce {
        DiversityReduce::Max => ratio.add(&diag.scale(-1e30)).max_axis(1, false),
        DiversityReduce::Min => ratio.add(&diag.scale(1e30)).neg().max_axis(1, false).neg(),
    }; // [K, B]
    let sum = per_branch.mean_axis(1, false).sum_all();
    let magnitude = sum.item();
    Ok(DiversityOutput { term: sum.neg(), magnitude })
}

/// Conditional adversarial losses `(generator, discriminator)`.
///
/// `real`: `[B]` logits of real images, `fakes[k]`: `[B]` logits of branch k.
/// The discriminator's real term is counted once per branch.
pub fn base_adversarial(real: &Tensor, fakes: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if fakes.is_empty() || real.numel() == 0 || fakes.iter().any(|f| f.numel() == 0) {
        return Err(Error::InvalidArgument("adversarial loss needs real and fake logits".into()));
    }
    let k = fakes.len() as f64;
    let mut adv_g: Option<Tensor> = None;
    let mut adv_d = real.neg().softplus().mean_all().scale(k);
    for f in fakes {
        let g = f.neg().softplus().mean_all();
        adv_g = Some(match adv_g {
            Some(acc) => acc.add(&g),
            None => g,
        });
        adv_d = adv_d.add(&f.softplus().mean_all());
    }
    Ok((adv_g.expect("at least one branch"), adv_d))
}

/// Symmetric real/fake label pair of the relativistic loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativisticLabels {
    pub real: f64,
    pub fake: f64,
}

impl Default for RelativisticLabels {
    fn default() -> Self {
        Self { real: 1.0, fake: -1.0 }
    }
}

impl RelativisticLabels {
    pub fn new(real: f64) -> Result<Self> {
        if real == 0.0 || !real.is_finite() {
            return Err(Error::InvalidArgument("relativistic labels must be finite and nonzero".into()));
        }
        Ok(Self { real, fake: -real })
    }
}

/// `−ln σ((a − b)·l)`.
pub fn relativistic_term(a: f64, b: f64, l: f64) -> f64 {
    softplus_f64(-(a - b) * l)
}

fn relativistic_term_t(a: &Tensor, b: &Tensor, l: f64) -> Tensor {
    a.sub(b).scale(-l).softplus()
}

/// Relativistic `(generator, discriminator)` losses.
///
/// With `averaged`, every logit is compared with the batch mean of the
/// opposing class (the mean fake logit of the same branch for reals);
/// otherwise reals and fakes are compared item by item, which requires equal
/// batch sizes.
pub fn relativistic_losses(
    real: &Tensor,
    fakes: &[Tensor],
    labels: RelativisticLabels,
    averaged: bool,
) -> Result<(Tensor, Tensor)> {
    if fakes.is_empty() || real.numel() == 0 || fakes.iter().any(|f| f.numel() == 0) {
        return Err(Error::InvalidArgument("relativistic loss needs real and fake logits".into()));
    }
    if !averaged && fakes.iter().any(|f| f.numel() != real.numel()) {
        return Err(Error::Shape("pairwise relativistic loss needs equal real and fake batch sizes".into()));
    }
    let real_ref = if averaged { real.mean_all() } else { real.clone() };
    let mut rel_g: Option<Tensor> = None;
    let mut rel_d: Option<Tensor> = None;
    for f in fakes {
        let fake_ref = if averaged { f.mean_all() } else { f.clone() };
        let g = relativistic_term_t(f, &real_ref, labels.real)
            .mean_all()
            .add(&relativistic_term_t(real, &fake_ref, labels.fake).mean_all());
        let d = relativistic_term_t(real, &fake_ref, labels.real)
            .mean_all()
            .add(&relativistic_term_t(f, &real_ref, labels.fake).mean_all());
        rel_g = Some(rel_g.map_or(g.clone(), |acc| acc.add(&g)));
        rel_d = Some(rel_d.map_or(d.clone(), |acc| acc.add(&d)));
    }
    Ok((rel_g.expect("nonempty"), rel_d.expect("nonempty")))
}

/// Linear classifier over the concatenated `[real, mixed fake]` feature.
#[derive(Debug, Clone)]
pub struct HeadTensors {
    /// `[Y, 2D]`
    pub weight: Tensor,
    /// `[Y]`
    pub bias: Tensor,
}

impl HeadTensors {
    pub fn num_classes(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn logits(&self, mixed: &Tensor) -> Tensor {
        mixed.matmul(&self.weight.transpose(0, 1)).add(&self.bias)
    }
}

/// `[B, 2D]` feature `concat(X, λ·Σ_k s^k·cos(X, s^k))`, with the cosine a
/// per-item scalar.
pub fn mixed_feature(real: &Tensor, fakes: &[Tensor], lambda: f64) -> Tensor {
    let mut acc: Option<Tensor> = None;
    for f in fakes {
        let w = real.cosine_similarity(f, 1, true); // [B, 1]
        let term = f.mul(&w);
        acc = Some(acc.map_or(term.clone(), |a| a.add(&term)));
    }
    let block = acc.map_or_else(|| Tensor::zeros(real.shape()), |a| a.scale(lambda));
    Tensor::cat(&[real.clone(), block], 1)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&c| c >= classes) {
        Some(c) => Err(Error::InvalidArgument(format!("category {c} out of range 0..{classes}"))),
        None => Ok(()),
    }
}

fn check_head(real: &Tensor, fakes: &[Tensor], head: &HeadTensors) -> Result<()> {
    if fakes.is_empty() {
        return Err(Error::InvalidArgument("category loss needs at least one fake feature".into()));
    }
    if head.weight.dim(1) != 2 * real.dim(1) || fakes.iter().any(|f| f.shape() != real.shape()) {
        return Err(Error::Shape(format!(
            "head {:?} incompatible with features {:?}",
            head.weight.shape(),
            real.shape()
        )));
    }
    Ok(())
}

/// Cross-entropy of the head's prediction on the mixed feature against the
/// true category of each item (batch mean). `real`, `fakes[k]`: `[B, D]`.
pub fn category_consistency(
    real: &Tensor,
    fakes: &[Tensor],
    head: &HeadTensors,
    labels: &[usize],
    lambda: f64,
) -> Result<Tensor> {
    check_head(real, fakes, head)?;
    let y = head.num_classes();
    check_labels(labels, y)?;
    let b = real.dim(0);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let logp = head.logits(&mixed_feature(real, fakes, lambda)).log_softmax(1);
    let mut onehot = vec![0.0; b * y];
    for (i, &c) in labels.iter().enumerate() {
        onehot[i * y + c] = 1.0;
    }
    Ok(logp.mul(&Tensor::new(onehot, &[b, y])).sum_all().scale(-1.0 / b as f64))
}

/// Multi-label criterion used when an item carries several categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultilabelCriterion {
    /// `−Σ_y max(0, 1 − ln P(y) − [y ∈ c]) / |c|` with P the softmax of the head.
    #[default]
    Literal,
    /// Mean over classes of per-class logistic losses on the raw logits.
    SoftMargin,
}

pub fn category_consistency_multilabel(
    real: &Tensor,
    fakes: &[Tensor],
    head: &HeadTensors,
    labels: &[Vec<usize>],
    lambda: f64,
    criterion: MultilabelCriterion,
) -> Result<Tensor> {
    check_head(real, fakes, head)?;
    let y = head.num_classes();
    let b = real.dim(0);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} label sets for a batch of {b}", labels.len())));
    }
    for set in labels {
        if set.is_empty() {
            return Err(Error::InvalidArgument("empty label set".into()));
        }
        check_labels(set, y)?;
    }
    let logits = head.logits(&mixed_feature(real, fakes, lambda));
    let mut target = vec![0.0; b * y];
    let mut inv_count = vec![0.0; b];
    for (i, set) in labels.iter().enumerate() {
        for &c in set {
            target[i * y + c] = 1.0;
        }
        let distinct = target[i * y..(i + 1) * y].iter().sum::<f64>();
        inv_count[i] = 1.0 / distinct;
    }
    let target = Tensor::new(target, &[b, y]);
    let per_item = match criterion {
        MultilabelCriterion::Literal => {
            let hinge = logits.log_softmax(1).neg().add_scalar(1.0).sub(&target).relu();
            hinge.sum_axis(1, false).mul(&Tensor::new(inv_count, &[b])).neg()
        }
        MultilabelCriterion::SoftMargin => {
            // −[t ln σ(x) + (1 − t) ln σ(−x)] = softplus(x) − t·x
            logits.softplus().sub(&target.mul(&logits)).mean_axis(1, false)
        }
    };
    Ok(per_item.mean_all())
}

/// Which regularizers a training run uses on top of the base objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Basic,
    Relativistic,
    Category,
    Combined,
}

impl Variant {
    pub fn uses_relativistic(self) -> bool {
        matches!(self, Variant::Relativistic | Variant::Combined)
    }

    pub fn uses_category(self) -> bool {
        matches!(self, Variant::Category | Variant::Combined)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Relativistic => "relativistic",
            Variant::Category => "category",
            Variant::Combined => "combined",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "relativistic" => Ok(Variant::Relativistic),
            "category" => Ok(Variant::Category),
            "combined" => Ok(Variant::Combined),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected basic, relativistic, category or combined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the category-consistency term.
    pub delta: f64,
    /// Mixing factor of the fake block; `None` means `1/K`.
    pub lambda: Option<f64>,
    pub diversity_weight: f64,
    pub similarity_weight: f64,
    /// Added to noise distances in the diversity ratio.
    pub epsilon: f64,
    /// Weight of both relativistic terms.
    pub relativistic_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta: 1.0,
            lambda: None,
            diversity_weight: 1.0,
            similarity_weight: 1.0,
            epsilon: 1e-5,
            relativistic_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn lambda_for(&self, k: usize) -> f64 {
        self.lambda.unwrap_or(1.0 / k as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.delta) {
            return Err(Error::InvalidArgument("delta must be >= 0".into()));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidArgument("lambda must be > 0".into()));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        if ![self.diversity_weight, self.similarity_weight, self.relativistic_weight].into_iter().all(finite_nonneg) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Unweighted loss parts of one step. Parts a variant does not use may be `None`.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub adv_g: Tensor,
    pub adv_d: Tensor,
    pub sim: Tensor,
    pub div: Tensor,
    pub rel_g: Option<Tensor>,
    pub rel_d: Option<Tensor>,
    pub cc: Option<Tensor>,
}

/// Scalar breakdown of one step; inactive parts are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub sim: f64,
    pub div: f64,
    pub rel_g: Option<f64>,
    pub rel_d: Option<f64>,
    pub cc: Option<f64>,
    pub total_g: f64,
    pub total_d: f64,
}

#[derive(Debug, Clone)]
pub struct Objectives {
    pub total_g: Tensor,
    pub total_d: Tensor,
    pub report: LossReport,
}

/// Weighted generator and discriminator objectives:
///
/// ```text
/// total_g = adv_g + w_sim·sim + w_div·div [+ ρ·rel_g] [+ δ·cc]
/// total_d = adv_d [+ ρ·rel_d]
/// ```
///
/// with the bracketed terms present for the variants that use them. The
/// report's totals are accumulated in the same order as the tensors, so they
/// agree bit for bit.
pub fn assemble_objectives(parts: &LossParts, weights: &LossWeights, variant: Variant) -> Result<Objectives> {
    let missing = |name: &str| Error::InvalidArgument(format!("variant {} needs the {name} part", variant.name()));
    let mut total_g = parts.adv_g.add(&parts.sim.scale(weights.similarity_weight)).add(&parts.div.scale(weights.diversity_weight));
    let total_d = discriminator_objective(&parts.adv_d, parts.rel_d.as_ref(), weights, variant)?;
    let mut report = LossReport {
        adv_g: parts.adv_g.item(),
        adv_d: parts.adv_d.item(),
        sim: parts.sim.item(),
        div: parts.div.item(),
        rel_g: None,
        rel_d: None,
        cc: None,
        total_g: 0.0,
        total_d: 0.0,
    };
    if variant.uses_relativistic() {
        let rel_g = parts.rel_g.as_ref().ok_or_else(|| missing("rel_g"))?;
        let rel_d = parts.rel_d.as_ref().ok_or_else(|| missing("rel_d"))?;
        total_g = total_g.add(&rel_g.scale(weights.relativistic_weight));
        report.rel_g = Some(rel_g.item());
        report.rel_d = Some(rel_d.item());
    }
    if variant.uses_category() {
        let cc = parts.cc.as_ref().ok_or_else(|| missing("cc"))?;
        total_g = total_g.add(&cc.scale(weights.delta));
        report.cc = Some(cc.item());
    }
    report.total_g = report.expected_total_g(weights);
    report.total_d = report.expected_total_d(weights);
    debug_assert_eq!(report.total_g.to_bits(), total_g.item().to_bits());
    Ok(Objectives { total_g, total_d, report })
}

/// `adv_d [+ ρ·rel_d]`, the discriminator side of [`assemble_objectives`].
pub fn discriminator_objective(
    adv_d: &Tensor,
    rel_d: Option<&Tensor>,
    weights: &LossWeights,
    variant: Variant,
) -> Result<Tensor> {
    if !variant.uses_relativistic() {
        return Ok(adv_d.clone());
    }
    let rel_d = rel_d.ok_or_else(|| Error::InvalidArgument(format!("variant {} needs the rel_d part", variant.name())))?;
    Ok(adv_d.add(&rel_d.scale(weights.relativistic_weight)))
}

impl LossReport {
    /// The documented generator sum, evaluated on the report's own scalars.
    pub fn expected_total_g(&self, w: &LossWeights) -> f64 {
        let mut t = self.adv_g + self.sim * w.similarity_weight + self.div * w.diversity_weight;
        if let Some(r) = self.rel_g {
            t += r * w.relativistic_weight;
        }
        if let Some(c) = self.cc {
            t += c * w.delta;
        }
        t
    }

    pub fn expected_total_d(&self, w: &LossWeights) -> f64 {
        match self.rel_d {
            Some(r) => self.adv_d + r * w.relativistic_weight,
            None => self.adv_d,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.sim, self.div, self.total_g, self.total_d]
            .into_iter()
            .chain(self.rel_g)
            .chain(self.rel_d)
            .chain(self.cc)
            .all(f64::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape)
    }

    #[test]
    fn relativistic_term_examples() {
        assert_eq!(relativistic_term(0.3, 0.3, 1.0), std::f64::consts::LN_2);
        assert!((relativistic_term(0.5, 0.0, 1.0) - 0.47407698).abs() < 1e-8);
        assert_eq!(relativistic_term(1.0, -0.5, 1.0), relativistic_term(-0.5, 1.0, -1.0));
    }

    #[test]
    fn relativistic_pairwise_example() {
        let (g, d) = relativistic_losses(&t(&[1.0], &[1]), &[t(&[-1.0], &[1])], RelativisticLabels::default(), false).unwrap();
        assert!((d.item() - 0.25386).abs() < 1e-5, "{}", d.item());
        assert!((g.item() - 4.25386).abs() < 1e-5, "{}", g.item());
    }

    #[test]
    fn relativistic_tie_point_is_exact() {
        let k = 3;
        let fakes = vec![t(&[0.7, 0.7], &[2]); k];
        for averaged in [false, true] {
            let (g, d) = relativistic_losses(&t(&[0.7, 0.7], &[2]), &fakes, RelativisticLabels::default(), averaged).unwrap();
            let expect = 2.0 * k as f64 * std::f64::consts::LN_2;
            assert_eq!(g.item(), d.item());
            assert!((g.item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let (g, d) = base_adversarial(&t(&[0.0, 0.0], &[2]), &[t(&[0.0, 0.0], &[2]), t(&[0.0, 0.0], &[2])]).unwrap();
        assert!((g.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d.item() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let (_, d) = base_adversarial(&t(&[60.0], &[1]), &[t(&[-60.0], &[1])]).unwrap();
        assert!(d.item() < 1e-20);
    }

    #[test]
    fn diversity_hand_example() {
        // K=2, B=1, one pixel: |2 - 0| = 2; one noise coordinate: |0.5 - 0| = 0.5
        let images = t(&[2.0, 0.0], &[2, 1, 1]);
        let noise = t(&[0.5, 0.0], &[2, 1, 1]);
        let out = diversity_loss(&images, &noise, 0.0, DiversityReduce::Max).unwrap();
        assert_eq!(out.magnitude, 8.0);
        assert_eq!(out.term.item(), -8.0);
        let same = t(&[1.0, 1.0], &[2, 1, 1]);
        let out = diversity_loss(&same, &noise, 1e-5, DiversityReduce::Max).unwrap();
        assert_eq!(out.term.item(), 0.0);
        assert!(diversity_loss(&t(&[1.0], &[1, 1, 1]), &t(&[1.0], &[1, 1, 1]), 1e-5, DiversityReduce::Max).is_err());
    }

    #[test]
    fn similarity_uniform_posterior() {
        let (b, k, r, d) = (4usize, 2usize, 3usize, 5usize);
        let feats = ImageFeatureBatch { regions: Tensor::ones(&[b, r, d]), global: Tensor::ones(&[b, d]) };
        let words = vec![Tensor::ones(&[2, d]); b];
        let sentences = Tensor::ones(&[b, d]);
        let loss = similarity_loss(&vec![feats; k], &words, &sentences, &MatchConfig::default(), None).unwrap();
        let expect = (k * 4) as f64 * (b as f64).ln();
        assert!((loss.item() - expect).abs() < 1e-9, "{} vs {expect}", loss.item());
    }

    #[test]
    fn similarity_rejects_batch_of_one() {
        let feats = ImageFeatureBatch { regions: Tensor::ones(&[1, 2, 3]), global: Tensor::ones(&[1, 3]) };
        let err = similarity_loss(&[feats], &[Tensor::ones(&[1, 3])], &Tensor::ones(&[1, 3]), &MatchConfig::default(), None);
        assert!(err.is_err());
    }

    #[test]
    fn similarity_saturates_for_orthogonal_matches() {
        let b = 3;
        let d = 3;
        let mut basis = vec![0.0; b * d];
        for i in 0..b {
            basis[i * d + i] = 1.0;
        }
        let regions = t(&basis, &[b, 1, d]);
        let global = t(&basis, &[b, d]);
        let words: Vec<Tensor> = (0..b).map(|i| t(&basis[i * d..(i + 1) * d], &[1, d])).collect();
        let cfg = MatchConfig { gamma1: 5.0, gamma2: 5.0, gamma3: 50.0 };
        let loss = similarity_loss(&[ImageFeatureBatch { regions, global }], &words, &t(&basis, &[b, d]), &cfg, None).unwrap();
        assert!(loss.item() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let regions = t(&(0..24).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), &[2, 4, 3]);
        let words = t(&[0.2, -0.4, 0.9, 1.0, 0.1, -0.3], &[2, 3]);
        let a = word_attention(&regions, &words, 5.0);
        assert_eq!(a.shape(), &[2, 2, 4]);
        for row in a.data().chunks(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn category_identical_fakes_and_limits() {
        let x = t(&[0.5, -1.0, 2.0], &[1, 3]);
        let mixed = mixed_feature(&x, &[x.clone(), x.clone()], 0.5);
        assert_eq!(mixed.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        let head = HeadTensors { weight: Tensor::zeros(&[4, 6]), bias: Tensor::zeros(&[4]) };
        let ce = category_consistency(&x, &[x.clone()], &head, &[2], 1.0).unwrap();
        assert!((ce.item() - 4f64.ln()).abs() < 1e-12);
        assert!(category_consistency(&x, &[x.clone()], &head, &[4], 1.0).is_err());
    }

    #[test]
    fn multilabel_literal_examples() {
        let x = t(&[0.5, -1.0], &[1, 2]);
        let y = 5;
        let head = HeadTensors { weight: Tensor::zeros(&[y, 4]), bias: Tensor::zeros(&[y]) };
        let all: Vec<usize> = (0..y).collect();
        let l = category_consistency_multilabel(&x, &[x.clone()], &head, &[all], 1.0, MultilabelCriterion::Literal).unwrap();
        assert!((l.item() + (y as f64).ln()).abs() < 1e-12);
        let one = HeadTensors { weight: Tensor::zeros(&[1, 4]), bias: Tensor::zeros(&[1]) };
        let l = category_consistency_multilabel(&x, &[x.clone()], &one, &[vec![0]], 1.0, MultilabelCriterion::Literal).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(category_consistency_multilabel(&x, &[x.clone()], &one, &[vec![]], 1.0, MultilabelCriterion::Literal).is_err());
    }

    fn parts() -> LossParts {
        LossParts {
            adv_g: Tensor::scalar(0.7),
            adv_d: Tensor::scalar(1.3),
            sim: Tensor::scalar(2.1),
            div: Tensor::scalar(-0.4),
            rel_g: Some(Tensor::scalar(1.9)),
            rel_d: Some(Tensor::scalar(0.6)),
            cc: Some(Tensor::scalar(0.25)),
        }
    }

    #[test]
    fn assembly_gating_and_collapse() {
        let w = LossWeights::default();
        let basic = assemble_objectives(&parts(), &w, Variant::Basic).unwrap();
        assert_eq!(basic.report.rel_g, None);
        assert_eq!(basic.report.cc, None);
        assert_eq!(basic.report.total_g, 0.7 + 2.1 + -0.4);
        let combined = assemble_objectives(&parts(), &w, Variant::Combined).unwrap();
        assert_eq!(combined.report.total_g, 0.7 + 2.1 + -0.4 + 1.9 + 0.25);
        assert_eq!(combined.report.total_d, 1.3 + 0.6);
        let zero = LossWeights { delta: 0.0, ..w };
        let crd = assemble_objectives(&parts(), &zero, Variant::Combined).unwrap();
        let rd = assemble_objectives(&parts(), &zero, Variant::Relativistic).unwrap();
        assert_eq!(crd.total_g.item().to_bits(), rd.total_g.item().to_bits());
        let mut p = parts();
        p.cc = None;
        assert!(assemble_objectives(&p, &w, Variant::Category).is_err());
    }
}

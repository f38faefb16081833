//! Text and image encoders with a linear category head, pretrained on the
//! matching objective and frozen afterwards.
//!
//! The text encoder is an embedding table followed by a bidirectional GRU;
//! a word's feature concatenates both directions' hidden states, and the
//! sentence feature concatenates the last forward and first backward state.
//! The image encoder is a four-block strided conv net: the third block is
//! projected to `text_dim` channels to give region features on a
//! `(size/4)²` grid, and the fourth block is pooled into the global feature.

use std::path::Path;

use autograd::nn::{Bound, Conv2d, Embedding, GruCell, Linear, ParamId, ParamStore};
use autograd::optim::Adam;
use autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Layout};
use crate::corpus::{tokenize, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{self, HeadTensors, ImageFeatureBatch, MatchConfig};
use crate::derive_seed;

const CHECKPOINT_KIND: &str = "embedder";
const LRELU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Vocabulary size including the padding slot.
    pub vocab_size: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Shared width of word, sentence, region and global features.
    pub text_dim: usize,
    /// Output channels of the four conv blocks.
    pub channels: [usize; 4],
    pub seed: u64,
}

impl EmbedderConfig {
    pub fn new(vocab_size: usize, image_size: usize, num_classes: usize) -> Self {
        Self { vocab_size, image_size, num_classes, embed_dim: 32, text_dim: 64, channels: [16, 32, 32, 64], seed: 0 }
    }

    /// Side of the region grid.
    pub fn grid(&self) -> usize {
        self.image_size / 4
    }

    pub fn num_regions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_dim < 2 || self.text_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("text_dim must be even and >= 2, got {}", self.text_dim)));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::InvalidArgument(format!("image_size {} is not a multiple of 8 >= 16", self.image_size)));
        }
        if self.vocab_size < 2 || self.num_classes == 0 || self.embed_dim == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("embedder sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Word and sentence features of one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    /// Row-major `[T, D]`.
    pub word_features: Vec<f64>,
    pub sentence_feature: Vec<f64>,
    pub token_count: usize,
    pub dim: usize,
}

impl TextCondition {
    /// `[max_len, D]` with zero rows after the caption.
    pub fn padded_words(&self, max_len: usize) -> Result<Vec<f64>> {
        if max_len < self.token_count {
            return Err(Error::InvalidArgument(format!("caption of {} tokens exceeds {max_len}", self.token_count)));
        }
        let mut out = self.word_features.clone();
        out.resize(max_len * self.dim, 0.0);
        Ok(out)
    }

    pub fn words_tensor(&self) -> Tensor {
        Tensor::new(self.word_features.clone(), &[self.token_count, self.dim])
    }

    /// The sentence feature scaled to unit norm (zero stays zero).
    pub fn sentence_unit(&self) -> Vec<f64> {
        let n = self.sentence_feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return self.sentence_feature.clone();
        }
        self.sentence_feature.iter().map(|v| v / n).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.word_features.iter().chain(&self.sentence_feature).all(|v| v.is_finite())
    }
}

/// Region and global features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// Row-major `[R, D]`.
    pub region_features: Vec<f64>,
    pub global_feature: Vec<f64>,
}

/// Output of a batched image forward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub regions: Tensor,
    pub global: Tensor,
    /// Post-activation outputs of the first three conv blocks.
    pub activations: Vec<Tensor>,
}

impl ImageForward {
    pub fn features(&self) -> ImageFeatureBatch {
        ImageFeatureBatch { regions: self.regions.clone(), global: self.global.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextEncoder {
    embed: Embedding,
    fwd: GruCell,
    bwd: GruCell,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    project: Conv2d,
    conv4: Conv2d,
    global: Linear,
}

/// Linear classifier over `[real, fake-mix]` features, `weight: [Y, 2D]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Embedder {
    pub config: EmbedderConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    text: TextEncoder,
    image: ImageEncoder,
    pub head: ClassifierHead,
}

impl Embedder {
    pub fn new(config: EmbedderConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xe3bed));
        let mut s = ParamStore::new();
        let (e, d, h) = (config.embed_dim, config.text_dim, config.text_dim / 2);
        let text = TextEncoder {
            embed: Embedding::new(&mut s, &mut rng, "text.embed", config.vocab_size, e),
            fwd: GruCell::new(&mut s, &mut rng, "text.gru_fwd", e, h),
            bwd: GruCell::new(&mut s, &mut rng, "text.gru_bwd", e, h),
        };
        let [c1, c2, c3, c4] = config.channels;
        let image = ImageEncoder {
            conv1: Conv2d::new(&mut s, &mut rng, "image.conv1", 3, c1, 3, 2, 1),
            conv2: Conv2d::new(&mut s, &mut rng, "image.conv2", c1, c2, 3, 2, 1),
            conv3: Conv2d::new(&mut s, &mut rng, "image.conv3", c2, c3, 3, 1, 1),
            project: Conv2d::new(&mut s, &mut rng, "image.project", c3, d, 1, 1, 0),
            conv4: Conv2d::new(&mut s, &mut rng, "image.conv4", c3, c4, 3, 2, 1),
            global: Linear::new(&mut s, &mut rng, "image.global", c4, d, true),
        };
        let y = config.num_classes;
        let bound = 1.0 / ((2 * d) as f64).sqrt();
        let head = ClassifierHead {
            weight: s.add("head.weight", &[y, 2 * d], autograd::nn::uniform_init(&mut rng, y * 2 * d, bound)),
            bias: s.add("head.bias", &[y], vec![0.0; y]),
        };
        Ok(Self { config, store: s, vocab, text, image, head })
    }

    pub fn dim(&self) -> usize {
        self.config.text_dim
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty caption".into()));
        }
        match tokens.iter().find(|&&t| t == 0 || t >= self.config.vocab_size) {
            Some(t) => Err(Error::UnknownToken(format!("index {t}"))),
            None => Ok(()),
        }
    }

    /// Word features `[T_i, D]` per caption and sentence features `[B, D]`.
    /// Captions of equal length are run through the GRUs together.
    pub fn text_forward(&self, p: &Bound, captions: &[Vec<usize>]) -> Result<(Vec<Tensor>, Tensor)> {
        for c in captions {
            self.check_tokens(c)?;
        }
        let h = self.config.text_dim / 2;
        let mut order: Vec<usize> = (0..captions.len()).collect();
        order.sort_by_key(|&i| (captions[i].len(), i));
        let mut words: Vec<Option<Tensor>> = vec![None; captions.len()];
        let mut sentence_rows: Vec<Tensor> = Vec::new();
        let mut row_of = vec![0usize; captions.len()];
        let mut start = 0;
        while start < order.len() {
            let len = captions[order[start]].len();
            let end = order[start..].iter().position(|&i| captions[i].len() != len).map_or(order.len(), |o| start + o);
            let group = &order[start..end];
            let n = group.len();
            let inputs: Vec<Tensor> = (0..len)
                .map(|t| {
                    let idx: Vec<usize> = group.iter().map(|&i| captions[i][t]).collect();
                    self.text.embed.forward(p, &idx)
                })
                .collect();
            let mut hf = Vec::with_capacity(len);
            let mut state = Tensor::zeros(&[n, h]);
            for x in &inputs {
                state = self.text.fwd.step(p, x, &state);
                hf.push(state.clone());
            }
            let mut hb = vec![Tensor::zeros(&[n, h]); len];
            let mut state = Tensor::zeros(&[n, h]);
            for t in (0..len).rev() {
                state = self.text.bwd.step(p, &inputs[t], &state);
                hb[t] = state.clone();
            }
            let all = Tensor::cat(&[Tensor::stack(&hf, 1), Tensor::stack(&hb, 1)], 2); // [n, T, D]
            for (j, &i) in group.iter().enumerate() {
                words[i] = Some(all.narrow(0, j, 1).reshape(&[len, 2 * h]));
                row_of[i] = sentence_rows.len() + j;
            }
            sentence_rows.push(Tensor::cat(&[hf[len - 1].clone(), hb[0].clone()], 1));
            start = end;
        }
        let sentences = if sentence_rows.is_empty() {
            Tensor::zeros(&[0, 2 * h])
        } else {
            Tensor::cat(&sentence_rows, 0).index_select(&row_of)
        };
        Ok((words.into_iter().map(|w| w.expect("every caption encoded")).collect(), sentences))
    }

    /// Features of a `[B, 3, S, S]` batch at the training resolution.
    pub fn image_forward(&self, p: &Bound, images: &Tensor) -> Result<ImageForward> {
        let s = self.config.image_size;
        if images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s {
            return Err(Error::Shape(format!("image encoder expects [B, 3, {s}, {s}], got {:?}", images.shape())));
        }
        let enc = &self.image;
        let a1 = enc.conv1.forward(p, images).leaky_relu(LRELU);
        let a2 = enc.conv2.forward(p, &a1).leaky_relu(LRELU);
        let a3 = enc.conv3.forward(p, &a2).leaky_relu(LRELU);
        let b = images.dim(0);
        let (d, r) = (self.config.text_dim, self.config.num_regions());
        let regions = enc.project.forward(p, &a3).reshape(&[b, d, r]).transpose(1, 2);
        let a4 = enc.conv4.forward(p, &a3).leaky_relu(LRELU);
        let pooled = a4.flatten_from(2).mean_axis(2, false);
        let global = enc.global.forward(p, &pooled);
        Ok(ImageForward { regions, global, activations: vec![a1, a2, a3] })
    }

    pub fn head_tensors(&self, p: &Bound) -> HeadTensors {
        HeadTensors { weight: p[self.head.weight].clone(), bias: p[self.head.bias].clone() }
    }

    /// Class logits `[B, Y]` for plain image features, with the fake block zeroed.
    pub fn real_logits(&self, p: &Bound, global: &Tensor) -> Tensor {
        let zeros = Tensor::zeros(global.shape());
        self.head_tensors(p).logits(&Tensor::cat(&[global.clone(), zeros], 1))
    }

    /// Class logits with the image in the fake block and the real block zeroed.
    pub fn fake_block_logits(&self, p: &Bound, global: &Tensor) -> Tensor {
        let zeros = Tensor::zeros(global.shape());
        self.head_tensors(p).logits(&Tensor::cat(&[zeros, global.clone()], 1))
    }

    pub fn encode_tokens(&self, tokens: &[usize]) -> Result<TextCondition> {
        let p = self.store.bind(false);
        let (words, sentences) = self.text_forward(&p, &[tokens.to_vec()])?;
        let cond = TextCondition {
            word_features: words[0].to_vec(),
            sentence_feature: sentences.to_vec(),
            token_count: tokens.len(),
            dim: self.dim(),
        };
        if !cond.all_finite() {
            return Err(Error::Numerical("text features are not finite".into()));
        }
        Ok(cond)
    }

    /// Encode a caption string (lowercased, whitespace-split).
    pub fn encode_text(&self, caption: &str) -> Result<TextCondition> {
        self.encode_tokens(&self.vocab.encode(&tokenize(caption))?)
    }

    /// Encode a batch of captions at once.
    pub fn encode_batch(&self, captions: &[Vec<usize>]) -> Result<Vec<TextCondition>> {
        let p = self.store.bind(false);
        let (words, sentences) = self.text_forward(&p, captions)?;
        let d = self.dim();
        Ok(words
            .iter()
            .enumerate()
            .map(|(i, w)| TextCondition {
                word_features: w.to_vec(),
                sentence_feature: sentences.data()[i * d..(i + 1) * d].to_vec(),
                token_count: captions[i].len(),
                dim: d,
            })
            .collect())
    }

    /// Features of one planar `[3, S, S]` image.
    pub fn encode_image(&self, planar: &[f64]) -> Result<ImageFeatures> {
        let s = self.config.image_size;
        if planar.len() != 3 * s * s {
            return Err(Error::Shape(format!("expected a {s}x{s} RGB image ({} values), got {}", 3 * s * s, planar.len())));
        }
        let p = self.store.bind(false);
        let out = self.image_forward(&p, &Tensor::new(planar.to_vec(), &[1, 3, s, s]))?;
        let feats = ImageFeatures { region_features: out.regions.to_vec(), global_feature: out.global.to_vec() };
        if !feats.region_features.iter().chain(&feats.global_feature).all(|v| v.is_finite()) {
            return Err(Error::Numerical("image features are not finite".into()));
        }
        Ok(feats)
    }

    /// Run the frozen image encoder on a flat batch of planar images, in chunks.
    pub fn image_batches(&self, images: &[f64], chunk: usize) -> Result<Vec<ImageForward>> {
        let s = self.config.image_size;
        let per = 3 * s * s;
        if images.len() % per != 0 {
            return Err(Error::Shape("image buffer is not a whole number of images".into()));
        }
        let p = self.store.bind(false);
        images
            .chunks(per * chunk.max(1))
            .map(|c| self.image_forward(&p, &Tensor::new(c.to_vec(), &[c.len() / per, 3, s, s])))
            .collect()
    }

    /// Global features `[N, D]` of a flat planar batch.
    pub fn global_features(&self, images: &[f64]) -> Result<Vec<f64>> {
        Ok(self.image_batches(images, 64)?.iter().flat_map(|f| f.global.to_vec()).collect())
    }

    /// Class probabilities `[N, Y]` of a flat planar batch.
    pub fn classify(&self, images: &[f64]) -> Result<Vec<f64>> {
        let p = self.store.bind(false);
        let mut out = Vec::new();
        for f in self.image_batches(images, 64)? {
            out.extend(self.real_logits(&p, &f.global).softmax(1).to_vec());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let header = serde_json::json!({
            "config": self.config,
            "vocab": (1..self.vocab.len()).map(|i| self.vocab.token(i).unwrap_or_default().to_string()).collect::<Vec<_>>(),
            "layout": Layout(self.store.layout()),
        });
        checkpoint::write(path, CHECKPOINT_KIND, &header, &[&checkpoint::flatten(&self.store)])
    }

    /// Load a checkpoint; with `expect`, refuse one whose feature width or
    /// region grid differs.
    pub fn load(path: &Path, expect: Option<&EmbedderConfig>) -> Result<Self> {
        let c = checkpoint::read(path, CHECKPOINT_KIND)?;
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let config: EmbedderConfig = serde_json::from_value(c.header["config"].clone()).map_err(bad)?;
        if let Some(want) = expect {
            if want.text_dim != config.text_dim || want.num_regions() != config.num_regions() {
                return Err(Error::Checkpoint(format!(
                    "embedder has D={} R={}, expected D={} R={}",
                    config.text_dim,
                    config.num_regions(),
                    want.text_dim,
                    want.num_regions()
                )));
            }
        }
        let tokens: Vec<String> = serde_json::from_value(c.header["vocab"].clone()).map_err(bad)?;
        let layout: Layout = serde_json::from_value(c.header["layout"].clone()).map_err(bad)?;
        let mut emb = Embedder::new(config, Vocabulary::new(tokens)?)?;
        let blob = c.blobs.first().ok_or_else(|| Error::Checkpoint("missing parameter blob".into()))?;
        checkpoint::unflatten(&mut emb.store, &layout, blob)?;
        Ok(emb)
    }
}

/// Stack planar images into a `[B, 3, S, S]` tensor.
pub fn image_batch(images: &[&[f64]], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::new(data, &[images.len(), 3, size, size])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub matching: MatchConfig,
    /// Weight of the classifier cross-entropy relative to the matching loss.
    pub classifier_weight: f64,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub channels: [usize; 4],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            matching: MatchConfig::default(),
            classifier_weight: 1.0,
            embed_dim: 32,
            text_dim: 64,
            channels: [16, 32, 32, 64],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let (b, y) = (logits.dim(0), logits.dim(1));
    let mut onehot = vec![0.0; b * y];
    for (i, &c) in labels.iter().enumerate() {
        onehot[i * y + c] = 1.0;
    }
    logits.log_softmax(1).mul(&Tensor::new(onehot, &[b, y])).sum_all().scale(-1.0 / b as f64)
}

/// Fit both encoders and the head on the training split.
///
/// The per-batch loss is the four-term matching loss over real pairs plus the
/// head's cross-entropy on each image's global feature, presented once in the
/// real block and once in the fake block so both halves of the head learn to
/// classify. Items sharing a caption are not used as each other's negatives.
pub fn pretrain_matching(corpus: &Corpus, cfg: &PretrainConfig) -> Result<(Embedder, PretrainReport)> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("pretraining needs at least one epoch".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("pretraining batch size must be at least 2".into()));
    }
    cfg.matching.validate()?;
    let (train, _) = corpus.split();
    if train.len() < 2 {
        return Err(Error::InvalidArgument("training split has fewer than 2 records".into()));
    }
    let size = corpus.image_size()? as usize;
    let mut ecfg = EmbedderConfig::new(corpus.vocab.len(), size, corpus.num_categories());
    ecfg.embed_dim = cfg.embed_dim;
    ecfg.text_dim = cfg.text_dim;
    ecfg.channels = cfg.channels;
    ecfg.seed = cfg.seed;
    let mut emb = Embedder::new(ecfg, corpus.vocab.clone())?;
    let mut opt = Adam::new(&emb.store, cfg.lr, 0.9, 0.999);

    let images: Vec<Vec<f64>> = train.iter().map(|&i| corpus.load_image(i)).collect::<Result<_>>()?;
    let tokens: Vec<Vec<usize>> = train.iter().map(|&i| corpus.token_ids(i)).collect::<Result<_>>()?;
    let (_, caption_of) = corpus.distinct_captions();
    let labels: Vec<usize> = train.iter().map(|&i| corpus.records[i].primary_category()).collect();

    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let p = emb.store.bind(true);
            let imgs: Vec<&[f64]> = batch.iter().map(|&j| images[j].as_slice()).collect();
            let caps: Vec<Vec<usize>> = batch.iter().map(|&j| tokens[j].clone()).collect();
            let groups: Vec<usize> = batch.iter().map(|&j| caption_of[train[j]]).collect();
            let ys: Vec<usize> = batch.iter().map(|&j| labels[j]).collect();

            let feats = emb.image_forward(&p, &image_batch(&imgs, size))?;
            let (words, sentences) = emb.text_forward(&p, &caps)?;
            let matching = losses::match_terms(&feats.features(), &words, &sentences, &cfg.matching, Some(&groups))?.total();
            let ce = cross_entropy(&emb.real_logits(&p, &feats.global), &ys)
                .add(&cross_entropy(&emb.fake_block_logits(&p, &feats.global), &ys));
            let loss = matching.add(&ce.scale(cfg.classifier_weight));
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "pretraining loss became {value} at epoch {epoch}, step {} (lr {})",
                    report.steps, cfg.lr
                )));
            }
            if report.steps == 0 {
                report.initial_loss = value;
            }
            let grads = emb.store.collect_grads(&p, &loss.backward());
            opt.step(&mut emb.store, &grads);
            report.steps += 1;
            epoch_sum += value;
            batches += 1;
        }
        report.epoch_losses.push(epoch_sum / batches.max(1) as f64);
    }
    if !emb.store.all_finite() {
        return Err(Error::Numerical("pretrained parameters are not finite".into()));
    }
    Ok((emb, report))
}

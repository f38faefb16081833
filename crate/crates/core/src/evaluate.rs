//! Held-out evaluation of a trained model: K samples for every test caption,
//! scored with the metrics in [`crate::metrics`] on frozen-embedder features.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::derive_seed;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::metrics::{self, LayerActivations, MetricReport};
use crate::models::{GanModel, ImageSet, NoiseBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate at most this many test records; 0 means all of them.
    pub max_captions: usize,
    pub pool_size: usize,
    pub splits: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_captions: 0, pool_size: 10, splits: 10, seed: 0 }
    }
}

/// Final-stage samples of every evaluated test record.
pub struct SampleSet {
    pub records: Vec<usize>,
    pub sets: Vec<ImageSet>,
}

/// Generate K samples for each held-out record with per-record seeded noise.
pub fn sample_test_split(model: &GanModel, embedder: &Embedder, corpus: &Corpus, cfg: &EvalConfig) -> Result<SampleSet> {
    let (_, mut test) = corpus.split();
    if cfg.max_captions > 0 {
        test.truncate(cfg.max_captions);
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("the held-out split is empty".into()));
    }
    let mcfg = &model.config;
    let mut sets = Vec::with_capacity(test.len());
    for chunk in test.chunks(32) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus.token_ids(i)).collect::<Result<_>>()?;
        let conds = embedder.encode_batch(&ids)?;
        let noise: Vec<NoiseBundle> = chunk
            .iter()
            .map(|&i| NoiseBundle::from_seed(derive_seed(cfg.seed, corpus.records[i].id), mcfg.k, mcfg.noise_dim))
            .collect();
        let refs: Vec<_> = conds.iter().collect();
        sets.extend(model.generate_many(&refs, &noise)?);
    }
    Ok(SampleSet { records: test, sets })
}

/// Layer activations of a flat planar batch, one entry per probed layer.
pub fn perceptual_layers(embedder: &Embedder, images: &[f64]) -> Result<Vec<LayerActivations>> {
    let s = embedder.config.image_size;
    let n = images.len() / (3 * s * s);
    let p = embedder.store.bind(false);
    let out = embedder.image_forward(&p, &autograd::Tensor::new(images.to_vec(), &[n, 3, s, s]))?;
    Ok(out
        .activations
        .iter()
        .map(|a| LayerActivations { data: a.to_vec(), channels: a.dim(1), positions: a.dim(2) * a.dim(3) })
        .collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &GanModel, embedder: &Embedder, corpus: &Corpus, cfg: &EvalConfig) -> Result<MetricReport> {
    if model.config.final_resolution() != embedder.config.image_size {
        return Err(Error::InvalidArgument("model output resolution differs from the embedder's".into()));
    }
    let samples = sample_test_split(model, embedder, corpus, cfg)?;
    let k = model.config.k;
    let d = embedder.dim();
    let y = embedder.config.num_classes;

    let fakes: Vec<f64> = samples.sets.iter().flat_map(|s| s.final_stage().concat()).collect();
    let fake_global = embedder.global_features(&fakes)?;
    let reals: Vec<f64> = samples.records.iter().map(|&i| corpus.load_image(i)).collect::<Result<Vec<_>>>()?.concat();
    let real_global = embedder.global_features(&reals)?;
    let fid = metrics::frechet_distance(&metrics::fit_stats(&real_global, d)?, &metrics::fit_stats(&fake_global, d)?)?;

    let mut layer_sets = Vec::with_capacity(samples.sets.len());
    for set in &samples.sets {
        layer_sets.push(perceptual_layers(embedder, &set.final_stage().concat())?);
    }
    let perceptual = metrics::perceptual_diversity(&layer_sets)?;

    let probs = embedder.classify(&fakes)?;
    let splits = cfg.splits.min(probs.len() / y);
    let inception = metrics::inception_style_score(&probs, y, splits)?;
    let mut correct = 0usize;
    for (j, &rec) in samples.records.iter().enumerate() {
        let truth = &corpus.records[rec].category_ids;
        for b in 0..k {
            let row = &probs[(j * k + b) * y..(j * k + b + 1) * y];
            if truth.contains(&argmax(row)) {
                correct += 1;
            }
        }
    }

    let (distinct, caption_of) = corpus.distinct_captions();
    let ids: Vec<Vec<usize>> = distinct.iter().map(|c| corpus.vocab.encode(c)).collect::<Result<_>>()?;
    let sentences: Vec<Vec<f64>> = embedder.encode_batch(&ids)?.into_iter().map(|c| c.sentence_feature).collect();
    let per_item: Vec<Vec<Vec<f64>>> = (0..samples.records.len())
        .map(|j| (0..k).map(|b| fake_global[(j * k + b) * d..(j * k + b + 1) * d].to_vec()).collect())
        .collect();
    let truth: Vec<usize> = samples.records.iter().map(|&i| caption_of[i]).collect();
    let pool = cfg.pool_size.min(sentences.len());
    let rp = metrics::r_precision(&per_item, &truth, &sentences, pool, derive_seed(cfg.seed, 0x9e7))?;

    let report = MetricReport {
        fid,
        perceptual_diversity: perceptual,
        inception_style: inception,
        r_precision: rp.summary,
        r_precision_per_branch: rp.per_branch,
        sample_accuracy: correct as f64 / (samples.records.len() * k) as f64,
        num_captions: samples.records.len(),
        samples_per_caption: k,
    };
    if !report.all_finite() {
        return Err(Error::Numerical(format!("evaluation produced non-finite metrics: {report:?}")));
    }
    Ok(report)
}

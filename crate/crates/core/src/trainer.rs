//! Alternating optimization of the stage critics and the K generator
//! branches, with seeded per-step randomness, checkpoints and a step log.
//!
//! Each step draws its batch and noise from a generator seeded by
//! `(seed, step)`, so a resumed run replays exactly what an uninterrupted
//! run would have done.

use std::path::Path;
use std::time::Instant;

use autograd::nn::ParamStore;
use autograd::optim::Adam;
use autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Layout};
use crate::corpus::Corpus;
use crate::embedder::{Embedder, TextCondition};
use crate::error::{Error, Result};
use crate::losses::{
    self, DiversityReduce, ImageFeatureBatch, LossParts, LossReport, LossWeights, MatchConfig, MultilabelCriterion,
    RelativisticLabels, Variant,
};
use crate::models::{GanModel, ModelConfig};
use crate::derive_seed;

const CHECKPOINT_KIND: &str = "gan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Total number of steps (each one critic update and one generator update).
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Write a checkpoint every this many steps; 0 disables snapshots.
    pub snapshot_every: u64,
    /// Compare against the opposing class's batch-mean logit rather than pairwise.
    pub relativistic_averaged: bool,
    pub relativistic_label: f64,
    pub diversity_reduce: DiversityReduce,
    pub multilabel: MultilabelCriterion,
    pub matching: MatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Combined,
            steps: 2000,
            batch_size: 8,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            snapshot_every: 0,
            relativistic_averaged: true,
            relativistic_label: 1.0,
            diversity_reduce: DiversityReduce::Max,
            multilabel: MultilabelCriterion::Literal,
            matching: MatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.matching.validate()?;
        RelativisticLabels::new(self.relativistic_label)?;
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2 (the matching loss contrasts items)".into()));
        }
        Ok(())
    }

    /// Hash of every setting that shapes the trajectory; the step budget
    /// and snapshot cadence are excluded so runs can be extended.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.snapshot_every = 0;
        checkpoint::sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    /// Seconds since the run (or resume) started.
    pub wall_time: f64,
}

struct Item {
    /// Real image per stage, planar.
    stages: Vec<Vec<f64>>,
    caption: usize,
    labels: Vec<usize>,
    real_global: Vec<f64>,
}

struct CaptionCache {
    words: Tensor,
    sentence: Vec<f64>,
}

fn downsample(planar: &[f64], side: usize, times: usize) -> Vec<f64> {
    let mut t = Tensor::new(planar.to_vec(), &[1, 3, side, side]);
    for _ in 0..times {
        t = t.avg_pool2x();
    }
    t.to_vec()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: GanModel,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    embedder: Embedder,
    embedder_hash: String,
    items: Vec<Item>,
    captions: Vec<CaptionCache>,
    multilabel: bool,
}

impl Trainer {
    /// Fresh run over the training split of `corpus` with a frozen embedder.
    pub fn new(config: TrainConfig, corpus: &Corpus, embedder: Embedder, embedder_hash: String) -> Result<Self> {
        let mut config = config;
        config.model.text_dim = embedder.dim();
        config.validate()?;
        let model = GanModel::new(config.model.clone())?;
        let opt_g = Adam::new(&model.gen_store, config.lr_g, config.beta1, config.beta2);
        let opt_d = Adam::new(&model.disc_store, config.lr_d, config.beta1, config.beta2);
        let (items, captions, multilabel) = prepare_data(&config, corpus, &embedder)?;
        Ok(Self { config, model, opt_g, opt_d, step: 0, embedder, embedder_hash, items, captions, multilabel })
    }

    /// Continue from a checkpoint written by [`Trainer::save`]. The embedder
    /// must be the one the checkpoint was trained against.
    pub fn resume(path: &Path, corpus: &Corpus, embedder: Embedder, embedder_hash: String) -> Result<Self> {
        let ckpt = GanCheckpoint::read(path)?;
        if ckpt.embedder_hash != embedder_hash {
            return Err(Error::Checkpoint(format!(
                "{} was trained against embedder {}, got {}",
                path.display(),
                ckpt.embedder_hash,
                embedder_hash
            )));
        }
        let mut t = Trainer::new(ckpt.config.clone(), corpus, embedder, embedder_hash)?;
        t.model = ckpt.model;
        t.step = ckpt.step;
        let state = ckpt.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        t.opt_g.restore(state.g_step, state.g_m, state.g_v).map_err(Error::Checkpoint)?;
        t.opt_d.restore(state.d_step, state.d_m, state.d_v).map_err(Error::Checkpoint)?;
        Ok(t)
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    /// One critic update followed by one joint generator update.
    pub fn step(&mut self) -> Result<LossReport> {
        let cfg = self.config.clone();
        let mcfg = &cfg.model;
        let (k, b, stages) = (mcfg.k, cfg.batch_size, mcfg.stages);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x7a11, self.step));
        let picks: Vec<usize> = if b <= self.items.len() {
            rand::seq::index::sample(&mut rng, self.items.len(), b).into_vec()
        } else {
            (0..b).map(|_| rand::Rng::random_range(&mut rng, 0..self.items.len())).collect()
        };
        let noise: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..b * mcfg.noise_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let noise_t: Vec<Tensor> = noise.iter().map(|z| Tensor::new(z.clone(), &[b, mcfg.noise_dim])).collect();

        let d = mcfg.text_dim;
        let batch: Vec<&Item> = picks.iter().map(|&i| &self.items[i]).collect();
        let sentences = Tensor::new(batch.iter().flat_map(|it| self.captions[it.caption].sentence.iter().copied()).collect(), &[b, d]);
        let sentences_all = Tensor::cat(&vec![sentences.clone(); k + 1], 0);
        let reals: Vec<Tensor> = (0..stages)
            .map(|s| {
                let r = mcfg.resolution(s);
                Tensor::new(batch.iter().flat_map(|it| it.stages[s].iter().copied()).collect(), &[b, 3, r, r])
            })
            .collect();
        let labels = RelativisticLabels::new(cfg.relativistic_label)?;

        // generator forward, kept for the generator update
        let gp = self.model.gen_store.bind(true);
        let fakes = self.model.generate(&gp, &sentences, &noise_t)?;

        // critic update on detached fakes
        let dp = self.model.disc_store.bind(true);
        let mut adv_d: Option<Tensor> = None;
        let mut rel_d: Option<Tensor> = None;
        for s in 0..stages {
            let mut inputs = vec![reals[s].clone()];
            inputs.extend(fakes[s].iter().map(Tensor::detach));
            let logits = self.model.criticize(&dp, s, &Tensor::cat(&inputs, 0), &sentences_all)?;
            let real_logits = logits.narrow(0, 0, b);
            let fake_logits: Vec<Tensor> = (0..k).map(|j| logits.narrow(0, (j + 1) * b, b)).collect();
            let (_, a) = losses::base_adversarial(&real_logits, &fake_logits)?;
            adv_d = Some(adv_d.map_or(a.clone(), |acc| acc.add(&a)));
            if cfg.variant.uses_relativistic() {
                let (_, r) = losses::relativistic_losses(&real_logits, &fake_logits, labels, cfg.relativistic_averaged)?;
                rel_d = Some(rel_d.map_or(r.clone(), |acc| acc.add(&r)));
            }
        }
        let adv_d = adv_d.expect("at least one stage");
        let total_d = losses::discriminator_objective(&adv_d, rel_d.as_ref(), &cfg.weights, cfg.variant)?;
        if !total_d.item().is_finite() {
            return Err(Error::Numerical(format!("critic loss is {} at step {}", total_d.item(), self.step)));
        }
        let grads_d = self.model.disc_store.collect_grads(&dp, &total_d.backward());
        check_grads(&grads_d, "critic", self.step)?;
        let disc_before = self.model.disc_store.clone();
        self.opt_d.step(&mut self.model.disc_store, &grads_d);

        // generator update against the updated critics
        let dp = self.model.disc_store.bind(false);
        let mut adv_g: Option<Tensor> = None;
        let mut rel_g: Option<Tensor> = None;
        let mut div: Option<Tensor> = None;
        for s in 0..stages {
            let mut inputs = vec![reals[s].clone()];
            inputs.extend(fakes[s].iter().cloned());
            let logits = self.model.criticize(&dp, s, &Tensor::cat(&inputs, 0), &sentences_all)?;
            let real_logits = logits.narrow(0, 0, b);
            let fake_logits: Vec<Tensor> = (0..k).map(|j| logits.narrow(0, (j + 1) * b, b)).collect();
            let (a, _) = losses::base_adversarial(&real_logits, &fake_logits)?;
            adv_g = Some(adv_g.map_or(a.clone(), |acc| acc.add(&a)));
            if cfg.variant.uses_relativistic() {
                let (r, _) = losses::relativistic_losses(&real_logits, &fake_logits, labels, cfg.relativistic_averaged)?;
                rel_g = Some(rel_g.map_or(r.clone(), |acc| acc.add(&r)));
            }
            let dv = losses::diversity_loss(
                &Tensor::stack(&fakes[s], 0),
                &Tensor::stack(&noise_t, 0),
                cfg.weights.epsilon,
                cfg.diversity_reduce,
            )?;
            div = Some(div.map_or(dv.term.clone(), |acc| acc.add(&dv.term)));
        }

        let ep = self.embedder.store.bind(false);
        let last = stages - 1;
        let encoded: Vec<ImageFeatureBatch> = fakes[last]
            .iter()
            .map(|f| self.embedder.image_forward(&ep, f).map(|o| o.features()))
            .collect::<Result<_>>()?;
        let words: Vec<Tensor> = batch.iter().map(|it| self.captions[it.caption].words.clone()).collect();
        let groups: Vec<usize> = batch.iter().map(|it| it.caption).collect();
        let sim = losses::similarity_loss(&encoded, &words, &sentences, &cfg.matching, Some(&groups))?;

        let cc = if cfg.variant.uses_category() {
            let real_global = Tensor::new(batch.iter().flat_map(|it| it.real_global.iter().copied()).collect(), &[b, d]);
            let fake_global: Vec<Tensor> = encoded.iter().map(|e| e.global.clone()).collect();
            let head = self.embedder.head_tensors(&ep);
            let lambda = cfg.weights.lambda_for(k);
            Some(if self.multilabel {
                let sets: Vec<Vec<usize>> = batch.iter().map(|it| it.labels.clone()).collect();
                losses::category_consistency_multilabel(&real_global, &fake_global, &head, &sets, lambda, cfg.multilabel)?
            } else {
                let ys: Vec<usize> = batch.iter().map(|it| it.labels[0]).collect();
                losses::category_consistency(&real_global, &fake_global, &head, &ys, lambda)?
            })
        } else {
            None
        };

        let parts = LossParts {
            adv_g: adv_g.expect("at least one stage"),
            adv_d: Tensor::scalar(adv_d.item()),
            sim,
            div: div.expect("at least one stage"),
            rel_g,
            rel_d: rel_d.map(|r| Tensor::scalar(r.item())),
            cc,
        };
        let objectives = losses::assemble_objectives(&parts, &cfg.weights, cfg.variant)?;
        if !objectives.report.all_finite() {
            self.model.disc_store = disc_before;
            return Err(Error::Numerical(format!("non-finite loss at step {}: {:?}", self.step, objectives.report)));
        }
        let grads_g = self.model.gen_store.collect_grads(&gp, &objectives.total_g.backward());
        if let Err(e) = check_grads(&grads_g, "generator", self.step) {
            self.model.disc_store = disc_before;
            return Err(e);
        }
        self.opt_g.step(&mut self.model.gen_store, &grads_g);
        self.step += 1;
        Ok(objectives.report)
    }

    /// Train until `config.steps`, calling `on_step` after every step and
    /// snapshotting to `snapshot` when due. On a numerical failure the
    /// last good state is written to `last_good` (when given) before the
    /// error is returned.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
        snapshot: Option<&Path>,
        last_good: Option<&Path>,
    ) -> Result<Vec<StepRecord>> {
        let start = Instant::now();
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let saved = (self.model.clone(), self.opt_g.clone(), self.opt_d.clone(), self.step);
            let report = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Numerical(_)) => {
                    (self.model, self.opt_g, self.opt_d, self.step) = saved;
                    if let Some(p) = last_good {
                        self.save(p)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let record = StepRecord { step: self.step, losses: report, wall_time: start.elapsed().as_secs_f64() };
            on_step(&record)?;
            log.push(record);
            if let Some(p) = snapshot {
                if self.config.snapshot_every > 0 && self.step % self.config.snapshot_every == 0 {
                    self.save(p)?;
                }
            }
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let (gm, gv) = self.opt_g.moments();
        let (dm, dv) = self.opt_d.moments();
        let header = serde_json::json!({
            "step": self.step,
            "config": self.config,
            "config_hash": self.config.trajectory_hash(),
            "embedder_hash": self.embedder_hash,
            "gen_layout": Layout(self.model.gen_store.layout()),
            "disc_layout": Layout(self.model.disc_store.layout()),
            "opt_g_step": self.opt_g.steps_taken(),
            "opt_d_step": self.opt_d.steps_taken(),
        });
        let flat = |blocks: &[Vec<f64>]| blocks.concat();
        let blobs = [
            checkpoint::flatten(&self.model.gen_store),
            checkpoint::flatten(&self.model.disc_store),
            flat(gm),
            flat(gv),
            flat(dm),
            flat(dv),
        ];
        let refs: Vec<&[f64]> = blobs.iter().map(Vec::as_slice).collect();
        checkpoint::write(path, CHECKPOINT_KIND, &header, &refs)
    }
}

fn check_grads(grads: &[Vec<f64>], who: &str, step: u64) -> Result<()> {
    if grads.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {who} gradient at step {step}")))
    }
}

#[allow(clippy::type_complexity)]
fn prepare_data(config: &TrainConfig, corpus: &Corpus, embedder: &Embedder) -> Result<(Vec<Item>, Vec<CaptionCache>, bool)> {
    let size = corpus.image_size()? as usize;
    let mcfg = &config.model;
    if size != mcfg.final_resolution() {
        return Err(Error::InvalidArgument(format!(
            "corpus images are {size}px but the model's final stage is {}px",
            mcfg.final_resolution()
        )));
    }
    if size != embedder.config.image_size {
        return Err(Error::InvalidArgument(format!(
            "embedder was trained at {}px, corpus is {size}px",
            embedder.config.image_size
        )));
    }
    if embedder.vocab != corpus.vocab {
        return Err(Error::InvalidArgument("embedder vocabulary differs from the corpus vocabulary".into()));
    }
    let (train, _) = corpus.split();
    if train.len() < 2 {
        return Err(Error::InvalidArgument("training split has fewer than 2 records".into()));
    }
    let (distinct, caption_of) = corpus.distinct_captions();
    let ids: Vec<Vec<usize>> = distinct.iter().map(|c| corpus.vocab.encode(c)).collect::<Result<_>>()?;
    let conds: Vec<TextCondition> = embedder.encode_batch(&ids)?;
    let captions = conds
        .into_iter()
        .map(|c| CaptionCache { words: c.words_tensor(), sentence: c.sentence_feature })
        .collect();

    let mut items = Vec::with_capacity(train.len());
    let images: Vec<Vec<f64>> = train.iter().map(|&i| corpus.load_image(i)).collect::<Result<_>>()?;
    let globals = embedder.global_features(&images.concat())?;
    let d = embedder.dim();
    for (j, &i) in train.iter().enumerate() {
        let stages = (0..mcfg.stages).map(|s| downsample(&images[j], size, mcfg.stages - 1 - s)).collect();
        items.push(Item {
            stages,
            caption: caption_of[i],
            labels: corpus.records[i].category_ids.clone(),
            real_global: globals[j * d..(j + 1) * d].to_vec(),
        });
    }
    let multilabel = items.iter().any(|it| it.labels.len() > 1);
    Ok((items, captions, multilabel))
}

struct OptimizerState {
    g_step: u64,
    g_m: Vec<Vec<f64>>,
    g_v: Vec<Vec<f64>>,
    d_step: u64,
    d_m: Vec<Vec<f64>>,
    d_v: Vec<Vec<f64>>,
}

/// A trained model read back from disk.
pub struct GanCheckpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub embedder_hash: String,
    pub model: GanModel,
    optimizer: Option<OptimizerState>,
}

fn split_blocks(flat: &[f64], store: &ParamStore) -> Result<Vec<Vec<f64>>> {
    if flat.len() != store.num_scalars() {
        return Err(Error::Checkpoint("optimizer state size does not match parameters".into()));
    }
    let mut out = Vec::with_capacity(store.len());
    let mut offset = 0;
    for e in store.entries() {
        out.push(flat[offset..offset + e.value.len()].to_vec());
        offset += e.value.len();
    }
    Ok(out)
}

impl GanCheckpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let c = checkpoint::read(path, CHECKPOINT_KIND)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: bad `{what}` field", path.display()));
        let h = &c.header;
        let step = h["step"].as_u64().ok_or_else(|| bad("step"))?;
        let config: TrainConfig = serde_json::from_value(h["config"].clone()).map_err(|_| bad("config"))?;
        let recorded = h["config_hash"].as_str().ok_or_else(|| bad("config_hash"))?;
        if recorded != config.trajectory_hash() {
            return Err(Error::Checkpoint(format!("{}: config hash mismatch", path.display())));
        }
        let embedder_hash = h["embedder_hash"].as_str().ok_or_else(|| bad("embedder_hash"))?.to_string();
        let gen_layout: Layout = serde_json::from_value(h["gen_layout"].clone()).map_err(|_| bad("gen_layout"))?;
        let disc_layout: Layout = serde_json::from_value(h["disc_layout"].clone()).map_err(|_| bad("disc_layout"))?;
        if c.blobs.len() != 6 {
            return Err(Error::Checkpoint(format!("{}: expected 6 blobs, found {}", path.display(), c.blobs.len())));
        }
        let mut model = GanModel::new(config.model.clone())?;
        checkpoint::unflatten(&mut model.gen_store, &gen_layout, &c.blobs[0])?;
        checkpoint::unflatten(&mut model.disc_store, &disc_layout, &c.blobs[1])?;
        let optimizer = Some(OptimizerState {
            g_step: h["opt_g_step"].as_u64().ok_or_else(|| bad("opt_g_step"))?,
            g_m: split_blocks(&c.blobs[2], &model.gen_store)?,
            g_v: split_blocks(&c.blobs[3], &model.gen_store)?,
            d_step: h["opt_d_step"].as_u64().ok_or_else(|| bad("opt_d_step"))?,
            d_m: split_blocks(&c.blobs[4], &model.disc_store)?,
            d_v: split_blocks(&c.blobs[5], &model.disc_store)?,
        });
        Ok(Self { step, config, embedder_hash, model, optimizer })
    }
}

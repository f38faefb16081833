//! K parallel generator branches and one conditional critic per stage.
//!
//! Branch k maps `(z_k, c)` to a chain of images whose side doubles at each
//! stage. Branches share only the projection of the sentence feature into
//! the condition `c`. Later stages consume the previous stage's hidden
//! feature map, with `c` broadcast over it.

use autograd::nn::{Bound, Conv2d, Linear, ParamStore};
use autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedder::TextCondition;
use crate::error::{Error, Result};
use crate::derive_seed;

const LRELU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of generator branches.
    pub k: usize,
    pub stages: usize,
    pub base_resolution: usize,
    pub noise_dim: usize,
    pub condition_dim: usize,
    /// Width of the sentence feature the condition is projected from.
    pub text_dim: usize,
    /// Channels of the first-stage stem.
    pub stem_channels: usize,
    /// Hidden channels produced by each stage.
    pub stage_channels: Vec<usize>,
    /// Channels after the critic's first downsampling conv; doubles per conv.
    pub critic_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 3,
            stages: 2,
            base_resolution: 16,
            noise_dim: 16,
            condition_dim: 16,
            text_dim: 64,
            stem_channels: 32,
            stage_channels: vec![16, 8],
            critic_channels: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn resolution(&self, stage: usize) -> usize {
        self.base_resolution << stage
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k < 2 {
            return bad(format!("need at least 2 generator branches, got {}", self.k));
        }
        if self.stages == 0 {
            return bad("need at least one stage".into());
        }
        if self.base_resolution < 8 || !self.base_resolution.is_power_of_two() {
            return bad(format!("base resolution must be a power of two >= 8, got {}", self.base_resolution));
        }
        if self.stage_channels.len() != self.stages {
            return bad(format!("{} stage widths for {} stages", self.stage_channels.len(), self.stages));
        }
        if [self.noise_dim, self.condition_dim, self.text_dim, self.stem_channels, self.critic_channels].contains(&0)
            || self.stage_channels.contains(&0)
        {
            return bad("model widths must be positive".into());
        }
        Ok(())
    }
}

/// One noise vector per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBundle {
    pub z: Vec<Vec<f64>>,
}

impl NoiseBundle {
    pub fn sample<R: rand::Rng>(rng: &mut R, k: usize, dim: usize) -> Self {
        Self { z: (0..k).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect() }
    }

    pub fn from_seed(seed: u64, k: usize, dim: usize) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed), k, dim)
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }
}

/// Images of every stage and branch: `stages[i][k]` is planar `[3, r_i, r_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub stages: Vec<Vec<Vec<f64>>>,
    pub resolutions: Vec<usize>,
}

impl ImageSet {
    pub fn final_stage(&self) -> &[Vec<f64>] {
        self.stages.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageBlock {
    join: Conv2d,
    up: Conv2d,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Branch {
    fc: Linear,
    stem: Vec<Conv2d>,
    stages: Vec<StageBlock>,
    to_rgb: Vec<Conv2d>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Critic {
    cond: Linear,
    convs: Vec<Conv2d>,
    joint: Conv2d,
    out: Linear,
}

/// Parameters live in two stores so the alternating updates can bind one
/// side as constants while the other is trained.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub config: ModelConfig,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
    cond: Linear,
    branches: Vec<Branch>,
    critics: Vec<Critic>,
}

fn broadcast_condition(c: &Tensor, side: usize) -> Tensor {
    let (b, d) = (c.dim(0), c.dim(1));
    c.reshape(&[b, d, 1, 1]).broadcast_to(&[b, d, side, side])
}

impl GanModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x6a7));
        let mut g = ParamStore::new();
        let cd = config.condition_dim;
        let cond = Linear::new(&mut g, &mut rng, "cond", config.text_dim, cd, true);
        let stem_blocks = config.base_resolution.trailing_zeros() as usize - 2;
        let branches = (0..config.k)
            .map(|k| {
                let name = |s: &str| format!("branch{k}.{s}");
                let sc = config.stem_channels;
                let fc = Linear::new(&mut g, &mut rng, &name("fc"), config.noise_dim + cd, sc * 16, true);
                let stem = (0..stem_blocks)
                    .map(|i| {
                        let out = if i + 1 == stem_blocks { config.stage_channels[0] } else { sc };
                        Conv2d::new(&mut g, &mut rng, &name(&format!("stem{i}")), sc, out, 3, 1, 1)
                    })
                    .collect();
                let stages = (1..config.stages)
                    .map(|i| {
                        let (cin, cout) = (config.stage_channels[i - 1], config.stage_channels[i]);
                        StageBlock {
                            join: Conv2d::new(&mut g, &mut rng, &name(&format!("stage{i}.join")), cin + cd, cout, 3, 1, 1),
                            up: Conv2d::new(&mut g, &mut rng, &name(&format!("stage{i}.up")), cout, cout, 3, 1, 1),
                        }
                    })
                    .collect();
                let to_rgb = (0..config.stages)
                    .map(|i| Conv2d::new(&mut g, &mut rng, &name(&format!("to_rgb{i}")), config.stage_channels[i], 3, 3, 1, 1))
                    .collect();
                Branch { fc, stem, stages, to_rgb }
            })
            .collect();

        let mut d = ParamStore::new();
        let critics = (0..config.stages)
            .map(|i| {
                let name = |s: &str| format!("critic{i}.{s}");
                let downs = config.resolution(i).trailing_zeros() as usize - 2;
                let mut cin = 3;
                let mut convs = Vec::with_capacity(downs);
                for j in 0..downs {
                    // widths grow towards the 4x4 output
                    let cout = config.critic_channels << (j + 2).saturating_sub(downs);
                    convs.push(Conv2d::new(&mut d, &mut rng, &name(&format!("down{j}")), cin, cout, 4, 2, 1));
                    cin = cout;
                }
                Critic {
                    cond: Linear::new(&mut d, &mut rng, &name("cond"), config.text_dim, cd, true),
                    convs,
                    joint: Conv2d::new(&mut d, &mut rng, &name("joint"), cin + cd, cin, 1, 1, 0),
                    out: Linear::new(&mut d, &mut rng, &name("out"), cin * 16, 1, true),
                }
            })
            .collect();
        Ok(Self { config, gen_store: g, disc_store: d, cond, branches, critics })
    }

    /// Differentiable forward pass of every branch.
    ///
    /// `sentences`: `[B, D]`; `noise[k]`: `[B, D_z]`. Returns `images[stage][k]`
    /// as `[B, 3, r, r]` tensors in `[-1, 1]`.
    pub fn generate(&self, gp: &Bound, sentences: &Tensor, noise: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
        let cfg = &self.config;
        if noise.len() != cfg.k {
            return Err(Error::Shape(format!("{} noise tensors for {} branches", noise.len(), cfg.k)));
        }
        if sentences.rank() != 2 || sentences.dim(1) != cfg.text_dim {
            return Err(Error::Shape(format!("sentence features {:?}, expected [B, {}]", sentences.shape(), cfg.text_dim)));
        }
        let b = sentences.dim(0);
        if noise.iter().any(|z| z.shape() != [b, cfg.noise_dim]) {
            return Err(Error::Shape(format!("noise must be [{b}, {}]", cfg.noise_dim)));
        }
        let c = self.cond.forward(gp, sentences);
        let mut out = vec![Vec::with_capacity(cfg.k); cfg.stages];
        for (branch, z) in self.branches.iter().zip(noise) {
            let stem_in = Tensor::cat(&[z.clone(), c.clone()], 1);
            let mut h = branch.fc.forward(gp, &stem_in).leaky_relu(LRELU).reshape(&[b, cfg.stem_channels, 4, 4]);
            for conv in &branch.stem {
                h = conv.forward(gp, &h.upsample2x()).leaky_relu(LRELU);
            }
            out[0].push(branch.to_rgb[0].forward(gp, &h).tanh());
            for (i, block) in branch.stages.iter().enumerate() {
                let side = h.dim(2);
                let joined = Tensor::cat(&[h, broadcast_condition(&c, side)], 1);
                h = block.join.forward(gp, &joined).leaky_relu(LRELU);
                h = block.up.forward(gp, &h.upsample2x()).leaky_relu(LRELU);
                out[i + 1].push(branch.to_rgb[i + 1].forward(gp, &h).tanh());
            }
        }
        Ok(out)
    }

    /// Conditional logits `[N]` of the stage-`stage` critic.
    pub fn criticize(&self, dp: &Bound, stage: usize, images: &Tensor, sentences: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let critic = self
            .critics
            .get(stage)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} out of range 0..{}", cfg.stages)))?;
        let r = cfg.resolution(stage);
        if images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != r || images.dim(3) != r {
            return Err(Error::Shape(format!("stage {stage} critic expects [N, 3, {r}, {r}], got {:?}", images.shape())));
        }
        let n = images.dim(0);
        if sentences.shape() != [n, cfg.text_dim] {
            return Err(Error::Shape(format!("sentence features {:?}, expected [{n}, {}]", sentences.shape(), cfg.text_dim)));
        }
        let mut h = images.clone();
        for conv in &critic.convs {
            h = conv.forward(dp, &h).leaky_relu(LRELU);
        }
        let c = critic.cond.forward(dp, sentences);
        let h = critic.joint.forward(dp, &Tensor::cat(&[h, broadcast_condition(&c, 4)], 1)).leaky_relu(LRELU);
        Ok(critic.out.forward(dp, &h.flatten_from(1)).reshape(&[n]))
    }

    /// Generate one image set for a single caption with frozen parameters.
    pub fn generate_set(&self, condition: &TextCondition, noise: &NoiseBundle) -> Result<ImageSet> {
        self.generate_many(&[condition], &[noise.clone()]).map(|mut v| v.remove(0))
    }

    /// Frozen forward pass for several `(condition, noise)` pairs at once.
    pub fn generate_many(&self, conditions: &[&TextCondition], noise: &[NoiseBundle]) -> Result<Vec<ImageSet>> {
        let cfg = &self.config;
        if conditions.len() != noise.len() {
            return Err(Error::Shape("one noise bundle per condition is required".into()));
        }
        if let Some(n) = noise.iter().find(|n| n.k() != cfg.k || n.z.iter().any(|z| z.len() != cfg.noise_dim)) {
            return Err(Error::Shape(format!("noise bundle of {} vectors, expected {} of width {}", n.k(), cfg.k, cfg.noise_dim)));
        }
        let b = conditions.len();
        let sentences: Vec<f64> = conditions.iter().flat_map(|c| c.sentence_feature.iter().copied()).collect();
        if sentences.len() != b * cfg.text_dim {
            return Err(Error::Shape(format!("condition width does not match text_dim {}", cfg.text_dim)));
        }
        let sentences = Tensor::new(sentences, &[b, cfg.text_dim]);
        let z: Vec<Tensor> = (0..cfg.k)
            .map(|k| Tensor::new(noise.iter().flat_map(|n| n.z[k].iter().copied()).collect(), &[b, cfg.noise_dim]))
            .collect();
        let gp = self.gen_store.bind(false);
        let images = self.generate(&gp, &sentences, &z)?;
        let resolutions: Vec<usize> = (0..cfg.stages).map(|i| cfg.resolution(i)).collect();
        Ok((0..b)
            .map(|item| ImageSet {
                stages: images
                    .iter()
                    .zip(&resolutions)
                    .map(|(per_k, &r)| {
                        let per = 3 * r * r;
                        per_k.iter().map(|t| t.data()[item * per..(item + 1) * per].to_vec()).collect()
                    })
                    .collect(),
                resolutions: resolutions.clone(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GanModel {
        GanModel::new(ModelConfig { text_dim: 8, ..ModelConfig::default() }).unwrap()
    }

    fn cond(v: f64) -> TextCondition {
        TextCondition { word_features: vec![v; 8], sentence_feature: vec![v; 8], token_count: 1, dim: 8 }
    }

    #[test]
    fn shapes_and_range() {
        let m = small();
        let set = m.generate_set(&cond(0.3), &NoiseBundle::from_seed(1, 3, 16)).unwrap();
        assert_eq!(set.resolutions, vec![16, 32]);
        assert_eq!(set.stages[0].len(), 3);
        assert_eq!(set.stages[1][2].len(), 3 * 32 * 32);
        assert!(set.stages.iter().flatten().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn critic_rejects_wrong_resolution() {
        let m = small();
        let dp = m.disc_store.bind(false);
        let s = Tensor::zeros(&[2, 8]);
        assert!(m.criticize(&dp, 0, &Tensor::zeros(&[2, 3, 32, 32]), &s).is_err());
        assert!(m.criticize(&dp, 1, &Tensor::zeros(&[2, 3, 16, 16]), &s).is_err());
        assert!(m.criticize(&dp, 2, &Tensor::zeros(&[2, 3, 16, 16]), &s).is_err());
        assert_eq!(m.criticize(&dp, 1, &Tensor::ones(&[2, 3, 32, 32]), &s).unwrap().shape(), &[2]);
    }

    #[test]
    fn k_below_two_rejected() {
        assert!(GanModel::new(ModelConfig { k: 1, ..ModelConfig::default() }).is_err());
    }
}

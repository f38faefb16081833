use std::fs;

use textgan::checkpoint::{self, file_sha256};
use textgan::corpus::{generate_corpus, load_manifest, tokenize, Corpus, CorpusSpec};
use textgan::embedder::{pretrain_matching, Embedder, PretrainConfig};
use textgan::evaluate::{evaluate, EvalConfig};
use textgan::inspect::{attention_maps, edit_demo};
use textgan::losses::Variant;
use textgan::models::{ModelConfig, NoiseBundle};
use textgan::trainer::{GanCheckpoint, TrainConfig, Trainer};
use textgan::Error;

struct Fixture {
    dir: tempfile::TempDir,
    corpus: Corpus,
    embedder: Embedder,
    hash: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { image_size: 16, num_images: 60, ..CorpusSpec::default() };
    let corpus = load_manifest(&generate_corpus(&spec, &dir.path().join("data")).unwrap()).unwrap();
    let cfg = PretrainConfig { epochs: 1, batch_size: 8, embed_dim: 8, text_dim: 16, channels: [4, 8, 8, 8], ..PretrainConfig::default() };
    let (embedder, report) = pretrain_matching(&corpus, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 1);
    let hash = embedder.save(&dir.path().join("embedder.ckpt")).unwrap();
    Fixture { dir, corpus, embedder, hash }
}

fn config(variant: Variant, steps: u64) -> TrainConfig {
    TrainConfig {
        variant,
        steps,
        batch_size: 4,
        seed: 5,
        model: ModelConfig {
            base_resolution: 8,
            noise_dim: 4,
            condition_dim: 4,
            stem_channels: 8,
            stage_channels: vec![6, 4],
            critic_channels: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn trainer(f: &Fixture, cfg: TrainConfig) -> Trainer {
    Trainer::new(cfg, &f.corpus, f.embedder.clone(), f.hash.clone()).unwrap()
}

#[test]
fn embedder_checkpoint_round_trip() {
    let f = fixture();
    let path = f.dir.path().join("embedder.ckpt");
    assert_eq!(file_sha256(&path).unwrap(), f.hash);
    let back = Embedder::load(&path, Some(&f.embedder.config)).unwrap();
    let a = f.embedder.encode_text("a red circle on a black background").unwrap();
    let b = back.encode_text("a red circle on a black background").unwrap();
    assert_eq!(a.sentence_feature, b.sentence_feature);
    let mut other = f.embedder.config.clone();
    other.text_dim = 32;
    assert!(matches!(Embedder::load(&path, Some(&other)), Err(Error::Checkpoint(_))));
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let f = fixture();
    let mut a = trainer(&f, config(Variant::Combined, 3));
    let mut b = trainer(&f, config(Variant::Combined, 3));
    let la = a.run(|_| Ok(()), None, None).unwrap();
    let lb = b.run(|_| Ok(()), None, None).unwrap();
    assert_eq!(la.len(), 3);
    assert_eq!(la.iter().map(|r| r.losses).collect::<Vec<_>>(), lb.iter().map(|r| r.losses).collect::<Vec<_>>());
    assert_eq!(checkpoint::flatten(&a.model.gen_store), checkpoint::flatten(&b.model.gen_store));
    assert!(la.iter().all(|r| r.losses.all_finite()));
}

#[test]
fn checkpoints_reject_corruption_and_foreign_embedders() {
    let f = fixture();
    let mut t = trainer(&f, config(Variant::Basic, 1));
    t.run(|_| Ok(()), None, None).unwrap();
    let path = f.dir.path().join("gan.ckpt");
    t.save(&path).unwrap();
    let read = GanCheckpoint::read(&path).unwrap();
    assert_eq!((read.step, read.config.variant), (1, Variant::Basic));

    assert!(matches!(
        Trainer::resume(&path, &f.corpus, f.embedder.clone(), "0".repeat(64)),
        Err(Error::Checkpoint(_))
    ));

    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let err = GanCheckpoint::read(&path).err().expect("corrupt checkpoint must not load");
    assert!(err.is_artifact_error(), "{err:?}");
}

#[test]
fn diverging_run_stops_with_a_numerical_error_and_keeps_the_last_good_state() {
    let f = fixture();
    let mut cfg = config(Variant::Basic, 50);
    cfg.lr_g = 1e300;
    cfg.lr_d = 1e300;
    let mut t = trainer(&f, cfg);
    let last_good = f.dir.path().join("last_good.ckpt");
    let err = t.run(|_| Ok(()), None, Some(&last_good)).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err:?}");
    let saved = GanCheckpoint::read(&last_good).unwrap();
    assert_eq!(saved.step, t.steps_done());
    assert!(saved.model.gen_store.all_finite());
}

#[test]
fn untrained_model_evaluates_to_finite_metrics() {
    let f = fixture();
    let t = trainer(&f, config(Variant::Combined, 0));
    let report = evaluate(&t.model, &f.embedder, &f.corpus, &EvalConfig { pool_size: 5, splits: 2, ..EvalConfig::default() }).unwrap();
    assert!(report.all_finite());
    assert_eq!(report.samples_per_caption, 3);
    assert!(report.num_captions > 0);
    assert!((0.0..=1.0).contains(&report.sample_accuracy));
}

#[test]
fn attention_and_edit_contracts() {
    let f = fixture();
    let t = trainer(&f, config(Variant::Combined, 0));
    let spec = f.corpus.spec().unwrap().clone();
    let noise = NoiseBundle::from_seed(1, 3, 4);
    let tokens = tokenize("a red circle on a black background");
    let set = t.model.generate_set(&f.embedder.encode_tokens(&f.embedder.vocab.encode(&tokens).unwrap()).unwrap(), &noise).unwrap();
    let image = &set.final_stage()[0];

    let maps = attention_maps(&f.embedder, image, &tokens, 5.0, 5).unwrap();
    assert_eq!(maps.len(), 5);
    assert!(maps.windows(2).all(|w| w[0].mass >= w[1].mass));
    for m in &maps {
        assert!((m.map.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let short = tokenize("red circle background");
    assert_eq!(attention_maps(&f.embedder, image, &short, 5.0, 5).unwrap().len(), 3);

    let same = edit_demo(&t.model, &f.embedder, &spec, &tokens, 1, "red", &noise).unwrap();
    assert_eq!(same.before, same.after);
    assert_eq!(same.report.color_flips, 0);
    assert!(matches!(edit_demo(&t.model, &f.embedder, &spec, &tokens, 7, "red", &noise), Err(Error::InvalidArgument(_))));
    assert!(matches!(edit_demo(&t.model, &f.embedder, &spec, &tokens, 1, "green", &noise), Err(Error::UnknownToken(_))));
}

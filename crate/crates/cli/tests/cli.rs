use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn textgan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textgan")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = textgan(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY_PRETRAIN: [&str; 10] = [
    "--set", "pretrain.epochs=1",
    "--set", "pretrain.embed_dim=8",
    "--set", "pretrain.text_dim=16",
    "--set", "pretrain.channels=[4,8,8,8]",
    "--set", "pretrain.batch_size=8",
];

const TINY_TRAIN: [&str; 16] = [
    "--set", "train.steps=2",
    "--set", "train.batch_size=4",
    "--set", "train.model.base_resolution=8",
    "--set", "train.model.noise_dim=4",
    "--set", "train.model.stem_channels=8",
    "--set", "train.model.stage_channels=[6,4]",
    "--set", "train.model.critic_channels=4",
    "--set", "train.model.condition_dim=4",
];

/// Tiny corpus, embedder and two-step checkpoint under `dir`.
fn tiny_pipeline(dir: &Path) {
    ok(dir, &["gen-data", "--set", "image_size=16", "--set", "num_images=60"]);
    let mut pre = vec!["pretrain"];
    pre.extend(TINY_PRETRAIN);
    ok(dir, &pre);
    let mut train = vec!["train"];
    train.extend(TINY_TRAIN);
    ok(dir, &train);
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = textgan(dir.path(), &["train", "--set", "train.bogus_rate=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.bogus_rate"));

    fs::write(dir.path().join("bad.cfg"), "[pretrain]\nepochz = 3\n").unwrap();
    let out = textgan(dir.path(), &["pretrain", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.epochz"));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = textgan(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = textgan(dir.path(), &["pretrain", "--set", "corpus=nowhere"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_artifacts_sampling_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_pipeline(root);
    for d in ["data", "pretrain", "train"] {
        assert!(root.join(d).join("resolved_config.txt").is_file(), "{d}");
    }
    assert_eq!(fs::read_to_string(root.join("train/losses.jsonl")).unwrap().lines().count(), 2);

    // replaying the snapshot into a fresh directory reproduces the checkpoint
    ok(root, &["train", "--config", "train/resolved_config.txt", "--out", "replay"]);
    assert_eq!(fs::read(root.join("train/gan.ckpt")).unwrap(), fs::read(root.join("replay/gan.ckpt")).unwrap());

    // resuming extends the run
    ok(root, &["train", "--config", "train/resolved_config.txt", "--set", "resume=train/gan.ckpt", "--set", "train.steps=3", "--out", "resumed"]);
    assert_eq!(fs::read_to_string(root.join("resumed/losses.jsonl")).unwrap().lines().count(), 1);

    ok(root, &["eval", "--set", "eval.pool_size=5", "--set", "eval.splits=2"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("eval/report_gan.json")).unwrap()).unwrap();
    assert_eq!(report["samples_per_caption"], 3);

    fs::write(root.join("caps.txt"), "a red circle on a black background\na blue square on a white background\n").unwrap();
    ok(root, &["sample", "--set", "captions=caps.txt", "--seed", "4", "--out", "s1"]);
    ok(root, &["sample", "--set", "captions=caps.txt", "--seed", "4", "--out", "s2"]);
    let g1 = fs::read(root.join("s1/grid.png")).unwrap();
    assert_eq!(g1, fs::read(root.join("s2/grid.png")).unwrap());
    let img = image::load_from_memory(&g1).unwrap();
    // 3 columns and 2 rows of 32px tiles, 2px gaps and border
    assert_eq!((img.width(), img.height()), (3 * 32 + 4 * 2, 2 * 32 + 3 * 2));
    assert_eq!(fs::read_to_string(root.join("s1/grid.txt")).unwrap().lines().count(), 2);

    ok(root, &["sample", "--set", "caption=a red circle on a gray background", "--set", "all_stages=true", "--out", "s3"]);
    assert_eq!(fs::read_to_string(root.join("s3/grid.txt")).unwrap().lines().count(), 2);

    let out = textgan(root, &["sample", "--set", "caption=a green circle", "--out", "s4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attention_and_edit_demo_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_pipeline(root);

    ok(root, &["attention", "--set", "caption=red circle background"]);
    let listing = fs::read_to_string(root.join("attention/attention.txt")).unwrap();
    assert_eq!(listing.lines().count(), 3);
    for line in listing.lines() {
        let file = line.split('\t').next_back().unwrap();
        assert!(root.join("attention").join(file).is_file(), "{file}");
    }
    ok(root, &["attention", "--set", "caption=a blue square on a white background", "--out", "att2"]);
    assert_eq!(fs::read_to_string(root.join("att2/attention.txt")).unwrap().lines().count(), 5);

    ok(root, &["edit-demo", "--set", "caption=a red circle on a black background", "--set", "index=1", "--set", "replacement=red"]);
    assert_eq!(fs::read(root.join("edit/before.png")).unwrap(), fs::read(root.join("edit/after.png")).unwrap());
    ok(root, &["edit-demo", "--set", "caption=a red circle on a black background", "--set", "index=1", "--set", "replacement=blue", "--out", "edit2"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("edit2/edit_report.json")).unwrap()).unwrap();
    assert_eq!(report["edited"]["tokens"][1], "blue");

    let out = textgan(root, &["edit-demo", "--set", "caption=a red circle", "--set", "index=9", "--set", "replacement=blue"]);
    assert_eq!(out.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aem_core::data::{read_manifest, write_manifest, SplitName};
use aem_harness::config::TrainConfig;

fn aem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aem"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn report_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .parse()
        .unwrap()
}

#[test]
fn memorizes_a_tiny_manifest_and_evaluates_it() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("gen.txt"),
        "synth_bags_per_class = 4\nsynth_min_instances = 4\nsynth_max_instances = 10\ninput_dim = 6\n",
    )
    .unwrap();
    ok(&aem(&["generate", "--config", "gen.txt", "--out", "bags"], root));

    // five training bags (three of one class, two of the other), two test bags
    let mut entries = read_manifest(root.join("bags/manifest.csv")).unwrap();
    entries.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
    let mut picked = Vec::new();
    for (label, n_train) in [(0, 3), (1, 2)] {
        let class: Vec<_> = entries.iter().filter(|e| e.label == label).cloned().collect();
        for (i, mut e) in class.into_iter().take(n_train + 1).enumerate() {
            e.split = if i < n_train { SplitName::Train } else { SplitName::Test };
            picked.push(e);
        }
    }
    write_manifest(root.join("bags/tiny.csv"), &picked).unwrap();

    fs::write(
        root.join("train.txt"),
        "data = manifest\nmanifest = bags/tiny.csv\ninput_dim = 6\nclasses = 2\nepochs = 500\neval_every = 100\n",
    )
    .unwrap();
    ok(&aem(&["train", "--config", "train.txt", "--out", "run"], root));
    assert_eq!(fs::read_to_string(root.join("run/epochs.csv")).unwrap().lines().count(), 6);

    let eval = |out: &str| {
        ok(&aem(
            &["eval", "--ckpt", "run/checkpoint.bin", "--manifest", "bags/tiny.csv", "--split", "train", "--out", out],
            root,
        ))
    };
    let first = eval("e1");
    assert_eq!(report_value(&first, "macro_f1"), 1.0);
    assert_eq!(report_value(&first, "bags"), 5.0);
    assert_eq!(first, eval("e2"));
    assert_eq!(
        fs::read(root.join("e1/attention_train.txt")).unwrap(),
        fs::read(root.join("e2/attention_train.txt")).unwrap()
    );
    let dump = fs::read_to_string(root.join("e1/attention_train.txt")).unwrap();
    for line in dump.lines() {
        let total: f64 = line.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let small = "synth_bags_per_class = 3\nsynth_min_instances = 2\nsynth_max_instances = 4\nepochs = 1\n";
    fs::write(root.join("a.txt"), format!("{small}input_dim = 4\n")).unwrap();
    fs::write(root.join("b.txt"), format!("{small}input_dim = 5\n")).unwrap();
    ok(&aem(&["train", "--config", "a.txt", "--out", "run"], root));
    ok(&aem(&["generate", "--config", "b.txt", "--out", "other"], root));
    let out = aem(
        &["eval", "--ckpt", "run/checkpoint.bin", "--manifest", "other/manifest.csv"],
        root,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn unknown_config_key_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.txt"), "epochs = 2\nbatch_size = 4\n").unwrap();
    let out = aem(&["train", "--config", "bad.txt", "--out", "run"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_seed_flag_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("c.txt"),
        "synth_bags_per_class = 6\nsynth_min_instances = 3\nsynth_max_instances = 6\ninput_dim = 5\nepochs = 6\nreg = aem\nlambda = 0.1\ncwa = true\n",
    )
    .unwrap();
    ok(&aem(&["train", "--config", "c.txt", "--seed", "3", "--out", "full"], root));
    ok(&aem(&["train", "--config", "c.txt", "--seed", "3", "--out", "part", "--stop-after", "2"], root));
    fs::copy(root.join("part/checkpoint.bin"), root.join("half.bin")).unwrap();
    ok(&aem(&["train", "--config", "c.txt", "--seed", "3", "--out", "part", "--resume", "half.bin"], root));
    for name in ["epochs.csv", "checkpoint.bin"] {
        assert_eq!(
            fs::read(root.join("full").join(name)).unwrap(),
            fs::read(root.join("part").join(name)).unwrap(),
            "{name}"
        );
    }
    let saved = fs::read_to_string(root.join("full/config.txt")).unwrap();
    assert_eq!(TrainConfig::parse(&saved).unwrap().seed, 3);
    // a different seed cannot resume the checkpoint
    let out = aem(&["train", "--config", "c.txt", "--out", "x", "--resume", "half.bin"], root);
    assert!(!out.status.success());
}

#[test]
fn preset_output_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["default", "c16-like", "c17-like", "lbc-like"] {
        let text = ok(&aem(&["preset", name], dir.path()));
        assert_eq!(TrainConfig::parse(&text).unwrap(), TrainConfig::preset(name).unwrap());
    }
    assert!(!aem(&["preset", "camelyon"], dir.path()).status.success());
}

#[test]
fn sweep_and_correlate_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("c.txt"),
        "synth_bags_per_class = 5\nsynth_min_instances = 3\nsynth_max_instances = 6\ninput_dim = 4\nepochs = 2\n",
    )
    .unwrap();
    let table = ok(&aem(&["sweep", "--config", "c.txt", "--grid", "0,0.2", "--seeds", "2", "--out", "s"], root));
    assert_eq!(table.lines().count(), 3);
    let runs = fs::read_to_string(root.join("s/sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    let text = ok(&aem(&["correlate", "--config", "c.txt", "--seeds", "3", "--out", "k"], root));
    assert!(text.contains("spearman = undefined"));
    assert_eq!(fs::read_to_string(root.join("k/pairs.csv")).unwrap().lines().count(), 4);
}

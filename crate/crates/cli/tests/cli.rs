use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slv"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/metric")
        .join(name)
}

const SMALL: &str = "[synthetic]\nnum_images = 4\nproposals_per_image = 20\n[train]\niterations = 4\n";

fn small_config(dir: &Path) -> PathBuf {
    let c = dir.join("small.toml");
    fs::write(&c, SMALL).unwrap();
    c
}

#[test]
fn every_command_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let runs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for out in &runs {
        let base = ["--seed", "3", "--config", p(&cfg), "--out", p(out)];
        let data = out.join("dataset.jsonl");
        let steps: [Vec<&str>; 5] = [
            vec!["generate"],
            vec!["train", "--dataset", p(&data)],
            vec!["vote", "--dataset", p(&data), "--emit-heatmaps"],
            vec!["compare-schemes", "--dataset", p(&data)],
            vec!["evaluate", "--dataset", p(&data), "--detections"],
        ];
        for step in steps {
            let mut args: Vec<&str> = base.to_vec();
            args.extend(step);
            let dets = out.join("detections.jsonl");
            if args.last() == Some(&"--detections") {
                args.push(p(&dets));
            }
            let o = slv(&args);
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let files = [
        "dataset.jsonl",
        "model.json",
        "loss_trace.tsv",
        "detections.jsonl",
        "pseudo_labels.jsonl",
        "schemes.tsv",
        "metrics.tsv",
    ];
    for f in files {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let heatmaps = fs::read_dir(runs[0].join("heatmaps")).unwrap().count();
    assert!(heatmaps > 0);
    assert_eq!(heatmaps, fs::read_dir(runs[1].join("heatmaps")).unwrap().count());
}

#[test]
fn seed_changes_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(slv(&["--seed", "1", "--config", p(&cfg), "--out", p(&a), "generate"]).status.success());
    assert!(slv(&["--seed", "2", "--config", p(&cfg), "--out", p(&b), "generate"]).status.success());
    assert_ne!(fs::read(a.join("dataset.jsonl")).unwrap(), fs::read(b.join("dataset.jsonl")).unwrap());
}

#[test]
fn evaluate_prints_the_fixture_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = slv(&[
        "--out",
        p(tmp.path()),
        "evaluate",
        "--dataset",
        p(&fixture("dataset.jsonl")),
        "--detections",
        p(&fixture("detections.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let golden = fs::read_to_string(fixture("report.txt")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), golden);
    assert_eq!(fs::read_to_string(tmp.path().join("metrics.tsv")).unwrap(), golden);
}

#[test]
fn input_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    assert_eq!(slv(&["--out", out, "train", "--dataset", "missing.jsonl"]).status.code(), Some(1));
    assert_eq!(slv(&["--out", out, "frobnicate"]).status.code(), Some(1));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[vote]\nt_b_default = 2.0\n").unwrap();
    assert_eq!(slv(&["--config", p(&bad), "--out", out, "generate"]).status.code(), Some(1));

    let dets = tmp.path().join("dets.jsonl");
    fs::write(
        &dets,
        "{\"format\":\"slv-detections\",\"version\":1,\"num_classes\":2}\n{\"image_id\":\"img1\",\"class\":5,\"box\":[0,0,4,4],\"score\":0.5}\n",
    )
    .unwrap();
    let o = slv(&["--out", out, "evaluate", "--dataset", p(&fixture("dataset.jsonl")), "--detections", p(&dets)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("huge.jsonl");
    fs::write(
        &data,
        "{\"format\":\"slv-dataset\",\"version\":1,\"num_classes\":2}\n\
         {\"image_id\":\"a\",\"height\":32,\"width\":32,\"labels\":[1,0],\"proposals\":[[0,0,10,10],[4,4,30,30]],\"features\":[[1e200,-1e200],[-1e200,1e200]]}\n",
    )
    .unwrap();
    let cfg = tmp.path().join("lr.toml");
    fs::write(&cfg, "[train]\niterations = 20\nlearning_rate = 1e200\n").unwrap();
    let o = slv(&["--config", p(&cfg), "--out", p(tmp.path()), "train", "--dataset", p(&data)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at iteration "));
}

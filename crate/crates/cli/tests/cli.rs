use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use pgfl::heatmaps::Grouping;
use pgfl::synth_data::load_dataset;

const SMALL: &[&str] = &[
    "-s",
    "data.train_ids=6",
    "-s",
    "data.test_ids=6",
    "-s",
    "data.train_per_id=8",
    "-s",
    "data.query_per_id=4",
    "-s",
    "data.gallery_per_id=8",
    "-s",
    "train.schedule.epochs=2",
    "-s",
    "train.schedule.milestones=[1]",
    "-s",
    "train.schedule.base_lr=0.003",
];

fn pgfl(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgfl")).args(args).args(extra).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen(dir: &Path, seed: &str) -> Output {
    pgfl(&["gen-data", "--out", dir.to_str().unwrap(), "--seed", seed], SMALL)
}

fn train(data: &Path, out: &Path, ablation: &str) -> Output {
    pgfl(&["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ablation", ablation, "--seed", "4"], SMALL)
}

fn log_columns(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,L_ReID^G,L_ReID^E,L_ReID^V,L_CL,L_MCL,total");
    lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, "7")), 0);
    assert_eq!(code(&gen(&b, "7")), 0);
    let sums = |d: &Path| std::fs::read_to_string(d.join("SHA256SUMS")).unwrap();
    assert_eq!(sums(&a), sums(&b));
    assert!(a.join("config.resolved.toml").is_file());

    let refused = gen(&a, "8");
    assert_eq!(code(&refused), 3, "{}", String::from_utf8_lossy(&refused.stderr));
    assert_eq!(sums(&a), sums(&b));
    assert_eq!(code(&pgfl(&["gen-data", "--out", a.to_str().unwrap(), "--seed", "8", "--force"], SMALL)), 0);
    assert_ne!(sums(&a), sums(&b));
}

#[test]
fn generated_dataset_composition_and_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ds");
    assert_eq!(code(&gen(&dir, "2")), 0);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json")).unwrap()).unwrap();
    let mut tally: BTreeMap<(String, u64), BTreeMap<String, usize>> = BTreeMap::new();
    for s in meta["samples"].as_array().unwrap() {
        let key = (s["split"].as_str().unwrap().to_string(), s["id"].as_u64().unwrap());
        *tally.entry(key).or_default().entry(s["kind"].as_str().unwrap().to_string()).or_default() += 1;
    }
    for ((_, id), kinds) in &tally {
        let n: usize = kinds.values().sum();
        assert_eq!(kinds["holistic"] * 2, n, "id {id}");
        assert_eq!(kinds["upper_half"] * 4, n, "id {id}");
        assert_eq!(kinds["upper_third"] * 4, n, "id {id}");
    }
    let data = load_dataset(&dir).unwrap();
    let grouping = Grouping::default();
    for s in data.train.iter().chain(&data.query).chain(&data.gallery) {
        let h = s.heatmaps(&grouping).unwrap();
        for ch in h.groups.chunks(h.height * h.width) {
            let sum: f64 = ch.iter().map(|&v| f64::from(v)).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{}: {sum}", s.name);
        }
    }
}

#[test]
fn train_eval_export_and_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, base, full) = (tmp.path().join("ds"), tmp.path().join("base"), tmp.path().join("full"));
    assert_eq!(code(&gen(&data, "3")), 0);

    let o = train(&data, &base, "baseline");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for row in log_columns(&base.join("train_log.csv")) {
        assert!(row[1] > 0.0);
        assert_eq!(&row[2..6], &[0.0; 4]);
    }
    let o = train(&data, &full, "full");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for row in log_columns(&full.join("train_log.csv")) {
        assert!(row[1..6].iter().all(|&v| v > 0.0), "{row:?}");
    }
    assert!(full.join("checkpoints/epoch_001.pgck").is_file());
    assert!(full.join("checkpoints/epoch_002.pgck").is_file());
    assert_eq!(code(&train(&data, &full, "full")), 3, "existing run directory is refused");

    // The snapshot alone reproduces the run.
    let again = tmp.path().join("again");
    let snap = full.join("config.resolved.toml");
    let o = pgfl(&["train", "--data", data.to_str().unwrap(), "--out", again.to_str().unwrap(), "--config", snap.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(full.join("train_log.csv")).unwrap(), std::fs::read(again.join("train_log.csv")).unwrap());
    assert_eq!(std::fs::read(full.join("model.pgck")).unwrap(), std::fs::read(again.join("model.pgck")).unwrap());

    let ck = full.join("model.pgck");
    let ev = tmp.path().join("ev");
    let o = pgfl(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--export-mb-only"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("heatmap reads: 0"));
    assert!(ev.join("report_G.json").is_file() && ev.join("report_G.csv").is_file() && ev.join("query_G.pgft").is_file());
    let mb = ev.join("model_mb.pgck");
    let o = pgfl(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", mb.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--feature", "V"], &[]);
    assert_eq!(code(&o), 4);
    let o = pgfl(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--feature", "V"], &[]);
    assert_eq!(code(&o), 0);

    let ex = tmp.path().join("ex");
    assert_eq!(code(&pgfl(&["export", "--checkpoint", ck.to_str().unwrap(), "--out", ex.to_str().unwrap()], &[])), 0);
    assert_eq!(std::fs::read(&mb).unwrap(), std::fs::read(ex.join("model_mb.pgck")).unwrap());

    let dump = tmp.path().join("dump");
    let o = pgfl(&["dump-responses", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", dump.to_str().unwrap(), "--limit", "3"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        for kind in ["response", "attention"] {
            let text = std::fs::read_to_string(dump.join(format!("query_{i:05}.{kind}.csv"))).unwrap();
            let rows: Vec<Vec<f64>> = text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
            assert_eq!(rows.len(), 8);
            assert!(rows.iter().all(|r| r.len() == 4));
            if kind == "attention" {
                let s: f64 = rows.iter().flatten().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pgfl(&["train", "--data", tmp.path().join("none").to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3);
    let o = pgfl(&["gradcheck", "--out", tmp.path().join("g").to_str().unwrap(), "-s", "model.nope=1"], &[]);
    assert_eq!(code(&o), 2);
    let o = pgfl(&["gradcheck", "--out", tmp.path().join("g").to_str().unwrap(), "--ablation", "model-7"], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_detects_broken_detach() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = pgfl(&["gradcheck", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("fusion_gradient_difference   0.000e0"));
    assert!(out.join("config.resolved.toml").is_file());
    let o = pgfl(&["gradcheck", "--out", out.to_str().unwrap(), "--break-detach"], &[]);
    assert_eq!(code(&o), 5);
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["cl_teacher_path_gradient", "cl_backbone_deviation", "mcl_projection_gradient"] {
        assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains(name)), "{name}");
    }
}

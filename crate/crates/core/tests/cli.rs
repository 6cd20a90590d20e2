use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gicn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gicn"))
        .args(args)
        .env_remove("GICN_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gicn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--out-dir", p(&a), "--count", "2", "--seed", "7"]);
    ok(&["synth", "--out-dir", p(&b), "--count", "2", "--seed", "7"]);
    for name in ["scene_00007.scn.txt", "scene_00008.scn.txt"] {
        let x = fs::read(a.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out-dir", p(dir.path()), "--seed", "3"]);
    let scene = dir.path().join("scene_00003.scn.txt");
    let csv_path = dir.path().join("eval.csv");
    ok(&["eval", "--pred", p(&scene), "--gt", p(&scene), "--out", p(&csv_path)]);
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["class", "num_gt", "num_pred", "tp", "fp", "fn", "precision", "recall", "ap50"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert!(rows.len() >= 2);
    for row in rows {
        for col in 6..9 {
            assert_eq!(row[col].parse::<f64>().unwrap(), 1.0, "{row:?}");
        }
    }
}

#[test]
fn errors_are_one_line_with_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.scn.txt");
    let out = gicn(&["stats", "--scenes", p(&missing), "--out", p(&dir.path().join("s.json"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]"), "{err}");

    ok(&["synth", "--out-dir", p(dir.path()), "--seed", "1"]);
    let scene = dir.path().join("scene_00001.scn.txt");
    let stats = dir.path().join("stats.json");
    ok(&["stats", "--scenes", p(&scene), "--out", p(&stats)]);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 0}}"#).unwrap();
    let out = gicn(&["train", "--scenes", p(&scene), "--stats", p(&stats), "--config", p(&bad), "--run-dir", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[config]"), "{err}");

    let garbage = dir.path().join("garbage.scn.txt");
    fs::write(&garbage, "not a scene\n").unwrap();
    let out = gicn(&["stats", "--scenes", p(&garbage), "--out", p(&stats)]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[parse]"));
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (tr, va) = (d.join("train"), d.join("val"));
    ok(&["synth", "--out-dir", p(&tr), "--count", "2", "--seed", "100"]);
    ok(&["synth", "--out-dir", p(&va), "--count", "1", "--seed", "200"]);
    let stats = d.join("stats.json");
    let msg = ok(&["stats", "--scenes", p(&tr), "--out", p(&stats)]);
    assert!(!msg.is_empty());
    let stats_json: serde_json::Value = serde_json::from_slice(&fs::read(&stats).unwrap()).unwrap();
    assert!(stats_json.is_object());

    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 2, "sample_points": 64, "blocks_per_epoch": 4}}"#).unwrap();
    let run = d.join("run");
    ok(&["train", "--scenes", p(&tr), "--val", p(&va), "--stats", p(&stats), "--config", p(&cfg), "--run-dir", p(&run)]);
    for f in ["best.ckpt", "log.csv", "run_config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let scene = va.join("scene_00200.scn.txt");
    let inst = d.join("pred").join("scene_00200.inst.txt");
    fs::create_dir_all(inst.parent().unwrap()).unwrap();
    let ply = d.join("pred.ply");
    ok(&[
        "infer", "--scene", p(&scene), "--checkpoint", p(&run.join("best.ckpt")), "--stats", p(&stats),
        "--out", p(&inst), "--ply", p(&ply), "--sample-points", "64",
    ]);
    assert!(inst.is_file());
    assert!(fs::read_to_string(&ply).unwrap().starts_with("ply"));

    let table = ok(&["eval", "--pred", p(&d.join("pred")), "--gt", p(&va), "--out", p(&d.join("eval.csv"))]);
    assert!(!table.is_empty());
    assert!(d.join("eval.csv").is_file());

    let heat = d.join("heat.csv");
    let msg = ok(&["export-heatmap", "--scene", p(&scene), "--checkpoint", p(&run.join("best.ckpt")), "--out", p(&heat), "--sample-points", "64"]);
    assert!(msg.contains("mean abs error"));
    let mut r = csv::Reader::from_path(&heat).unwrap();
    let n = r.records().count();
    assert!(n > 100);

    let table = ok(&[
        "ablate", "--variant", "topk-centers", "--scenes", p(&tr), "--val", p(&va), "--stats", p(&stats),
        "--checkpoint", p(&run.join("best.ckpt")), "--seeds", "0",
    ]);
    assert!(table.starts_with("variant,seed,mprec,mrec,ap50\ntopk-centers,0,"));
}

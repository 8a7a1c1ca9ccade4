mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::SliceRandom;
use rand::Rng as _;

use common::{tiny_config, tiny_synth};
use ctrscan::dataio::{load_dataset, KeyValues};
use ctrscan::diffcore::load_checkpoint;
use ctrscan::discriminator::{binarize, read_scores_tsv, write_scores_tsv, ScoreRow, ThresholdMethod};
use ctrscan::metrics::MetricValue;
use ctrscan::pipeline::{
    cmd_eval, cmd_infer, cmd_synth, cmd_train, read_log, threshold_path, Stage, StageSelection,
    ALIGN_CKPT, CLS_CKPT, FUSE_CKPT, MANIFEST, TRAIN_LOG,
};
use ctrscan::rng::seeded;
use ctrscan::synthgen::SynthConfig;
use ctrscan::Error;

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn sources(cohort: &Path, ids: &[String]) -> Vec<PathBuf> {
    ids[..ids.len() - 1].iter().map(|id| cohort.join(id)).collect()
}

#[test]
fn synth_is_byte_stable_and_refuses_nonempty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_synth(5);
    let ids = cmd_synth(&cfg, &tmp.path().join("a"), false).unwrap();
    cmd_synth(&cfg, &tmp.path().join("b"), false).unwrap();
    assert_eq!(ids, vec!["synth_0", "synth_1", "synth_2"]);
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));

    let manifest = KeyValues::read(&tmp.path().join("a").join(MANIFEST)).unwrap();
    assert_eq!(manifest.get("datasets"), Some("3"));
    assert_eq!(manifest.get("dataset.2"), Some("synth_2"));

    let err = cmd_synth(&cfg, &tmp.path().join("a"), false).unwrap_err();
    assert!(matches!(err, Error::Argument(_)), "{err}");
    cmd_synth(&cfg, &tmp.path().join("a"), true).unwrap();
}

#[test]
fn train_infer_eval_are_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ids = cmd_synth(&tiny_synth(1), &root.join("cohort"), false).unwrap();
    let src = sources(&root.join("cohort"), &ids);
    let cfg = tiny_config(1);

    let rows = cmd_train(&src, &root.join("m1"), &cfg, StageSelection::All, false).unwrap();
    assert_eq!(rows.len(), 24);

    // parameter groups
    let (_, align) = load_checkpoint(&root.join("m1").join(ALIGN_CKPT)).unwrap();
    assert!(align.entries().all(|(k, _)| k.starts_with("align/")));
    let (meta, cls) = load_checkpoint(&root.join("m1").join(CLS_CKPT)).unwrap();
    assert!(cls.entries().any(|(k, _)| k.starts_with("vrbca/")));
    assert!(cls.entries().any(|(k, _)| k.starts_with("cls/")));
    assert_eq!(meta.get("model.stage"), Some("cls"));

    // identical bytes on rerun, and when the stages run one at a time
    cmd_train(&src, &root.join("m2"), &cfg, StageSelection::All, false).unwrap();
    assert_eq!(files(&root.join("m1")), files(&root.join("m2")));
    for s in ["align", "fuse", "cls"] {
        let sel = StageSelection::parse(s).unwrap();
        cmd_train(&src, &root.join("m3"), &cfg, sel, false).unwrap();
    }
    assert_eq!(files(&root.join("m1")), files(&root.join("m3")));
    let log = read_log(&root.join("m3").join(TRAIN_LOG)).unwrap();
    assert_eq!(log.iter().filter(|r| r.stage == Stage::Fuse).count(), 8);

    // existing checkpoint needs --force
    let err = cmd_train(&src, &root.join("m3"), &cfg, StageSelection::Only(Stage::Cls), false).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
    cmd_train(&src, &root.join("m3"), &cfg, StageSelection::Only(Stage::Cls), true).unwrap();
    assert_eq!(read_log(&root.join("m3").join(TRAIN_LOG)).unwrap(), log);

    // unlabeled target
    let target_dir = root.join("cohort").join(ids.last().unwrap());
    let mut target = load_dataset(&target_dir).unwrap();
    let labels = target.labels.take().unwrap();
    target.write(&root.join("unlabeled"), true).unwrap();
    let scores_path = root.join("scores.tsv");
    let out = cmd_infer(&root.join("m1"), &[root.join("unlabeled")], &scores_path).unwrap();
    assert_eq!(out.len(), 1);
    let rows = read_scores_tsv(&scores_path).unwrap();
    assert_eq!(rows.len(), labels.len());
    let side = KeyValues::read(&threshold_path(&scores_path)).unwrap();
    let theta: f64 = side.get("threshold").unwrap().parse().unwrap();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let calls: Vec<u8> = rows.iter().map(|r| r.call).collect();
    assert_eq!(calls, binarize(&scores, theta));

    // eval is byte-stable across the two identical models
    let err = cmd_eval(&scores_path, &root.join("unlabeled"), &root.join("r.txt")).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    let report = cmd_eval(&scores_path, &target_dir, &root.join("r1.txt")).unwrap();
    assert!(matches!(report.auc, MetricValue::Value(a) if a > 0.5));
    let scores2 = root.join("scores2.tsv");
    cmd_infer(&root.join("m2"), std::slice::from_ref(&target_dir), &scores2).unwrap();
    fs::copy(&scores2, &scores_path).unwrap();
    fs::copy(threshold_path(&scores2), threshold_path(&scores_path)).unwrap();
    cmd_eval(&scores_path, &target_dir, &root.join("r2.txt")).unwrap();
    assert_eq!(fs::read(root.join("r1.txt")).unwrap(), fs::read(root.join("r2.txt")).unwrap());
}

#[test]
fn infer_several_targets_writes_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ids = cmd_synth(&tiny_synth(2), &root.join("cohort"), false).unwrap();
    let src = sources(&root.join("cohort"), &ids);
    let mut cfg = tiny_config(2);
    cfg.gmm_mode = ctrscan::config::GmmMode::Global;
    cmd_train(&src, &root.join("m"), &cfg, StageSelection::All, false).unwrap();
    let out = cmd_infer(&root.join("m"), &src, &root.join("scores")).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].0, root.join("scores").join("synth_0.scores.tsv"));
    // one pooled fit shared by every target
    assert_eq!(out[0].1.calls.threshold, out[1].1.calls.threshold);
}

#[test]
fn fuse_stage_needs_align_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ids = cmd_synth(&tiny_synth(3), &tmp.path().join("cohort"), false).unwrap();
    let src = sources(&tmp.path().join("cohort"), &ids);
    let err = cmd_train(
        &src,
        &tmp.path().join("m"),
        &tiny_config(3),
        StageSelection::Only(Stage::Fuse),
        false,
    )
    .unwrap_err();
    assert!(err.to_string().contains("align"), "{err}");
    assert!(!tmp.path().join("m").join(FUSE_CKPT).exists());
}

fn write_scores(path: &Path, scores: &[f64]) {
    let rows: Vec<ScoreRow> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoreRow {
            spot_index: i,
            x: 0.0,
            y: 0.0,
            score: s,
            call: u8::from(s >= 0.5),
            threshold_method: ThresholdMethod::MidpointFallback,
        })
        .collect();
    write_scores_tsv(path, &rows).unwrap();
}

#[test]
fn eval_of_perfect_and_shuffled_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_datasets: 1,
        spots_per_dataset: 1000,
        grid_side: 32,
        d_img: 4,
        n_genes: 8,
        seed: 9,
        ..SynthConfig::default()
    };
    cmd_synth(&cfg, &tmp.path().join("c"), false).unwrap();
    let dir = tmp.path().join("c").join("synth_0");
    let labels = load_dataset(&dir).unwrap().labels.unwrap();

    let perfect: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    write_scores(&tmp.path().join("p.tsv"), &perfect);
    let r = cmd_eval(&tmp.path().join("p.tsv"), &dir, &tmp.path().join("p.txt")).unwrap();
    for m in [r.auc, r.ap, r.f1, r.ks] {
        assert_eq!(m, MetricValue::Value(1.0));
    }

    let mut rng = seeded(4);
    let mut shuffled = perfect.clone();
    shuffled.shuffle(&mut rng);
    for s in shuffled.iter_mut() {
        *s += rng.random::<f64>() * 0.1;
    }
    write_scores(&tmp.path().join("s.tsv"), &shuffled);
    let r = cmd_eval(&tmp.path().join("s.tsv"), &dir, &tmp.path().join("s.txt")).unwrap();
    let auc = r.auc.value().unwrap();
    assert!((auc - 0.5).abs() <= 0.05, "{auc}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctrscan"))
}

#[test]
fn binary_exit_codes_and_config_dump() {
    let tmp = tempfile::tempdir().unwrap();

    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["train", "--dump-config", "--seed", "7", "--ablate", "rvae"]).output().unwrap();
    assert!(out.status.success());
    let dump = KeyValues::parse(&String::from_utf8(out.stdout).unwrap(), Path::new("<stdout>")).unwrap();
    assert_eq!(dump.get("seed"), Some("7"));
    assert_eq!(dump.get("ablate"), Some("rvae"));
    assert_eq!(dump.get("alpha"), Some("0.5"));
    assert_eq!(dump.get("epochs_align"), Some("100"));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "alpha=0.5\nalpah=0.3\n").unwrap();
    let out = bin()
        .args(["train", "--source", "x", "--out"])
        .arg(tmp.path().join("m"))
        .arg("--config")
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    let cohort = tmp.path().join("c");
    let out = bin().args(["synth", "--seed", "3", "--out"]).arg(&cohort).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut ds = load_dataset(&cohort.join("synth_0")).unwrap();
    let n = ds.n_spots();
    ds.labels = None;
    ds.write(&tmp.path().join("unlabeled"), false).unwrap();
    write_scores(&tmp.path().join("s.tsv"), &vec![0.5; n]);
    let out = bin()
        .arg("eval")
        .arg("--scores")
        .arg(tmp.path().join("s.tsv"))
        .arg("--data")
        .arg(tmp.path().join("unlabeled"))
        .arg("--out")
        .arg(tmp.path().join("r.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

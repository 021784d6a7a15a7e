use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gtdiff_cli::stages::{read_json, MetricsArtifact};

const TINY: &str = r#"
seed = 3
[sim]
n_ad = 25
n_hc = 35
[ddpm]
timesteps = 50
beta_start = 1e-3
beta_end = 0.2
epochs = 5
batch_size = 32
[ddpm.denoiser]
hidden = [32]
time_dim = 8
label_dim = 4
[model]
heads = 2
hidden = 16
[train]
synthetic_count = 60
[train.pretrain]
epochs = 1
[train.downstream]
max_epochs = 5
patience = 2
"#;

fn gtdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtdiff"))
        .args(args)
        .env_remove("GTDIFF_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Shared {
    _dir: tempfile::TempDir,
    config: PathBuf,
    runs: [PathBuf; 2],
    baselines_only: PathBuf,
}

/// Two full runs and one baselines-only run of the tiny config, shared by
/// the tests below.
fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let c = config.to_str().unwrap();
        let runs = [dir.path().join("a"), dir.path().join("b")];
        for r in &runs {
            let o = gtdiff(&["run", "--config", c, "--out", r.to_str().unwrap()]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        let baselines_only = dir.path().join("base");
        let o = gtdiff(&["run", "--config", c, "--baselines-only", "--out", baselines_only.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        Shared {
            _dir: dir,
            config,
            runs,
            baselines_only,
        }
    })
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let o = gtdiff(&["run", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gtdiff(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(gtdiff(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[ddpm]\nepochs = \"ten\"\n").unwrap();
    let o = gtdiff(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ddpm.epochs"), "{}", stderr(&o));

    let json = dir.path().join("bad.json");
    fs::write(&json, r#"{"train": {"pretrain": {"epoch": 3}}}"#).unwrap();
    let o = gtdiff(&["simulate", "--config", json.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.pretrain"), "{}", stderr(&o));
}

#[test]
fn stage_failure_exits_1_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = gtdiff(&["report", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config.toml"), "{}", stderr(&o));

    // A config with a report-less directory lists the absent artifacts.
    fs::write(dir.path().join("config.toml"), "").unwrap();
    let o = gtdiff(&["report", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("stage `report`") && e.contains("metrics.json"), "{e}");

    let o = gtdiff(&["pretrain", "--synthetic", "/nonexistent", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("load-cohort"), "{}", stderr(&o));
}

#[test]
fn identical_runs_produce_identical_bundles() {
    let s = shared();
    let [a, b] = &s.runs;
    let fa = files(a);
    let rel = |root: &Path, p: &Path| p.strip_prefix(root).unwrap().to_path_buf();
    assert_eq!(
        fa.iter().map(|p| rel(a, p)).collect::<Vec<_>>(),
        files(b).iter().map(|p| rel(b, p)).collect::<Vec<_>>()
    );
    for p in &fa {
        let r = rel(a, p);
        if r == Path::new("manifest.json") {
            continue;
        }
        assert!(fs::read(p).unwrap() == fs::read(b.join(&r)).unwrap(), "{} differs", r.display());
    }
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let run = &shared().runs[0];
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    let listed: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(listed.contains(&"metrics.json") && listed.contains(&"report.md"));
    assert_eq!(manifest["stage_timings"].as_array().unwrap().len(), 5);
    for p in files(run) {
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains(&hash), "{} lacks the config hash", p.display());
    }
}

#[test]
fn report_has_table_rows_and_plots() {
    let run = &shared().runs[0];
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    for heading in [
        "## Model comparison",
        "## Pairwise tests",
        "## Calibration",
        "## Decision curve",
        "## Distribution shift",
        "## Subgroups",
    ] {
        assert!(md.contains(heading), "missing {heading}");
    }
    for name in ["GT, DDPM-pretrained", "GT, random frozen", "Early Fusion DNN", "Late Fusion DNN"] {
        assert!(md.contains(&format!("| {name} | ")), "missing row {name}");
    }
    assert!(!md.contains("Notice: no predictions from the DDPM-pretrained"));
    for plot in ["roc", "calibration", "dca"] {
        let svg = fs::read_to_string(run.join(format!("plots/{plot}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap_or_else(|e| panic!("{plot}.svg: {e}"));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count() >= 2);
    }
}

#[test]
fn table_std_matches_per_fold_values() {
    let run = &shared().runs[0];
    let metrics = read_json::<MetricsArtifact>(&run.join("metrics.json")).unwrap().body.metrics;
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    for m in &metrics.models {
        let aucs: Vec<f64> = m.folds.iter().map(|f| f.auc).collect();
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let std = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((m.summary.auc.std - std).abs() < 1e-12);
        let cell = format!("{mean:.3} ± {std:.3}");
        let row = md
            .lines()
            .find(|l| l.starts_with(&format!("| {} |", gtdiff_cli::report::display_name(&m.model))))
            .unwrap();
        assert_eq!(row.split('|').nth(2).unwrap().trim(), cell, "{}", m.model);
    }
}

#[test]
fn baselines_only_run_omits_pipeline_rows_with_notice() {
    let run = &shared().baselines_only;
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("Notice: no predictions from the DDPM-pretrained pipeline"));
    assert!(!md.contains("| GT, DDPM-pretrained |"));
    assert!(md.contains("| Early Fusion DNN |"));
    assert!(!run.join("predictions/gt_ddpm_pretrained.test.csv").exists());
}

#[test]
fn evaluate_from_files_reproduces_metrics() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("run");
    fs::create_dir_all(copy.join("predictions")).unwrap();
    for f in ["config.toml"] {
        fs::copy(s.runs[0].join(f), copy.join(f)).unwrap();
    }
    for e in fs::read_dir(s.runs[0].join("predictions")).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, copy.join("predictions").join(p.file_name().unwrap())).unwrap();
    }
    let o = gtdiff(&["evaluate", "--run", copy.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| Early Fusion DNN |"));
    assert_eq!(fs::read(copy.join("metrics.json")).unwrap(), fs::read(s.runs[0].join("metrics.json")).unwrap());
    let o = gtdiff(&["report", "--run", copy.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(copy.join("report.md")).unwrap().contains("distshift.json not found"));
}

#[test]
fn stage_subcommands_chain() {
    let s = shared();
    let c = s.config.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = |x: &str| dir.path().join(x).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let o = gtdiff(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["simulate", "--config", c, "--out", &d("sim")]);
    let cohort = d("sim/cohort");
    let with_hook = dir.path().join("hook.toml");
    fs::write(&with_hook, TINY.replace("[ddpm]\n", "[ddpm]\ncheckpoint_every = 2\n")).unwrap();
    ok(&["ddpm-train", "--config", with_hook.to_str().unwrap(), "--cohort", &cohort, "--out", &d("ddpm")]);
    for e in [2, 4] {
        assert!(dir.path().join(format!("ddpm/ddpm/epoch-{e:05}.json")).exists());
    }
    ok(&["ddpm-sample", "--config", c, "--checkpoint", &d("ddpm/ddpm/ddpm.json"), "--cohort", &cohort, "--count", "40", "--out", &d("sample")]);
    let synth = gtdiff_cli::stages::load_cohort(&dir.path().join("sample/synthetic")).unwrap();
    assert_eq!(synth.len(), 40);
    ok(&["pretrain", "--config", c, "--synthetic", &d("sample/synthetic"), "--out", &d("pre")]);
    ok(&["distshift", "--config", c, "--real", &cohort, "--synthetic", &d("sample/synthetic"), "--encoders", &d("pre/encoders"), "--out", &d("shift")]);
    let shift: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("shift/distshift.json")).unwrap()).unwrap();
    assert_eq!(shift["report"]["rows"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(dir.path().join("shift/distshift.md")).unwrap().contains("| Embedding | Pooled |"));
    ok(&["--jobs", "1", "train", "--config", c, "--cohort", &cohort, "--baselines-only", "--out", &d("train")]);
    assert!(dir.path().join("train/predictions/early_fusion_dnn.test.csv").exists());
}

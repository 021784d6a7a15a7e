//! Markdown report and SVG plots for a finished run directory.

use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, Result};
use gtdiff::evalsuite::{roc_curve, MeanStd, MetricsReport, ModelReport, PredictionSet};
use gtdiff::train::{EARLY_FUSION, GT_PRETRAINED, GT_RANDOM, LATE_FUSION};

use crate::stages::{
    read_json, test_csv, write_atomic, Context, DistshiftArtifact, MetricsArtifact, CONFIG_FILE, DISTSHIFT_FILE,
    METRICS_FILE, REPORT_FILE,
};
use crate::svg::{LinePlot, Series};

pub fn display_name(model: &str) -> &str {
    match model {
        GT_PRETRAINED => "GT, DDPM-pretrained",
        GT_RANDOM => "GT, random frozen",
        EARLY_FUSION => "Early Fusion DNN",
        LATE_FUSION => "Late Fusion DNN",
        other => other,
    }
}

pub fn mean_std_cell(m: &MeanStd) -> String {
    format!("{:.3} ± {:.3}", m.mean, m.std)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

fn p_value(p: f64) -> String {
    if p < 1e-4 { format!("{p:.1e}") } else { format!("{p:.4}") }
}

/// Model rows shaped like the published table: mean ± std over folds.
pub fn model_table(metrics: &MetricsReport) -> String {
    let folds = metrics.models.first().map_or(0, |m| m.folds.len());
    let mut s = String::new();
    let _ = writeln!(s, "Mean ± standard deviation over {folds} folds; pooled AUC over all out-of-fold predictions.\n");
    s.push_str("| Model | AUC | ACC | SEN | SPEC | Pooled AUC |\n|---|---|---|---|---|---|\n");
    for m in &metrics.models {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.3} |",
            display_name(&m.model),
            mean_std_cell(&m.summary.auc),
            mean_std_cell(&m.summary.accuracy),
            mean_std_cell(&m.summary.sensitivity),
            mean_std_cell(&m.summary.specificity),
            m.pooled_auc
        );
    }
    if !metrics.models.iter().any(|m| m.model == GT_PRETRAINED) {
        s.push_str("\n> Notice: no predictions from the DDPM-pretrained pipeline; its rows are omitted.\n");
    }
    s
}

fn pairwise_matrix(metrics: &MetricsReport, pick: impl Fn(&gtdiff::evalsuite::PairwiseTest) -> Option<f64>) -> String {
    let names: Vec<&str> = metrics.models.iter().map(|m| m.model.as_str()).collect();
    let mut s = String::from("| |");
    for n in &names {
        let _ = write!(s, " {} |", display_name(n));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(names.len()));
    s.push('\n');
    for a in &names {
        let _ = write!(s, "| {} |", display_name(a));
        for b in &names {
            let cell = if a == b {
                "".to_string()
            } else {
                metrics
                    .pairwise
                    .iter()
                    .find(|t| (t.model_a == *a && t.model_b == *b) || (t.model_a == *b && t.model_b == *a))
                    .and_then(&pick)
                    .map_or("n/a".into(), p_value)
            };
            let _ = write!(s, " {cell} |");
        }
        s.push('\n');
    }
    s
}

fn calibration_table(metrics: &MetricsReport) -> String {
    let mut s = String::from("| Model | Brier | ECE | Bins (non-empty) |\n|---|---|---|---|\n");
    for m in &metrics.models {
        let c = &m.calibration;
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {} |",
            display_name(&m.model),
            c.brier,
            c.ece,
            c.bins.iter().filter(|b| b.count > 0).count()
        );
    }
    s
}

fn sens_at_spec_table(metrics: &MetricsReport) -> String {
    let target = metrics.config.target_specificity;
    let mut s = format!(
        "Threshold chosen per fold on validation predictions for specificity ≥ {target:.2}, then applied to the test fold.\n\n\
         | Model | Test SEN (pooled) | Test SPEC (pooled) | Test SPEC per fold |\n|---|---|---|---|\n"
    );
    for m in &metrics.models {
        let Some(r) = &m.sens_at_spec else {
            let _ = writeln!(s, "| {} | n/a | n/a | no validation predictions |", display_name(&m.model));
            continue;
        };
        let per_fold: Vec<String> = r.per_fold.iter().map(|f| opt(f.achieved_specificity)).collect();
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.3} | {} |",
            display_name(&m.model),
            r.pooled_sensitivity,
            r.pooled_specificity,
            per_fold.join(", ")
        );
    }
    s
}

fn dca_table(metrics: &MetricsReport) -> String {
    let Some(first) = metrics.models.first() else { return String::new() };
    let shown = [0.1, 0.2, 0.3, 0.4, 0.5];
    let idx: Vec<usize> = shown
        .iter()
        .filter_map(|t| first.decision_curve.points.iter().position(|p| (p.threshold - t).abs() < 1e-9))
        .collect();
    let mut s = format!("Prevalence {:.3}. Net benefit at selected thresholds.\n\n| Strategy |", first.decision_curve.prevalence);
    for &i in &idx {
        let _ = write!(s, " pt={:.2} |", first.decision_curve.points[i].threshold);
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(idx.len()));
    s.push('\n');
    for m in &metrics.models {
        let _ = write!(s, "| {} |", display_name(&m.model));
        for &i in &idx {
            let _ = write!(s, " {:.4} |", m.decision_curve.points[i].model);
        }
        s.push('\n');
    }
    s.push_str("| Treat all |");
    for &i in &idx {
        let _ = write!(s, " {:.4} |", first.decision_curve.points[i].treat_all);
    }
    s.push_str("\n| Treat none |");
    s.push_str(&" 0.0000 |".repeat(idx.len()));
    s.push('\n');
    s
}

fn subgroup_table(metrics: &MetricsReport) -> String {
    let mut s = String::from("| Model | Stratifier | Group | n | AD | AUC | SEN | SPEC |\n|---|---|---|---|---|---|---|---|\n");
    let mut notices = Vec::new();
    for m in &metrics.models {
        for r in &m.subgroups.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                display_name(&m.model),
                r.stratifier,
                r.group,
                r.n,
                r.n_positive,
                opt(r.auc),
                opt(r.sensitivity),
                opt(r.specificity)
            );
        }
        notices.extend(m.subgroups.notices.iter().map(|n| format!("{}: {n}", display_name(&m.model))));
    }
    for n in notices {
        let _ = writeln!(s, "\n> {n}");
    }
    s
}

pub fn distshift_table(a: &DistshiftArtifact) -> String {
    let mut s = String::new();
    if let Some(f) = a.fold {
        let _ = writeln!(s, "Real training data of fold {f} against its synthetic cohort.\n");
    }
    s.push_str(
        "| Space | Class | n real | n synthetic | MMD² (biased) | MMD² (unbiased) | Fréchet | Energy | KS mean D | KS share p<0.05 |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &a.report.rows {
        let _ = writeln!(
            s,
            "| {:?} | {:?} | {} | {} | {:.4} | {} | {} | {:.4} | {:.3} | {:.3} |",
            r.space,
            r.class,
            r.n_real,
            r.n_synthetic,
            r.mmd2_biased,
            r.mmd2_unbiased.map_or("n/a".into(), |v| format!("{v:.4}")),
            r.frechet.map_or("n/a".into(), |v| format!("{v:.3}")),
            r.energy,
            r.ks_mean_statistic,
            r.ks_rejected_share
        );
    }
    for w in &a.report.warnings {
        let _ = writeln!(s, "\n> {w}");
    }
    s
}

fn roc_plot(hash: &str, curves: &[(String, Vec<(f64, f64)>)]) -> LinePlot {
    let mut series: Vec<Series> = curves.iter().map(|(n, c)| Series::new(display_name(n), c.clone())).collect();
    series.push(Series::new("Chance", vec![(0.0, 0.0), (1.0, 1.0)]).dashed());
    LinePlot {
        title: "ROC, pooled out-of-fold".into(),
        x_label: "1 − specificity".into(),
        y_label: "Sensitivity".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series,
        note: Some(format!("config_hash: {hash}")),
    }
}

fn calibration_plot(hash: &str, models: &[ModelReport]) -> LinePlot {
    let mut series: Vec<Series> = models
        .iter()
        .map(|m| {
            let pts = m
                .calibration
                .bins
                .iter()
                .filter(|b| b.count > 0)
                .map(|b| (b.mean_predicted, b.observed_rate))
                .collect();
            Series::new(display_name(&m.model), pts)
        })
        .collect();
    series.push(Series::new("Ideal", vec![(0.0, 0.0), (1.0, 1.0)]).dashed());
    LinePlot {
        title: "Calibration".into(),
        x_label: "Mean predicted probability".into(),
        y_label: "Observed AD rate".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series,
        note: Some(format!("config_hash: {hash}")),
    }
}

fn dca_plot(hash: &str, models: &[ModelReport]) -> LinePlot {
    let mut series: Vec<Series> = models
        .iter()
        .map(|m| {
            let pts = m.decision_curve.points.iter().map(|p| (p.threshold, p.model)).collect();
            Series::new(display_name(&m.model), pts)
        })
        .collect();
    let (mut x1, mut y1) = (1.0f64, 0.05f64);
    if let Some(first) = models.first() {
        let pts = &first.decision_curve.points;
        x1 = pts.last().map_or(1.0, |p| p.threshold);
        y1 = y1.max(first.decision_curve.prevalence);
        series.push(Series::new("Treat all", pts.iter().map(|p| (p.threshold, p.treat_all)).collect()).dashed());
        series.push(Series::new("Treat none", pts.iter().map(|p| (p.threshold, p.treat_none)).collect()).dashed());
    }
    LinePlot {
        title: "Decision curve".into(),
        x_label: "Threshold probability".into(),
        y_label: "Net benefit".into(),
        x_range: (0.0, x1),
        y_range: (-0.1 * y1, y1 * 1.05),
        series,
        note: Some(format!("config_hash: {hash}")),
    }
}

/// Files a report needs that are missing from `run`.
pub fn missing_inputs(run: &Path, metrics: Option<&MetricsReport>) -> Vec<String> {
    let mut missing: Vec<String> = [METRICS_FILE, CONFIG_FILE]
        .iter()
        .filter(|f| !run.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if let Some(m) = metrics {
        missing.extend(m.models.iter().map(|r| test_csv(&r.model)).filter(|f| !run.join(f).exists()));
    }
    missing
}

/// Writes `report.md` and the three plots into the run directory.
pub fn render_report(ctx: &Context, run: &Path) -> Result<String> {
    let missing = missing_inputs(run, None);
    if !missing.is_empty() {
        bail!("missing artifacts in {}: {}", run.display(), missing.join(", "));
    }
    let metrics = read_json::<MetricsArtifact>(&run.join(METRICS_FILE))?.body.metrics;
    let missing = missing_inputs(run, Some(&metrics));
    if !missing.is_empty() {
        bail!("missing artifacts in {}: {}", run.display(), missing.join(", "));
    }
    let mut curves = Vec::new();
    for m in &metrics.models {
        let set = PredictionSet::read_csv(&run.join(test_csv(&m.model)), &m.model)?;
        curves.push((m.model.clone(), roc_curve(&set.positives(), &set.scores())?));
    }
    let hash = &ctx.hash;
    for (name, plot) in [
        ("roc", roc_plot(hash, &curves)),
        ("calibration", calibration_plot(hash, &metrics.models)),
        ("dca", dca_plot(hash, &metrics.models)),
    ] {
        write_atomic(&ctx.path(&format!("plots/{name}.svg")), plot.render().as_bytes())?;
    }

    let mut s = String::new();
    let _ = writeln!(s, "# Run report\n\nConfig hash: `{hash}`\n");
    let _ = writeln!(s, "## Model comparison\n\n{}", model_table(&metrics));
    let _ = writeln!(
        s,
        "## Pairwise tests\n\nDeLong test on pooled out-of-fold AUCs (p-values):\n\n{}",
        pairwise_matrix(&metrics, |t| t.delong.as_ref().map(|d| d.p))
    );
    let _ = writeln!(
        s,
        "McNemar test on pooled decisions at threshold {:.2} (p-values):\n\n{}",
        metrics.config.threshold,
        pairwise_matrix(&metrics, |t| Some(t.mcnemar.p))
    );
    let _ = writeln!(s, "## ROC\n\n![ROC](plots/roc.svg)\n");
    let _ = writeln!(s, "## Calibration\n\n{}\n![Calibration](plots/calibration.svg)\n", calibration_table(&metrics));
    let _ = writeln!(s, "## Sensitivity at fixed specificity\n\n{}", sens_at_spec_table(&metrics));
    let _ = writeln!(s, "## Decision curve\n\n{}\n![Decision curve](plots/dca.svg)\n", dca_table(&metrics));
    let shift = run.join(DISTSHIFT_FILE);
    if shift.exists() {
        let a = read_json::<DistshiftArtifact>(&shift)?.body;
        let _ = writeln!(s, "## Distribution shift\n\n{}", distshift_table(&a));
    } else {
        let _ = writeln!(s, "## Distribution shift\n\n> Notice: {DISTSHIFT_FILE} not found; section omitted.\n");
    }
    let _ = writeln!(s, "## Subgroups\n\n{}", subgroup_table(&metrics));
    write_atomic(&ctx.path(REPORT_FILE), s.as_bytes())?;
    Ok(s)
}

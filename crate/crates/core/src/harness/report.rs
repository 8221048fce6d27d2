//! Report emission: structured text tables and SVG plots, all deterministic
//! byte-for-byte and stamped with the producing config hash and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::probes::ProbeVariant;
use crate::{Error, Result};

use super::pipeline::ReportBundle;
use super::svg::{Plot, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tables,
    Plots,
    All,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tables" => Ok(ReportFormat::Tables),
            "plots" => Ok(ReportFormat::Plots),
            "all" => Ok(ReportFormat::All),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (expected tables|plots|all)"
            ))),
        }
    }
}

fn provenance(bundle: &ReportBundle) -> String {
    format!(
        "config {} seed {} version {}",
        bundle.config_hash, bundle.seed, bundle.version
    )
}

pub fn emit_report(bundle: &ReportBundle, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if bundle.drift.is_empty() {
        return Err(Error::MissingArtifact("drift curves".into()));
    }
    if bundle.geometry.is_empty() {
        return Err(Error::MissingArtifact("geometry reports".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if format != ReportFormat::Plots {
        written.extend(emit_tables(bundle, dir)?);
    }
    if format != ReportFormat::Tables {
        written.extend(emit_plots(bundle, dir)?);
    }
    Ok(written)
}

fn emit_tables(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let head = format!("# {}\n", provenance(bundle));
    let mut written = Vec::new();

    // drift + quadrant table
    let mut t = head.clone();
    let _ = writeln!(
        t,
        "{:<16} {:>12} {:>14} {:>12} {:>12}",
        "paradigm", "accum_pct", "accum_med_pct", "final_z_std", "in_quadrant"
    );
    for e in &bundle.quadrant.entries {
        let name = e.paradigm.as_str();
        let curve = &bundle.drift[name];
        let _ = writeln!(
            t,
            "{:<16} {:>12.3} {:>14.3} {:>12.6} {:>12}",
            name, curve.accumulation_pct, curve.accumulation_median_pct, e.final_z_std, e.in_quadrant
        );
    }
    let path = dir.join("drift.txt");
    fs::write(&path, t)?;
    written.push(path);

    // geometry table
    let mut t = head.clone();
    let _ = writeln!(
        t,
        "{:<24} {:>10} {:>12} {:>12} {:>10} {:>10} {:>12}",
        "encoder.space", "disp_ratio", "mean_diverg", "peak_diverg", "peak_hour", "cohens_d", "mw_p"
    );
    for (name, g) in &bundle.geometry {
        let _ = writeln!(
            t,
            "{:<24} {:>10.4} {:>12.4} {:>12.4} {:>10} {:>10.4} {:>12.6}",
            name, g.displacement_ratio, g.mean_divergence, g.peak_divergence, g.peak_hour, g.cohens_d, g.mann_whitney_p
        );
    }
    let path = dir.join("geometry.txt");
    fs::write(&path, t)?;
    written.push(path);

    // probe tables: method rows, task columns, point [lo, hi] cells
    let mut t = head.clone();
    let tasks: Vec<String> = {
        let mut v: Vec<String> = bundle.probes.cells.iter().map(|c| c.task.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    for metric in ["AUROC", "AUPRC"] {
        let _ = writeln!(t, "== {metric} (95% CI), context C={}", bundle.probes.context);
        let mut header = format!("{:<32}", "method");
        for task in &tasks {
            let _ = write!(header, " {task:>28}");
        }
        let _ = writeln!(t, "{header}");
        let mut methods: Vec<(String, crate::curriculum::ParadigmName, ProbeVariant)> = Vec::new();
        for c in &bundle.probes.cells {
            let label = format!("{} ({})", c.paradigm.as_str(), c.variant.as_str());
            if !methods.iter().any(|(l, _, _)| l == &label) {
                methods.push((label, c.paradigm, c.variant));
            }
        }
        for (label, paradigm, variant) in &methods {
            let mut row = format!("{label:<32}");
            for task in &tasks {
                let cell = bundle.probes.cell(*paradigm, task, *variant);
                let text = match cell.and_then(|c| c.metrics.as_ref()) {
                    Some(m) => {
                        let (v, (lo, hi)) = if metric == "AUROC" {
                            (m.auroc, m.auroc_ci)
                        } else {
                            (m.auprc, m.auprc_ci)
                        };
                        format!("{v:.3} [{lo:.3}, {hi:.3}]")
                    }
                    None => cell
                        .and_then(|c| c.error.clone())
                        .unwrap_or_else(|| "missing".into()),
                };
                let _ = write!(row, " {text:>28}");
            }
            let _ = writeln!(t, "{row}");
        }
        let _ = writeln!(t);
    }
    let _ = writeln!(t, "== AUROC lift (hist_plus_future - hist_only)");
    for (p, task, lift) in &bundle.probes.lifts {
        let _ = writeln!(t, "{:<16} {:<16} {:+.4}", p.as_str(), task, lift);
    }
    let _ = writeln!(t, "probe config hash: {}", bundle.probes.probe_config_hash);
    let path = dir.join("probes.txt");
    fs::write(&path, t)?;
    written.push(path);

    // machine-readable probe cells
    let mut t = format!(
        "{}\n",
        serde_json::json!({"meta": {"config_hash": bundle.config_hash, "seed": bundle.seed}})
    );
    for c in &bundle.probes.cells {
        let _ = writeln!(
            t,
            "{}",
            serde_json::to_string(c).expect("probe cell serializes")
        );
    }
    let path = dir.join("probes.jsonl");
    fs::write(&path, t)?;
    written.push(path);
    Ok(written)
}

fn emit_plots(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let prov = provenance(bundle);

    // drift curves with IQR bands, log-y
    let mut plot = Plot::new("Rollout drift (normalized to h=1)", &prov, "horizon h", "normalized L1 drift");
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    let mut xmax = 1.0f64;
    for curve in bundle.drift.values() {
        for v in curve.q25.iter().chain(curve.q75.iter()).chain(curve.mean.iter()) {
            ymin = ymin.min(*v);
            ymax = ymax.max(*v);
        }
        xmax = xmax.max(*curve.horizons.last().unwrap_or(&1) as f64);
    }
    plot.set_ranges((1.0, xmax), (ymin.max(1e-3), ymax));
    plot.set_log_y(true);
    for (i, (name, curve)) in bundle.drift.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let xs: Vec<f64> = curve.horizons.iter().map(|&h| h as f64).collect();
        plot.band(&xs, &curve.q25, &curve.q75, color);
        let pts: Vec<(f64, f64)> = xs.iter().zip(&curve.mean).map(|(&x, &y)| (x, y)).collect();
        plot.polyline(&pts, color, 1.8);
        plot.legend_entry(name, color);
    }
    let path = dir.join("drift.svg");
    fs::write(&path, plot.render())?;
    written.push(path);

    // z_std traces with the collapse threshold
    let mut plot = Plot::new("Collapse indicator during training", &prov, "step", "z_std");
    let mut ymax = 0.0f64;
    let mut xmax = 1.0f64;
    for track in bundle.collapse.values() {
        for &z in &track.z_std {
            ymax = ymax.max(z);
        }
        if let Some(&s) = track.steps.last() {
            xmax = xmax.max(s as f64);
        }
    }
    plot.set_ranges((0.0, xmax), (0.0, ymax.max(0.75)));
    for (i, (name, track)) in bundle.collapse.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = track
            .steps
            .iter()
            .zip(&track.z_std)
            .map(|(&s, &z)| (s as f64, z))
            .collect();
        plot.polyline(&pts, color, 1.5);
        plot.legend_entry(name, color);
    }
    plot.hline(0.05, "#444444", "4 3", "collapse threshold 0.05");
    plot.hline(0.700, "#999999", "2 4", "healthy reference 0.700");
    let path = dir.join("collapse.svg");
    fs::write(&path, plot.render())?;
    written.push(path);

    // quadrant scatter: one point per paradigm
    let mut plot = Plot::new(
        "Final z_std vs drift accumulation",
        &prov,
        "final z_std",
        "drift accumulation (%)",
    );
    let xs: Vec<f64> = bundle.quadrant.entries.iter().map(|e| e.final_z_std).collect();
    let ys: Vec<f64> = bundle
        .quadrant
        .entries
        .iter()
        .map(|e| e.accumulation_pct)
        .collect();
    let xmax = xs.iter().cloned().fold(0.1f64, f64::max);
    let ymin = ys.iter().cloned().fold(0.0f64, f64::min);
    let ymax = ys.iter().cloned().fold(10.0f64, f64::max);
    plot.set_ranges((0.0, xmax * 1.1), (ymin - 5.0, ymax * 1.1 + 5.0));
    for (i, e) in bundle.quadrant.entries.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        plot.scatter(&[(e.final_z_std, e.accumulation_pct)], color, 4.0);
        plot.point_label(e.final_z_std, e.accumulation_pct, e.paradigm.as_str(), color);
    }
    plot.hline(bundle.quadrant.max_accumulation_pct, "#444444", "4 3", "quadrant bound");
    let path = dir.join("quadrant.svg");
    fs::write(&path, plot.render())?;
    written.push(path);

    // centroid divergence curves (full-dim reports only)
    let mut plot = Plot::new("Cohort centroid divergence", &prov, "hour", "divergence (L2)");
    let mut ymax = 0.0f64;
    let mut xmax = 1.0f64;
    let full_reports: Vec<(&String, &crate::diagnostics::GeometryReport)> = bundle
        .geometry
        .iter()
        .filter(|(k, _)| k.ends_with(".full"))
        .collect();
    for (_, g) in &full_reports {
        for &v in &g.divergence {
            ymax = ymax.max(v);
        }
        xmax = xmax.max(g.divergence.len() as f64 - 1.0);
    }
    plot.set_ranges((0.0, xmax), (0.0, ymax.max(1e-6)));
    for (i, (name, g)) in full_reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = g
            .divergence
            .iter()
            .enumerate()
            .map(|(h, &v)| (h as f64, v))
            .collect();
        plot.polyline(&pts, color, 1.5);
        plot.legend_entry(name, color);
    }
    let path = dir.join("divergence.svg");
    fs::write(&path, plot.render())?;
    written.push(path);

    Ok(written)
}

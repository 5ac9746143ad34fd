//! Ablation, masked-image method comparison and mask-rate / loss-weight sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::config::TrainConfig;
use super::run::{train, RunReport};
use crate::crossmodal::MimMethod;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;

/// Mask rates of the image-mask sweep.
pub const SWEEP_MASK_RATES: [f64; 5] = [0.15, 0.30, 0.50, 0.75, 1.0];
/// Loss weights of the weight sweep.
pub const SWEEP_BETAS: [f64; 7] = [0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 2.0];
/// Mask rates at which the weight sweep is repeated.
pub const SWEEP_BETA_MASK_RATES: [f64; 2] = [0.15, 0.50];

/// One finished run of an experiment suite.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub label: String,
    pub config: TrainConfig,
    pub report: RunReport,
}

fn run_one(
    label: String,
    cfg: TrainConfig,
    ds: &Dataset,
    progress: &mut dyn FnMut(&ExperimentRun),
) -> Result<ExperimentRun> {
    cfg.validate()?;
    let text = cfg.to_text();
    let run = train(&cfg, ds, &text)?;
    let out = ExperimentRun {
        label,
        config: cfg,
        report: run.report,
    };
    progress(&out);
    Ok(out)
}

/// The four component settings: neither, masked language only, semantic
/// masked image only, both.
pub fn ablation_settings() -> [(&'static str, bool, bool); 4] {
    [
        ("neither", false, false),
        ("mlm", true, false),
        ("semmim", false, true),
        ("both", true, true),
    ]
}

pub fn run_ablation(
    base: &TrainConfig,
    ds: &Dataset,
    progress: &mut dyn FnMut(&ExperimentRun),
) -> Result<Vec<ExperimentRun>> {
    ablation_settings()
        .into_iter()
        .map(|(label, mlm, semmim)| {
            let mut cfg = base.clone();
            cfg.mlm_enabled = mlm;
            cfg.mim_method = if semmim { MimMethod::Semantic } else { MimMethod::None };
            run_one(label.to_string(), cfg, ds, progress)
        })
        .collect()
}

fn check(flag: bool) -> &'static str {
    if flag {
        "✓"
    } else {
        ""
    }
}

pub fn ablation_csv(runs: &[ExperimentRun]) -> String {
    let mut s = String::from("setting,mlm,semmim,R@1,R@5,R@10,mAP,config_hash\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.label,
            check(r.config.mlm_enabled),
            check(r.config.mim_method == MimMethod::Semantic),
            r.report.test.csv_row(),
            r.report.config_hash
        );
    }
    s
}

/// Runs every masked-image method with masked language modeling on, both
/// mask rates at 0.15 and unit weight.
pub fn run_mim_comparison(
    base: &TrainConfig,
    ds: &Dataset,
    progress: &mut dyn FnMut(&ExperimentRun),
) -> Result<Vec<ExperimentRun>> {
    MimMethod::ALL
        .into_iter()
        .map(|method| {
            let mut cfg = base.clone();
            cfg.mlm_enabled = true;
            cfg.token_mask_rate = 0.15;
            cfg.patch_mask_rate = 0.15;
            cfg.semmim_loss_weight = 1.0;
            cfg.mim_method = method;
            run_one(method.name().to_string(), cfg, ds, progress)
        })
        .collect()
}

pub fn mim_comparison_csv(runs: &[ExperimentRun]) -> String {
    let mut s = String::from("method,R@1,mAP,config_hash\n");
    for r in runs {
        let t = &r.report.test;
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{}",
            r.label,
            100.0 * t.rank(1),
            100.0 * t.mean_ap,
            r.report.config_hash
        );
    }
    s
}

/// `(m_p, beta)` points: every mask rate at unit weight, then every weight
/// at each of `beta_mask_rates`.
pub fn sweep_points(mask_rates: &[f64], betas: &[f64], beta_mask_rates: &[f64]) -> Result<Vec<(f64, f64)>> {
    if mask_rates.is_empty() || (betas.is_empty() != beta_mask_rates.is_empty()) {
        return Err(Error::InvalidArgument("sweep grids must be nonempty".into()));
    }
    let mut points: Vec<(f64, f64)> = mask_rates.iter().map(|&m| (m, 1.0)).collect();
    for &m in beta_mask_rates {
        points.extend(betas.iter().map(|&b| (m, b)));
    }
    let mut seen = BTreeSet::new();
    for &(m, b) in &points {
        if !seen.insert((m.to_bits(), b.to_bits())) {
            return Err(Error::InvalidArgument(format!("duplicate sweep point m_p={m}, beta={b}")));
        }
    }
    Ok(points)
}

pub fn run_sweep(
    base: &TrainConfig,
    ds: &Dataset,
    points: &[(f64, f64)],
    progress: &mut dyn FnMut(&ExperimentRun),
) -> Result<Vec<ExperimentRun>> {
    points
        .iter()
        .map(|&(m, beta)| {
            let mut cfg = base.clone();
            cfg.patch_mask_rate = m;
            cfg.semmim_loss_weight = beta;
            run_one(format!("m_p={m},beta={beta}"), cfg, ds, progress)
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "m_p,beta,R@1,mAP,config_hash";

pub fn sweep_csv(runs: &[ExperimentRun]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in runs {
        let t = &r.report.test;
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{}",
            r.config.patch_mask_rate,
            r.config.semmim_loss_weight,
            100.0 * t.rank(1),
            100.0 * t.mean_ap,
            r.report.config_hash
        );
    }
    s
}

/// One row of a sweep CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub m_p: f64,
    pub beta: f64,
    pub rank1: f64,
    pub map: f64,
    pub config_hash: String,
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SWEEP_CSV_HEADER) {
        return Err(Error::Config(format!("sweep CSV must start with `{SWEEP_CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.trim().split(',').collect();
            let num = |j: usize| -> Result<f64> {
                f.get(j)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("sweep CSV line {}: bad field {}", i + 2, j + 1)))
            };
            if f.len() != 5 {
                return Err(Error::Config(format!("sweep CSV line {}: expected 5 fields", i + 2)));
            }
            Ok(SweepRow {
                m_p: num(0)?,
                beta: num(1)?,
                rank1: num(2)?,
                map: num(3)?,
                config_hash: f[4].to_string(),
            })
        })
        .collect()
}

/// A named polyline for [`line_chart_svg`].
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a self-contained SVG line chart with axes, ticks and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("plot data".into()));
    }
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(&mut pts.iter().map(|p| p.0));
    let (y0, y1) = span(&mut pts.iter().map(|p| p.1));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="#ddd"/><text x="{px:.1}" y="{}" text-anchor="middle">{xv:.2}</text>"##,
            top,
            top + ph,
            top + ph + 16.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{yv:.2}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut sorted = ser.points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &sorted {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// The charts of a sweep: R@1 and mAP against the mask rate at unit weight,
/// and R@1 against the weight for every repeated mask rate. Returns
/// `(file stem, svg)` pairs.
pub fn sweep_charts(rows: &[SweepRow]) -> Result<Vec<(String, String)>> {
    let mut charts = Vec::new();
    let unit: Vec<&SweepRow> = rows.iter().filter(|r| r.beta == 1.0).collect();
    if !unit.is_empty() {
        let series = vec![
            Series {
                name: "R@1".into(),
                points: unit.iter().map(|r| (r.m_p, r.rank1)).collect(),
            },
            Series {
                name: "mAP".into(),
                points: unit.iter().map(|r| (r.m_p, r.map)).collect(),
            },
        ];
        charts.push((
            "mask_rate".to_string(),
            line_chart_svg("Retrieval vs. image mask rate", "mask rate m_p", "score (%)", &series)?,
        ));
    }
    let rates: BTreeSet<u64> = rows.iter().filter(|r| r.beta != 1.0).map(|r| r.m_p.to_bits()).collect();
    if !rates.is_empty() {
        let mut rank_series = Vec::new();
        let mut map_series = Vec::new();
        for bits in rates {
            let m = f64::from_bits(bits);
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.m_p == m).collect();
            rank_series.push(Series {
                name: format!("R@1, m_p={m}"),
                points: sel.iter().map(|r| (r.beta, r.rank1)).collect(),
            });
            map_series.push(Series {
                name: format!("mAP, m_p={m}"),
                points: sel.iter().map(|r| (r.beta, r.map)).collect(),
            });
        }
        charts.push((
            "beta_rank1".to_string(),
            line_chart_svg("R@1 vs. masked-image loss weight", "beta", "R@1 (%)", &rank_series)?,
        ));
        charts.push((
            "beta_map".to_string(),
            line_chart_svg("mAP vs. masked-image loss weight", "beta", "mAP (%)", &map_series)?,
        ));
    }
    if charts.is_empty() {
        return Err(Error::InvalidArgument("sweep CSV has no rows".into()));
    }
    Ok(charts)
}

/// Total loss per epoch, one series per run.
pub fn loss_chart(runs: &[(String, &RunReport)]) -> Result<String> {
    let series: Vec<Series> = runs
        .iter()
        .map(|(name, r)| Series {
            name: name.clone(),
            points: r.epochs.iter().map(|e| (e.epoch as f64, e.losses.total)).collect(),
        })
        .collect();
    line_chart_svg("Training loss", "epoch", "total loss", &series)
}

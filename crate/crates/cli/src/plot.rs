//! Learning-curve plots: overlaid smoothed curves with 68% bootstrap bands,
//! frames on the x axis, mean meta-episode return on the y axis. Emits an
//! SVG and a tab-separated table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use metarl::analysis::{bootstrap_ci, smooth_curve, RunRecord};

use crate::config::RunConfig;

pub struct CurveGroup {
    pub label: String,
    pub frames: Vec<u64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn read_run(dir: &Path) -> Result<(String, Vec<RunRecord>)> {
    let cfg = RunConfig::load(&dir.join("config.toml"))
        .with_context(|| format!("run directory {}", dir.display()))?;
    let log = fs::read_to_string(dir.join("log.jsonl"))
        .with_context(|| format!("missing log in {}", dir.display()))?;
    let records: Vec<RunRecord> =
        log.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
    Ok((format!("{} {}", cfg.method, cfg.env), records))
}

/// Group runs with the same method+env into one smoothed curve with a
/// per-point bootstrap band over seeds.
pub fn build_groups(
    dirs: &[PathBuf],
    window: usize,
    resamples: usize,
) -> Result<Vec<CurveGroup>> {
    let mut missing = Vec::new();
    for d in dirs {
        if !d.join("log.jsonl").exists() {
            missing.push(d.display().to_string());
        }
    }
    if !missing.is_empty() {
        bail!("missing logs: {}", missing.join(", "));
    }

    let mut by_label: Vec<(String, Vec<Vec<RunRecord>>)> = Vec::new();
    for dir in dirs {
        let (label, records) = read_run(dir)?;
        match by_label.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push(records),
            None => by_label.push((label, vec![records])),
        }
    }

    let mut groups = Vec::new();
    for (label, runs) in by_label {
        let len = runs.iter().map(Vec::len).min().unwrap_or(0);
        if len < window {
            bail!("curve for {label} is shorter ({len}) than the smoothing window ({window})");
        }
        let mut mean = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for i in 0..len {
            let values: Vec<f64> = runs.iter().map(|r| r[i].mean_return).collect();
            let m = values.iter().sum::<f64>() / values.len() as f64;
            let (l, h) = bootstrap_ci(&values, 0.68, resamples.max(1000), i as u64)?;
            mean.push(m);
            lo.push(l);
            hi.push(h);
        }
        let frames: Vec<u64> =
            runs[0][window - 1..len].iter().map(|r| r.frames).collect();
        groups.push(CurveGroup {
            label,
            frames,
            mean: smooth_curve(&mean, window)?,
            lo: smooth_curve(&lo, window)?,
            hi: smooth_curve(&hi, window)?,
        });
    }
    Ok(groups)
}

pub fn write_table(groups: &[CurveGroup], path: &Path) -> Result<()> {
    let mut out = String::from("label\tframes\tmean\tlo\thi\n");
    for g in groups {
        for i in 0..g.mean.len() {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                g.label, g.frames[i], g.mean[i], g.lo[i], g.hi[i]
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

pub fn write_svg(groups: &[CurveGroup], path: &Path) -> Result<()> {
    let (w, h) = (760.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 20.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let xmax = groups.iter().flat_map(|g| g.frames.iter()).copied().max().unwrap_or(1) as f64;
    let ymin = groups
        .iter()
        .flat_map(|g| g.lo.iter())
        .copied()
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let ymax = groups.iter().flat_map(|g| g.hi.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let yspan = (ymax - ymin).max(1e-9);

    let x = |f: f64| ml + plot_w * f / xmax;
    let y = |v: f64| mt + plot_h * (1.0 - (v - ymin) / yspan);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<g font-family=\"sans-serif\" font-size=\"12\">\n"
    ));

    // Axes with a handful of ticks.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    for i in 0..=4 {
        let fx = xmax * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.2e}</text>\n",
            x(fx),
            mt + plot_h + 18.0,
            fx
        ));
        let fy = ymin + yspan * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.1}</text>\n",
            ml - 6.0,
            y(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">frames</text>\n",
        ml + plot_w / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">mean meta-episode return</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));

    for (gi, g) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        // Confidence band.
        let mut band = String::from("<polygon points=\"");
        for i in 0..g.mean.len() {
            band.push_str(&format!("{:.1},{:.1} ", x(g.frames[i] as f64), y(g.hi[i])));
        }
        for i in (0..g.mean.len()).rev() {
            band.push_str(&format!("{:.1},{:.1} ", x(g.frames[i] as f64), y(g.lo[i])));
        }
        band.push_str(&format!("\" fill=\"{color}\" opacity=\"0.18\" stroke=\"none\"/>\n"));
        svg.push_str(&band);
        // Mean curve.
        let mut line = String::from("<polyline points=\"");
        for i in 0..g.mean.len() {
            line.push_str(&format!("{:.1},{:.1} ", x(g.frames[i] as f64), y(g.mean[i])));
        }
        line.push_str(&format!(
            "\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n"
        ));
        svg.push_str(&line);
        // Legend entry.
        let ly = mt + 16.0 + 18.0 * gi as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            ml + 10.0,
            ml + 34.0,
            ml + 40.0,
            ly + 4.0,
            g.label
        ));
    }
    svg.push_str("</g>\n</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

pub fn cmd_plot(
    dirs: &[PathBuf],
    out: &Path,
    window: usize,
    resamples: usize,
) -> Result<()> {
    if dirs.is_empty() {
        bail!("no run directories given");
    }
    let groups = build_groups(dirs, window.max(1), resamples)?;
    write_svg(&groups, out)?;
    write_table(&groups, &out.with_extension("tsv"))?;
    println!(
        "wrote {} and {} ({} curve group{})",
        out.display(),
        out.with_extension("tsv").display(),
        groups.len(),
        if groups.len() == 1 { "" } else { "s" }
    );
    Ok(())
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fbi_core::pipeline::summarize_protocol;
use fbi_core::{Error, Result};

struct Bar {
    label: String,
    value: f64,
    err: f64,
}

fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let (w, h, left, bottom, top) = (120.0 + 90.0 * bars.len() as f64, 320.0, 70.0, 60.0, 40.0);
    let ymax = bars.iter().map(|b| b.value + b.err).fold(0.0_f64, f64::max).max(1e-9) * 1.1;
    let plot_h = h - bottom - top;
    let y = |v: f64| top + plot_h * (1.0 - v / ymax);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - bottom, w - 20.0);
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" transform="rotate(-90 16 {0})" text-anchor="middle">{y_label}</text>"#,
        top + plot_h / 2.0
    );
    for (i, b) in bars.iter().enumerate() {
        let x = left + 20.0 + 90.0 * i as f64;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{:.1}" width="60" height="{:.1}" fill="#4c72b0"/>"##,
            y(b.value),
            (h - bottom) - y(b.value)
        );
        if b.err > 0.0 {
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{1:.1}" x2="{0}" y2="{2:.1}" stroke="black"/>"#,
                x + 30.0,
                y(b.value + b.err),
                y((b.value - b.err).max(0.0))
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x + 30.0, h - bottom + 18.0, b.label);
    }
    s.push_str("</svg>\n");
    s
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

pub fn run(inputs: &[PathBuf], summaries: &[PathBuf], top_k: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut table = csv::Writer::from_path(out.join("report.csv"))?;
    table.write_record(["variant", "seeds", "mean", "std", "best_epoch_mean"])?;
    let mut bars = Vec::new();
    for path in inputs {
        let mut per_seed: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
        for row in csv::Reader::from_path(path)?.deserialize() {
            let (seed, epoch, sr): (u64, usize, f64) = row?;
            per_seed.entry(seed).or_default().push((epoch, sr));
        }
        if per_seed.is_empty() {
            return Err(Error::Format { path: path.clone(), reason: "no evaluation rows".into() });
        }
        let series: Vec<(u64, Vec<f64>)> =
            per_seed.iter().map(|(s, v)| (*s, v.iter().map(|e| e.1).collect())).collect();
        let summary = summarize_protocol(&series, top_k)?;
        let best_epochs: Vec<f64> = per_seed
            .values()
            .map(|v| v.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map_or(0.0, |e| e.0 as f64))
            .collect();
        let best = best_epochs.iter().sum::<f64>() / best_epochs.len() as f64;
        let name = stem(path);
        table.serialize((&name, per_seed.len(), summary.mean, summary.std, best))?;
        bars.push(Bar { label: name, value: summary.mean, err: summary.std });
    }
    table.flush()?;
    fs::write(out.join("success.svg"), bar_chart("Success rate (top-k mean)", "success rate", &bars))?;

    let mut lat = Vec::new();
    for path in summaries {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        let ms = v["latency_ms"].as_f64().ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: "summary has no latency_ms; evaluate with --timing".into(),
        })?;
        let label = match v["n_steps"].as_u64() {
            Some(n) => format!("{n} step"),
            None => stem(path),
        };
        lat.push(Bar { label, value: ms, err: 0.0 });
    }
    if !lat.is_empty() {
        fs::write(out.join("latency.svg"), bar_chart("Inference latency", "ms", &lat))?;
    }
    println!("wrote report to {}", out.display());
    Ok(())
}

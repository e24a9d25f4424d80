//! Figures from `pr_curves.csv` (eval) and `ablation.csv` (ablate).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::svg::{bar_chart, line_chart, Axes, Bar, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    PrCurves,
    Ablation,
}

fn read_table(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_owned).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> CliResult<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::new("plot-input", format!("{}: missing column `{name}`", path.display())))
}

fn number(s: &str, path: &Path) -> CliResult<f64> {
    s.trim().parse().map_err(|_| CliError::new("plot-input", format!("{}: `{s}` is not a number", path.display())))
}

pub fn detect(header: &[String]) -> Option<InputKind> {
    let has = |n: &str| header.iter().any(|h| h == n);
    if has("recall") && has("precision") {
        Some(InputKind::PrCurves)
    } else if has("table") && has("mean_ap") {
        Some(InputKind::Ablation)
    } else {
        None
    }
}

/// The step curve drawn for one class: the precision envelope (max precision
/// at this recall or beyond), from recall 0 to the largest recall reached.
pub fn pr_series(recall: &[f64], precision: &[f64]) -> Vec<(f64, f64)> {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(recall.len() + 1);
    pts.push((0.0, env.first().copied().unwrap_or(0.0)));
    for (&r, &p) in recall.iter().zip(&env) {
        match pts.last_mut() {
            Some(last) if last.0 == r => last.1 = last.1.max(p),
            _ => pts.push((r, p)),
        }
    }
    pts
}

fn plot_pr(path: &Path, out: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    let (header, rows) = read_table(path)?;
    let (ci, ri, pi) = (column(&header, "class_id", path)?, column(&header, "recall", path)?, column(&header, "precision", path)?);
    let mut curves: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in &rows {
        let c = number(&row[ci], path)? as usize;
        let e = curves.entry(c).or_default();
        e.0.push(number(&row[ri], path)?);
        e.1.push(number(&row[pi], path)?);
    }
    if curves.is_empty() {
        return Err(CliError::new("empty-plot", format!("{} has no precision/recall points", path.display())));
    }
    let series: Vec<Series> = curves
        .iter()
        .map(|(c, (r, p))| Series { label: format!("class {c}"), points: pr_series(r, p) })
        .collect();
    let axes = Axes {
        title: "Precision / recall at IoU 0.5".into(),
        x_label: "recall".into(),
        y_label: "precision".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    let svg_path = out.join(format!("{prefix}pr_curves.svg"));
    fs::write(&svg_path, line_chart(&axes, &series))?;
    let csv_path = out.join(format!("{prefix}pr_series.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["class_id", "recall", "precision"])?;
    for (c, s) in curves.keys().zip(&series) {
        for (r, p) in &s.points {
            w.write_record([c.to_string(), r.to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(vec![svg_path, csv_path])
}

struct AblationRow {
    table: String,
    setting: String,
    mean: f64,
    min: f64,
    max: f64,
}

/// `key=value` pairs of a sweep setting such as `omega=0.5;normalize=true`.
fn setting_value(setting: &str, key: &str) -> Option<String> {
    setting.split(';').find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=').map(str::to_owned))
}

fn y_range(rows: &[&AblationRow]) -> (f64, f64) {
    let hi = rows.iter().map(|r| r.max.max(r.mean)).fold(0.0, f64::max);
    (0.0, if hi > 0.0 { (hi * 1.15).min(1.0).max(hi) } else { 1.0 })
}

fn plot_ablation(path: &Path, out: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    let (header, raw) = read_table(path)?;
    let idx = |n| column(&header, n, path);
    let (ti, si, mi, lo, hi) = (idx("table")?, idx("setting")?, idx("mean_ap")?, idx("min_ap")?, idx("max_ap")?);
    let rows = raw
        .iter()
        .map(|r| {
            Ok(AblationRow {
                table: r[ti].clone(),
                setting: r[si].clone(),
                mean: number(&r[mi], path)?,
                min: number(&r[lo], path)?,
                max: number(&r[hi], path)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(CliError::new("empty-plot", format!("{} has no ablation rows", path.display())));
    }
    let mut written = Vec::new();
    let mut series_rows: Vec<[String; 5]> = Vec::new();

    let ladder: Vec<&AblationRow> = rows.iter().filter(|r| r.table == "ladder").collect();
    if !ladder.is_empty() {
        let bars: Vec<Bar> =
            ladder.iter().map(|r| (r.setting.clone(), r.mean, Some((r.min, r.max)))).collect();
        let axes = Axes {
            title: "Ablation ladder (mean AP, min/max over seeds)".into(),
            x_label: "variant".into(),
            y_label: "AP".into(),
            x_range: (0.0, 1.0),
            y_range: y_range(&ladder),
        };
        let p = out.join(format!("{prefix}ladder.svg"));
        fs::write(&p, bar_chart(&axes, &bars))?;
        written.push(p);
        for r in &ladder {
            series_rows.push(["ladder".into(), r.setting.clone(), String::new(), r.mean.to_string(), format!("{}..{}", r.min, r.max)]);
        }
    }

    for (table, key, label) in [("eta", "eta", "η"), ("omega", "omega", "ω")] {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.table == table).collect();
        if sel.is_empty() {
            continue;
        }
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &sel {
            let x = setting_value(&r.setting, key)
                .ok_or_else(|| CliError::new("plot-input", format!("{}: setting `{}` lacks {key}=", path.display(), r.setting)))?;
            let x = number(&x, path)?;
            let series = match setting_value(&r.setting, "normalize") {
                Some(n) => format!("normalize={n}"),
                None => "AP".into(),
            };
            groups.entry(series.clone()).or_default().push((x, r.mean));
            series_rows.push([table.into(), r.setting.clone(), series, r.mean.to_string(), format!("{}..{}", r.min, r.max)]);
        }
        let mut series: Vec<Series> = groups
            .into_iter()
            .map(|(label, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { label, points }
            })
            .collect();
        // Normalized reweighting first.
        series.sort_by_key(|s| s.label != "normalize=true");
        let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let axes = Axes {
            title: format!("AP against {label}"),
            x_label: label.into(),
            y_label: "mean AP".into(),
            x_range: if x_hi > x_lo { (x_lo, x_hi) } else { (x_lo - 0.5, x_lo + 0.5) },
            y_range: y_range(&sel),
        };
        let p = out.join(format!("{prefix}{table}_sweep.svg"));
        fs::write(&p, line_chart(&axes, &series))?;
        written.push(p);
    }
    if written.is_empty() {
        return Err(CliError::new("empty-plot", format!("{} has no ladder, eta or omega rows", path.display())));
    }
    let p = out.join(format!("{prefix}ablation_series.csv"));
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["table", "setting", "series", "mean_ap", "range"])?;
    for r in &series_rows {
        w.write_record(r)?;
    }
    w.flush()?;
    written.push(p);
    Ok(written)
}

/// Renders every input into `out`; with several inputs each output name is
/// prefixed with the input's position.
pub fn plot(inputs: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(CliError::new("empty-plot", "no input files"));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let prefix = if inputs.len() == 1 { String::new() } else { format!("{i}_") };
        let (header, _) = read_table(path)?;
        written.extend(match detect(&header) {
            Some(InputKind::PrCurves) => plot_pr(path, out, &prefix)?,
            Some(InputKind::Ablation) => plot_ablation(path, out, &prefix)?,
            None if header.is_empty() => return Err(CliError::new("empty-plot", format!("{} is empty", path.display()))),
            None => {
                return Err(CliError::new(
                    "plot-input",
                    format!("{}: expected pr_curves.csv or ablation.csv columns", path.display()),
                ))
            }
        });
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pr_series_runs_from_zero_to_max_recall() {
        let pts = pr_series(&[0.0, 0.5, 0.5, 1.0], &[0.0, 0.5, 0.67, 0.75]);
        assert_eq!(pts.first().unwrap().0, 0.0);
        assert_eq!(pts.last().unwrap(), &(1.0, 0.75));
        assert!(pts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 >= w[1].1));
    }

    #[test]
    fn setting_values_parse() {
        assert_eq!(setting_value("omega=0.5;normalize=false", "normalize").as_deref(), Some("false"));
        assert_eq!(setting_value("eta=2", "eta").as_deref(), Some("2"));
        assert_eq!(setting_value("eta=2", "omega"), None);
    }
}

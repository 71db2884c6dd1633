//! Learning curves and ablation bar charts from metrics files.
//!
//! Runs are grouped by directory: `<runs_dir>/<group>/seed-<n>/metrics.jsonl`
//! (or `<runs_dir>/<group>/metrics.jsonl` for a single run). With at least
//! four runs in a group the curve shows the IQM and a stratified bootstrap
//! interval; smaller groups fall back to mean and min/max. Returns are
//! normalized per env where bounds are known (see [`crate::stats::score_bounds`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::Toggle;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{read_metrics, MetricsLog};
use crate::run::{CONFIG_FILE, METRICS_FILE};
use crate::stats::{bootstrap_ci, iqm, normalize_score, ScoreMatrix, DEFAULT_LEVEL, DEFAULT_N_BOOT};

/// Group name of the unablated runs in an ablation directory.
pub const BASE_GROUP: &str = "base";

#[derive(Clone, Debug, PartialEq)]
pub struct RunData {
    pub group: String,
    pub path: PathBuf,
    pub env: Option<String>,
    pub log: MetricsLog,
}

impl RunData {
    /// Loads a metrics file, reading the env name from a sibling config file
    /// when present.
    pub fn load(path: &Path, group: impl Into<String>) -> Result<Self> {
        let log = read_metrics(path)?;
        let env = path
            .parent()
            .map(|dir| dir.join(CONFIG_FILE))
            .filter(|p| p.exists())
            .map(|p| RunConfig::from_file(&p, None))
            .transpose()?
            .map(|c| c.env.name().to_string());
        Ok(RunData {
            group: group.into(),
            path: path.to_path_buf(),
            env,
            log,
        })
    }

    fn score(&self, ret: f64) -> f64 {
        match &self.env {
            Some(env) => normalize_score(env, ret),
            None => ret,
        }
    }
}

/// Every metrics file under `runs_dir`, sorted by path.
pub fn discover(runs_dir: &Path) -> Result<Vec<RunData>> {
    let mut found = Vec::new();
    let mut stack = vec![runs_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(HarnessError::io(&dir))? {
            let path = entry.map_err(HarnessError::io(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|path| {
            let group = group_name(runs_dir, &path);
            RunData::load(&path, group)
        })
        .collect()
}

fn group_name(runs_dir: &Path, metrics: &Path) -> String {
    let dir = metrics.parent().unwrap_or(runs_dir);
    let is_seed_dir = dir.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-"));
    let group_dir = if is_seed_dir { dir.parent().unwrap_or(dir) } else { dir };
    match group_dir.strip_prefix(runs_dir) {
        Ok(rel) if !rel.as_os_str().is_empty() => rel.to_string_lossy().into_owned(),
        _ => "run".to_string(),
    }
}

/// Aggregate of one set of scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub runs: usize,
}

/// IQM with a bootstrap interval for four or more scores, otherwise mean
/// with the min/max range.
pub fn aggregate(scores: &[f64]) -> Result<Aggregate> {
    if scores.is_empty() {
        return Err(HarnessError::Config("nothing to aggregate".into()));
    }
    if scores.len() >= 4 {
        let matrix = ScoreMatrix::new(scores.iter().map(|&s| vec![s]).collect())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (low, high) = bootstrap_ci(&matrix, DEFAULT_N_BOOT, DEFAULT_LEVEL, &mut rng)?;
        return Ok(Aggregate {
            point: iqm(scores)?,
            low,
            high,
            runs: scores.len(),
        });
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(Aggregate {
        point: mean,
        low: scores.iter().copied().fold(f64::INFINITY, f64::min),
        high: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        runs: scores.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub group: String,
    pub env_step: u64,
    pub value: Aggregate,
}

fn groups(runs: &[RunData]) -> BTreeMap<&str, Vec<&RunData>> {
    let mut map: BTreeMap<&str, Vec<&RunData>> = BTreeMap::new();
    for run in runs {
        map.entry(run.group.as_str()).or_default().push(run);
    }
    map
}

/// Aggregated scores per group at every eval step any of its runs reached.
pub fn learning_curves(runs: &[RunData]) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::new();
    for (group, members) in groups(runs) {
        let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for run in &members {
            for record in run.log.evals() {
                by_step.entry(record.env_step).or_default().push(run.score(record.eval_return));
            }
        }
        for (env_step, scores) in by_step {
            points.push(CurvePoint {
                group: group.to_string(),
                env_step,
                value: aggregate(&scores)?,
            });
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationBar {
    pub group: String,
    pub label: String,
    /// Variant final score as a percentage of the base final score.
    pub percent: f64,
    pub variant: Aggregate,
    pub base: Aggregate,
}

fn final_scores(members: &[&RunData]) -> Result<Vec<f64>> {
    members
        .iter()
        .map(|run| {
            run.log.final_return().map(|r| run.score(r)).ok_or_else(|| HarnessError::Corrupt {
                path: run.path.clone(),
                message: "no eval records".into(),
            })
        })
        .collect()
}

/// Bars for every non-base group, or `None` when there is no base group.
pub fn ablation_bars(runs: &[RunData]) -> Result<Option<Vec<AblationBar>>> {
    let grouped = groups(runs);
    let Some(base_runs) = grouped.get(BASE_GROUP) else {
        return Ok(None);
    };
    let base = aggregate(&final_scores(base_runs)?)?;
    let mut bars = Vec::new();
    for toggle in Toggle::ALL {
        if let Some(members) = grouped.get(toggle.slug()) {
            let variant = aggregate(&final_scores(members)?)?;
            bars.push(AblationBar {
                group: toggle.slug().to_string(),
                label: toggle.label().to_string(),
                percent: 100.0 * variant.point / base.point,
                variant,
                base,
            });
        }
    }
    for (group, members) in &grouped {
        if *group != BASE_GROUP && group.parse::<Toggle>().is_err() {
            let variant = aggregate(&final_scores(members)?)?;
            bars.push(AblationBar {
                group: group.to_string(),
                label: group.to_string(),
                percent: 100.0 * variant.point / base.point,
                variant,
                base,
            });
        }
    }
    Ok(Some(bars))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub curves_svg: PathBuf,
    pub curves_csv: PathBuf,
    pub ablation: Option<(PathBuf, PathBuf)>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn padded_range(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad)..(hi + pad)
}

fn draw_curves(points: &[CurvePoint], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_step = points.iter().map(|p| p.env_step).max().unwrap_or(1).max(1) as f64;
    let lo = points.iter().map(|p| p.value.low).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.value.high).fold(f64::NEG_INFINITY, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption("Evaluation score", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..max_step, padded_range(lo, hi))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("env steps")
        .y_desc("score")
        .draw()
        .map_err(plot_err)?;
    let mut names: Vec<&str> = points.iter().map(|p| p.group.as_str()).collect();
    names.dedup();
    for (i, name) in names.iter().enumerate() {
        let color = Palette99::pick(i);
        let series: Vec<&CurvePoint> = points.iter().filter(|p| p.group == *name).collect();
        let mut band: Vec<(f64, f64)> = series.iter().map(|p| (p.env_step as f64, p.value.high)).collect();
        band.extend(series.iter().rev().map(|p| (p.env_step as f64, p.value.low)));
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(
                series.iter().map(|p| (p.env_step as f64, p.value.point)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], Palette99::pick(i).stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn draw_bars(bars: &[AblationBar], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (900, 80 + 48 * bars.len().max(1) as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = bars.iter().map(|b| b.percent).fold(100.0, f64::max) * 1.1;
    let bottom = bars.iter().map(|b| b.percent).fold(0.0, f64::min);
    let n = bars.len();
    let labels: Vec<String> = bars.iter().map(|b| b.label.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("Final score, % of base", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(110)
        .build_cartesian_2d(bottom..top, 0.0..n as f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_y_mesh()
        .y_labels(n.max(1) * 2 + 1)
        .y_label_formatter(&|y| {
            let slot = *y - 0.5;
            if slot >= 0.0 && slot.fract().abs() < 1e-9 {
                labels.get(n - 1 - slot as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("% of base")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            let y = (n - 1 - i) as f64;
            Rectangle::new([(0.0, y + 0.15), (b.percent, y + 0.85)], Palette99::pick(i).filled())
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(100.0, 0.0), (100.0, n as f64)], BLACK.stroke_width(1))))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Writes `curves.svg`/`curves.csv` and, when a base group exists,
/// `ablation.svg`/`ablation.csv` into `out_dir`.
pub fn emit_plots(runs: &[RunData], out_dir: &Path) -> Result<ReportFiles> {
    if runs.is_empty() {
        return Err(HarnessError::Config("no metrics files to report on".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let points = learning_curves(runs)?;
    if points.is_empty() {
        return Err(HarnessError::Config("metrics files contain no eval records".into()));
    }
    let mut csv = String::from("group,env_step,score,low,high,runs\n");
    for p in &points {
        let v = p.value;
        writeln!(csv, "{},{},{},{},{},{}", csv_field(&p.group), p.env_step, v.point, v.low, v.high, v.runs).unwrap();
    }
    let curves_csv = out_dir.join("curves.csv");
    let curves_svg = out_dir.join("curves.svg");
    std::fs::write(&curves_csv, csv).map_err(HarnessError::io(&curves_csv))?;
    draw_curves(&points, &curves_svg)?;
    let ablation = match ablation_bars(runs)? {
        Some(bars) => {
            let mut csv = String::from("group,label,percent_of_base,score,low,high,base_score,runs\n");
            for b in &bars {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&b.group),
                    csv_field(&b.label),
                    b.percent,
                    b.variant.point,
                    b.variant.low,
                    b.variant.high,
                    b.base.point,
                    b.variant.runs
                )
                .unwrap();
            }
            let (svg, table) = (out_dir.join("ablation.svg"), out_dir.join("ablation.csv"));
            std::fs::write(&table, csv).map_err(HarnessError::io(&table))?;
            draw_bars(&bars, &svg)?;
            Some((svg, table))
        }
        None => None,
    };
    Ok(ReportFiles {
        curves_svg,
        curves_csv,
        ablation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{MetricLine, MetricRecord};
    use bro_core::agent::DiagnosticRow;

    fn fake_run(group: &str, finals: f64) -> RunData {
        let lines = (1..=3)
            .map(|i| {
                MetricLine::Eval(MetricRecord {
                    env_step: 100 * i,
                    gradient_step: 0,
                    eval_return: finals * i as f64 / 3.0,
                    episode_returns: vec![finals * i as f64 / 3.0],
                    updates: 0,
                    diagnostics: DiagnosticRow::default(),
                })
            })
            .collect();
        RunData {
            group: group.into(),
            path: PathBuf::from(format!("{group}/metrics.jsonl")),
            env: None,
            log: MetricsLog { lines },
        }
    }

    #[test]
    fn aggregate_switches_on_run_count() {
        let small = aggregate(&[1.0, 2.0, 6.0]).unwrap();
        assert_eq!((small.point, small.low, small.high), (3.0, 1.0, 6.0));
        let big = aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(big.point, 4.5);
        assert!(big.low <= 4.5 && 4.5 <= big.high);
    }

    #[test]
    fn csv_matches_plotted_numbers() {
        let runs: Vec<RunData> = (0..5)
            .map(|s| fake_run(BASE_GROUP, 10.0 + s as f64))
            .chain((0..2).map(|s| fake_run("cdq", 5.0 + s as f64)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&runs, dir.path()).unwrap();
        let points = learning_curves(&runs).unwrap();
        let csv = std::fs::read_to_string(&files.curves_csv).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), points.len());
        for (row, p) in rows.iter().zip(&points) {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells[0], p.group);
            assert_eq!(cells[2].parse::<f64>().unwrap(), p.value.point);
            assert_eq!(cells[3].parse::<f64>().unwrap(), p.value.low);
        }
        let (svg, table) = files.ablation.unwrap();
        let bars = ablation_bars(&runs).unwrap().unwrap();
        assert_eq!(bars.len(), 1);
        assert_eq!(bars[0].label, "+CDQ");
        // IQM of base finals 10..14 is 12; mean of cdq finals is 5.5.
        assert!((bars[0].percent - 100.0 * 5.5 / 12.0).abs() < 1e-12);
        let table = std::fs::read_to_string(table).unwrap();
        assert_eq!(table.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse::<f64>().unwrap(), bars[0].percent);
        let svg = std::fs::read_to_string(svg).unwrap();
        assert!(svg.contains("<svg") && svg.contains("CDQ"));
        assert!(std::fs::read_to_string(files.curves_svg).unwrap().contains("<polygon"));
    }

    #[test]
    fn discover_groups_by_directory() {
        let dir = tempfile::tempdir().unwrap();
        let text = "{\"kind\":\"eval\",\"env_step\":10,\"gradient_step\":0,\"eval_return\":1.0,\"episode_returns\":[1.0],\"updates\":0,\"diagnostics\":{\"td_error\":0.0,\"mean_q\":0.0,\"critic_loss\":0.0,\"critic_grad_norm\":0.0,\"actor_grad_norm\":0.0,\"alpha\":1.0,\"beta_o\":1.0,\"kl_weight\":1.0,\"measured_kl\":0.0,\"entropy_estimate\":0.0}}\n";
        for sub in ["base/seed-0", "base/seed-1", "no-wd/seed-0", "solo"] {
            let d = dir.path().join(sub);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join(METRICS_FILE), text).unwrap();
        }
        let runs = discover(dir.path()).unwrap();
        let names: Vec<&str> = runs.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(names, vec!["base", "base", "no-wd", "solo"]);
        std::fs::write(dir.path().join("solo").join(METRICS_FILE), "{\"kind\":\"nope\"}\n").unwrap();
        let err = discover(dir.path()).unwrap_err().to_string();
        assert!(err.contains("solo"), "{err}");
    }
}

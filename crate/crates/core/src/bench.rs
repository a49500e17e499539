//! Convergence-study harness: runs a problem over a grid of `(k, N)` cells,
//! fits rates and renders CSV or Markdown tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::problems::registry_get;
use crate::solver::{solve, PicardStats, SolverConfig, TerminalMode};

pub const CSV_HEADER: &str = "problem,k,N,component,err_y,err_z,runtime_s,picard_max";
pub const DIVERGED: &str = "DIVERGED";
/// Suffix on runtimes measured while other cells ran concurrently.
pub const CONTENDED_MARK: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Markdown,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            other => Err(Error::Config(format!(
                "format must be `csv` or `markdown`, got `{other}`"
            ))),
        }
    }
}

/// One convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub problem: String,
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
    pub gh_points: Option<usize>,
    pub degree: Option<usize>,
    pub spacing: Option<f64>,
    pub eps0: Option<f64>,
    pub terminal: Option<TerminalMode>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    pub parallel_cells: bool,
    /// In-solver worker count; `None` defers to the environment.
    pub threads: Option<usize>,
}

impl RunSpec {
    pub fn new(problem: &str, ks: Vec<usize>, ns: Vec<usize>) -> Self {
        RunSpec {
            problem: problem.to_string(),
            ks,
            ns,
            gh_points: None,
            degree: None,
            spacing: None,
            eps0: None,
            terminal: None,
            out: None,
            format: OutputFormat::Csv,
            parallel_cells: false,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ns.is_empty() {
            return Err(Error::Config("k and N lists must be non-empty".into()));
        }
        for &k in &self.ks {
            for &n in &self.ns {
                if n < k + 1 {
                    return Err(Error::Config(format!("N = {n} must be at least k + 1 for k = {k}")));
                }
            }
        }
        for (k, n) in self.cells() {
            self.solver_config(k, n).validate()?;
        }
        Ok(())
    }

    /// `(k, N)` pairs sorted ascending without duplicates.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut ks = self.ks.clone();
        let mut ns = self.ns.clone();
        ks.sort_unstable();
        ks.dedup();
        ns.sort_unstable();
        ns.dedup();
        ks.iter()
            .flat_map(|&k| ns.iter().map(move |&n| (k, n)))
            .collect()
    }

    pub fn solver_config(&self, k: usize, n: usize) -> SolverConfig {
        let mut c = SolverConfig::new(k, n);
        if let Some(l) = self.gh_points {
            c.gh_points = l;
        }
        c.degree = self.degree;
        c.spacing = self.spacing;
        if let Some(e) = self.eps0 {
            c.eps0 = e;
        }
        if let Some(t) = self.terminal {
            c.terminal = t;
        }
        c.threads = self.threads;
        c
    }

    /// Applies flat `key = value` settings; unknown keys are rejected.
    pub fn apply_setting(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |what: &str| Error::Config(format!("invalid {what} `{value}`"));
        match key {
            "problem" => self.problem = value.to_string(),
            "k" => self.ks = parse_list(value).map_err(|_| num("k list"))?,
            "N" => self.ns = parse_list(value).map_err(|_| num("N list"))?,
            "gh-points" => self.gh_points = Some(value.parse().map_err(|_| num("gh-points"))?),
            "interp-degree" => self.degree = Some(value.parse().map_err(|_| num("interp-degree"))?),
            "grid-h" => self.spacing = Some(value.parse().map_err(|_| num("grid-h"))?),
            "tol" => self.eps0 = Some(value.parse().map_err(|_| num("tol"))?),
            "terminal" => self.terminal = Some(value.parse()?),
            "format" => self.format = value.parse()?,
            "out" => self.out = Some(PathBuf::from(value)),
            "parallel-cells" => {
                self.parallel_cells = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(num("parallel-cells")),
                }
            }
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }
}

/// Comma-separated list of positive integers.
pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

/// Parses a flat `key = value` config text with `#` comments.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub err_y: Option<Vec<f64>>,
    pub err_z: Option<Vec<f64>>,
    pub y0: Vec<f64>,
    pub z0: Vec<f64>,
    pub runtime_s: f64,
    pub picard: PicardStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Solved(CellMetrics),
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub k: usize,
    pub n: usize,
    pub outcome: CellOutcome,
}

impl CellReport {
    pub fn metrics(&self) -> Option<&CellMetrics> {
        match &self.outcome {
            CellOutcome::Solved(m) => Some(m),
            CellOutcome::Diverged(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub k: usize,
    pub component: usize,
    pub cr_y: Option<f64>,
    pub cr_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub problem: String,
    pub y_components: usize,
    pub z_components: usize,
    /// Sorted by `(k, N)`.
    pub cells: Vec<CellReport>,
    pub rates: Vec<RateRow>,
    /// Why rates were omitted.
    pub notes: Vec<String>,
    pub contended: bool,
}

impl ConvergenceReport {
    pub fn any_diverged(&self) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c.outcome, CellOutcome::Diverged(_)))
    }

    pub fn cell(&self, k: usize, n: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.k == k && c.n == n)
    }

    pub fn rate(&self, k: usize, component: usize) -> Option<&RateRow> {
        self.rates
            .iter()
            .find(|r| r.k == k && r.component == component)
    }

    pub fn components(&self) -> usize {
        self.y_components.max(self.z_components)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RateOmitted {
    #[error("only {0} usable points, need at least 3")]
    TooFewPoints(usize),
    #[error("nonpositive error {err} at N = {n}")]
    NonPositive { n: usize, err: f64 },
}

/// Least-squares slope of `log(err)` against `log(1/N)`.
pub fn fit_rate(points: &[(usize, f64)]) -> std::result::Result<f64, RateOmitted> {
    if points.len() < 3 {
        return Err(RateOmitted::TooFewPoints(points.len()));
    }
    if let Some(&(n, err)) = points.iter().find(|(_, e)| !(*e > 0.0) || !e.is_finite()) {
        return Err(RateOmitted::NonPositive { n, err });
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| -(*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(RateOmitted::TooFewPoints(1));
    }
    Ok(sxy / sxx)
}

/// Runs every cell of `spec`. Divergent cells are recorded, other errors abort.
pub fn run(spec: &RunSpec) -> Result<ConvergenceReport> {
    spec.validate()?;
    let problem = registry_get(&spec.problem)?;
    let cells = spec.cells();
    let solve_cell = |&(k, n): &(usize, usize)| -> Result<CellReport> {
        let outcome = match solve(&problem, &spec.solver_config(k, n)) {
            Ok(r) => CellOutcome::Solved(CellMetrics {
                err_y: r.err_y,
                err_z: r.err_z,
                y0: r.y0,
                z0: r.z0,
                runtime_s: r.runtime_s,
                picard: r.picard,
            }),
            Err(e) if e.is_divergence() => {
                log::warn!("{} k={k} N={n}: {e}", spec.problem);
                CellOutcome::Diverged(e.to_string())
            }
            Err(e) => return Err(e),
        };
        Ok(CellReport { k, n, outcome })
    };
    let cells: Vec<CellReport> = if spec.parallel_cells {
        cells.par_iter().map(solve_cell).collect::<Result<_>>()?
    } else {
        cells.iter().map(solve_cell).collect::<Result<_>>()?
    };

    let y_components = problem.p;
    let z_components = problem.p * problem.d;
    let mut rates = Vec::new();
    let mut notes = Vec::new();
    let mut ks: Vec<usize> = cells.iter().map(|c| c.k).collect();
    ks.dedup();
    for k in ks {
        let solved: Vec<(usize, &CellMetrics)> = cells
            .iter()
            .filter(|c| c.k == k)
            .filter_map(|c| c.metrics().map(|m| (c.n, m)))
            .collect();
        for component in 0..y_components.max(z_components) {
            let mut fit = |label: &str, pick: &dyn Fn(&CellMetrics) -> Option<f64>| {
                let pts: Vec<(usize, f64)> = solved
                    .iter()
                    .filter_map(|(n, m)| pick(m).map(|e| (*n, e)))
                    .collect();
                match fit_rate(&pts) {
                    Ok(r) => Some(r),
                    Err(why) => {
                        notes.push(format!("k={k} {label}{component}: rate omitted, {why}"));
                        None
                    }
                }
            };
            let cr_y = (component < y_components)
                .then(|| fit("Y", &|m| m.err_y.as_ref().map(|e| e[component])))
                .flatten();
            let cr_z = (component < z_components)
                .then(|| fit("Z", &|m| m.err_z.as_ref().map(|e| e[component])))
                .flatten();
            rates.push(RateRow {
                k,
                component,
                cr_y,
                cr_z,
            });
        }
    }
    Ok(ConvergenceReport {
        problem: spec.problem.clone(),
        y_components,
        z_components,
        cells,
        rates,
        notes,
        contended: spec.parallel_cells,
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn runtime(report: &ConvergenceReport, secs: f64) -> String {
    let mark = if report.contended { CONTENDED_MARK } else { "" };
    format!("{}{mark}", num(secs))
}

/// CSV rendering with 17 significant digits per numeric cell.
pub fn render_csv(report: &ConvergenceReport) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    let name = &report.problem;
    for cell in &report.cells {
        for c in 0..report.components() {
            let (ey, ez, rt, pic) = match &cell.outcome {
                CellOutcome::Solved(m) => (
                    component_err(m.err_y.as_deref(), c),
                    component_err(m.err_z.as_deref(), c),
                    runtime(report, m.runtime_s),
                    m.picard.max.to_string(),
                ),
                CellOutcome::Diverged(_) => (
                    y_or_blank(c < report.y_components),
                    y_or_blank(c < report.z_components),
                    String::new(),
                    String::new(),
                ),
            };
            let _ = writeln!(s, "{name},{},{},{c},{ey},{ez},{rt},{pic}", cell.k, cell.n);
        }
    }
    for r in &report.rates {
        let _ = writeln!(
            s,
            "{name},{},CR,{},{},{},,",
            r.k,
            r.component,
            opt_num(r.cr_y),
            opt_num(r.cr_z)
        );
    }
    s
}

fn component_err(errs: Option<&[f64]>, c: usize) -> String {
    errs.and_then(|e| e.get(c).copied()).map(num).unwrap_or_default()
}

fn y_or_blank(present: bool) -> String {
    if present {
        DIVERGED.to_string()
    } else {
        String::new()
    }
}

/// Markdown rendering: one table with per-`k` rate rows and a notes list.
pub fn render_markdown(report: &ConvergenceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## {}\n", report.problem);
    s.push_str("| k | N | component | err_y | err_z | runtime_s | picard_max |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    let short = |x: Option<f64>| x.map(|v| format!("{v:.3e}")).unwrap_or_default();
    for cell in &report.cells {
        for c in 0..report.components() {
            let cols = match &cell.outcome {
                CellOutcome::Solved(m) => [
                    short(m.err_y.as_ref().and_then(|e| e.get(c).copied())),
                    short(m.err_z.as_ref().and_then(|e| e.get(c).copied())),
                    format!("{:.3}{}", m.runtime_s, if report.contended { CONTENDED_MARK } else { "" }),
                    m.picard.max.to_string(),
                ],
                CellOutcome::Diverged(_) => [
                    y_or_blank(c < report.y_components),
                    y_or_blank(c < report.z_components),
                    String::new(),
                    String::new(),
                ],
            };
            let row = cols.join(" | ");
            let _ = writeln!(s, "| {} | {} | {c} | {row} |", cell.k, cell.n);
        }
    }
    for r in &report.rates {
        let rate = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "| {} | CR | {} | {} | {} |  |  |",
            r.k,
            r.component,
            rate(r.cr_y),
            rate(r.cr_z)
        );
    }
    if !report.notes.is_empty() {
        s.push('\n');
        for n in &report.notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}

pub fn render(report: &ConvergenceReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => render_csv(report),
        OutputFormat::Markdown => render_markdown(report),
    }
}

/// Writes `contents` through a temporary file in the target directory.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<(usize, f64)> = [16, 32, 64, 128]
            .iter()
            .map(|&n| (n, 3.0 * (n as f64).powi(-2)))
            .collect();
        assert!((fit_rate(&pts).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn flat_errors_give_zero() {
        let pts = [(16, 0.1), (32, 0.1), (64, 0.1)];
        assert!(fit_rate(&pts).unwrap().abs() < 1e-12);
    }

    #[test]
    fn published_first_order_column() {
        let errs = [3.576e-3, 1.789e-3, 8.946e-4, 4.474e-4, 2.238e-4];
        let pts: Vec<(usize, f64)> = [16, 32, 64, 128, 256].into_iter().zip(errs).collect();
        assert!((fit_rate(&pts).unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn rate_gating() {
        assert_eq!(fit_rate(&[(16, 1.0), (32, 0.5)]), Err(RateOmitted::TooFewPoints(2)));
        assert!(matches!(
            fit_rate(&[(16, 1.0), (32, 0.0), (64, 0.1)]),
            Err(RateOmitted::NonPositive { n: 32, .. })
        ));
    }

    #[test]
    fn config_parsing() {
        let map = parse_config("# study\nproblem = ex51\nk = 1, 2\n\nN=16,32 # trailing\n").unwrap();
        let mut spec = RunSpec::new("x", vec![1], vec![2]);
        for (k, v) in &map {
            spec.apply_setting(k, v).unwrap();
        }
        assert_eq!(spec.problem, "ex51");
        assert_eq!(spec.ks, vec![1, 2]);
        assert_eq!(spec.ns, vec![16, 32]);
        assert!(parse_config("no equals sign").is_err());
        assert!(spec.apply_setting("colour", "red").is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(RunSpec::new("ex51", vec![], vec![16]).validate().is_err());
        assert!(RunSpec::new("ex51", vec![4], vec![4]).validate().is_err());
        assert!(RunSpec::new("ex51", vec![3], vec![4, 16]).validate().is_ok());
    }

    #[test]
    fn cells_sorted_and_deduplicated() {
        let spec = RunSpec::new("ex51", vec![2, 1, 2], vec![32, 16]);
        assert_eq!(spec.cells(), vec![(1, 16), (1, 32), (2, 16), (2, 32)]);
    }
}

//! Loss-curve experiments: KPP against random selection over a budget sweep,
//! and the initial-patch ablation.
//!
//! Results are [`CurveRow`]s written as versioned CSV:
//!
//! ```text
//! #kpp-csv-v1
//! image_id,method,oracle_id,init_policy,budget_ratio,n_keep,seed,masked_mse
//! ```
//!
//! `seed` is empty for KPP rows. Rows are sorted by image, method, init
//! policy, budget and seed, so output never depends on thread scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KppError, Result};
use crate::oracle::{losses_with_blank, Oracle};
use crate::patch_grid::{load_and_resize, split, GridSpec, ImageTensor, PatchArray};
use crate::selector::{
    kpp_greedy, lazy_greedy, random_select, resolve_budget, Budget, ImageObjective, InitPolicy,
    SelectionTrace,
};

pub const CSV_VERSION_LINE: &str = "#kpp-csv-v1";
pub const DEFAULT_BUDGETS: [f64; 4] = [0.05, 0.10, 0.25, 0.50];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusKind {
    Gradient,
    Checker,
    Blobs,
    Directory(PathBuf),
}

impl CorpusKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorpusKind::Gradient => "gradient",
            CorpusKind::Checker => "checker",
            CorpusKind::Blobs => "blobs",
            CorpusKind::Directory(_) => "directory",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub count: usize,
    pub seed: u64,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusImage {
    pub id: String,
    pub image: ImageTensor,
}

/// Builds the corpus. Synthetic kinds are RGB and fully determined by the seed.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusImage>> {
    if let CorpusKind::Directory(dir) = &spec.kind {
        return load_directory(dir, spec.grid);
    }
    if spec.count == 0 {
        return Err(KppError::InvalidArgument("corpus count must be at least 1".into()));
    }
    let side = spec.grid.image_side();
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let data = match spec.kind {
                CorpusKind::Gradient => gradient(side, &mut rng),
                CorpusKind::Checker => checker(side, &mut rng),
                CorpusKind::Blobs => blobs(side, &mut rng),
                CorpusKind::Directory(_) => unreachable!(),
            };
            Ok(CorpusImage {
                id: format!("{}-{i:04}", spec.kind.name()),
                image: ImageTensor::new(side, side, 3, data)?,
            })
        })
        .collect()
}

fn load_directory(dir: &Path, grid: GridSpec) -> Result<Vec<CorpusImage>> {
    let entries = std::fs::read_dir(dir).map_err(|source| KppError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(KppError::InvalidArgument(format!(
            "no PNG or JPEG images in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            Ok(CorpusImage {
                id: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image: load_and_resize(p, grid)?,
            })
        })
        .collect()
}

/// Per-channel linear ramp at a random angle, rescaled to span `[0, 1]`.
fn gradient(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut data = vec![0.0; side * side * 3];
    for ch in 0..3 {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (c, s) = (theta.cos(), theta.sin());
        let raw: Vec<f64> = (0..side * side)
            .map(|p| (p % side) as f64 * c + (p / side) as f64 * s)
            .collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (p, v) in raw.iter().enumerate() {
            data[p * 3 + ch] = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    data
}

/// Two-color checkerboard with a random cell period.
fn checker(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = rng.gen_range(1..=(side / 4).max(1));
    let colors: [[f64; 3]; 2] = [
        [rng.gen(), rng.gen(), rng.gen()],
        [rng.gen(), rng.gen(), rng.gen()],
    ];
    (0..side * side)
        .flat_map(|p| {
            let cell = (p / side / period + p % side / period) % 2;
            colors[cell]
        })
        .collect()
}

/// Colored background plus 3–8 Gaussian bumps, clamped to `[0, 1]`.
fn blobs(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let background: [f64; 3] = [
        rng.gen_range(0.0..0.5),
        rng.gen_range(0.0..0.5),
        rng.gen_range(0.0..0.5),
    ];
    let n_bumps = rng.gen_range(3..=8);
    let s = side as f64;
    let bumps: Vec<(f64, f64, f64, [f64; 3])> = (0..n_bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s / 16.0..s / 4.0),
                [
                    rng.gen_range(-0.6..0.8),
                    rng.gen_range(-0.6..0.8),
                    rng.gen_range(-0.6..0.8),
                ],
            )
        })
        .collect();
    let mut data = Vec::with_capacity(side * side * 3);
    for r in 0..side {
        for c in 0..side {
            let mut px = background;
            for &(cx, cy, sigma, amp) in &bumps {
                let d2 = (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    px[ch] += amp[ch] * w;
                }
            }
            data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kpp,
    KppLazy,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kpp => "kpp",
            Method::KppLazy => "kpp_lazy",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub image_id: String,
    pub method: Method,
    pub oracle_id: String,
    pub init_policy: String,
    pub budget_ratio: f64,
    pub n_keep: usize,
    pub seed: Option<u64>,
    pub masked_mse: f64,
}

fn sort_rows(rows: &mut [CurveRow]) {
    rows.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.method.as_str().cmp(b.method.as_str()))
            .then(a.init_policy.cmp(&b.init_policy))
            .then(a.budget_ratio.total_cmp(&b.budget_ratio))
            .then(a.seed.cmp(&b.seed))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub budgets: Vec<f64>,
    pub random_seeds: Vec<u64>,
    pub init: InitPolicy,
    /// Also emit `kpp_lazy` rows.
    pub include_lazy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budgets: DEFAULT_BUDGETS.to_vec(),
            random_seeds: DEFAULT_SEEDS.to_vec(),
            init: InitPolicy::Central,
            include_lazy: false,
        }
    }
}

/// Rows finished before a failure, plus the failure itself.
#[derive(Debug)]
pub struct PartialRun {
    pub rows: Vec<CurveRow>,
    pub error: KppError,
}

impl From<KppError> for PartialRun {
    fn from(error: KppError) -> Self {
        Self {
            rows: Vec::new(),
            error,
        }
    }
}

fn resolved_budgets(budgets: &[f64], n: usize) -> Result<Vec<Budget>> {
    if budgets.is_empty() {
        return Err(KppError::InvalidArgument("at least one budget is required".into()));
    }
    budgets.iter().map(|&r| resolve_budget(r, n)).collect()
}

fn full_trace(
    objective: &ImageObjective<'_>,
    budgets: &[Budget],
    init: InitPolicy,
    lazy: bool,
) -> Result<SelectionTrace> {
    let largest = budgets
        .iter()
        .copied()
        .max_by_key(|b| b.n_keep)
        .expect("budgets are non-empty");
    if lazy {
        lazy_greedy(objective, largest, init)
    } else {
        kpp_greedy(objective, largest, init)
    }
}

fn kpp_rows(
    id: &str,
    method: Method,
    oracle_id: &str,
    init: InitPolicy,
    trace: &SelectionTrace,
    budgets: &[Budget],
) -> Vec<CurveRow> {
    budgets
        .iter()
        .map(|b| CurveRow {
            image_id: id.to_owned(),
            method,
            oracle_id: oracle_id.to_owned(),
            init_policy: init.to_string(),
            budget_ratio: b.ratio,
            n_keep: b.n_keep,
            seed: None,
            masked_mse: trace.loss_at(b.n_keep).expect("trace covers every budget"),
        })
        .collect()
}

/// Runs `per_image` over the corpus in parallel, keeping completed rows on failure.
fn run_corpus<F>(corpus: &[CorpusImage], per_image: F) -> std::result::Result<Vec<CurveRow>, PartialRun>
where
    F: Fn(&CorpusImage) -> Result<Vec<CurveRow>> + Sync + Send,
{
    let results: Vec<Result<Vec<CurveRow>>> = corpus.par_iter().map(per_image).collect();
    let mut rows = Vec::new();
    let mut first_error = None;
    for result in results {
        match result {
            Ok(r) => rows.extend(r),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    sort_rows(&mut rows);
    match first_error {
        None => Ok(rows),
        Some(error) => Err(PartialRun { rows, error }),
    }
}

fn patches_of(img: &CorpusImage, grid: GridSpec) -> Result<PatchArray> {
    split(&img.image, grid)
}

/// KPP (one full-budget trace per image, reused by prefix) and random rows for every budget.
pub fn evaluate_curves(
    corpus: &[CorpusImage],
    grid: GridSpec,
    oracle: &dyn Oracle,
    config: &EvalConfig,
) -> std::result::Result<Vec<CurveRow>, PartialRun> {
    let budgets = resolved_budgets(&config.budgets, grid.n_patches())?;
    let oracle_id = oracle.id();
    run_corpus(corpus, |img| {
        let truth = patches_of(img, grid)?;
        let objective = ImageObjective::new(oracle, &truth);
        let mut rows = Vec::new();
        let trace = full_trace(&objective, &budgets, config.init, false)?;
        rows.extend(kpp_rows(&img.id, Method::Kpp, &oracle_id, config.init, &trace, &budgets));
        if config.include_lazy {
            let lazy = full_trace(&objective, &budgets, config.init, true)?;
            rows.extend(kpp_rows(&img.id, Method::KppLazy, &oracle_id, config.init, &lazy, &budgets));
        }
        for b in &budgets {
            for &seed in &config.random_seeds {
                let set = random_select(truth.len(), *b, seed, config.init)?;
                rows.push(CurveRow {
                    image_id: img.id.clone(),
                    method: Method::Random,
                    oracle_id: oracle_id.clone(),
                    init_policy: config.init.to_string(),
                    budget_ratio: b.ratio,
                    n_keep: b.n_keep,
                    seed: Some(seed),
                    masked_mse: losses_with_blank(oracle, &truth, &set)?.masked_mse,
                });
            }
        }
        Ok(rows)
    })
}

/// KPP with the central initial patch and without, for every image and budget.
pub fn ablate_init(
    corpus: &[CorpusImage],
    grid: GridSpec,
    oracle: &dyn Oracle,
    budgets: &[f64],
) -> std::result::Result<Vec<CurveRow>, PartialRun> {
    let budgets = resolved_budgets(budgets, grid.n_patches())?;
    let oracle_id = oracle.id();
    run_corpus(corpus, |img| {
        let truth = patches_of(img, grid)?;
        let objective = ImageObjective::new(oracle, &truth);
        let mut rows = Vec::new();
        for init in [InitPolicy::Central, InitPolicy::None] {
            let trace = full_trace(&objective, &budgets, init, false)?;
            rows.extend(kpp_rows(&img.id, Method::Kpp, &oracle_id, init, &trace, &budgets));
        }
        Ok(rows)
    })
}

/// Mean curves keyed by (method, init policy), as (budget, mean) pairs sorted by budget.
pub type CurveMeans = BTreeMap<(Method, String), Vec<(f64, f64)>>;

/// Mean masked MSE per (method, init policy) and budget, over images and seeds.
pub fn curve_means(rows: &[CurveRow]) -> CurveMeans {
    // (budget, sum, count) per series.
    let mut acc: BTreeMap<_, Vec<(f64, f64, usize)>> = BTreeMap::new();
    for row in rows {
        let series = acc
            .entry((row.method, row.init_policy.clone()))
            .or_default();
        match series.iter_mut().find(|(b, _, _)| *b == row.budget_ratio) {
            Some(entry) => {
                entry.1 += row.masked_mse;
                entry.2 += 1;
            }
            None => series.push((row.budget_ratio, row.masked_mse, 1)),
        }
    }
    acc.into_iter()
        .map(|(key, mut series)| {
            series.sort_by(|a, b| a.0.total_cmp(&b.0));
            let means = series.into_iter().map(|(b, s, n)| (b, s / n as f64)).collect();
            (key, means)
        })
        .collect()
}

/// Mean loss with and without the initial patch at one budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationPoint {
    pub budget_ratio: f64,
    pub mean_none: f64,
    pub mean_central: f64,
}

impl AblationPoint {
    pub fn difference(&self) -> f64 {
        self.mean_none - self.mean_central
    }
}

/// Ablation means at every budget below `below`.
pub fn ablation_summary(rows: &[CurveRow], below: f64) -> Vec<AblationPoint> {
    let means = curve_means(rows);
    let none = means.get(&(Method::Kpp, InitPolicy::None.to_string()));
    let central = means.get(&(Method::Kpp, InitPolicy::Central.to_string()));
    let (Some(none), Some(central)) = (none, central) else {
        return Vec::new();
    };
    none.iter()
        .filter(|(b, _)| *b < below)
        .filter_map(|&(b, n)| {
            central
                .iter()
                .find(|(cb, _)| *cb == b)
                .map(|&(_, c)| AblationPoint {
                    budget_ratio: b,
                    mean_none: n,
                    mean_central: c,
                })
        })
        .collect()
}

pub fn format_ablation_summary(points: &[AblationPoint]) -> String {
    if points.is_empty() {
        return "ablation summary: no budgets below 0.1".into();
    }
    let parts: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "r={} none={:.6} central={:.6} none-central={:+.6}",
                p.budget_ratio,
                p.mean_none,
                p.mean_central,
                p.difference()
            )
        })
        .collect();
    format!("ablation summary (budgets < 0.1): {}", parts.join("; "))
}

pub fn write_curves_csv<W: Write>(rows: &[CurveRow], mut out: W) -> Result<()> {
    let io = |e: std::io::Error| KppError::Output(e.to_string());
    writeln!(out, "{CSV_VERSION_LINE}").map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(&mut out);
    if rows.is_empty() {
        w.write_record([
            "image_id",
            "method",
            "oracle_id",
            "init_policy",
            "budget_ratio",
            "n_keep",
            "seed",
            "masked_mse",
        ])
        .map_err(|e| KppError::Output(e.to_string()))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| KppError::Output(e.to_string()))?;
    }
    w.flush().map_err(io)
}

pub fn read_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let body = text.strip_prefix(CSV_VERSION_LINE).ok_or_else(|| {
        KppError::Protocol(format!("CSV does not start with {CSV_VERSION_LINE}"))
    })?;
    csv::Reader::from_reader(body.trim_start_matches(['\r', '\n']).as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| KppError::Protocol(e.to_string())))
        .collect()
}

/// One plotted series in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Axes {
    x_lo: f64,
    x_hi: f64,
    y_hi: f64,
}

impl Axes {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = SVG_W - MARGIN_L - MARGIN_R;
        let h = SVG_H - MARGIN_T - MARGIN_B;
        let fx = if self.x_hi > self.x_lo {
            (x - self.x_lo) / (self.x_hi - self.x_lo)
        } else {
            0.5
        };
        (MARGIN_L + fx * w, MARGIN_T + h * (1.0 - y / self.y_hi))
    }
}

fn axes(means: &CurveMeans) -> Axes {
    let all = means.values().flatten();
    let x_lo = all.clone().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_hi = all.clone().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_max = all.map(|p| p.1).fold(0.0, f64::max);
    Axes {
        x_lo,
        x_hi,
        y_hi: if y_max > 0.0 { y_max * 1.05 } else { 1.0 },
    }
}

fn series_label(method: Method, init: &str) -> String {
    format!("{} ({init})", method.as_str())
}

/// Mean curves mapped to SVG pixel coordinates (larger y is lower loss).
pub fn plot_series(rows: &[CurveRow]) -> Vec<PlotSeries> {
    let means = curve_means(rows);
    let ax = axes(&means);
    means
        .iter()
        .map(|((method, init), pts)| PlotSeries {
            label: series_label(*method, init),
            points: pts.iter().map(|&(x, y)| ax.px(x, y)).collect(),
        })
        .collect()
}

/// Self-contained SVG chart of mean masked MSE against budget ratio, one line per method.
pub fn render_curves_svg(rows: &[CurveRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(KppError::InvalidArgument("no rows to plot".into()));
    }
    let means = curve_means(rows);
    let ax = axes(&means);
    let series = plot_series(rows);
    let (_, y0) = ax.px(ax.x_lo, 0.0);
    let x1 = SVG_W - MARGIN_R;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{y0:.2}" stroke="black"/>"#
    );
    let mut ticks: Vec<f64> = means.values().flatten().map(|p| p.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let (tx, _) = ax.px(t, 0.0);
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.2}" y1="{y0:.2}" x2="{tx:.2}" y2="{:.2}" stroke="black"/><text x="{tx:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
    }
    for i in 0..=4 {
        let v = ax.y_hi * i as f64 / 4.0;
        let (_, ty) = ax.px(ax.x_lo, v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ty:.2}" x2="{MARGIN_L}" y2="{ty:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.4}</text>"#,
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            ty + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">selection ratio</text>"#,
        (MARGIN_L + x1) / 2.0,
        SVG_H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">masked MSE</text>"#,
        (MARGIN_T + y0) / 2.0,
        (MARGIN_T + y0) / 2.0
    );
    for (i, series) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        for (x, y) in &series.points {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = MARGIN_T + 10.0 + 18.0 * i as f64;
        let lx = x1 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            series.label
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(rows: &[CurveRow], path: &Path) -> Result<()> {
    let svg = render_curves_svg(rows)?;
    std::fs::write(path, svg).map_err(|e| KppError::Output(format!("{}: {e}", path.display())))
}

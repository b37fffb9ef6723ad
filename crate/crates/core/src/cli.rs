//! The `kpp` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 oracle failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{KppError, Result};
use crate::harness::{
    ablate_init, ablation_summary, curve_means, evaluate_curves, format_ablation_summary,
    synth_corpus, write_curves_csv, write_svg, CorpusImage, CorpusKind, CorpusSpec, CurveRow,
    EvalConfig, PartialRun, DEFAULT_BUDGETS, DEFAULT_SEEDS,
};
use crate::oracle::{Idw, MeanFill, Oracle};
use crate::oracle_client::{resolve_oracle_url, ClientConfig, OracleClient, RemoteOracle};
use crate::patch_grid::{load_and_resize, split, GridSpec};
use crate::selector::{kpp_greedy, lazy_greedy, resolve_budget, ImageObjective, InitPolicy};
use crate::submodular_lab::{
    bound_ratio, check_diminishing_returns, check_monotone, gain_from_image, make_coverage_function,
    make_modular, make_supermodular_square, random_coverage, write_violations_csv, CheckMode,
    SetFunction, BRUTE_FORCE_MAX, DEFAULT_TOLERANCE,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kpp", version, about = "Greedy key-patch selection for masked image reconstruction")]
pub struct Cli {
    /// Worker threads for candidate evaluation (0 = one per core). Output does not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select key patches of one image and print the selection as JSON.
    Select(SelectArgs),
    /// KPP-vs-random loss curves over a corpus, as CSV (and optionally SVG).
    Eval(EvalArgs),
    /// KPP with and without the central initial patch, as CSV.
    Ablate(AblateArgs),
    /// Check diminishing returns and monotonicity of a set function.
    CheckSubmodular(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleChoice {
    Meanfill,
    Idw,
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = OracleChoice::Idw)]
    pub oracle: OracleChoice,
    /// IDW distance exponent.
    #[arg(long, default_value_t = Idw::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Remote oracle base URL; overrides $KPP_ORACLE_URL.
    #[arg(long)]
    pub oracle_url: Option<String>,
    /// Remote request timeout in seconds.
    #[arg(long, default_value_t = 30)]
    pub oracle_timeout: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 224)]
    pub image_side: usize,
    #[arg(long, default_value_t = 16)]
    pub patch_side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Gradient,
    Checker,
    Blobs,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Directory of PNG/JPEG images; overrides --kind.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Blobs)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Corpus seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    pub ratio: f64,
    /// central, none, or a patch index.
    #[arg(long, default_value = "central")]
    pub init: String,
    /// Use lazy (CELF) greedy.
    #[arg(long)]
    pub lazy: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS.to_vec())]
    pub budgets: Vec<f64>,
    /// Random-baseline seeds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS.to_vec())]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "central")]
    pub init: String,
    /// Also emit lazy-greedy rows.
    #[arg(long)]
    pub lazy: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS.to_vec())]
    pub budgets: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureArg {
    /// Six sets over the universe {1..6}.
    Coverage,
    /// Weights 5, 1, 3, 2, 4.
    Modular,
    /// |S|² over six elements.
    Square,
    /// Random coverage instance (10 sets, universe 15, --seed).
    RandomCoverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exhaustive,
    Sampled,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Built-in fixture; ignored when --image is given.
    #[arg(long, value_enum, default_value_t = FixtureArg::Coverage)]
    pub fixture: FixtureArg,
    /// Check the whole-image gain of this image under --oracle instead of a fixture.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Exhaustive)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Cardinality for the greedy-vs-optimum bound (fixtures only).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Write violations as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub grid: GridArgs,
}

/// JSON emitted by `kpp select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutput {
    pub image: String,
    pub grid: GridOutput,
    pub init: String,
    pub budget: BudgetOutput,
    pub oracle: String,
    pub method: String,
    pub chosen: Vec<usize>,
    pub loss_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutput {
    pub image_side: usize,
    pub patch_side: usize,
    pub grid_side: usize,
    pub n_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetOutput {
    pub ratio: f64,
    pub n_keep: usize,
}

fn exit_code(err: &KppError) -> i32 {
    match err {
        e if e.is_oracle_failure() => EXIT_ORACLE,
        KppError::Io { .. } | KppError::Decode { .. } | KppError::Output(_) => EXIT_IO,
        KppError::Step { source, .. } => exit_code(source),
        _ => EXIT_USAGE,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Select(args) => cmd_select(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::CheckSubmodular(args) => cmd_check_submodular(&args),
    }
}

fn grid_of(args: &GridArgs) -> Result<GridSpec> {
    GridSpec::new(args.image_side, args.patch_side)
}

fn build_oracle(args: &OracleArgs, grid: GridSpec) -> Result<Box<dyn Oracle>> {
    Ok(match args.oracle {
        OracleChoice::Meanfill => Box::new(MeanFill),
        OracleChoice::Idw => Box::new(Idw::new(args.alpha)?),
        OracleChoice::Remote => {
            let url = resolve_oracle_url(args.oracle_url.as_deref()).ok_or_else(|| {
                KppError::InvalidArgument(
                    "remote oracle needs --oracle-url or $KPP_ORACLE_URL".into(),
                )
            })?;
            let config = ClientConfig {
                timeout: std::time::Duration::from_secs(args.oracle_timeout),
                ..ClientConfig::default()
            };
            Box::new(RemoteOracle::connect(OracleClient::new(&url, config)?, grid)?)
        }
    })
}

fn corpus_of(args: &CorpusArgs, grid: GridSpec) -> Result<Vec<CorpusImage>> {
    let kind = match (&args.corpus, args.kind) {
        (Some(dir), _) => CorpusKind::Directory(dir.clone()),
        (None, KindArg::Gradient) => CorpusKind::Gradient,
        (None, KindArg::Checker) => CorpusKind::Checker,
        (None, KindArg::Blobs) => CorpusKind::Blobs,
    };
    synth_corpus(&CorpusSpec {
        kind,
        count: args.count,
        seed: args.seed,
        grid,
    })
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| KppError::Output(e.to_string());
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| KppError::Output(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).map_err(io)?;
            out.flush().map_err(io)
        }
    }
}

pub fn cmd_select(args: &SelectArgs) -> Result<()> {
    let grid = grid_of(&args.grid)?;
    let init: InitPolicy = args.init.parse()?;
    let budget = resolve_budget(args.ratio, grid.n_patches())?;
    let img = load_and_resize(&args.image, grid)?;
    let truth = split(&img, grid)?;
    let oracle = build_oracle(&args.oracle, grid)?;
    let objective = ImageObjective::new(oracle.as_ref(), &truth);
    let trace = if args.lazy {
        lazy_greedy(&objective, budget, init)?
    } else {
        kpp_greedy(&objective, budget, init)?
    };
    let output = SelectionOutput {
        image: args.image.display().to_string(),
        grid: GridOutput {
            image_side: grid.image_side(),
            patch_side: grid.patch_side(),
            grid_side: grid.grid_side(),
            n_patches: grid.n_patches(),
        },
        init: init.to_string(),
        budget: BudgetOutput {
            ratio: budget.ratio,
            n_keep: budget.n_keep,
        },
        oracle: oracle.id(),
        method: if args.lazy { "kpp_lazy" } else { "kpp" }.into(),
        chosen: trace.chosen(),
        loss_after: trace.losses(),
    };
    let mut json = serde_json::to_vec_pretty(&output).map_err(|e| KppError::Output(e.to_string()))?;
    json.push(b'\n');
    write_output(args.out.as_deref(), &json)
}

fn csv_bytes(rows: &[CurveRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_curves_csv(rows, &mut buf)?;
    Ok(buf)
}

fn report_means(rows: &[CurveRow]) {
    for ((method, init), points) in curve_means(rows) {
        let pts: Vec<String> = points.iter().map(|(b, m)| format!("{b}:{m:.6}")).collect();
        eprintln!("mean masked_mse {} init={init}: {}", method.as_str(), pts.join(" "));
    }
}

/// Writes whatever rows exist, then surfaces the failure if there was one.
fn finish(result: std::result::Result<Vec<CurveRow>, PartialRun>, out: Option<&Path>) -> Result<Vec<CurveRow>> {
    match result {
        Ok(rows) => {
            write_output(out, &csv_bytes(&rows)?)?;
            Ok(rows)
        }
        Err(PartialRun { rows, error }) => {
            write_output(out, &csv_bytes(&rows)?)?;
            Err(error)
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let grid = grid_of(&args.grid)?;
    let init: InitPolicy = args.init.parse()?;
    let oracle = build_oracle(&args.oracle, grid)?;
    let corpus = corpus_of(&args.corpus, grid)?;
    let config = EvalConfig {
        budgets: args.budgets.clone(),
        random_seeds: args.seeds.clone(),
        init,
        include_lazy: args.lazy,
    };
    eprintln!("init policy: {init}; oracle: {}; images: {}", oracle.id(), corpus.len());
    let rows = finish(
        evaluate_curves(&corpus, grid, oracle.as_ref(), &config),
        args.out.as_deref(),
    )?;
    report_means(&rows);
    if let Some(svg) = &args.svg {
        write_svg(&rows, svg)?;
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let grid = grid_of(&args.grid)?;
    let oracle = build_oracle(&args.oracle, grid)?;
    let corpus = corpus_of(&args.corpus, grid)?;
    eprintln!("init policies: central, none; oracle: {}; images: {}", oracle.id(), corpus.len());
    let rows = finish(
        ablate_init(&corpus, grid, oracle.as_ref(), &args.budgets),
        args.out.as_deref(),
    )?;
    report_means(&rows);
    eprintln!("{}", format_ablation_summary(&ablation_summary(&rows, 0.1)));
    Ok(())
}

fn fixture(kind: FixtureArg, seed: u64) -> Result<Box<dyn SetFunction>> {
    Ok(match kind {
        FixtureArg::Coverage => Box::new(make_coverage_function(vec![
            vec![1, 2],
            vec![2, 3, 4],
            vec![4, 5],
            vec![6],
            vec![1, 6],
            vec![3, 5],
        ])?),
        FixtureArg::Modular => Box::new(make_modular(vec![5.0, 1.0, 3.0, 2.0, 4.0])?),
        FixtureArg::Square => Box::new(make_supermodular_square(6)?),
        FixtureArg::RandomCoverage => Box::new(random_coverage(10, 15, seed)?),
    })
}

pub fn cmd_check_submodular(args: &CheckArgs) -> Result<()> {
    let mode = match args.mode {
        ModeArg::Exhaustive => CheckMode::Exhaustive,
        ModeArg::Sampled => CheckMode::Sampled {
            trials: args.trials,
            seed: args.seed,
        },
    };
    let mut text = String::new();
    let (dr, mono) = match &args.image {
        Some(path) => {
            let grid = grid_of(&args.grid)?;
            let truth = split(&load_and_resize(path, grid)?, grid)?;
            let oracle = build_oracle(&args.oracle, grid)?;
            let gain = gain_from_image(oracle.as_ref(), &truth)?;
            text.push_str(&format!(
                "function: image gain of {} under {} ({} patches)\n",
                path.display(),
                oracle.id(),
                truth.len()
            ));
            (
                check_diminishing_returns(&gain, mode, args.tolerance)?,
                check_monotone(&gain, mode, args.tolerance)?,
            )
        }
        None => {
            let f = fixture(args.fixture, args.seed)?;
            text.push_str(&format!(
                "function: {:?} fixture ({} elements)\n",
                args.fixture,
                f.ground_size()
            ));
            let dr = check_diminishing_returns(f.as_ref(), mode, args.tolerance)?;
            let mono = check_monotone(f.as_ref(), mode, args.tolerance)?;
            if f.ground_size() <= BRUTE_FORCE_MAX && (1..=f.ground_size()).contains(&args.k) {
                let b = bound_ratio(f.as_ref(), args.k)?;
                text.push_str(&format!(
                    "greedy bound k={}: greedy={} optimum={} ratio={:.6} threshold={:.6}\n",
                    args.k, b.greedy_value, b.optimum_value, b.ratio, b.threshold
                ));
            }
            (dr, mono)
        }
    };
    text.push_str(&format!(
        "mode: {}\ndiminishing returns: {} triples, {} violations, max |deficit| {}\nmonotone: {} pairs, {} violations\n",
        match args.mode {
            ModeArg::Exhaustive => "exhaustive",
            ModeArg::Sampled => "sampled",
        },
        dr.triples_checked,
        dr.violations.len(),
        dr.max_abs_deficit,
        mono.pairs_checked,
        mono.violations.len()
    ));
    if let Some(out) = &args.out {
        let file = std::fs::File::create(out)
            .map_err(|e| KppError::Output(format!("{}: {e}", out.display())))?;
        write_violations_csv(&dr.violations, file)?;
    }
    write_output(None, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_unknown_flags() {
        assert_eq!(main_with_args(["kpp", "--help"]), 0);
        assert_eq!(main_with_args(["kpp", "select", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["kpp"]), EXIT_USAGE);
    }

    #[test]
    fn missing_image_is_io_error() {
        assert_eq!(
            main_with_args(["kpp", "select", "--image", "/nonexistent/x.png", "--oracle", "meanfill"]),
            EXIT_IO
        );
    }

    #[test]
    fn bad_ratio_is_usage_error() {
        assert_eq!(
            main_with_args(["kpp", "select", "--image", "x.png", "--ratio", "1.5"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn remote_without_url_is_usage_error() {
        let err = build_oracle(
            &OracleArgs {
                oracle: OracleChoice::Remote,
                alpha: 2.0,
                oracle_url: Some(String::new()),
                oracle_timeout: 1,
            },
            GridSpec::VIT_B16,
        );
        assert!(matches!(err, Err(KppError::InvalidArgument(_))));
    }
}

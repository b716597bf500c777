//! `mixlasso`: fit penalized mixture regressions on CSV data, run the
//! simulation designs, and score saved fits.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use mixlasso::em::{default_grid, path_lambda_max};
use mixlasso::io::{center_columns, params_document, read_matrix, write_matrix, write_trace, FitDocument};
use mixlasso::multivariate::mv_path_lambda_max;
use mixlasso::simbench::{
    generate, run_replicates, score_coefficients, score_params, sigma_misspec_study, write_sigma_grid, MetricBundle,
    ModelId, Pipeline, PipelineOptions, SimDraw, SimSpec,
};
use mixlasso::{
    bic_select, em_fit, fit_path, initialize, mv_em_fit, mv_fit_path, Dataset, EmConfig, Error, FitResult,
    InitStrategy, MvEmConfig, Sigma2Mode,
};

const EXIT_INPUT: u8 = 1;
const EXIT_DEGENERATE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "mixlasso",
    version,
    about = "Group-lasso penalized EM for mixtures of linear regressions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mixture of univariate-response regressions.
    Fit(FitArgs),
    /// Fit a mixture of multivariate-response regressions with known noise covariance.
    Mvfit(FitArgs),
    /// Run replicates of a simulation design.
    Simulate(SimulateArgs),
    /// Score a saved fit against true parameters.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Predictor matrix, n × p.
    #[arg(long)]
    x: PathBuf,
    /// Responses, n × 1 for `fit`, n × q for `mvfit`.
    #[arg(long)]
    y: PathBuf,
    /// Number of mixtures.
    #[arg(long)]
    k: usize,
    /// Fixed penalty level; skips the grid search.
    #[arg(long, conflicts_with = "lambda_grid")]
    lambda: Option<f64>,
    /// `LEN[:RATIO]` for a log grid below λ_max, or a comma-separated descending list.
    #[arg(long, default_value = "30:0.01")]
    lambda_grid: String,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Re-estimate σ² after each M-step, starting from `--sigma2`.
    #[arg(long)]
    sigma2_adaptive: bool,
    /// q × q response noise covariance (`mvfit` only); defaults to σ² I.
    #[arg(long)]
    sigma_y: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fit document to write. The trace goes next to it as `<stem>.trace.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Subtract column means of x and y before fitting.
    #[arg(long)]
    center: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// M1, M2, M3, M4, MV or sigma-study.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// oracle, pem, psem or initial.
    #[arg(long, default_value = "pem")]
    pipeline: String,
    /// Noise variance supplied to the fit.
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Signal strength of the MV design.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Signal strengths of the sigma-study rows.
    #[arg(long, value_delimiter = ',', default_value = "0.75,1,2")]
    deltas: Vec<f64>,
    /// Supplied σ² values of the sigma-study columns.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1,1.5,2")]
    sigma2_grid: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write the first replicate's data, labels and truth to this directory.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Fit document holding the true parameters.
    #[arg(long)]
    truth: PathBuf,
    /// Data and 1-based true labels; required for `label_error`.
    #[arg(long, requires_all = ["y", "labels"])]
    x: Option<PathBuf>,
    #[arg(long, requires_all = ["x", "labels"])]
    y: Option<PathBuf>,
    #[arg(long, requires_all = ["x", "y"])]
    labels: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a, false),
        Command::Mvfit(a) => cmd_fit(&a, true),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

enum Grid {
    Auto { len: usize, ratio: f64 },
    Explicit(Vec<f64>),
}

fn parse_grid(spec: &str) -> Result<Grid, Error> {
    let bad = || Error::InvalidConfig(format!("cannot parse lambda grid {spec:?}"));
    if spec.contains(',') {
        let values = spec
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        return Ok(Grid::Explicit(values));
    }
    let (len, ratio) = match spec.split_once(':') {
        Some((l, r)) => (
            l.trim().parse().map_err(|_| bad())?,
            r.trim().parse().map_err(|_| bad())?,
        ),
        None => (spec.trim().parse().map_err(|_| bad())?, 0.01),
    };
    Ok(Grid::Auto { len, ratio })
}

fn trace_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fit".into());
    out.with_file_name(format!("{stem}.trace.csv"))
}

fn cmd_fit(a: &FitArgs, multivariate: bool) -> Result<u8, Error> {
    let x = read_matrix(&a.x)?;
    let y = read_matrix(&a.y)?;
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} rows but {} has {}",
            a.x.display(),
            x.nrows(),
            a.y.display(),
            y.nrows()
        )));
    }
    if !multivariate && y.ncols() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} columns; use `mvfit` for multivariate responses",
            a.y.display(),
            y.ncols()
        )));
    }
    if multivariate && a.sigma2_adaptive {
        return Err(Error::InvalidConfig(
            "--sigma2-adaptive is not available for mvfit".into(),
        ));
    }
    let (offsets, x, y) = if a.center {
        let (mx, x) = center_columns(&x);
        let (my, y) = center_columns(&y);
        (Some((mx, my)), x, y)
    } else {
        (None, x, y)
    };
    let data = Dataset::new(x, y)?;

    let mut cfg = EmConfig::new(a.k);
    cfg.max_iter = a.max_iter;
    cfg.conv_tol = a.tol;
    cfg.seed = a.seed;
    cfg.sigma2_mode = if a.sigma2_adaptive {
        Sigma2Mode::Adaptive { initial: a.sigma2 }
    } else {
        Sigma2Mode::Fixed(a.sigma2)
    };
    cfg.validate()?;
    let init = initialize(&data, a.k, &InitStrategy::screen_spectral(a.seed).with_sigma2(a.sigma2))?;

    let fit = if multivariate {
        let q = data.q();
        let sigma_y = match &a.sigma_y {
            Some(path) => read_matrix(path)?,
            None => DMatrix::identity(q, q) * a.sigma2,
        };
        let mv = MvEmConfig { base: cfg, sigma_y };
        mv.validate()?;
        match a.lambda {
            Some(l) => mv_em_fit(&data, &init, &mv.with_lambda(l))?,
            None => {
                let grid = match parse_grid(&a.lambda_grid)? {
                    Grid::Explicit(v) => v,
                    Grid::Auto { len, ratio } => {
                        default_grid(mv_path_lambda_max(&data, &init, &mv.sigma_y)?, len, ratio)
                    }
                };
                bic_select(&mv_fit_path(&data, &init, &grid, &mv)?, &data)?
            }
        }
    } else {
        match a.lambda {
            Some(l) => em_fit(&data, &init, &cfg.with_lambda(l))?,
            None => {
                let grid = match parse_grid(&a.lambda_grid)? {
                    Grid::Explicit(v) => v,
                    Grid::Auto { len, ratio } => default_grid(path_lambda_max(&data, &init)?, len, ratio),
                };
                bic_select(&fit_path(&data, &init, &grid, &cfg)?, &data)?
            }
        }
    };
    write_fit(&fit, offsets, &a.out)?;
    println!(
        "lambda={} iterations={} converged={} support_size={} out={}",
        fit.lambda,
        fit.iterations(),
        fit.converged,
        fit.support.len(),
        a.out.display()
    );
    if fit.degenerate() {
        for w in &fit.trace.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!("warning: degenerate fit (a mixture weight collapsed); result written");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(0)
}

fn write_fit(fit: &FitResult, offsets: Option<(DVector<f64>, DVector<f64>)>, out: &Path) -> Result<(), Error> {
    let mut doc = FitDocument::from_fit(fit);
    if let Some((mx, my)) = offsets {
        doc.x_offsets = Some(mx.iter().copied().collect());
        doc.y_offsets = Some(my.iter().copied().collect());
    }
    doc.save(out)?;
    let tpath = trace_path(out);
    let file = File::create(&tpath).map_err(|source| Error::Io {
        path: tpath.display().to_string(),
        source,
    })?;
    write_trace(&fit.trace, BufWriter::new(file))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8, Error> {
    create_dir(&a.out)?;
    let mut opts = PipelineOptions::new(1);
    opts.sigma2 = a.sigma2;
    opts.em.max_iter = a.max_iter;
    opts.em.conv_tol = a.tol;

    if a.model.eq_ignore_ascii_case("sigma-study") {
        let cells = sigma_misspec_study(&a.deltas, &a.sigma2_grid, a.reps, a.seed, &opts)?;
        let path = a.out.join("sigma_grid.csv");
        let file = File::create(&path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        write_sigma_grid(&cells, BufWriter::new(file))?;
        write_sigma_grid(&cells, io::stdout().lock())?;
        return Ok(0);
    }

    let id: ModelId = a.model.parse()?;
    let mut spec = match id {
        ModelId::MV => SimSpec::mv(a.delta, a.seed),
        other => SimSpec::by_id(other, a.seed)?,
    };
    if let Some(n) = a.n {
        spec = spec.with_n(n);
    }
    if let Some(p) = a.p {
        spec = spec.with_p(p);
    }
    spec.validate()?;
    opts.em.k = spec.k;
    let pipeline: Pipeline = a.pipeline.parse()?;

    if let Some(dir) = &a.export {
        export_draw(&generate(&spec)?, dir)?;
    }
    let table = run_replicates(&spec, pipeline, a.reps, None, &opts)?;
    table.save(&a.out.join("replicates.csv"), &a.out.join("summary.csv"))?;
    table.write_summary_csv(io::stdout().lock())?;
    Ok(0)
}

fn export_draw(draw: &SimDraw, dir: &Path) -> Result<(), Error> {
    create_dir(dir)?;
    let data = &draw.dataset;
    let xh: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    let yh: Vec<String> = (1..=data.q()).map(|l| format!("y{l}")).collect();
    write_matrix(&dir.join("x.csv"), data.x(), Some(&xh))?;
    write_matrix(&dir.join("y.csv"), data.y(), Some(&yh))?;
    let labels = DMatrix::from_iterator(draw.labels.len(), 1, draw.labels.iter().map(|&l| l as f64));
    write_matrix(&dir.join("labels.csv"), &labels, Some(&["label".to_string()]))?;
    params_document(&draw.truth).save(&dir.join("truth.json"))
}

fn subtract_offsets(m: DMatrix<f64>, offsets: &Option<Vec<f64>>, what: &str) -> Result<DMatrix<f64>, Error> {
    match offsets {
        None => Ok(m),
        Some(o) if o.len() != m.ncols() => Err(Error::DimensionMismatch(format!(
            "{what} has {} columns but the fit recorded {} offsets",
            m.ncols(),
            o.len()
        ))),
        Some(o) => Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - o[j])),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<u8, Error> {
    let doc = FitDocument::load(&a.fit)?;
    let params = doc.params()?;
    let truth = FitDocument::load(&a.truth)?.params()?;
    let metrics = match (&a.x, &a.y, &a.labels) {
        (Some(xp), Some(yp), Some(lp)) => {
            let x = subtract_offsets(read_matrix(xp)?, &doc.x_offsets, "x")?;
            let y = subtract_offsets(read_matrix(yp)?, &doc.y_offsets, "y")?;
            let raw = read_matrix(lp)?;
            if raw.ncols() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "{} must have one column",
                    lp.display()
                )));
            }
            let mut labels = Vec::with_capacity(raw.nrows());
            for (i, &v) in raw.iter().enumerate() {
                if v.fract() != 0.0 || v < 1.0 || v > truth.k() as f64 {
                    return Err(Error::Parse {
                        path: lp.display().to_string(),
                        row: i + 1,
                        message: format!("label {v} is not in 1..={}", truth.k()),
                    });
                }
                labels.push(v as usize);
            }
            let dataset = Dataset::new(x, y)?;
            if labels.len() != dataset.n() {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    dataset.n()
                )));
            }
            let draw = SimDraw {
                dataset,
                labels,
                truth,
                covariance: DMatrix::zeros(0, 0),
                snr: f64::NAN,
            };
            score_params(&params, &draw)?
        }
        _ => score_coefficients(&params, &truth)?,
    };
    print_metrics(&metrics);
    Ok(0)
}

fn print_metrics(m: &MetricBundle) {
    let mut out = io::stdout().lock();
    for (key, value) in [
        ("beta_error", m.beta_error),
        ("omega_error", m.omega_error),
        ("label_error", m.label_error),
        ("tpr", m.tpr),
        ("fpr", m.fpr),
    ] {
        let _ = writeln!(out, "{key}={value}");
    }
}

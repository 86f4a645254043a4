use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use sparsekrige::ess::{self, equicorrelation, ess_of_locations, select_eta, SearchConfig};
use sparsekrige::io::{load_csv, make_grid, read_grid_csv, save_csv, write_predictions_csv, ColumnSpec, Dataset};
use sparsekrige::penalized::{PenaltyMode, SolverConfig};
use sparsekrige::simulation::{run_sweep, simulate_grf, uniform_locations, write_sweep_csv, ExperimentConfig, FamilySpec, SiteLabel, SweepRecord};
use sparsekrige::variogram::{empirical_variogram, wls_fit, FitOptions, TemplateComponent, VariogramTemplate, DEFAULT_BINS};
use sparsekrige::workflow::{penalty_weights, predict as predict_grid, LocalK, Method, PredictOptions, SiteProblem};
use sparsekrige::{CorrelationKind, CovarianceModel, Error, LocationSet, Metric, Point};

use crate::config::{read_document, required, resolve};
use crate::UsageError;

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "euclidean" => Ok(Metric::Euclidean),
        "chordal" => Ok(Metric::Chordal),
        _ => Err(format!("unknown metric `{s}` (expected euclidean or chordal)")),
    }
}

fn parse_point(s: &str) -> Result<Point, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `x,y`, got `{s}`"));
    }
    let x = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let y = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok([x, y])
}

fn parse_bbox(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    <[f64; 4]>::try_from(v).map_err(|_| format!("expected `xmin,ymin,xmax,ymax`, got `{s}`"))
}

fn parse_local_k(s: &str) -> Result<LocalK, String> {
    if s == "match-pk" {
        return Ok(LocalK::MatchPk);
    }
    s.parse::<usize>()
        .map(LocalK::Fixed)
        .map_err(|_| format!("expected a neighbor count or `match-pk`, got `{s}`"))
}

fn parse_mode(s: &str) -> Result<PenaltyMode, String> {
    match s {
        "lasso" => Ok(PenaltyMode::Lasso),
        "adaptive" => Ok(PenaltyMode::Adaptive),
        _ => Err(format!("unknown penalty `{s}` (expected lasso or adaptive)")),
    }
}

fn parse_family(s: &str) -> Result<FamilySpec, String> {
    let (name, nu) = match s.split_once(':') {
        Some((n, v)) => (n, Some(v.parse::<f64>().map_err(|e| e.to_string())?)),
        None => (s, None),
    };
    let kind: CorrelationKind = name.parse().map_err(|e: Error| e.to_string())?;
    Ok(FamilySpec { kind, nu })
}

fn parse_site(s: &str) -> Result<SiteLabel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Where observations come from and how to read them.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataArgs {
    /// Observations CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Column with the first coordinate (x, or longitude for chordal data) [default: x].
    #[arg(long)]
    pub x_col: Option<String>,
    /// Column with the second coordinate (y, or latitude) [default: y].
    #[arg(long)]
    pub y_col: Option<String>,
    /// Column with the observed values [default: z].
    #[arg(long)]
    pub value_col: Option<String>,
    /// Field delimiter [default: ,].
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Distance: euclidean, or chordal for (lon, lat) in degrees [default: euclidean].
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
}

impl DataArgs {
    fn spec(&self) -> ColumnSpec {
        let d = ColumnSpec::default();
        ColumnSpec {
            x: self.x_col.clone().unwrap_or(d.x),
            y: self.y_col.clone().unwrap_or(d.y),
            value: self.value_col.clone().unwrap_or(d.value),
            covariates: vec![],
            delimiter: self.delimiter.unwrap_or(d.delimiter),
            metric: self.metric.unwrap_or(d.metric),
        }
    }

    fn load(&self) -> Result<Dataset> {
        let path = required(&self.data, "data")?;
        let ds = load_csv(&path, &self.spec()).with_context(|| format!("loading {}", path.display()))?;
        if ds.is_empty() {
            return Err(Error::Empty(format!("{} has no usable rows", path.display())).into());
        }
        Ok(ds)
    }
}

/// Provenance record written next to every output.
fn write_manifest(out: &Path, command: &str, options: &impl Serialize, inputs: &[&Path], seed: Option<u64>) -> Result<()> {
    let inputs: Vec<_> = inputs
        .iter()
        .map(|p| {
            json!({
                "path": p.display().to_string(),
                "bytes": std::fs::metadata(p).map(|m| m.len()).ok(),
            })
        })
        .collect();
    let manifest = json!({
        "tool": "sparsekrige",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "options": options,
        "inputs": inputs,
        "output": out.display().to_string(),
        "seed": seed,
        "threads": rayon::current_num_threads(),
    });
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn load_model(path: &Path) -> Result<CovarianceModel> {
    CovarianceModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Comma-separated component families, e.g. `spherical,spherical` [default: spherical].
    #[arg(long, value_delimiter = ',')]
    pub template: Option<Vec<CorrelationKind>>,
    /// Smoothness for Matérn components [default: 1.5].
    #[arg(long)]
    pub nu: Option<f64>,
    /// Fit without a nugget.
    #[arg(long)]
    pub no_nugget: bool,
    /// Number of equal-width lag bins [default: 15].
    #[arg(long)]
    pub bins: Option<usize>,
    /// Largest lag [default: half the largest pairwise distance].
    #[arg(long)]
    pub max_lag: Option<f64>,
    /// Initial parameters `sill1,scale1,...,nugget` for the first start.
    #[arg(long, value_delimiter = ',')]
    pub init: Option<Vec<f64>>,
    /// Optimizer starts [default: 8].
    #[arg(long)]
    pub starts: Option<usize>,
    /// Seed for the random starts [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fitted model JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Empirical variogram CSV [default: next to --out].
    #[arg(long)]
    pub variogram: Option<PathBuf>,
}

pub fn fit_variogram(args: FitArgs, cfg: Option<&Path>) -> Result<()> {
    let a = resolve(args, cfg)?;
    let out = required(&a.out, "out")?;
    let ds = a.data.load()?;
    let kinds = a.template.clone().unwrap_or_else(|| vec![CorrelationKind::Spherical]);
    if kinds.is_empty() {
        return Err(UsageError("--template needs at least one family".into()).into());
    }
    let template = VariogramTemplate {
        components: kinds
            .iter()
            .map(|&kind| TemplateComponent { kind, nu: (kind == CorrelationKind::Matern).then_some(a.nu.unwrap_or(1.5)) })
            .collect(),
        nugget: !a.no_nugget,
    };
    let opts = FitOptions {
        starts: a.starts.unwrap_or(8),
        seed: a.seed.unwrap_or(0),
        ..FitOptions::default()
    };
    let emp = empirical_variogram(&ds.locations, &ds.values, a.bins.unwrap_or(DEFAULT_BINS), a.max_lag)?;
    let vpath = a.variogram.clone().unwrap_or_else(|| out.with_extension("variogram.csv"));
    emp.write_csv(create(&vpath)?)?;
    let (fit, failure) = match wls_fit(&emp, &template, a.init.as_deref(), &opts) {
        Ok(f) => (f, None),
        Err(Error::FitFailed(f)) => {
            let f = *f;
            (f.clone(), Some(Error::FitFailed(Box::new(f))))
        }
        Err(e) => return Err(e.into()),
    };
    fit.model.save(&out)?;
    write_manifest(&out, "fit-variogram", &a, &[a.data.data.as_deref().unwrap()], Some(opts.seed))?;
    let m = &fit.model;
    for (i, c) in m.components.iter().enumerate() {
        println!("component {}: {} sill {:.6} scale {:.6}", i + 1, c.family.kind, c.sill, c.family.scale);
    }
    println!("nugget {:.6}  total sill {:.6}", m.nugget, m.total_sill());
    println!("objective {:.6e}  converged {}", fit.objective, fit.converged);
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Covariance model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// gk, lk, pk-lasso or pk-adaptive [default: pk-adaptive].
    #[arg(long)]
    pub method: Option<Method>,
    /// Prediction points CSV with x,y columns; otherwise a regular grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Grid columns [default: 50].
    #[arg(long)]
    pub nx: Option<usize>,
    /// Grid rows [default: 50].
    #[arg(long)]
    pub ny: Option<usize>,
    /// Grid box `xmin,ymin,xmax,ymax` [default: bounding box of the data].
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 4]>,
    /// Keep only grid points inside the convex hull of the data.
    #[arg(long)]
    pub hull: bool,
    /// Neighbors for lk: a count or `match-pk` [default: match-pk].
    #[arg(long, value_parser = parse_local_k)]
    pub local_k: Option<LocalK>,
    /// Nearest-neighbor candidate cap [default: 300 when N > 2000, otherwise all].
    #[arg(long)]
    pub knn: Option<usize>,
    /// Solve at this penalty instead of selecting one.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Coarse grid size of the penalty search [default: 150].
    #[arg(long)]
    pub kappa0: Option<usize>,
    /// Refinement points per candidate [default: 10].
    #[arg(long)]
    pub kappa1: Option<usize>,
    /// Add a per-site seconds column.
    #[arg(long)]
    pub timings: bool,
    /// Report variances without the nugget.
    #[arg(long)]
    pub exclude_nugget: bool,
    /// Predictions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn search_config(kappa0: Option<usize>, kappa1: Option<usize>) -> SearchConfig {
    let d = SearchConfig::default();
    SearchConfig {
        kappa0: kappa0.unwrap_or(d.kappa0),
        kappa1: kappa1.unwrap_or(d.kappa1),
        ..d
    }
}

pub fn predict(args: PredictArgs, cfg: Option<&Path>) -> Result<()> {
    let a = resolve(args, cfg)?;
    let out = required(&a.out, "out")?;
    let model_path = required(&a.model, "model")?;
    let model = load_model(&model_path)?;
    let ds = a.data.load()?;
    let grid = match &a.grid {
        Some(g) => read_grid_csv(g)?,
        None => {
            let (lo, hi) = match a.bbox {
                Some([x0, y0, x1, y1]) => ([x0, y0], [x1, y1]),
                None => ds.locations.bounding_box(),
            };
            make_grid(lo, hi, a.nx.unwrap_or(50), a.ny.unwrap_or(50), a.hull.then_some(&ds.locations))?
        }
    };
    let opts = PredictOptions {
        method: a.method.unwrap_or(Method::PkAdaptive),
        local_k: a.local_k.unwrap_or(LocalK::MatchPk),
        knn: a.knn,
        search: search_config(a.kappa0, a.kappa1),
        solver: SolverConfig::default(),
        forced_eta: a.eta,
        timings: a.timings,
        include_nugget: !a.exclude_nugget,
    };
    let rows = predict_grid(&ds.locations, &ds.values, &model, &grid, &opts)?;
    write_predictions_csv(create(&out)?, &rows, opts.timings)?;
    let mut inputs = vec![a.data.data.as_deref().unwrap(), model_path.as_path()];
    if let Some(g) = &a.grid {
        inputs.push(g);
    }
    write_manifest(&out, "predict", &a, &inputs, None)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!("{} sites predicted, {failed} failed; written to {}", rows.len(), out.display());
    if failed > 0 {
        log::warn!("{failed} sites failed; see the error column");
    }
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Number of simulated locations.
    #[arg(long)]
    pub n_locations: Option<usize>,
    /// Families, e.g. `exponential,spherical,matern:1.5`.
    #[arg(long, value_delimiter = ',', value_parser = parse_family)]
    pub families: Option<Vec<FamilySpec>>,
    /// Practical ranges, ascending.
    #[arg(long, value_delimiter = ',')]
    pub pr_grid: Option<Vec<f64>>,
    /// Sites among FN, AN, DN, SN, CN.
    #[arg(long, value_delimiter = ',', value_parser = parse_site)]
    pub sites: Option<Vec<SiteLabel>>,
    /// lasso or adaptive.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PenaltyMode>,
    /// Location seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn experiment_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let doc = read_document(path)?;
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let field = e.path().to_string();
        Error::Config { field, message: e.into_inner().to_string() }.into()
    })
}

fn print_summary(records: &[SweepRecord]) {
    println!("{:<12} {:>5} {:>7} {:>5} {:>10} {:>10}", "family", "site", "pr", "nnz", "pk_inc_%", "lk_inc_%");
    for r in records {
        println!(
            "{:<12} {:>5} {:>7} {:>5} {:>10.3} {:>10.3}",
            r.family,
            r.site.to_string(),
            r.pr,
            r.nnz,
            r.rel_pk_pct(),
            r.rel_lk_pct()
        );
    }
    let wins = records.iter().filter(|r| r.var_pk <= r.var_lk).count();
    println!("var_pk <= var_lk in {wins}/{} cells", records.len());
}

pub fn sweep(a: SweepArgs, cfg: Option<&Path>) -> Result<()> {
    let out = required(&a.out, "out")?;
    let mut config = experiment_config(cfg)?;
    if let Some(n) = a.n_locations {
        config.n_locations = n;
    }
    if let Some(f) = &a.families {
        config.families = f.clone();
    }
    if let Some(p) = &a.pr_grid {
        config.pr_grid = p.clone();
    }
    if let Some(s) = &a.sites {
        config.sites = s.clone();
    }
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let records = run_sweep(&config)?;
    write_sweep_csv(create(&out)?, &records)?;
    let inputs: Vec<&Path> = cfg.into_iter().collect();
    write_manifest(&out, "sweep", &config, &inputs, Some(config.seed))?;
    print_summary(&records);
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EssArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Covariance model JSON (with --data).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Restrict to the --k nearest neighbors of this point `x,y`.
    #[arg(long, value_parser = parse_point)]
    pub at: Option<Point>,
    /// Neighborhood size with --at.
    #[arg(long)]
    pub k: Option<usize>,
    /// Size of a synthetic equicorrelated sample instead of data.
    #[arg(long)]
    pub equicorrelated: Option<usize>,
    /// Common correlation of the equicorrelated sample.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Report JSON (printed to stdout as well).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn ess_command(a: &EssArgs) -> Result<serde_json::Value> {
    if let Some(k) = a.equicorrelated {
        let rho = required(&a.rho, "rho")?;
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Argument(format!("rho must lie in [0, 1], got {rho}")).into());
        }
        let all: Vec<usize> = (0..k).collect();
        let rep = ess::ess(&equicorrelation(k, rho), &all)?;
        let closed = k as f64 / (1.0 + (k as f64 - 1.0) * rho);
        return Ok(json!({
            "source": "equicorrelated",
            "k": k,
            "rho": rho,
            "n_ess": rep.n_ess,
            "redundancy": rep.redundancy,
            "closed_form": closed,
        }));
    }
    let model = load_model(&required(&a.model, "model")?)?;
    let ds = a.data.load()?;
    let idx: Vec<usize> = match a.at {
        Some(s0) => {
            let k = required(&a.k, "k")?;
            sparsekrige::knn_candidates(&ds.locations, s0, k)?
        }
        None => (0..ds.len()).collect(),
    };
    let rep = ess_of_locations(&ds.locations, &idx, &model)?;
    Ok(json!({
        "source": ds.name,
        "k": rep.k,
        "n_ess": rep.n_ess,
        "redundancy": rep.redundancy,
    }))
}

pub fn ess(args: EssArgs, cfg: Option<&Path>) -> Result<()> {
    let a = resolve(args, cfg)?;
    let report = ess_command(&a)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, text + "\n")?;
        let mut inputs: Vec<&Path> = vec![];
        inputs.extend(a.data.data.as_deref());
        inputs.extend(a.model.as_deref());
        write_manifest(out, "ess", &a, &inputs, None)?;
    }
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Covariance model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Prediction site `x,y`.
    #[arg(long, value_parser = parse_point)]
    pub at: Option<Point>,
    /// lasso or adaptive [default: adaptive].
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PenaltyMode>,
    /// Nearest-neighbor candidate cap [default: 300 when N > 2000, otherwise all].
    #[arg(long)]
    pub knn: Option<usize>,
    /// Coarse grid size of the penalty search [default: 150].
    #[arg(long)]
    pub kappa0: Option<usize>,
    /// Refinement points per candidate [default: 10].
    #[arg(long)]
    pub kappa1: Option<usize>,
    /// Trace CSV (eta, nnz, n_ess, s, v, score).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn trace_eta(args: TraceArgs, cfg: Option<&Path>) -> Result<()> {
    let a = resolve(args, cfg)?;
    let out = required(&a.out, "out")?;
    let s0 = required(&a.at, "at")?;
    let model_path = required(&a.model, "model")?;
    let model = load_model(&model_path)?;
    let ds = a.data.load()?;
    let opts = PredictOptions { knn: a.knn, ..PredictOptions::default() };
    let candidates = match opts.candidate_cap(ds.len()) {
        Some(k) => sparsekrige::knn_candidates(&ds.locations, s0, k)?,
        None => (0..ds.len()).collect(),
    };
    let sp = SiteProblem::new(&ds.locations, &candidates, &ds.values, &model, s0)?;
    let gk = sp.global()?;
    let rp = sp.reduced()?;
    let mode = a.mode.unwrap_or(PenaltyMode::Adaptive);
    let weights = penalty_weights(mode, &gk.weights, rp.p, rp.dim());
    let sel = select_eta(&rp, &sp.correlation(), &weights, &search_config(a.kappa0, a.kappa1), &SolverConfig::default())?;
    sel.trace.write_csv(create(&out)?)?;
    write_manifest(&out, "trace-eta", &a, &[a.data.data.as_deref().unwrap(), model_path.as_path()], None)?;
    println!(
        "eta* {:e}  nnz {}  variance {:.6}  global variance {:.6}  evaluations {}",
        sel.eta_star,
        sel.solution.nnz(),
        sel.solution.variance,
        gk.variance,
        sel.evaluations
    );
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    /// Covariance model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Locations CSV with x,y columns; otherwise uniform on the unit square.
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// Distance for --locations [default: euclidean].
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
    /// Number of uniform locations [default: 500].
    #[arg(long)]
    pub n: Option<usize>,
    /// Constant mean [default: 0].
    #[arg(long)]
    pub mean: Option<f64>,
    /// Random seed [default: 2024].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV with x, y, z columns.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn simulate(args: SimulateArgs, cfg: Option<&Path>) -> Result<()> {
    let a = resolve(args, cfg)?;
    let out = required(&a.out, "out")?;
    let model_path = required(&a.model, "model")?;
    let model = load_model(&model_path)?;
    let seed = a.seed.unwrap_or(2024);
    let locs = match &a.locations {
        Some(p) => LocationSet::new(read_grid_csv(p)?, a.metric.unwrap_or_default())?,
        None => uniform_locations(a.n.unwrap_or(500), seed)?,
    };
    let z = simulate_grf(&locs, &model, a.mean.unwrap_or(0.0), seed)?;
    let spec = ColumnSpec { metric: locs.metric(), ..ColumnSpec::default() };
    let ds = Dataset {
        name: "simulated".into(),
        locations: locs,
        values: z,
        covariates: vec![],
        units: None,
        dropped: 0,
    };
    save_csv(&ds, &out, &spec)?;
    let mut inputs = vec![model_path.as_path()];
    inputs.extend(a.locations.as_deref());
    write_manifest(&out, "simulate", &a, &inputs, Some(seed))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{} values written to {}", ds.len(), out.display())?;
    Ok(())
}

//! Config-driven experiment runner.
//!
//! One JSON document describes one experiment; `run` writes CSV and JSON
//! outputs into a directory and `validate` checks a config without running
//! it. Outputs are byte-deterministic: numbers use the fixed 17-digit
//! format, random draws are seeded, and every file records the SHA-256 of
//! the config bytes it was produced from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dose_model::{self, ParamPoint, PeakFamily};
use crate::eud::EudError;
use crate::histogram::{dvh_curve, volume_above, HistogramError, QuadratureSpec, Region};
use crate::objective::{
    self, make_f1, make_f2, Constraint, ObjectiveError, ObjectiveSpec, Scalar1d,
    DEFAULT_ALPHA_LOC,
};
use crate::optimizer::{
    bfgs_run, convergence_classify, newton1d_run, Newton1dOptions, OptimizerError,
    QuasiNewtonOptions, Termination, Trace,
};
use crate::smoothness::{
    fd_second_derivative, holder_exponent, lambda_proximity, locate_lambda_1d,
    step_scaling_probe, ExponentFit, SmoothnessError, Stencil,
};
use crate::{fmt_float, Side};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl ExperimentError {
    /// 2 for config/usage problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for ExperimentError {
            fn from(e: $ty) -> Self {
                ExperimentError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    dose_model::DoseModelError,
    HistogramError,
    EudError,
    ObjectiveError,
    OptimizerError,
    SmoothnessError
);

/// Uniform grid with exact endpoints; interior nodes use the convex-sum
/// formula so symmetric grids hit 0.0 exactly.
#[derive(Debug, Clone, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        if self.count <= 1 {
            return vec![self.start];
        }
        let n = self.count - 1;
        (0..=n)
            .map(|k| (self.start * (n - k) as f64 + self.stop * k as f64) / n as f64)
            .collect()
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.count == 0 || !(self.start.is_finite() && self.stop.is_finite()) {
            return Err(ExperimentError::Config("invalid grid spec".into()));
        }
        if self.count > 1 && !(self.stop > self.start) {
            return Err(ExperimentError::Config(
                "grid needs stop > start for count > 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DoseGrid {
    Values(Vec<f64>),
    Linspace(GridSpec),
}

impl DoseGrid {
    fn points(&self) -> Vec<f64> {
        match self {
            DoseGrid::Values(v) => v.clone(),
            DoseGrid::Linspace(g) => g.points(),
        }
    }
}

fn default_tol() -> f64 {
    1e-13
}

fn default_max_iter() -> usize {
    200
}

fn default_alpha_loc() -> f64 {
    DEFAULT_ALPHA_LOC
}

fn default_example1_starts() -> Vec<f64> {
    vec![-5.0, 0.0, 20.0]
}

fn default_example2_starts() -> Vec<f64> {
    vec![-0.5, -0.1, 1.0]
}

fn default_probe_starts() -> Vec<f64> {
    vec![-0.5, -0.1, -0.02]
}

fn default_sides() -> Vec<Side> {
    vec![Side::Left, Side::Right]
}

fn default_search_box() -> Region {
    Region::Box {
        lo: [-8.0; 3],
        hi: [8.0; 3],
    }
}

fn default_proximity_threshold() -> f64 {
    0.05
}

#[derive(Debug, Deserialize)]
pub struct Example1Params {
    #[serde(default = "default_example1_starts")]
    pub starts: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    pub sample_grid: GridSpec,
}

#[derive(Debug, Deserialize)]
pub struct Example2Params {
    #[serde(default = "default_alpha_loc")]
    pub alpha_loc: f64,
    #[serde(default = "default_example2_starts")]
    pub starts: Vec<f64>,
    #[serde(default = "default_probe_starts")]
    pub probe_starts: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    pub sample_grid: GridSpec,
    #[serde(default)]
    pub extra_sigmas: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct DvhDumpParams {
    pub family: PeakFamily,
    pub sigmas: Vec<ParamPoint>,
    pub region: Region,
    pub quad: QuadratureSpec,
    pub doses: DoseGrid,
}

#[derive(Debug, Deserialize)]
pub struct LambdaScanParams {
    pub family: PeakFamily,
    pub h: f64,
    pub weight_index: usize,
    pub bracket: [f64; 2],
    pub base_weights: Vec<f64>,
    #[serde(default)]
    pub track_point: usize,
    #[serde(default = "default_search_box")]
    pub search_box: Region,
    pub probe_region: Region,
    pub probe_quad: QuadratureSpec,
    pub probe_steps: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct ExponentProbeParams {
    /// Closed-form target: "f1" or "f2".
    pub target: String,
    #[serde(default = "default_alpha_loc")]
    pub alpha_loc: f64,
    pub sigma_star: f64,
    #[serde(default = "default_sides")]
    pub sides: Vec<Side>,
    #[serde(default)]
    pub probe_steps: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TermSpec {
    pub region: Region,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    List(Vec<Vec<f64>>),
    Random { random: RandomStarts },
}

#[derive(Debug, Clone, Deserialize)]
pub struct RandomStarts {
    pub count: usize,
    pub seed: u64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Fd,
    Analytic,
}

fn default_gradient_mode() -> GradientMode {
    GradientMode::Fd
}

#[derive(Debug, Clone, Deserialize)]
pub struct BfgsOptionsSpec {
    #[serde(default = "default_bfgs_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_wolfe_c1")]
    pub wolfe_c1: f64,
    #[serde(default = "default_wolfe_c2")]
    pub wolfe_c2: f64,
    #[serde(default = "default_curvature_skip_tol")]
    pub curvature_skip_tol: f64,
}

fn default_bfgs_grad_tol() -> f64 {
    1e-6
}
fn default_fd_step() -> f64 {
    1e-3
}
fn default_wolfe_c1() -> f64 {
    1e-4
}
fn default_wolfe_c2() -> f64 {
    0.9
}
fn default_curvature_skip_tol() -> f64 {
    1e-10
}

impl Default for BfgsOptionsSpec {
    fn default() -> Self {
        Self {
            grad_tol: default_bfgs_grad_tol(),
            max_iter: default_max_iter(),
            fd_step: default_fd_step(),
            wolfe_c1: default_wolfe_c1(),
            wolfe_c2: default_wolfe_c2(),
            curvature_skip_tol: default_curvature_skip_tol(),
        }
    }
}

impl BfgsOptionsSpec {
    fn to_options(&self) -> QuasiNewtonOptions {
        QuasiNewtonOptions {
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            fd_step: self.fd_step,
            wolfe_c1: self.wolfe_c1,
            wolfe_c2: self.wolfe_c2,
            curvature_skip_tol: self.curvature_skip_tol,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct LambdaMonitorSpec {
    pub h: f64,
    #[serde(default)]
    pub track_point: usize,
    #[serde(default = "default_search_box")]
    pub search_box: Region,
    #[serde(default = "default_proximity_threshold")]
    pub proximity_threshold: f64,
}

#[derive(Debug, Deserialize)]
pub struct BfgsRunParams {
    pub family: PeakFamily,
    pub terms: Vec<TermSpec>,
    pub quad: QuadratureSpec,
    pub starts: StartSpec,
    #[serde(default)]
    pub options: BfgsOptionsSpec,
    #[serde(default = "default_gradient_mode")]
    pub gradient: GradientMode,
    #[serde(default)]
    pub lambda_monitor: Option<LambdaMonitorSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentKind {
    Example1(Example1Params),
    Example2(Example2Params),
    DvhDump(DvhDumpParams),
    LambdaScan(LambdaScanParams),
    ExponentProbe(ExponentProbeParams),
    BfgsRun(BfgsRunParams),
}

#[derive(Debug, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: ExperimentKind,
}

/// Parsed config plus the hash of the exact bytes it came from.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ExperimentError> {
    let bytes = fs::read(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_slice(&bytes)
        .map_err(|e| ExperimentError::Config(format!("cannot parse {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    validate(&config)?;
    Ok(LoadedConfig { config, hash })
}

/// Semantic validation beyond what serde enforces.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    if cfg.name.is_empty() || !cfg.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(ExperimentError::Config(
            "name must be non-empty and use only [A-Za-z0-9_-]".into(),
        ));
    }
    let bad = |msg: String| Err(ExperimentError::Config(msg));
    match &cfg.kind {
        ExperimentKind::Example1(p) => {
            if p.starts.is_empty() || !(p.tol > 0.0) || p.max_iter == 0 {
                return bad("example1 needs starts, tol > 0, max_iter >= 1".into());
            }
            if p.starts.iter().any(|s| *s <= -10.0) {
                return bad("example1 starts must lie in the domain (> -10)".into());
            }
            p.sample_grid.validate()?;
        }
        ExperimentKind::Example2(p) => {
            if !(p.alpha_loc > 0.0) {
                return bad("example2 needs alpha_loc > 0".into());
            }
            if p.starts.is_empty() || p.probe_starts.is_empty() {
                return bad("example2 needs starts and probe_starts".into());
            }
            if p.probe_starts.iter().any(|s| *s >= 0.0) {
                return bad("example2 probe_starts must be negative (left of the flag)".into());
            }
            p.sample_grid.validate()?;
        }
        ExperimentKind::DvhDump(p) => {
            p.family
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            if p.sigmas.is_empty() {
                return bad("dvh-dump needs at least one sigma".into());
            }
            for s in &p.sigmas {
                s.validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                if s.weights.len() != p.family.dimension() {
                    return bad("sigma length must match the family dimension".into());
                }
            }
            p.region
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            p.quad
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            let doses = p.doses.points();
            if doses.is_empty() || doses.windows(2).any(|w| w[0] >= w[1]) {
                return bad("doses must be a non-empty strictly ascending grid".into());
            }
        }
        ExperimentKind::LambdaScan(p) => {
            p.family
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            if p.weight_index >= p.family.dimension()
                || p.base_weights.len() != p.family.dimension()
            {
                return bad("weight_index/base_weights inconsistent with family".into());
            }
            if !(p.bracket[0] < p.bracket[1]) {
                return bad("bracket needs lo < hi".into());
            }
            for r in [&p.search_box, &p.probe_region] {
                r.validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
            p.probe_quad
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            if p.probe_steps.len() < 5 || p.probe_steps.iter().any(|s| !(s > &0.0)) {
                return bad("probe_steps needs at least 5 positive entries".into());
            }
        }
        ExperimentKind::ExponentProbe(p) => {
            if p.target != "f1" && p.target != "f2" {
                return bad(format!("unknown target {:?} (use \"f1\" or \"f2\")", p.target));
            }
            if !(p.alpha_loc > 0.0) || p.sides.is_empty() {
                return bad("exponent-probe needs alpha_loc > 0 and at least one side".into());
            }
            if let Some(steps) = &p.probe_steps {
                if steps.len() < 5 || steps.iter().any(|s| !(s > &0.0)) {
                    return bad("probe_steps needs at least 5 positive entries".into());
                }
            }
        }
        ExperimentKind::BfgsRun(p) => {
            p.family
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            if p.terms.is_empty() {
                return bad("bfgs-run needs a non-empty constraint list".into());
            }
            for t in &p.terms {
                t.region
                    .validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                t.constraint
                    .validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
            p.quad
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            let dim = p.family.dimension();
            match &p.starts {
                StartSpec::List(list) => {
                    if list.is_empty() || list.iter().any(|s| s.len() != dim) {
                        return bad("starts must be non-empty and match the family dimension".into());
                    }
                }
                StartSpec::Random { random } => {
                    if random.count == 0 || random.lo.len() != dim || random.hi.len() != dim {
                        return bad("random starts need count >= 1 and lo/hi of family dimension".into());
                    }
                    if random.lo.iter().zip(&random.hi).any(|(l, h)| !(l < h)) {
                        return bad("random starts need lo < hi componentwise".into());
                    }
                }
            }
            if p.gradient == GradientMode::Analytic {
                let all_eud = p.terms.iter().all(|t| !t.constraint.is_dose_volume());
                if !all_eud {
                    return bad("analytic gradient requires an EUD-only constraint list".into());
                }
            }
            if let Some(m) = &p.lambda_monitor {
                m.search_box
                    .validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                if !(m.proximity_threshold > 0.0) {
                    return bad("proximity_threshold must be positive".into());
                }
            }
            p.options
                .to_options()
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
    }
    Ok(())
}

/// What a run produced and whether it met its own expectations.
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub ok: bool,
    pub summary: String,
}

pub fn run_file(
    path: &Path,
    out_dir: &Path,
    verbose: bool,
) -> Result<RunOutcome, ExperimentError> {
    let loaded = load_config(path)?;
    run(&loaded, out_dir, verbose)
}

pub fn run(
    loaded: &LoadedConfig,
    out_dir: &Path,
    verbose: bool,
) -> Result<RunOutcome, ExperimentError> {
    fs::create_dir_all(out_dir)?;
    let ctx = Ctx {
        name: &loaded.config.name,
        hash: &loaded.hash,
        out_dir,
        verbose,
    };
    match &loaded.config.kind {
        ExperimentKind::Example1(p) => run_example1(&ctx, p),
        ExperimentKind::Example2(p) => run_example2(&ctx, p),
        ExperimentKind::DvhDump(p) => run_dvh_dump(&ctx, p),
        ExperimentKind::LambdaScan(p) => run_lambda_scan(&ctx, p),
        ExperimentKind::ExponentProbe(p) => run_exponent_probe(&ctx, p),
        ExperimentKind::BfgsRun(p) => run_bfgs(&ctx, p),
    }
}

struct Ctx<'a> {
    name: &'a str,
    hash: &'a str,
    out_dir: &'a Path,
    verbose: bool,
}

impl Ctx<'_> {
    fn comment(&self) -> String {
        format!("config_hash = {}", self.hash)
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}_{suffix}", self.name))
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("[{}] {msg}", self.name);
        }
    }

    fn write(&self, suffix: &str, contents: &str) -> Result<PathBuf, ExperimentError> {
        let p = self.path(suffix);
        fs::write(&p, contents)?;
        self.note(&format!("wrote {}", p.display()));
        Ok(p)
    }
}

fn json_array(values: &[f64]) -> String {
    let inner: Vec<String> = values.iter().map(|v| fmt_float(*v)).collect();
    format!("[{}]", inner.join(","))
}

fn json_fit(fit: &ExponentFit) -> String {
    format!(
        r#"{{"exponent":{},"coefficient":{},"r_squared":{},"sample_range":[{},{}]}}"#,
        fmt_float(fit.exponent),
        fmt_float(fit.coefficient),
        fmt_float(fit.r_squared),
        fmt_float(fit.sample_range.0),
        fmt_float(fit.sample_range.1)
    )
}

fn trace_csv(ctx: &Ctx, suffix: &str, trace: &Trace) -> Result<PathBuf, ExperimentError> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf, Some(&ctx.comment()))?;
    let p = ctx.path(suffix);
    fs::write(&p, buf)?;
    ctx.note(&format!("wrote {}", p.display()));
    Ok(p)
}

fn run_example1(ctx: &Ctx, p: &Example1Params) -> Result<RunOutcome, ExperimentError> {
    let f1 = make_f1();
    let opts = Newton1dOptions {
        tol: p.tol,
        max_iter: p.max_iter,
        ..Default::default()
    };
    let mut files = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, &s0) in p.starts.iter().enumerate() {
        let trace = newton1d_run(&f1, s0, &opts)?;
        let converged = trace.termination == Termination::Converged;
        let class = convergence_classify(&trace, None);
        // A start already at the optimum yields a trace too short to
        // classify; convergence alone counts there.
        let quadratic = match &class {
            Ok(c) => *c == crate::optimizer::ConvergenceClass::Quadratic,
            Err(_) => converged && trace.len() < 5,
        };
        ok &= converged && quadratic;
        notes.push(format!(
            "start {}: {} after {} iterations ({})",
            s0,
            trace.termination.as_str(),
            trace.len() - 1,
            class.map(|c| c.as_str()).unwrap_or("unclassified")
        ));
        files.push(trace_csv(ctx, &format!("trace_{i}.csv"), &trace)?);
    }

    let mut csv = format!("# {}\nsigma,value,first_derivative,second_derivative\n", ctx.comment());
    for s in p.sample_grid.points() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt_float(s),
            fmt_float(f1.value(s)),
            fmt_float(f1.first_derivative(s)),
            fmt_float(f1.second_derivative(s, Side::Right)),
        ));
    }
    files.push(ctx.write("samples.csv", &csv)?);
    Ok(RunOutcome {
        files,
        ok,
        summary: notes.join("; "),
    })
}

fn run_example2(ctx: &Ctx, p: &Example2Params) -> Result<RunOutcome, ExperimentError> {
    let f2 = make_f2(p.alpha_loc)?;
    let opts = Newton1dOptions {
        tol: p.tol,
        max_iter: p.max_iter,
        ..Default::default()
    };
    let mut files = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();

    // Sampling grid with one-sided second-derivative columns at the flag.
    let mut sigmas = p.sample_grid.points();
    sigmas.extend_from_slice(&p.extra_sigmas);
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let mut csv = format!(
        "# {}\nsigma,value,first_derivative,second_derivative_left,second_derivative_right\n",
        ctx.comment()
    );
    for &s in &sigmas {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_float(s),
            fmt_float(f2.value(s)),
            fmt_float(f2.first_derivative(s)),
            fmt_float(f2.second_derivative(s, Side::Left)),
            fmt_float(f2.second_derivative(s, Side::Right)),
        ));
    }
    files.push(ctx.write("samples.csv", &csv)?);

    for (i, &s0) in p.starts.iter().enumerate() {
        let trace = newton1d_run(&f2, s0, &opts)?;
        ok &= trace.termination == Termination::Converged
            || trace.termination == Termination::SpuriousFixedPoint;
        notes.push(format!(
            "start {}: {} after {} iterations",
            s0,
            trace.termination.as_str(),
            trace.len() - 1
        ));
        files.push(trace_csv(ctx, &format!("trace_{i}.csv"), &trace)?);
    }

    let fit = step_scaling_probe(&f2, 0.0, &p.probe_starts, &opts)?;
    notes.push(format!("step-scaling exponent {:.4}", fit.exponent));
    let json = format!(
        r#"{{"config_hash":"{}","sigma_star":{},"starts":{},"step_scaling":{}}}
"#,
        ctx.hash,
        fmt_float(0.0),
        json_array(&p.probe_starts),
        json_fit(&fit)
    );
    files.push(ctx.write("step_scaling.json", &json)?);
    Ok(RunOutcome {
        files,
        ok,
        summary: notes.join("; "),
    })
}

fn run_dvh_dump(ctx: &Ctx, p: &DvhDumpParams) -> Result<RunOutcome, ExperimentError> {
    let doses = p.doses.points();
    // The analytic radial-inversion column applies to a single peak with a
    // ball region centered on it.
    let oracle = match (&p.family.peaks[..], &p.region) {
        ([peak], Region::Ball { center, radius }) if *center == peak.center => {
            let offset = peak.offset;
            let radius = *radius;
            Some(move |w: f64, h: f64| -> f64 {
                if h <= 0.0 {
                    return 1.0;
                }
                let r2 = w / h - offset;
                if r2 <= 0.0 {
                    0.0
                } else {
                    (r2.sqrt().min(radius) / radius).powi(3)
                }
            })
        }
        _ => None,
    };

    let mut files = Vec::new();
    for (i, sigma) in p.sigmas.iter().enumerate() {
        let curve = dvh_curve(&p.family, sigma.as_slice(), &p.region, &doses, &p.quad)?;
        let mut csv = format!("# {}\n", ctx.comment());
        match &oracle {
            Some(f) => {
                csv.push_str("dose,volume,oracle\n");
                for (d, v) in curve.doses.iter().zip(&curve.volumes) {
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        fmt_float(*d),
                        fmt_float(*v),
                        fmt_float(f(sigma.weights[0], *d))
                    ));
                }
            }
            None => {
                csv.push_str("dose,volume\n");
                for (d, v) in curve.doses.iter().zip(&curve.volumes) {
                    csv.push_str(&format!("{},{}\n", fmt_float(*d), fmt_float(*v)));
                }
            }
        }
        files.push(ctx.write(&format!("dvh_{i}.csv"), &csv)?);
    }
    Ok(RunOutcome {
        files,
        ok: true,
        summary: format!("{} curve(s) over {} dose levels", p.sigmas.len(), doses.len()),
    })
}

fn run_lambda_scan(ctx: &Ctx, p: &LambdaScanParams) -> Result<RunOutcome, ExperimentError> {
    let lp = locate_lambda_1d(
        &p.family,
        p.h,
        p.weight_index,
        (p.bracket[0], p.bracket[1]),
        &p.base_weights,
        p.track_point,
        &p.search_box,
    )
    .map_err(|e| match e {
        SmoothnessError::BracketInvalid { .. } => ExperimentError::Config(e.to_string()),
        other => ExperimentError::Runtime(other.to_string()),
    })?;
    ctx.note(&format!(
        "crossing at weight {} (residual {:.2e})",
        lp.sigma[p.weight_index], lp.residual
    ));

    let t_star = lp.sigma[p.weight_index];
    let volume_at = |t: f64| {
        let mut w = p.base_weights.clone();
        w[p.weight_index] = t;
        volume_above(&p.family, &w, &p.probe_region, p.h, &p.probe_quad)
            .expect("validated probe quadrature")
    };

    let mut probe_csv = format!("# {}\nside,step,second_difference\n", ctx.comment());
    let mut fits = Vec::new();
    for side in [Side::Left, Side::Right] {
        let stencil = match side {
            Side::Left => Stencil::Left,
            Side::Right => Stencil::Right,
        };
        for &s in &p.probe_steps {
            let q = fd_second_derivative(volume_at, t_star, s, stencil);
            probe_csv.push_str(&format!(
                "{},{},{}\n",
                match side {
                    Side::Left => "left",
                    Side::Right => "right",
                },
                fmt_float(s),
                fmt_float(q)
            ));
        }
        let fit = holder_exponent(volume_at, t_star, side, &p.probe_steps)?;
        ctx.note(&format!(
            "{:?} exponent {:.4} (r^2 {:.4})",
            side, fit.exponent, fit.r_squared
        ));
        fits.push((side, fit));
    }

    let cp = &lp.critical_point;
    let json = format!(
        r#"{{"config_hash":"{}","dose_level":{},"weight_index":{},"crossing_weight":{},"sigma":{},"residual":{},"critical_point":{{"location":{},"value":{},"morse_signature":[{},{}],"hessian_det":{}}},"exponents":{{"left":{},"right":{}}}}}
"#,
        ctx.hash,
        fmt_float(p.h),
        p.weight_index,
        fmt_float(t_star),
        json_array(&lp.sigma),
        fmt_float(lp.residual),
        json_array(&cp.location),
        fmt_float(cp.value),
        cp.morse_signature.0,
        cp.morse_signature.1,
        fmt_float(cp.hessian_det),
        json_fit(&fits[0].1),
        json_fit(&fits[1].1),
    );
    let mut files = Vec::new();
    files.push(ctx.write("lambda.json", &json)?);
    files.push(ctx.write("probe.csv", &probe_csv)?);
    Ok(RunOutcome {
        files,
        ok: true,
        summary: format!(
            "crossing weight {:.6}; exponents left {:.3} / right {:.3}",
            t_star, fits[0].1.exponent, fits[1].1.exponent
        ),
    })
}

fn run_exponent_probe(ctx: &Ctx, p: &ExponentProbeParams) -> Result<RunOutcome, ExperimentError> {
    let f1;
    let f2;
    let obj: &dyn Scalar1d = if p.target == "f1" {
        f1 = make_f1();
        &f1
    } else {
        f2 = make_f2(p.alpha_loc)?;
        &f2
    };
    let steps = p
        .probe_steps
        .clone()
        .unwrap_or_else(crate::smoothness::default_probe_steps);

    let mut probe_csv = format!("# {}\nside,step,second_difference\n", ctx.comment());
    let mut parts = Vec::new();
    let mut notes = Vec::new();
    for &side in &p.sides {
        let stencil = match side {
            Side::Left => Stencil::Left,
            Side::Right => Stencil::Right,
        };
        for &s in &steps {
            let q = fd_second_derivative(|x| obj.value(x), p.sigma_star, s, stencil);
            probe_csv.push_str(&format!(
                "{},{},{}\n",
                match side {
                    Side::Left => "left",
                    Side::Right => "right",
                },
                fmt_float(s),
                fmt_float(q)
            ));
        }
        let fit = holder_exponent(|x| obj.value(x), p.sigma_star, side, &steps)?;
        notes.push(format!("{side:?}: exponent {:.4}", fit.exponent));
        parts.push(format!(
            r#""{}":{}"#,
            match side {
                Side::Left => "left",
                Side::Right => "right",
            },
            json_fit(&fit)
        ));
    }
    let json = format!(
        r#"{{"config_hash":"{}","target":"{}","sigma_star":{},"exponents":{{{}}}}}
"#,
        ctx.hash,
        p.target,
        fmt_float(p.sigma_star),
        parts.join(",")
    );
    let mut files = Vec::new();
    files.push(ctx.write("exponent.json", &json)?);
    files.push(ctx.write("probe.csv", &probe_csv)?);
    Ok(RunOutcome {
        files,
        ok: true,
        summary: notes.join("; "),
    })
}

fn resolve_starts(spec: &StartSpec) -> Vec<Vec<f64>> {
    match spec {
        StartSpec::List(list) => list.clone(),
        StartSpec::Random { random } => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(random.seed);
            (0..random.count)
                .map(|_| {
                    random
                        .lo
                        .iter()
                        .zip(&random.hi)
                        .map(|(l, h)| rng.gen_range(*l..*h))
                        .collect()
                })
                .collect()
        }
    }
}

fn run_bfgs(ctx: &Ctx, p: &BfgsRunParams) -> Result<RunOutcome, ExperimentError> {
    let spec = ObjectiveSpec::new(
        p.family.clone(),
        p.terms
            .iter()
            .map(|t| (t.region.clone(), t.constraint.clone()))
            .collect(),
        p.quad.clone(),
    )?;
    let opts = p.options.to_options();
    let starts = resolve_starts(&p.starts);

    // Initial critical point for the proximity monitor, refined along each
    // trace by warm starts.
    let monitor_start = match &p.lambda_monitor {
        Some(m) => {
            let points =
                dose_model::find_critical_points(&p.family, &starts[0], &m.search_box, 8)?;
            Some(
                points
                    .get(m.track_point)
                    .ok_or_else(|| {
                        ExperimentError::Runtime(format!(
                            "lambda monitor: no critical point with index {}",
                            m.track_point
                        ))
                    })?
                    .clone(),
            )
        }
        None => None,
    };

    let value_fn = |sigma: &[f64]| objective::objective_value(&spec, sigma).unwrap_or(f64::NAN);
    let mut files = Vec::new();
    let mut run_rows = Vec::new();
    let mut all_converged = true;

    for (i, start) in starts.iter().enumerate() {
        let trace = match p.gradient {
            GradientMode::Fd => {
                let grad_fn = |sigma: &[f64]| {
                    let scale = 1.0 + sigma.iter().fold(0f64, |a, s| a.max(s.abs()));
                    objective::objective_grad_fd(&spec, sigma, opts.fd_step * scale)
                        .unwrap_or_else(|_| vec![f64::NAN; sigma.len()])
                };
                bfgs_run(&value_fn, &grad_fn, start, &opts)?
            }
            GradientMode::Analytic => {
                let grad_fn = |sigma: &[f64]| {
                    objective::objective_grad_analytic(&spec, sigma)
                        .unwrap_or_else(|_| vec![f64::NAN; sigma.len()])
                };
                bfgs_run(&value_fn, &grad_fn, start, &opts)?
            }
        };

        let mut trace = trace;
        // Penalty-seam report: did any step change the sign of a constraint
        // argument?
        let mut args_prev = objective::constraint_arguments(&spec, &trace.iterates[0])?;
        for x in trace.iterates.iter().skip(1) {
            let args = objective::constraint_arguments(&spec, x)?;
            if args
                .iter()
                .zip(&args_prev)
                .any(|(a, b)| a.signum() != b.signum() && *a != 0.0 && *b != 0.0)
            {
                trace.seam_crossed = true;
            }
            args_prev = args;
        }

        let converged = trace.termination == Termination::Converged;
        all_converged &= converged;

        let (min_proximity, slowdown) = match (&p.lambda_monitor, &monitor_start) {
            (Some(m), Some(cp0)) => {
                let mut location = cp0.location;
                let mut min_d = f64::INFINITY;
                for x in &trace.iterates {
                    if let Ok(cp) = dose_model::refine_critical_point(&p.family, x, &location) {
                        location = cp.location;
                        if let Ok(d) = lambda_proximity(&p.family, x, m.h, &cp) {
                            min_d = min_d.min(d);
                        }
                    }
                }
                (
                    (min_d.is_finite()).then_some(min_d),
                    min_d < m.proximity_threshold,
                )
            }
            _ => (None, false),
        };

        let class = convergence_classify(&trace, None)
            .map(|c| format!("\"{}\"", c.as_str()))
            .unwrap_or_else(|_| "null".into());
        run_rows.push(format!(
            r#"{{"start":{},"termination":"{}","iterations":{},"final_value":{},"final_gradient_norm":{},"seam_crossed":{},"min_lambda_proximity":{},"slowdown_flag":{},"classification":{}}}"#,
            json_array(start),
            trace.termination.as_str(),
            trace.len() - 1,
            fmt_float(*trace.values.last().unwrap()),
            fmt_float(*trace.derivative_norms.last().unwrap()),
            trace.seam_crossed,
            min_proximity.map(fmt_float).unwrap_or_else(|| "null".into()),
            slowdown,
            class
        ));
        ctx.note(&format!(
            "start {i}: {} in {} iterations (slowdown {slowdown})",
            trace.termination.as_str(),
            trace.len() - 1
        ));
        files.push(trace_csv(ctx, &format!("trace_{i}.csv"), &trace)?);
    }

    let json = format!(
        "{{\"config_hash\":\"{}\",\"runs\":[{}]}}\n",
        ctx.hash,
        run_rows.join(",")
    );
    files.push(ctx.write("summary.json", &json)?);
    Ok(RunOutcome {
        files,
        ok: all_converged,
        summary: format!(
            "{} run(s), all converged: {all_converged}",
            starts.len()
        ),
    })
}

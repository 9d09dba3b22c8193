use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qlimit::bounds::{
    hl_map, invert_fim, limit_map_transmittance, qfim, sql_map, variance_map_jacobian, variance_map_mc,
    VarianceKind, VarianceMap,
};
use qlimit::estimators::{load_external_reconstructions, run_ensemble, write_ensemble, Estimator, ReconstructionEnsemble};
use qlimit::evaluation::{compare_bounds, mse_map, pixel_histogram, JsonReport};
use qlimit::imgx;
use qlimit::models::{
    analytic_jacobian, load_raster, render, sample_params, write_raster, Family, GridSpec, ParamBounds, ParamVector,
    Transmittance,
};
use qlimit::probe::{expected_counts, sample_ensemble, FrameEnsemble, ProbeConfig};
use qlimit::seed::{derived_seed, rng_for};
use qlimit::table::{write_map_csv, write_matrix_csv};

use crate::config::{EstimatorChoice, RunConfig};
use crate::CliError;

// independent seed streams under the master seed
const STREAM_THETA: u64 = 0;
const STREAM_NBAR: u64 = 1;
const STREAM_FRAMES: u64 = 2;
const STREAM_MLE: u64 = 3;
const STREAM_MC: u64 = 4;
const STREAM_SWEEP: u64 = 100;

pub struct Context {
    pub cfg: RunConfig,
    pub force: bool,
}

/// Parameters of one truth image as stored in `theta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub family: Family,
    pub side: usize,
    pub values: Vec<f64>,
    pub n_bar: f64,
}

enum Truth {
    Param(ParamVector),
    Raster(Transmittance),
}

impl Truth {
    fn image(&self, grid: &GridSpec) -> Transmittance {
        match self {
            Truth::Param(t) => render(t, grid),
            Truth::Raster(t) => t.clone(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

impl Context {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        Self { cfg, force }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn grid(&self) -> Result<GridSpec, CliError> {
        Ok(GridSpec::new(self.cfg.side)?)
    }

    fn probe(&self, n_bar: f64) -> Result<ProbeConfig, CliError> {
        Ok(ProbeConfig::uniform(n_bar, self.cfg.convention, self.grid()?)?)
    }

    /// Creates the output directory and refuses to clobber `names` without `--force`.
    fn claim(&self, names: &[&str]) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.cfg.out)
            .map_err(|e| usage(format!("cannot create output directory {}: {e}", self.cfg.out.display())))?;
        if !self.force {
            for n in names {
                let p = self.path(n);
                if p.exists() {
                    return Err(usage(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn write_resolved(&self, command: &str) -> Result<(), CliError> {
        let p = self.path(&format!("{command}.config"));
        std::fs::write(&p, self.cfg.render()).map_err(|e| usage(format!("cannot write {}: {e}", p.display())))
    }

    fn load_truth(&self) -> Result<Truth, CliError> {
        let grid = self.grid()?;
        if let Some(v) = &self.cfg.theta {
            return Ok(Truth::Param(ParamVector::new(self.cfg.family, v.clone())?));
        }
        let path = match &self.cfg.truth {
            Some(p) => p.clone(),
            None => {
                let p = self.path("theta.json");
                if !p.exists() {
                    return Err(usage(format!(
                        "no truth: set theta=..., truth=PATH, or run generate into {}",
                        self.cfg.out.display()
                    )));
                }
                p
            }
        };
        if !path.exists() {
            return Err(usage(format!("truth file {} not found", path.display())));
        }
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let rec: ThetaRecord =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if rec.side != grid.side() {
                return Err(usage(format!("{} is for side {}, config has {}", path.display(), rec.side, grid.side())));
            }
            return Ok(Truth::Param(ParamVector::new(rec.family, rec.values)?));
        }
        Ok(Truth::Raster(load_raster(&path, &grid)?))
    }

    fn family(&self, truth: Option<&Truth>) -> Family {
        match truth {
            Some(Truth::Param(t)) => t.family,
            _ => self.cfg.family,
        }
    }
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let grid = ctx.grid()?;
    let bounds = ParamBounds::standard(cfg.family, cfg.side);
    if cfg.count == 1 {
        ctx.claim(&["truth.imgx", "theta.json", "generate.config"])?;
        let theta = match &cfg.theta {
            Some(v) => ParamVector::new(cfg.family, v.clone())?,
            None => sample_params(cfg.family, &bounds, derived_seed(cfg.seed, STREAM_THETA))?,
        };
        write_raster(ctx.path("truth.imgx"), &render(&theta, &grid))?;
        let rec = ThetaRecord { family: cfg.family, side: cfg.side, values: theta.values, n_bar: ctx.cfg.single_n_bar()? };
        write_json(&ctx.path("theta.json"), &rec)?;
        println!("wrote {} and {}", ctx.path("truth.imgx").display(), ctx.path("theta.json").display());
        return Ok(());
    }
    ctx.claim(&["truth.imgx", "thetas.json", "generate.config"])?;
    let theta_master = derived_seed(cfg.seed, STREAM_THETA);
    let nbar_master = derived_seed(cfg.seed, STREAM_NBAR);
    let fixed = ctx.cfg.single_n_bar();
    let records: Vec<ThetaRecord> = (0..cfg.count as u64)
        .into_par_iter()
        .map(|i| {
            let theta = sample_params(cfg.family, &bounds, derived_seed(theta_master, i))?;
            let n_bar = match cfg.n_bar_range {
                Some((lo, hi)) if hi > lo => rng_for(derived_seed(nbar_master, i)).random_range(lo..=hi),
                Some((lo, _)) => lo,
                None => fixed.as_ref().copied().map_err(|e| usage(e.to_string()))?,
            };
            Ok(ThetaRecord { family: cfg.family, side: cfg.side, values: theta.values, n_bar })
        })
        .collect::<Result<_, CliError>>()?;
    let n_pix = grid.n_pix();
    let mut data = vec![0f32; cfg.count * n_pix];
    data.par_chunks_mut(n_pix).zip(&records).for_each(|(dst, rec)| {
        let t = render(&ParamVector { family: rec.family, values: rec.values.clone() }, &grid);
        dst.iter_mut().zip(t.0.iter()).for_each(|(d, &v)| *d = v as f32);
    });
    imgx::write_f32(ctx.path("truth.imgx"), cfg.side, cfg.side, cfg.count, &data)?;
    write_json(&ctx.path("thetas.json"), &records)?;
    println!("wrote {} images to {}", cfg.count, ctx.path("truth.imgx").display());
    Ok(())
}

fn frames_for(ctx: &Context, truth: &Transmittance, n_bar: f64, seed: u64) -> Result<FrameEnsemble, CliError> {
    let probe = ctx.probe(n_bar)?;
    let lam = expected_counts(truth, &probe)?;
    Ok(sample_ensemble(&lam, ctx.cfg.frames, derived_seed(seed, STREAM_FRAMES))?)
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let thetas = ctx.path("thetas.json");
    if ctx.cfg.theta.is_none() && ctx.cfg.truth.is_none() && thetas.exists() && !ctx.path("theta.json").exists() {
        return simulate_dataset(ctx, &thetas);
    }
    let truth = ctx.load_truth()?;
    let n_bar = ctx.cfg.single_n_bar()?;
    ctx.claim(&["frames.imgx", "simulate.config"])?;
    let frames = frames_for(ctx, &truth.image(&ctx.grid()?), n_bar, ctx.cfg.seed)?;
    frames.write_imgx(ctx.path("frames.imgx"))?;
    println!("wrote {} frames to {}", frames.len(), ctx.path("frames.imgx").display());
    Ok(())
}

/// One frame per generated image, each at its own `n_bar`.
fn simulate_dataset(ctx: &Context, thetas: &Path) -> Result<(), CliError> {
    ctx.claim(&["frames.imgx", "simulate.config"])?;
    let text = std::fs::read_to_string(thetas).map_err(|e| usage(format!("{}: {e}", thetas.display())))?;
    let records: Vec<ThetaRecord> =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", thetas.display())))?;
    let grid = ctx.grid()?;
    let master = derived_seed(ctx.cfg.seed, STREAM_FRAMES);
    let n_pix = grid.n_pix();
    let mut data = vec![0u32; records.len() * n_pix];
    data.par_chunks_mut(n_pix)
        .zip(&records)
        .enumerate()
        .try_for_each(|(i, (dst, rec))| -> Result<(), CliError> {
            let probe = ctx.probe(rec.n_bar)?;
            let t = render(&ParamVector::new(rec.family, rec.values.clone())?, &grid);
            let lam = expected_counts(&t, &probe)?;
            qlimit::probe::sample_frame_into(&lam, derived_seed(master, i as u64), dst);
            Ok(())
        })?;
    let header = imgx::Header::new(grid.side(), grid.side(), records.len(), imgx::Dtype::U32Le);
    imgx::write(ctx.path("frames.imgx"), &header, &imgx::ImgxData::U32(data))?;
    println!("wrote {} dataset frames to {}", records.len(), ctx.path("frames.imgx").display());
    Ok(())
}

/// Every limit map available for `truth` at `n_bar`. Parametric truths add
/// the Fisher matrix, the covariance bound and both QCRB maps.
struct BoundSet {
    maps: Vec<(String, VarianceMap)>,
    fim: Option<nalgebra::DMatrix<f64>>,
    sigma: Option<nalgebra::DMatrix<f64>>,
    eigen: Option<qlimit::error::EigenReport>,
}

fn compute_bounds(ctx: &Context, truth: &Truth, n_bar: f64, seed: u64) -> Result<BoundSet, CliError> {
    let probe = ctx.probe(n_bar)?;
    let image = truth.image(&probe.grid);
    let lam = expected_counts(&image, &probe)?;
    let mut set = BoundSet { maps: Vec::new(), fim: None, sigma: None, eigen: None };
    if let Truth::Param(theta) = truth {
        let jac = analytic_jacobian(theta, &probe.grid);
        let fim = qfim(&jac, &probe)?;
        let sigma = invert_fim(&fim, ctx.cfg.rcond)?;
        set.maps.push(("qcrb_j".into(), variance_map_jacobian(&jac, &sigma)?));
        if ctx.cfg.mc_samples >= 2 {
            let mc = variance_map_mc(theta, &sigma, &probe.grid, ctx.cfg.mc_samples, derived_seed(seed, STREAM_MC))?;
            set.maps.push(("qcrb_mc".into(), mc));
        }
        set.eigen = Some(sigma.report);
        set.fim = Some(fim.matrix);
        set.sigma = Some(sigma.matrix);
    }
    set.maps.push(("sql".into(), limit_map_transmittance(&lam, &probe, VarianceKind::Sql)?));
    set.maps.push(("hl".into(), limit_map_transmittance(&lam, &probe, VarianceKind::Hl)?));
    set.maps.push(("sql_counts".into(), sql_map(&lam)));
    set.maps.push(("hl_counts".into(), hl_map(&lam)));
    Ok(set)
}

#[derive(Serialize)]
struct BoundsSummary<'a> {
    family: Option<String>,
    theta: Option<&'a [f64]>,
    n_bar: f64,
    convention: String,
    totals: std::collections::BTreeMap<String, f64>,
    excluded_pixels: std::collections::BTreeMap<String, usize>,
    eigenvalues: Option<qlimit::error::EigenReport>,
    mc_jitter: Option<f64>,
}

fn write_bounds(dir: &Path, set: &BoundSet, truth: &Truth, ctx: &Context, n_bar: f64) -> Result<(), CliError> {
    if let Some(f) = &set.fim {
        write_matrix_csv(dir.join("fim.csv"), f)?;
    }
    if let Some(s) = &set.sigma {
        write_matrix_csv(dir.join("sigma.csv"), s)?;
    }
    let mut totals = std::collections::BTreeMap::new();
    let mut excluded = std::collections::BTreeMap::new();
    let mut jitter = None;
    for (name, m) in &set.maps {
        write_map_csv(dir.join(format!("{name}.csv")), &m.values)?;
        totals.insert(name.clone(), m.total);
        excluded.insert(name.clone(), m.excluded);
        if name == "qcrb_mc" {
            jitter = m.jitter;
        }
    }
    let theta = match truth {
        Truth::Param(t) => Some(t),
        Truth::Raster(_) => None,
    };
    let summary = BoundsSummary {
        family: theta.map(|t| t.family.to_string()),
        theta: theta.map(|t| t.values.as_slice()),
        n_bar,
        convention: ctx.cfg.convention.to_string(),
        totals,
        excluded_pixels: excluded,
        eigenvalues: set.eigen,
        mc_jitter: jitter,
    };
    write_json(&dir.join("bounds.json"), &summary)
}

pub fn bounds(ctx: &Context) -> Result<(), CliError> {
    let truth = ctx.load_truth()?;
    let n_bar = ctx.cfg.single_n_bar()?;
    ctx.claim(&["fim.csv", "sigma.csv", "qcrb_j.csv", "qcrb_mc.csv", "sql.csv", "hl.csv", "bounds.json", "bounds.config"])?;
    let set = match compute_bounds(ctx, &truth, n_bar, ctx.cfg.seed) {
        Err(CliError::Lib(e @ qlimit::Error::IllConditioned(_))) => {
            return Err(CliError::Lib(e));
        }
        other => other?,
    };
    write_bounds(&ctx.cfg.out, &set, &truth, ctx, n_bar)?;
    for (name, m) in &set.maps {
        println!("{name:>10}  total {:.6e}", m.total);
    }
    Ok(())
}

fn estimator_for(ctx: &Context, family: Family, seed: u64) -> Result<Estimator, CliError> {
    match ctx.cfg.estimator {
        EstimatorChoice::PlugIn => Ok(Estimator::PlugIn),
        EstimatorChoice::Mle => {
            Ok(Estimator::MaxLikelihood { family, config: ctx.cfg.ml_config(derived_seed(seed, STREAM_MLE)) })
        }
        EstimatorChoice::External => Err(usage("estimator=external has nothing to run; pass recon=PATH to evaluate")),
    }
}

#[derive(Serialize)]
struct EstimateSummary {
    estimator: String,
    frames: usize,
    failures: Vec<qlimit::estimators::FrameFailure>,
}

fn estimate_into(
    ctx: &Context,
    dir: &Path,
    frames: &FrameEnsemble,
    family: Family,
    n_bar: f64,
    seed: u64,
) -> Result<ReconstructionEnsemble, CliError> {
    let probe = ctx.probe(n_bar)?;
    let est = estimator_for(ctx, family, seed)?;
    let recon = run_ensemble(frames, &probe, &est)?;
    write_ensemble(&recon, dir.join("recon.imgx"))?;
    if let Some(fits) = &recon.fits {
        write_json(&dir.join("fits.json"), fits)?;
    }
    let summary = EstimateSummary {
        estimator: recon.provenance.to_string(),
        frames: recon.len(),
        failures: recon.failures.clone(),
    };
    write_json(&dir.join("estimate.json"), &summary)?;
    Ok(recon)
}

fn read_frames(path: &Path) -> Result<FrameEnsemble, CliError> {
    if !path.exists() {
        return Err(usage(format!("frames file {} not found", path.display())));
    }
    Ok(FrameEnsemble::read_imgx(path)?)
}

pub fn estimate(ctx: &Context) -> Result<(), CliError> {
    let n_bar = ctx.cfg.single_n_bar()?;
    let frames_path = ctx.cfg.frames_file.clone().unwrap_or_else(|| ctx.path("frames.imgx"));
    let frames = read_frames(&frames_path)?;
    let truth = ctx.load_truth().ok();
    let family = ctx.family(truth.as_ref());
    ctx.claim(&["recon.imgx", "fits.json", "estimate.json", "estimate.config"])?;
    let recon = estimate_into(ctx, &ctx.cfg.out, &frames, family, n_bar, ctx.cfg.seed)?;
    println!(
        "reconstructed {} frames ({} non-converged) into {}",
        recon.len(),
        recon.failures.len(),
        ctx.path("recon.imgx").display()
    );
    Ok(())
}

fn evaluate_into(
    ctx: &Context,
    dir: &Path,
    truth: &Truth,
    recon: &ReconstructionEnsemble,
    n_bar: f64,
    seed: u64,
) -> Result<JsonReport, CliError> {
    let grid = ctx.grid()?;
    if recon.side() != grid.side() {
        return Err(usage(format!("reconstructions are {0}x{0}, config side is {1}", recon.side(), grid.side())));
    }
    let image = truth.image(&grid);
    let mut report = mse_map(recon, &image)?;
    let set = compute_bounds(ctx, truth, n_bar, seed)?;
    let maps: Vec<VarianceMap> = set.maps.iter().map(|(_, m)| m.clone()).collect();
    compare_bounds(&mut report, &maps)?;
    write_bounds(dir, &set, truth, ctx, n_bar)?;
    write_map_csv(dir.join("mse.csv"), &report.mse_map)?;
    if let (Some(b), Some(v)) = (&report.bias_sq_map, &report.variance_map) {
        write_map_csv(dir.join("bias_sq.csv"), b)?;
        write_map_csv(dir.join("variance.csv"), v)?;
    }
    let mut json = JsonReport::from_report(&report, &maps);
    if let Truth::Param(t) = truth {
        json.truth_family = Some(t.family.to_string());
        json.theta = Some(t.values.clone());
    }
    json.n_bar = n_bar;
    json.convention = ctx.cfg.convention.to_string();
    json.failures = recon.failures.len();
    json.clip_fraction = recon.clip_fraction;
    for name in ["mse", "bias_sq", "variance"] {
        if dir.join(format!("{name}.csv")).exists() {
            json.maps.insert(name.into(), format!("{name}.csv"));
        }
    }
    for (name, _) in &set.maps {
        json.maps.insert(name.clone(), format!("{name}.csv"));
    }
    if let Some(px) = ctx.cfg.pixel {
        let hist = pixel_histogram(recon, px, ctx.cfg.bins)?;
        write_json(&dir.join("histogram.json"), &hist)?;
    }
    std::fs::write(dir.join("report.json"), json.to_json()? + "\n")
        .map_err(|e| usage(format!("cannot write report: {e}")))?;
    Ok(json)
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    if ctx.cfg.n_bar.len() > 1 {
        return reproduce(ctx);
    }
    let n_bar = ctx.cfg.single_n_bar()?;
    let truth = ctx.load_truth()?;
    let recon_path = ctx.cfg.recon.clone().unwrap_or_else(|| ctx.path("recon.imgx"));
    if !recon_path.exists() {
        return Err(usage(format!("reconstruction file {} not found", recon_path.display())));
    }
    ctx.claim(&["report.json", "mse.csv", "evaluate.config"])?;
    let mut recon = load_external_reconstructions(&recon_path)?;
    if ctx.cfg.recon.is_none() {
        recon.provenance = match ctx.cfg.estimator {
            EstimatorChoice::PlugIn => qlimit::estimators::EstimatorKind::PlugIn,
            EstimatorChoice::Mle => qlimit::estimators::EstimatorKind::MaxLikelihood,
            EstimatorChoice::External => qlimit::estimators::EstimatorKind::External,
        };
    }
    if recon.clip_fraction > 0.0 {
        eprintln!("warning: clipped {:.4}% of reconstruction values into [0, 1]", 100.0 * recon.clip_fraction);
    }
    let json = evaluate_into(ctx, &ctx.cfg.out, &truth, &recon, n_bar, ctx.cfg.seed)?;
    print_ratios(n_bar, &json);
    Ok(())
}

fn print_ratios(n_bar: f64, json: &JsonReport) {
    let ratios: Vec<String> = json.ratios.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    println!("n_bar {n_bar}: total MSE {:.6e}; MSE/bound: {}", json.totals.mse, ratios.join(", "));
}

fn sweep_dir(n_bar: f64) -> String {
    format!("n_bar_{n_bar}")
}

/// Truth, then per `n_bar`: frames, bounds, reconstructions and report.
pub fn reproduce(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mut claims: Vec<String> = vec!["sweep.csv".into(), "sweep.json".into()];
    claims.extend(cfg.n_bar.iter().map(|&n| sweep_dir(n)));
    ctx.claim(&claims.iter().map(String::as_str).collect::<Vec<_>>())?;
    let truth = match (&cfg.theta, &cfg.truth) {
        (None, None) if !ctx.path("theta.json").exists() => {
            let bounds = ParamBounds::standard(cfg.family, cfg.side);
            let theta = sample_params(cfg.family, &bounds, derived_seed(cfg.seed, STREAM_THETA))?;
            let rec = ThetaRecord { family: cfg.family, side: cfg.side, values: theta.values.clone(), n_bar: cfg.n_bar[0] };
            write_json(&ctx.path("theta.json"), &rec)?;
            write_raster(ctx.path("truth.imgx"), &render(&theta, &ctx.grid()?))?;
            Truth::Param(theta)
        }
        _ => ctx.load_truth()?,
    };
    let family = ctx.family(Some(&truth));
    let image = truth.image(&ctx.grid()?);
    let mut rows = Vec::new();
    for (i, &n_bar) in cfg.n_bar.iter().enumerate() {
        let dir = ctx.path(&sweep_dir(n_bar));
        std::fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
        let seed = derived_seed(cfg.seed, STREAM_SWEEP + i as u64);
        let frames = frames_for(ctx, &image, n_bar, seed)?;
        frames.write_imgx(dir.join("frames.imgx"))?;
        let recon = match cfg.estimator {
            EstimatorChoice::External => {
                let p = cfg.recon.as_ref().ok_or_else(|| usage("estimator=external needs recon=PATH"))?;
                load_external_reconstructions(p)?
            }
            _ => estimate_into(ctx, &dir, &frames, family, n_bar, seed)?,
        };
        let json = evaluate_into(ctx, &dir, &truth, &recon, n_bar, seed)?;
        print_ratios(n_bar, &json);
        rows.push(json);
    }
    let mut csv = String::from("n_bar,frames,mse,qcrb_j,qcrb_mc,sql,hl,sql_counts,hl_counts,mse_over_qcrb_j,failures\n");
    let opt = |v: Option<f64>| v.map(qlimit::table::format_value).unwrap_or_default();
    for r in &rows {
        let t = &r.totals;
        csv += &format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.n_bar,
            r.frames,
            qlimit::table::format_value(t.mse),
            opt(t.qcrb_j),
            opt(t.qcrb_mc),
            opt(t.sql),
            opt(t.hl),
            opt(t.sql_counts),
            opt(t.hl_counts),
            opt(r.ratios.get("qcrb_j").copied()),
            r.failures
        );
    }
    std::fs::write(ctx.path("sweep.csv"), csv).map_err(|e| usage(format!("cannot write sweep.csv: {e}")))?;
    write_json(&ctx.path("sweep.json"), &rows)?;
    println!("wrote {}", ctx.path("sweep.csv").display());
    Ok(())
}

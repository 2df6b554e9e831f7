//! The five verbs. Each returns the report it wrote so callers can chain them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fluctoscope::eval::{jaccard_index_with, noise_variance_error, psnr, snr, EvalReport};
use fluctoscope::intensity::default_mu0;
use fluctoscope::io::{read_image, read_json, read_stack, write_image, write_json, write_preview, write_stack};
use fluctoscope::support::{estimate_support, estimate_support_with_restarts, lambda_max};
use fluctoscope::{
    empirical_covariance, simulate, Error, ForwardModel, ImageStack, IntensityProblem, IntensitySettings, Regularizer,
    RegularizerKind, Result, SimulationConfig,
};
use log::info;
use ndarray::Array2;
use serde::Serialize;

use crate::config::{ReconstructionConfig, RunConfig};
use crate::report::*;

const DATASET_FILE: &str = "simulation.json";
const RUN_REPORT_FILE: &str = "report.json";
const EVAL_FILE: &str = "eval.json";
const PIPELINE_FILE: &str = "pipeline.json";
const PREVIEW_FILE: &str = "previews.json";

fn write_previews(dir: &Path, images: &[(&str, &Array2<f64>)]) -> Result<PreviewIndex> {
    let mut index = PreviewIndex::new();
    for (name, img) in images {
        let file = format!("{name}.png");
        let scaling = write_preview(&dir.join(&file), img)?;
        index.insert(file, scaling);
    }
    write_json(&dir.join(PREVIEW_FILE), &index)?;
    Ok(index)
}

pub fn cmd_simulate(cfg: &SimulationConfig, out: &Path) -> Result<DatasetReport> {
    std::fs::create_dir_all(out)?;
    info!("simulating {} frames of {}x{} (seed {})", cfg.frames, cfg.coarse_size, cfg.coarse_size, cfg.seed);
    let data = simulate::simulate(cfg)?;
    let files = DatasetFiles::default();
    write_stack(&out.join(&files.stack), &data.stack)?;
    write_stack(&out.join(&files.reference), &data.reference)?;
    write_image(&out.join(&files.phantom), &data.phantom)?;
    write_image(&out.join(&files.gt_intensity), &data.gt_intensity)?;
    write_image(&out.join(&files.gt_background), &data.gt_background)?;
    write_json(&out.join(&files.gt_support), &SupportFile::from(&data.gt_support))?;
    let mean = fluctoscope::empirical_mean(&data.stack)?;
    write_previews(out, &[("mean", &mean), ("gt_intensity", &data.gt_intensity)])?;

    let report = DatasetReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        sigma2_used: data.sigma2_used,
        fine_pixel_nm: cfg.pixel_size_nm / cfg.grid_factor as f64,
        gt_support_pixels: data.gt_support.len(),
        files,
    };
    write_json(&out.join(DATASET_FILE), &report)?;
    Ok(report)
}

/// Stack file and dataset sidecar for an input that is either a stack file
/// or a directory written by `simulate`.
fn locate_input(input: &Path) -> Result<(PathBuf, Option<DatasetReport>)> {
    let (stack, dir) = if input.is_dir() {
        (input.join(DatasetFiles::default().stack), input.to_path_buf())
    } else {
        (input.to_path_buf(), input.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if !stack.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input stack {} not found", stack.display()),
        )));
    }
    let sidecar = dir.join(DATASET_FILE);
    let dataset = if sidecar.exists() { Some(read_json(&sidecar)?) } else { None };
    Ok((stack, dataset))
}

/// Full reconstruction of an in-memory stack.
pub struct Reconstruction {
    pub report: RunReport,
    pub r_x: Array2<f64>,
    pub support: fluctoscope::Support,
    pub x: Array2<f64>,
    pub b: Array2<f64>,
}

pub fn reconstruct_stack(
    stack: &ImageStack,
    rc: &ReconstructionConfig,
    grid_factor: usize,
    fwhm_nm: f64,
    label: String,
) -> Result<Reconstruction> {
    rc.validate()?;
    let available = stack.len();
    let stack = match rc.frames {
        Some(t) if t > available => {
            return Err(Error::Config(format!("requested {t} frames but the stack holds {available}")));
        }
        Some(t) if t < available => stack.truncated(t)?,
        _ => stack.clone(),
    };
    let model = ForwardModel::gaussian(stack.size(), grid_factor, fwhm_nm, stack.pixel_size_nm)?;
    let cov = empirical_covariance(&stack)?;

    let lmax_kind = if rc.regularizer == RegularizerKind::Tv { RegularizerKind::L1 } else { rc.regularizer };
    let lmax = lambda_max(&model, &cov.r_y(), lmax_kind)?;
    let lambda = rc.lambda.unwrap_or(rc.gamma * lmax);
    let reg = Regularizer::new(rc.regularizer, lambda)?;
    let max_restarts = rc.max_restarts();
    info!("support: {} with lambda {lambda:.4e} (lambda_max {lmax:.4e})", rc.regularizer.name());
    let sup = if max_restarts > 0 {
        estimate_support_with_restarts(&model, &cov, &reg, &rc.support, max_restarts)?
    } else {
        estimate_support(&model, &cov, &reg, &rc.support)?
    };
    info!("support: {} pixels, noise variance {:.4e}", sup.support.len(), sup.s);

    let problem = IntensityProblem::new(&model, cov.mean.clone(), sup.support.clone(), sup.s, stack.len(), rc.intensity)?;
    let (result, source, mu0) = match rc.mu {
        Some(mu) => (problem.with_mu(mu)?.solve_fixed()?, MuSource::Fixed, None),
        None => {
            let mu0 = rc.mu0.unwrap_or_else(|| default_mu0(&model));
            (problem.select_mu(mu0)?, MuSource::Discrepancy, Some(mu0))
        }
    };
    if !result.converged {
        log::warn!("discrepancy iteration stopped at mu {:.4e} without meeting its tolerance", result.mu_hat);
    }
    info!("intensity: mu {:.4e}, discrepancy {:.4e}", result.mu_hat, result.f_residual);

    let report = RunReport {
        version: REPORT_VERSION,
        input: InputSummary {
            stack: label,
            frames_available: available,
            frames_used: stack.len(),
            coarse_size: stack.size(),
            pixel_size_nm: stack.pixel_size_nm,
            grid_factor,
            fine_size: model.fine_size(),
            fwhm_nm,
        },
        support: SupportReport {
            regularizer: rc.regularizer,
            gamma: rc.lambda.is_none().then_some(rc.gamma),
            lambda,
            lambda_max: lmax,
            restarts: sup.restarts,
            max_restarts,
            outer_iterations: sup.outer_iterations,
            converged: sup.converged,
            noise_variance: sup.s,
            support_pixels: sup.support.len(),
            trace: sup.trace.clone(),
            options: rc.support,
        },
        intensity: IntensityReport {
            mu_source: source,
            mu0,
            mu_hat: result.mu_hat,
            discrepancy: result.f_residual,
            discrepancy_target: problem.discrepancy_target(),
            converged: result.converged,
            outer_iterations: result.iterations.outer,
            newton_iterations: result.iterations.newton,
            trace: result.trace.clone(),
            settings: IntensitySettings { mu: result.mu_hat, ..rc.intensity },
        },
        files: ReconstructionFiles::default(),
    };
    Ok(Reconstruction { report, r_x: sup.r_x, support: sup.support, x: result.x, b: result.b })
}

pub fn write_reconstruction(rec: &Reconstruction, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let files = &rec.report.files;
    write_image(&out.join(&files.x), &rec.x)?;
    write_image(&out.join(&files.b), &rec.b)?;
    write_image(&out.join(&files.r_x), &rec.r_x)?;
    write_json(&out.join(&files.support), &SupportFile::from(&rec.support))?;
    write_previews(out, &[("x", &rec.x), ("b", &rec.b), ("r_x", &rec.r_x), ("support", &rec.support.mask())])?;
    write_json(&out.join(RUN_REPORT_FILE), &rec.report)
}

fn model_geometry(rc: &ReconstructionConfig, dataset: Option<&DatasetReport>) -> (usize, f64) {
    let fallback = dataset.map_or_else(SimulationConfig::default, |d| d.config.clone());
    (rc.grid_factor.unwrap_or(fallback.grid_factor), rc.fwhm_nm.unwrap_or(fallback.fwhm_nm))
}

pub fn cmd_reconstruct(cfg: &RunConfig, input: &Path, out: &Path, label: Option<String>) -> Result<RunReport> {
    let (stack_path, dataset) = locate_input(input)?;
    let stack = read_stack(&stack_path)?;
    let (q, fwhm) = model_geometry(&cfg.reconstruction, dataset.as_ref());
    let label = label.unwrap_or_else(|| stack_path.display().to_string());
    let rec = reconstruct_stack(&stack, &cfg.reconstruction, q, fwhm, label)?;
    write_reconstruction(&rec, out)?;
    Ok(rec.report)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, recon: &Path, truth: &Path, out: &Path) -> Result<EvaluationDocument> {
    let dataset: DatasetReport = read_json(&require(truth.join(DATASET_FILE))?)?;
    let files = &dataset.files;
    let gt_support: SupportFile = read_json(&require(truth.join(&files.gt_support))?)?;
    let gt_support = gt_support.to_support()?;
    let gt_intensity = read_image(&require(truth.join(&files.gt_intensity))?)?;
    let stack = read_stack(&require(truth.join(&files.stack))?)?;
    let reference = read_stack(&require(truth.join(&files.reference))?)?;

    let run: RunReport = read_json(&require(recon.join(RUN_REPORT_FILE))?)?;
    let est: SupportFile = read_json(&require(recon.join(&run.files.support))?)?;
    let est = est.to_support()?;
    let x = read_image(&require(recon.join(&run.files.x))?)?;

    let ev = &cfg.evaluation;
    let counts = jaccard_index_with(&est, &gt_support, ev.tolerance_nm, dataset.fine_pixel_nm, ev.proposer)?;
    let mut metrics = EvalReport::new(counts, ev.tolerance_nm, ev.proposer);
    metrics.psnr_db = Some(psnr(&x.view(), &gt_intensity.view())?);
    metrics.snr_db = Some(snr(&stack, &reference)?);
    metrics.noise_var_rel_err = Some(noise_variance_error(run.support.noise_variance, dataset.sigma2_used)?);

    std::fs::create_dir_all(out)?;
    // Pixels only in the estimate render dark grey, only in the truth light
    // grey, and in both white.
    let comparison = Array2::from_shape_fn(gt_intensity.dim(), |(r, c)| {
        let i = r + c * gt_intensity.nrows();
        match (est.contains(i), gt_support.contains(i)) {
            (true, true) => 3.0,
            (false, true) => 2.0,
            (true, false) => 1.0,
            (false, false) => 0.0,
        }
    });
    write_previews(out, &[("x", &x), ("gt_intensity", &gt_intensity), ("support_comparison", &comparison)])?;

    let doc = EvaluationDocument {
        version: REPORT_VERSION,
        metrics,
        fine_pixel_nm: dataset.fine_pixel_nm,
        estimated_pixels: est.len(),
        truth_pixels: gt_support.len(),
        files: BTreeMap::from([
            ("previews".to_string(), PREVIEW_FILE.to_string()),
            ("support_comparison".to_string(), "support_comparison.png".to_string()),
        ]),
    };
    write_json(&out.join(EVAL_FILE), &doc)?;
    Ok(doc)
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaMaxReport {
    pub version: u32,
    pub regularizer: RegularizerKind,
    pub lambda_max: f64,
    pub gamma: f64,
    pub lambda: f64,
}

pub fn cmd_lambda_max(cfg: &RunConfig, input: &Path) -> Result<LambdaMaxReport> {
    let (stack_path, dataset) = locate_input(input)?;
    let mut stack = read_stack(&stack_path)?;
    let rc = &cfg.reconstruction;
    if let Some(t) = rc.frames.filter(|&t| t < stack.len()) {
        stack = stack.truncated(t)?;
    }
    let (q, fwhm) = model_geometry(rc, dataset.as_ref());
    let model = ForwardModel::gaussian(stack.size(), q, fwhm, stack.pixel_size_nm)?;
    let cov = empirical_covariance(&stack)?;
    let kind = if rc.regularizer == RegularizerKind::Tv { RegularizerKind::L1 } else { rc.regularizer };
    let lmax = lambda_max(&model, &cov.r_y(), kind)?;
    Ok(LambdaMaxReport {
        version: REPORT_VERSION,
        regularizer: rc.regularizer,
        lambda_max: lmax,
        gamma: rc.gamma,
        lambda: rc.gamma * lmax,
    })
}

pub fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineReport> {
    let (data_dir, recon_dir, eval_dir) = ("data", "recon", "eval");
    let dataset = cmd_simulate(&cfg.simulation, &out.join(data_dir))?;
    let mut rc = cfg.clone();
    // The dataset was simulated with exactly the requested frame count.
    rc.reconstruction.frames = None;
    let run = cmd_reconstruct(
        &rc,
        &out.join(data_dir),
        &out.join(recon_dir),
        Some(format!("{data_dir}/{}", dataset.files.stack)),
    )?;
    let eval = cmd_evaluate(cfg, &out.join(recon_dir), &out.join(data_dir), &out.join(eval_dir))?;
    let report = PipelineReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        dataset: format!("{data_dir}/{DATASET_FILE}"),
        reconstruction: format!("{recon_dir}/{RUN_REPORT_FILE}"),
        evaluation: format!("{eval_dir}/{EVAL_FILE}"),
        mu_hat: run.intensity.mu_hat,
        noise_variance: run.support.noise_variance,
        metrics: eval.metrics,
    };
    write_json(&out.join(PIPELINE_FILE), &report)?;
    Ok(report)
}

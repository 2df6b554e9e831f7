//! Run configuration: built-in defaults, then an optional preset, then a
//! JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use fluctoscope::eval::{Proposer, DEFAULT_TOLERANCE_NM};
use fluctoscope::{preset, Error, IntensitySettings, Preset, RegularizerKind, Result, SimulationConfig, SolverOptions};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Published choice of `λ / λ_max`.
pub const DEFAULT_GAMMA: f64 = 5e-4;
/// Published cap on CEL0 restarts.
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub regularizer: RegularizerKind,
    /// `λ` as a fraction of `λ_max`. Ignored when `lambda` is set.
    pub gamma: f64,
    pub lambda: Option<f64>,
    /// Maximum CEL0 restarts. Defaults to 10 for CEL0 and is invalid otherwise.
    pub restarts: Option<usize>,
    /// Fixed smoothing weight. When absent it is chosen by the discrepancy principle.
    pub mu: Option<f64>,
    /// Starting point of the discrepancy iteration.
    pub mu0: Option<f64>,
    /// Fine-grid refinement factor. Taken from the dataset sidecar when absent.
    pub grid_factor: Option<usize>,
    /// PSF width. Taken from the dataset sidecar when absent.
    pub fwhm_nm: Option<f64>,
    /// Use only the first `frames` frames of the stack.
    pub frames: Option<usize>,
    pub support: SolverOptions,
    pub intensity: IntensitySettings,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            regularizer: RegularizerKind::Cel0,
            gamma: DEFAULT_GAMMA,
            lambda: None,
            restarts: None,
            mu: None,
            mu0: None,
            grid_factor: None,
            fwhm_nm: None,
            frames: None,
            support: SolverOptions::default(),
            intensity: IntensitySettings::default(),
        }
    }
}

impl ReconstructionConfig {
    pub fn max_restarts(&self) -> usize {
        match (self.regularizer, self.restarts) {
            (RegularizerKind::Cel0, r) => r.unwrap_or(DEFAULT_RESTARTS),
            (_, r) => r.unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regularizer != RegularizerKind::Cel0 && self.max_restarts() > 0 {
            return Err(Error::Config("restarts are only defined for the cel0 regularizer".into()));
        }
        if self.lambda.is_none() && !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
        }
        for (name, v) in [("mu", self.mu), ("mu0", self.mu0), ("fwhm_nm", self.fwhm_nm)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
                }
            }
        }
        if self.grid_factor == Some(0) || self.frames.is_some_and(|t| t < 2) {
            return Err(Error::Config("grid_factor must be at least 1 and frames at least 2".into()));
        }
        self.support.validate()?;
        self.intensity.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub tolerance_nm: f64,
    pub proposer: Proposer,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { tolerance_nm: DEFAULT_TOLERANCE_NM, proposer: Proposer::default() }
    }
}

/// Everything a command needs. Paths are kept out so that reports built
/// from the configuration do not depend on where files live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub simulation: SimulationConfig,
    pub reconstruction: ReconstructionConfig,
    pub evaluation: EvaluationConfig,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            simulation: SimulationConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            evaluation: EvaluationConfig::default(),
            threads: None,
        }
    }
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// Simulation preset: LB (low background) or HB (high background).
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Number of frames to simulate, or to use from the input stack.
    #[arg(long = "T", value_name = "FRAMES")]
    pub frames: Option<usize>,
    /// Random seed for simulation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Support regularizer.
    #[arg(long, value_name = "cel0|l1|tv")]
    pub reg: Option<RegularizerKind>,
    /// Regularization weight as a fraction of lambda_max.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Absolute regularization weight; overrides --gamma.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fixed smoothing weight; skips discrepancy-based selection.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Penalty weight of the intensity constraints.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Background smoothing weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Safety factor of the discrepancy target.
    #[arg(long = "nu-dp")]
    pub nu_dp: Option<f64>,
    /// Maximum number of CEL0 restarts.
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Matching tolerance for the Jaccard index, in nanometres.
    #[arg(long = "tolerance-nm")]
    pub tolerance_nm: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (capped by FLUCTOSCOPE_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON configuration file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Recursively overlays `top` onto `base`. Objects merge key by key,
/// anything else is replaced.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
    if !value.is_object() {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
    }
    Ok(value)
}

impl RunConfig {
    /// Resolves defaults, preset, config file and flags, in that order of
    /// increasing precedence.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => read_config_file(p)?,
            None => Value::Object(Default::default()),
        };
        let file_preset: Option<Preset> = match file.get("preset") {
            Some(v) if !v.is_null() => Some(serde_json::from_value(v.clone())?),
            _ => None,
        };
        let chosen = flags.preset.or(file_preset);

        let mut base = serde_json::to_value(RunConfig {
            preset: chosen,
            simulation: chosen.map_or_else(SimulationConfig::default, preset),
            ..RunConfig::default()
        })?;
        merge(&mut base, file);
        let mut cfg: RunConfig = serde_json::from_value(base)
            .map_err(|e| Error::Config(format!("configuration: {e}")))?;
        cfg.preset = chosen;
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, f: &Flags) {
        let (sim, rec) = (&mut self.simulation, &mut self.reconstruction);
        if let Some(t) = f.frames {
            sim.frames = t;
            rec.frames = Some(t);
        }
        if let Some(seed) = f.seed {
            sim.seed = seed;
        }
        if let Some(kind) = f.reg {
            rec.regularizer = kind;
        }
        if let Some(g) = f.gamma {
            rec.gamma = g;
            rec.lambda = None;
        }
        if let Some(l) = f.lambda {
            rec.lambda = Some(l);
        }
        if let Some(mu) = f.mu {
            rec.mu = Some(mu);
        }
        if let Some(a) = f.alpha {
            rec.intensity.alpha = a;
        }
        if let Some(b) = f.beta {
            rec.intensity.beta = b;
        }
        if let Some(nu) = f.nu_dp {
            rec.intensity.nu_dp = nu;
        }
        if let Some(r) = f.restarts {
            rec.restarts = Some(r);
        }
        if let Some(t) = f.tolerance_nm {
            self.evaluation.tolerance_nm = t;
        }
        if let Some(n) = f.threads {
            self.threads = Some(n);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.reconstruction.validate()?;
        if !(self.evaluation.tolerance_nm >= 0.0) {
            return Err(Error::Config("tolerance_nm must be nonnegative".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Thread count after applying the `FLUCTOSCOPE_THREADS` cap.
    pub fn thread_count(&self) -> Result<Option<usize>> {
        let cap = match std::env::var("FLUCTOSCOPE_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("FLUCTOSCOPE_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        };
        Ok(match (self.threads, cap) {
            (Some(n), Some(c)) => Some(n.min(c)),
            (n, c) => n.or(c),
        })
    }
}

//! JSON documents written by the commands. None of them carries
//! timestamps, durations or absolute paths, so reruns compare byte for byte.

use std::collections::BTreeMap;

use fluctoscope::eval::EvalReport;
use fluctoscope::io::PreviewScaling;
use fluctoscope::{IntensitySettings, RegularizerKind, SimulationConfig, SolverOptions, Support};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const REPORT_VERSION: u32 = 1;

/// Support written as `[row, col]` pairs on an `L × L` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportFile {
    pub grid: usize,
    pub pixels: Vec<[usize; 2]>,
}

impl From<&Support> for SupportFile {
    fn from(s: &Support) -> Self {
        SupportFile { grid: s.grid(), pixels: s.coords().map(|(r, c)| [r, c]).collect() }
    }
}

impl SupportFile {
    pub fn to_support(&self) -> fluctoscope::Result<Support> {
        let pts: Vec<(usize, usize)> = self.pixels.iter().map(|p| (p[0], p[1])).collect();
        Support::from_coords(self.grid, &pts)
    }
}

/// Scaling of every 8-bit preview in a directory, keyed by file name.
pub type PreviewIndex = BTreeMap<String, PreviewScaling>;

/// Sidecar of a simulated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetReport {
    pub version: u32,
    pub config: SimulationConfig,
    pub sigma2_used: f64,
    pub fine_pixel_nm: f64,
    pub gt_support_pixels: usize,
    pub files: DatasetFiles,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub stack: String,
    pub reference: String,
    pub phantom: String,
    pub gt_intensity: String,
    pub gt_background: String,
    pub gt_support: String,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        DatasetFiles {
            stack: "stack.tif".into(),
            reference: "reference.tif".into(),
            phantom: "phantom.tif".into(),
            gt_intensity: "gt_intensity.tif".into(),
            gt_background: "gt_background.tif".into(),
            gt_support: "gt_support.json".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputSummary {
    pub stack: String,
    pub frames_available: usize,
    pub frames_used: usize,
    pub coarse_size: usize,
    pub pixel_size_nm: f64,
    pub grid_factor: usize,
    pub fine_size: usize,
    pub fwhm_nm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportReport {
    pub regularizer: RegularizerKind,
    /// `λ / λ_max` when `λ` was derived from it.
    pub gamma: Option<f64>,
    pub lambda: f64,
    pub lambda_max: f64,
    pub restarts: usize,
    pub max_restarts: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub noise_variance: f64,
    pub support_pixels: usize,
    pub trace: Vec<f64>,
    pub options: SolverOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuSource {
    Fixed,
    Discrepancy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntensityReport {
    pub mu_source: MuSource,
    pub mu0: Option<f64>,
    pub mu_hat: f64,
    pub discrepancy: f64,
    pub discrepancy_target: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    pub trace: Vec<f64>,
    pub settings: IntensitySettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionFiles {
    pub x: String,
    pub b: String,
    pub r_x: String,
    pub support: String,
    pub previews: String,
}

impl Default for ReconstructionFiles {
    fn default() -> Self {
        ReconstructionFiles {
            x: "x.tif".into(),
            b: "b.tif".into(),
            r_x: "r_x.tif".into(),
            support: "support.json".into(),
            previews: "previews.json".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub input: InputSummary,
    pub support: SupportReport,
    pub intensity: IntensityReport,
    pub files: ReconstructionFiles,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationDocument {
    pub version: u32,
    #[serde(flatten)]
    pub metrics: EvalReport,
    pub fine_pixel_nm: f64,
    pub estimated_pixels: usize,
    pub truth_pixels: usize,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: u32,
    pub config: RunConfig,
    pub dataset: String,
    pub reconstruction: String,
    pub evaluation: String,
    pub mu_hat: f64,
    pub noise_variance: f64,
    pub metrics: EvalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub version: u32,
    pub kind: String,
    pub message: String,
    pub solver_failure: bool,
}

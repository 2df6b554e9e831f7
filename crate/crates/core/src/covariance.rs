//! Temporal statistics of an acquired stack.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest coarse grid for which the dense `M² × M²` covariance is formed.
pub const MAX_COVARIANCE_SIZE: usize = 64;

/// `T` frames of `M × M` camera intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    frames: Array3<f64>,
    pub pixel_size_nm: f64,
    pub frame_rate_hz: f64,
}

/// Metadata stored alongside a stack on disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub pixel_size_nm: f64,
    pub frame_rate_hz: f64,
}

impl ImageStack {
    /// `frames` is indexed `[t, row, col]`.
    pub fn new(frames: Array3<f64>, pixel_size_nm: f64, frame_rate_hz: f64) -> Result<Self> {
        let (t, r, c) = frames.dim();
        if t == 0 {
            return Err(Error::Precondition("stack has no frames".into()));
        }
        if r != c || r == 0 {
            return Err(Error::dimension("frame", "square M x M", format!("{r}x{c}")));
        }
        Ok(ImageStack { frames, pixel_size_nm, frame_rate_hz })
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.frames.dim().1
    }

    pub fn header(&self) -> StackHeader {
        StackHeader {
            m: self.size(),
            t: self.len(),
            pixel_size_nm: self.pixel_size_nm,
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    /// First `t` frames.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.len() {
            return Err(Error::Precondition(format!(
                "cannot keep {t} of {} frames",
                self.len()
            )));
        }
        Ok(ImageStack {
            frames: self.frames.slice(ndarray::s![..t, .., ..]).to_owned(),
            pixel_size_nm: self.pixel_size_nm,
            frame_rate_hz: self.frame_rate_hz,
        })
    }
}

/// Empirical mean image `ȳ` and covariance `R_y` of a stack.
#[derive(Clone, Debug)]
pub struct CovarianceData {
    /// `M × M` temporal mean.
    pub mean: Array2<f64>,
    /// `M² × M²`, rows and columns in column-major pixel order.
    pub cov: Array2<f64>,
    pub frames: usize,
}

impl CovarianceData {
    pub fn size(&self) -> usize {
        self.mean.nrows()
    }

    /// `r_y = vec(R_y)`. The matrix is symmetric, so its row-major storage
    /// already is the column-major vectorization.
    pub fn r_y(&self) -> ArrayView1<'_, f64> {
        let n = self.cov.len();
        self.cov
            .view()
            .into_shape_with_order(n)
            .expect("covariance stored contiguously")
    }

    /// Data whose covariance is exactly `c · I_{M²}` with zero mean.
    pub fn scaled_identity(m: usize, c: f64, frames: usize) -> Self {
        let mut cov = Array2::zeros((m * m, m * m));
        cov.diag_mut().fill(c);
        CovarianceData { mean: Array2::zeros((m, m)), cov, frames }
    }

    /// Data built from an explicit mean and covariance.
    pub fn from_parts(mean: Array2<f64>, cov: Array2<f64>, frames: usize) -> Result<Self> {
        let m = mean.nrows();
        if mean.ncols() != m || cov.dim() != (m * m, m * m) {
            return Err(Error::dimension(
                "covariance",
                format!("{0}x{0}", m * m),
                format!("{:?}", cov.dim()),
            ));
        }
        let cov = if cov.is_standard_layout() { cov } else { cov.as_standard_layout().into_owned() };
        Ok(CovarianceData { mean, cov, frames })
    }
}

/// Temporal mean `(1/T) Σ_t y_t`.
pub fn empirical_mean(stack: &ImageStack) -> Result<Array2<f64>> {
    if stack.is_empty() {
        return Err(Error::Precondition("stack has no frames".into()));
    }
    Ok(stack
        .frames
        .mean_axis(Axis(0))
        .expect("nonempty axis"))
}

/// Unbiased sample covariance (divisor `T − 1`), computed from centered
/// frames in two passes.
pub fn empirical_covariance(stack: &ImageStack) -> Result<CovarianceData> {
    let t = stack.len();
    if t < 2 {
        return Err(Error::Precondition(format!("covariance needs at least 2 frames, got {t}")));
    }
    let m = stack.size();
    if m > MAX_COVARIANCE_SIZE {
        return Err(Error::Capacity(format!(
            "dense covariance limited to M <= {MAX_COVARIANCE_SIZE}, got M = {m}"
        )));
    }
    let mean = empirical_mean(stack)?;
    let n = m * m;

    // Each row of `centered` is one frame, flattened column-major.
    let mut centered = Array2::<f64>::zeros((t, n));
    for (k, frame) in stack.frames.axis_iter(Axis(0)).enumerate() {
        let mut row = centered.row_mut(k);
        for ((r, c), v) in frame.indexed_iter() {
            row[r + c * m] = v - mean[[r, c]];
        }
    }
    let mut cov = centered.t().dot(&centered);
    cov /= (t - 1) as f64;
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = s;
            cov[[j, i]] = s;
        }
    }
    Ok(CovarianceData { mean, cov, frames: t })
}

/// Per-pixel temporal variance, i.e. the diagonal of `R_y` as an image.
pub fn variance_image(data: &CovarianceData) -> Array2<f64> {
    let m = data.size();
    let diag: Array1<f64> = data.cov.diag().to_owned();
    Array2::from_shape_fn((m, m), |(r, c)| diag[r + c * m])
}

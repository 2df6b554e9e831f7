//! Matrix-free forward model: Gaussian blur on the fine grid followed by
//! `q × q` block summation, and the covariance-domain operator built from it.
//!
//! The blur is separable, so the whole map `Ψ = M_q ∘ H` factors into a single
//! `M × L` matrix `P` applied on both sides: `Ψ(X) = P X Pᵀ`. In column-major
//! vectorized form `Ψ = P ⊗ P`, and column `i = a + bL` of the Khatri–Rao
//! product `A = Ψ ⊙ Ψ` is `ψ_i ⊗ ψ_i`.
//!
//! Two Gram identities keep the covariance algebra cheap. With `K = PᵀP` and
//! `W = K ∘ K` (elementwise square), `ψ_iᵀψ_j = K[a,a']·K[b,b']`, hence
//! `AᵀA r = W r W` when `r` is viewed as an `L × L` image, and
//! `‖a_i‖ = ‖ψ_i‖² = K[a,a]·K[b,b]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::check_square;

/// `FWHM = 2√(2 ln 2)·σ` for a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Multiplier applied to power-iteration norm estimates before they are used
/// as Lipschitz constants.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

/// Separable, normalized point-spread function sampled on the fine grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psf {
    taps: Vec<f64>,
    fwhm_nm: Option<f64>,
}

impl Psf {
    /// Isotropic Gaussian truncated at ±4σ and renormalized to unit mass.
    pub fn gaussian(fwhm_nm: f64, fine_pixel_nm: f64) -> Result<Self> {
        if !(fwhm_nm > 0.0) || !(fine_pixel_nm > 0.0) {
            return Err(Error::Config(format!(
                "PSF needs positive fwhm and pixel size, got {fwhm_nm} and {fine_pixel_nm}"
            )));
        }
        let sigma = fwhm_nm / FWHM_PER_SIGMA / fine_pixel_nm;
        let radius = (4.0 * sigma).ceil() as usize;
        let taps: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let d = k as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let mut psf = Self::from_taps(taps)?;
        psf.fwhm_nm = Some(fwhm_nm);
        Ok(psf)
    }

    /// Discrete delta: no blur at all.
    pub fn delta() -> Self {
        Psf { taps: vec![1.0], fwhm_nm: None }
    }

    /// 1-D taps of a separable kernel; the 2-D kernel is their outer product.
    /// The taps are renormalized to unit sum.
    pub fn from_taps(taps: Vec<f64>) -> Result<Self> {
        if taps.len() % 2 == 0 {
            return Err(Error::Config(format!("PSF taps must have odd length, got {}", taps.len())));
        }
        if taps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Config("PSF taps must be finite and nonnegative".into()));
        }
        let total: f64 = taps.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("PSF taps have zero mass".into()));
        }
        Ok(Psf {
            taps: taps.into_iter().map(|t| t / total).collect(),
            fwhm_nm: None,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn fwhm_nm(&self) -> Option<f64> {
        self.fwhm_nm
    }

    /// Full 2-D kernel, `(2r+1) × (2r+1)`.
    pub fn kernel(&self) -> Array2<f64> {
        let n = self.taps.len();
        Array2::from_shape_fn((n, n), |(i, j)| self.taps[i] * self.taps[j])
    }
}

/// Blur plus downsampling geometry, immutable once built.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    coarse: usize,
    factor: usize,
    pixel_size_nm: f64,
    psf: Psf,
    proj: Array2<f64>,
    gram_sq: Array2<f64>,
    norms: Array2<f64>,
    pair_proj: Array2<f64>,
}

impl ForwardModel {
    pub fn new(coarse: usize, factor: usize, psf: Psf, pixel_size_nm: f64) -> Result<Self> {
        if coarse == 0 || factor == 0 {
            return Err(Error::Config(format!(
                "grid sizes must be positive, got M = {coarse}, q = {factor}"
            )));
        }
        if !(pixel_size_nm > 0.0) {
            return Err(Error::Config(format!("pixel size must be positive, got {pixel_size_nm}")));
        }
        let fine = coarse * factor;
        let r = psf.radius() as isize;
        let taps = psf.taps();

        // P[u, a] = Σ_{k in block u} h[k - a + r]
        let mut proj = Array2::<f64>::zeros((coarse, fine));
        for u in 0..coarse {
            for k in u * factor..(u + 1) * factor {
                let lo = (k as isize - r).max(0) as usize;
                let hi = ((k as isize + r) as usize).min(fine - 1);
                for a in lo..=hi {
                    proj[[u, a]] += taps[(k as isize - a as isize + r) as usize];
                }
            }
        }

        let gram = proj.t().dot(&proj);
        let gram_sq = gram.mapv(|v| v * v);
        let diag = gram.diag().to_owned();
        let norms = Array2::from_shape_fn((fine, fine), |(a, b)| diag[a] * diag[b]);

        let mut pair_proj = Array2::<f64>::zeros((coarse * coarse, fine));
        for u in 0..coarse {
            for v in 0..coarse {
                let row = u * coarse + v;
                for a in 0..fine {
                    pair_proj[[row, a]] = proj[[u, a]] * proj[[v, a]];
                }
            }
        }

        Ok(ForwardModel {
            coarse,
            factor,
            pixel_size_nm,
            psf,
            proj,
            gram_sq,
            norms,
            pair_proj,
        })
    }

    /// Gaussian PSF of the given FWHM on a grid with coarse pixel `pixel_size_nm`.
    pub fn gaussian(coarse: usize, factor: usize, fwhm_nm: f64, pixel_size_nm: f64) -> Result<Self> {
        let psf = Psf::gaussian(fwhm_nm, pixel_size_nm / factor as f64)?;
        Self::new(coarse, factor, psf, pixel_size_nm)
    }

    pub fn coarse_size(&self) -> usize {
        self.coarse
    }

    pub fn fine_size(&self) -> usize {
        self.coarse * self.factor
    }

    pub fn grid_factor(&self) -> usize {
        self.factor
    }

    pub fn pixel_size_nm(&self) -> f64 {
        self.pixel_size_nm
    }

    pub fn fine_pixel_nm(&self) -> f64 {
        self.pixel_size_nm / self.factor as f64
    }

    pub fn psf(&self) -> &Psf {
        &self.psf
    }

    /// The `M × L` one-dimensional blur-and-bin matrix.
    pub fn projection(&self) -> &Array2<f64> {
        &self.proj
    }

    /// `Ψx = P X Pᵀ`.
    pub fn apply_forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        check_square("fine-grid image", x, self.fine_size())?;
        Ok(self.forward_unchecked(x))
    }

    /// `Ψᵀy = Pᵀ Y P`.
    pub fn apply_adjoint(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        check_square("coarse-grid image", y, self.coarse)?;
        Ok(self.adjoint_unchecked(y))
    }

    pub(crate) fn forward_unchecked(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.proj.dot(x).dot(&self.proj.t())
    }

    pub(crate) fn adjoint_unchecked(&self, y: &ArrayView2<f64>) -> Array2<f64> {
        self.proj.t().dot(y).dot(&self.proj)
    }

    /// `ΨᵀΨx` without the intermediate allocation checks.
    pub(crate) fn normal_unchecked(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let y = self.forward_unchecked(x);
        self.adjoint_unchecked(&y.view())
    }

    /// Coarse image `ψ_i` for fine pixel `(row, col)`.
    pub fn psi_column(&self, row: usize, col: usize) -> Array2<f64> {
        let pa = self.proj.column(row);
        let pb = self.proj.column(col);
        Array2::from_shape_fn((self.coarse, self.coarse), |(u, v)| pa[u] * pb[v])
    }

    /// `A r_x = vec(Ψ diag(r_x) Ψᵀ)`, returned as the column-major
    /// vectorization of the `M² × M²` covariance (length `M⁴`). `r_x` is the
    /// fine-grid variance map viewed as an `L × L` image.
    pub fn apply_a(&self, r_x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        check_square("fine-grid variance map", r_x, self.fine_size())?;
        let m = self.coarse;
        let tilde = self.pair_proj.dot(r_x).dot(&self.pair_proj.t());
        let tilde = tilde
            .into_shape_with_order((m, m, m, m))
            .expect("M² × M² reshapes to M⁴");
        Ok(tilde.permuted_axes([3, 1, 2, 0]).iter().copied().collect())
    }

    /// `Aᵀ r`: component `i` is `ψ_iᵀ mat(r) ψ_i`.
    pub fn apply_a_adjoint(&self, r: &ArrayView1<f64>) -> Result<Array2<f64>> {
        let m = self.coarse;
        if r.len() != m.pow(4) {
            return Err(Error::dimension("covariance vector", m.pow(4), r.len()));
        }
        let owned;
        let view = match r.as_slice() {
            Some(s) => ArrayView1::from(s),
            None => {
                owned = r.to_owned();
                owned.view()
            }
        };
        let four = view.into_shape_with_order((m, m, m, m)).expect("length checked");
        let tilde = four
            .permuted_axes([3, 1, 2, 0])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((m * m, m * m))
            .expect("standard layout");
        Ok(self.pair_proj.t().dot(&tilde).dot(&self.pair_proj))
    }

    /// `AᵀA r = W r W`.
    pub fn apply_gram(&self, r: &ArrayView2<f64>) -> Result<Array2<f64>> {
        check_square("fine-grid variance map", r, self.fine_size())?;
        Ok(self.gram_unchecked(r))
    }

    pub(crate) fn gram_unchecked(&self, r: &ArrayView2<f64>) -> Array2<f64> {
        self.gram_sq.dot(r).dot(&self.gram_sq)
    }

    /// Lipschitz constant of `r ↦ AᵀA r`, i.e. `‖W‖²` with safety factor.
    pub fn gram_lipschitz(&self) -> f64 {
        let w = operator_norm(&DenseMap(&self.gram_sq), 2000);
        w.value * w.value * LIPSCHITZ_SAFETY
    }

    /// Lipschitz constant of `x ↦ ΨᵀΨx`, i.e. `‖P‖⁴` with safety factor.
    pub fn normal_lipschitz(&self) -> f64 {
        let p = operator_norm(&DenseMap(&self.proj), 2000);
        p.value.powi(4) * LIPSCHITZ_SAFETY
    }

    /// `‖a_i‖₂ = ‖ψ_i‖₂²` for every fine pixel, as an `L × L` image. Also
    /// equal to `Aᵀ vec(I)`.
    pub fn column_norms(&self) -> &Array2<f64> {
        &self.norms
    }

    /// `v_Iᵀ A r = trace(Ψ diag(r) Ψᵀ)`.
    pub fn trace_a(&self, r: &ArrayView2<f64>) -> f64 {
        ndarray::Zip::from(r).and(&self.norms).fold(0.0, |acc, &x, &d| acc + x * d)
    }

    /// `Ψ` as a flat linear map on column-major vectors.
    pub fn psi_map(&self) -> PsiMap<'_> {
        PsiMap(self)
    }

    /// `A` as a flat linear map.
    pub fn covariance_map(&self) -> CovarianceMap<'_> {
        CovarianceMap(self)
    }
}

/// A linear operator between flat vectors, with its adjoint.
pub trait LinearMap {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);
}

fn image_from_colmajor(v: &[f64], n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(r, c)| v[r + c * n])
}

fn image_into_colmajor(img: &Array2<f64>, out: &mut [f64]) {
    let n = img.nrows();
    for ((r, c), v) in img.indexed_iter() {
        out[r + c * n] = *v;
    }
}

pub struct PsiMap<'a>(&'a ForwardModel);

impl LinearMap for PsiMap<'_> {
    fn input_len(&self) -> usize {
        self.0.fine_size().pow(2)
    }

    fn output_len(&self) -> usize {
        self.0.coarse.pow(2)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let img = image_from_colmajor(x, self.0.fine_size());
        image_into_colmajor(&self.0.forward_unchecked(&img.view()), out);
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        let img = image_from_colmajor(y, self.0.coarse);
        image_into_colmajor(&self.0.adjoint_unchecked(&img.view()), out);
    }
}

pub struct CovarianceMap<'a>(&'a ForwardModel);

impl LinearMap for CovarianceMap<'_> {
    fn input_len(&self) -> usize {
        self.0.fine_size().pow(2)
    }

    fn output_len(&self) -> usize {
        self.0.coarse.pow(4)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let img = image_from_colmajor(x, self.0.fine_size());
        let r = self.0.apply_a(&img.view()).expect("sizes fixed by the map");
        out.copy_from_slice(r.as_slice().expect("contiguous"));
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        let g = self
            .0
            .apply_a_adjoint(&ArrayView1::from(y))
            .expect("sizes fixed by the map");
        image_into_colmajor(&g, out);
    }
}

/// Dense matrix acting on flat vectors.
pub struct DenseMap<'a>(pub &'a Array2<f64>);

impl LinearMap for DenseMap<'_> {
    fn input_len(&self) -> usize {
        self.0.ncols()
    }

    fn output_len(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let y = self.0.dot(&ArrayView1::from(x));
        out.copy_from_slice(y.as_slice().expect("fresh vector"));
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        let x = self.0.t().dot(&ArrayView1::from(y));
        out.copy_from_slice(x.as_slice().expect("fresh vector"));
    }
}

/// Diagonal matrix.
pub struct DiagonalMap(pub Vec<f64>);

impl LinearMap for DiagonalMap {
    fn input_len(&self) -> usize {
        self.0.len()
    }

    fn output_len(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, d), v) in out.iter_mut().zip(&self.0).zip(x) {
            *o = d * v;
        }
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.apply(y, out)
    }
}

/// Self-adjoint operator on `rows × cols` images given by a closure.
pub struct SelfAdjointImageMap<F> {
    rows: usize,
    cols: usize,
    op: F,
}

impl<F: Fn(&ArrayView2<f64>) -> Array2<f64>> SelfAdjointImageMap<F> {
    pub fn new(rows: usize, cols: usize, op: F) -> Self {
        SelfAdjointImageMap { rows, cols, op }
    }
}

impl<F: Fn(&ArrayView2<f64>) -> Array2<f64>> LinearMap for SelfAdjointImageMap<F> {
    fn input_len(&self) -> usize {
        self.rows * self.cols
    }

    fn output_len(&self) -> usize {
        self.rows * self.cols
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let img = ArrayView2::from_shape((self.rows, self.cols), x).expect("length fixed by map");
        let res = (self.op)(&img);
        out.copy_from_slice(res.as_standard_layout().as_slice().expect("standard layout"));
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.apply(y, out)
    }
}

/// Outcome of a power iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNorm {
    /// Estimated largest singular value.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl OperatorNorm {
    /// The estimate inflated by [`LIPSCHITZ_SAFETY`]. For a self-adjoint
    /// PSD operator this bounds its largest eigenvalue and is used for steps.
    pub fn lipschitz(&self) -> f64 {
        self.value * LIPSCHITZ_SAFETY
    }
}

const NORM_SEED: u64 = 0x5eed_0f_b10c;

/// Largest singular value of `op` by power iteration on `opᵀop`, started
/// from a fixed pseudo-random vector. When `iters` is exhausted before the
/// relative change drops below 1e-10 the last estimate is returned with
/// `converged = false`.
pub fn operator_norm<M: LinearMap + ?Sized>(op: &M, iters: usize) -> OperatorNorm {
    let n = op.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(NORM_SEED);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.5).collect();
    let mut y = vec![0.0; op.output_len()];
    let mut z = vec![0.0; n];
    let normalize = |v: &mut [f64]| -> f64 {
        let nrm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if nrm > 0.0 {
            v.iter_mut().for_each(|t| *t /= nrm);
        }
        nrm
    };
    normalize(&mut x);

    let mut estimate = 0.0;
    for it in 1..=iters.max(1) {
        op.apply(&x, &mut y);
        op.apply_adjoint(&y, &mut z);
        let lambda = normalize(&mut z);
        std::mem::swap(&mut x, &mut z);
        let value = lambda.sqrt();
        if lambda == 0.0 {
            return OperatorNorm { value: 0.0, iterations: it, converged: true };
        }
        if it > 1 && (value - estimate).abs() <= 1e-10 * value {
            return OperatorNorm { value, iterations: it, converged: true };
        }
        estimate = value;
    }
    log::warn!("power iteration stopped after {iters} iterations without converging");
    OperatorNorm { value: estimate, iterations: iters.max(1), converged: false }
}

/// Largest eigenvalue of a self-adjoint positive semidefinite `op` by power
/// iteration on `op` itself, one application per step, stopping once the
/// estimate moves by less than `rel_tol`. Reported through
/// [`OperatorNorm::value`].
pub fn largest_eigenvalue<M: LinearMap + ?Sized>(op: &M, iters: usize, rel_tol: f64) -> OperatorNorm {
    let n = op.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(NORM_SEED);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.5).collect();
    let nrm = x.iter().map(|t| t * t).sum::<f64>().sqrt();
    x.iter_mut().for_each(|t| *t /= nrm);
    let mut y = vec![0.0; n];
    let mut estimate = 0.0;
    for it in 1..=iters.max(1) {
        op.apply(&x, &mut y);
        let value = y.iter().map(|t| t * t).sum::<f64>().sqrt();
        if value == 0.0 {
            return OperatorNorm { value: 0.0, iterations: it, converged: true };
        }
        y.iter_mut().for_each(|t| *t /= value);
        std::mem::swap(&mut x, &mut y);
        if it > 1 && (value - estimate).abs() <= rel_tol * value {
            return OperatorNorm { value, iterations: it, converged: true };
        }
        estimate = value;
    }
    log::debug!("eigenvalue iteration stopped after {iters} steps without converging");
    OperatorNorm { value: estimate, iterations: iters.max(1), converged: false }
}

/// Sums each `q × q` block.
#[cfg(test)]
fn block_sum(x: &ArrayView2<f64>, q: usize) -> Array2<f64> {
    let (n, _) = x.dim();
    let m = n / q;
    let mut out = Array2::zeros((m, m));
    for (r, row) in x.axis_iter(ndarray::Axis(0)).enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[[r / q, c / q]] += v;
        }
    }
    out
}

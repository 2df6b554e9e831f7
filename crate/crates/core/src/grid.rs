//! Pixel-grid utilities shared by every stage: column-major indexing,
//! support sets, and the forward-difference gradient with Neumann boundaries.
//!
//! Images are `Array2<f64>` indexed `[row, col]`. Whenever an image is
//! treated as a vector, the vectorization is column-major, so pixel
//! `(row, col)` of an `n × n` grid has linear index `row + col * n`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ShapeBuilder, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn linear_index(row: usize, col: usize, n: usize) -> usize {
    row + col * n
}

#[inline]
pub fn coords(index: usize, n: usize) -> (usize, usize) {
    (index % n, index / n)
}

/// Column-major vectorization of an image.
pub fn vectorize(img: &ArrayView2<f64>) -> Array1<f64> {
    img.t().iter().copied().collect()
}

/// Inverse of [`vectorize`] for a square `n × n` grid.
pub fn unvectorize(v: &ArrayView1<f64>, n: usize) -> Result<Array2<f64>> {
    if v.len() != n * n {
        return Err(Error::dimension("vectorized image", n * n, v.len()));
    }
    let data: Vec<f64> = v.iter().copied().collect();
    Ok(Array2::from_shape_vec((n, n).f(), data)
        .expect("length checked")
        .as_standard_layout()
        .into_owned())
}

pub(crate) fn check_square(
    what: &'static str,
    img: &ArrayView2<f64>,
    n: usize,
) -> Result<()> {
    if img.dim() != (n, n) {
        return Err(Error::dimension(what, format!("{n}x{n}"), format!("{:?}", img.dim())));
    }
    Ok(())
}

pub fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

pub fn norm_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn diff_norm_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

/// Set of pixels on a square grid, stored as sorted column-major indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    grid: usize,
    indices: Vec<usize>,
}

impl Support {
    pub fn new(grid: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= grid * grid {
                return Err(Error::dimension("support index", format!("< {}", grid * grid), last));
            }
        }
        Ok(Support { grid, indices })
    }

    pub fn empty(grid: usize) -> Self {
        Support { grid, indices: Vec::new() }
    }

    pub fn from_coords(grid: usize, pts: &[(usize, usize)]) -> Result<Self> {
        for &(r, c) in pts {
            if r >= grid || c >= grid {
                return Err(Error::dimension("support pixel", format!("< {grid}"), format!("({r}, {c})")));
            }
        }
        Self::new(grid, pts.iter().map(|&(r, c)| linear_index(r, c, grid)).collect())
    }

    /// Pixels whose value exceeds `threshold`.
    pub fn above(img: &ArrayView2<f64>, threshold: f64) -> Self {
        let n = img.nrows();
        let mut indices: Vec<usize> = img
            .indexed_iter()
            .filter(|(_, &v)| v > threshold)
            .map(|((r, c), _)| linear_index(r, c, n))
            .collect();
        indices.sort_unstable();
        Support { grid: n, indices }
    }

    /// Nonzero set of `img`.
    pub fn nonzero(img: &ArrayView2<f64>) -> Self {
        let n = img.nrows();
        let mut indices: Vec<usize> = img
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|((r, c), _)| linear_index(r, c, n))
            .collect();
        indices.sort_unstable();
        Support { grid: n, indices }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.iter().map(move |&i| coords(i, self.grid))
    }

    pub fn union(&self, other: &Support) -> Support {
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        indices.sort_unstable();
        indices.dedup();
        Support { grid: self.grid, indices }
    }

    pub fn is_superset_of(&self, other: &Support) -> bool {
        other.indices.iter().all(|&i| self.contains(i))
    }

    /// 1.0 on the support, 0.0 elsewhere.
    pub fn mask(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.grid, self.grid));
        for (r, c) in self.coords() {
            m[[r, c]] = 1.0;
        }
        m
    }
}

/// Forward differences along rows and columns, zero on the last row/column
/// (Neumann boundary).
pub fn gradient(x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, m) = x.dim();
    let mut dr = Array2::zeros((n, m));
    let mut dc = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            if i + 1 < n {
                dr[[i, j]] = x[[i + 1, j]] - x[[i, j]];
            }
            if j + 1 < m {
                dc[[i, j]] = x[[i, j + 1]] - x[[i, j]];
            }
        }
    }
    (dr, dc)
}

/// Adjoint of [`gradient`] (a negative divergence).
pub fn gradient_adjoint(dr: &ArrayView2<f64>, dc: &ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = dr.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            if i + 1 < n {
                let p = dr[[i, j]];
                out[[i + 1, j]] += p;
                out[[i, j]] -= p;
            }
            if j + 1 < m {
                let p = dc[[i, j]];
                out[[i, j + 1]] += p;
                out[[i, j]] -= p;
            }
        }
    }
    out
}

/// `∇ᵀ∇ x`, the Neumann Laplacian with the sign that makes it PSD.
pub fn gradient_normal(x: &ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = x.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let v = x[[i, j]];
            if i + 1 < n {
                let d = x[[i + 1, j]] - v;
                out[[i + 1, j]] += d;
                out[[i, j]] -= d;
            }
            if j + 1 < m {
                let d = x[[i, j + 1]] - v;
                out[[i, j + 1]] += d;
                out[[i, j]] -= d;
            }
        }
    }
    out
}

/// Largest eigenvalue of [`gradient_normal`] on an `n × m` image. Each axis
/// contributes the top eigenvalue `2 + 2cos(π/n)` of the path-graph Laplacian.
pub fn gradient_normal_norm(n: usize, m: usize) -> f64 {
    let axis = |k: usize| 2.0 + 2.0 * (std::f64::consts::PI / k as f64).cos();
    axis(n) + axis(m)
}

/// `‖∇x‖²`.
pub fn gradient_energy(x: &ArrayView2<f64>) -> f64 {
    let (n, m) = x.dim();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..m {
            let v = x[[i, j]];
            if i + 1 < n {
                let d = x[[i + 1, j]] - v;
                acc += d * d;
            }
            if j + 1 < m {
                let d = x[[i, j + 1]] - v;
                acc += d * d;
            }
        }
    }
    acc
}

/// Isotropic total variation `Σ_i sqrt(dr_i² + dc_i²)` with the same
/// one-sided differences as [`gradient`].
pub fn total_variation(x: &ArrayView2<f64>) -> f64 {
    let (dr, dc) = gradient(x);
    Zip::from(&dr).and(&dc).fold(0.0, |acc, &a, &b| acc + (a * a + b * b).sqrt())
}

/// Support-restricted smoothness `Σ_{i∈Ω} Σ_{j∈N(i)∩Ω} (x_i - x_j)²` over the
/// 8-neighborhood. Diagnostic only; the solvers use the full-grid gradient.
pub fn support_gradient_energy(x: &ArrayView2<f64>, support: &Support) -> f64 {
    let n = support.grid() as isize;
    let mut acc = 0.0;
    for (r, c) in support.coords() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= n || cc >= n {
                    continue;
                }
                let j = linear_index(rr as usize, cc as usize, n as usize);
                if support.contains(j) {
                    let d = x[[r, c]] - x[[rr as usize, cc as usize]];
                    acc += d * d;
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn vectorize_is_column_major() {
        let img = array![[1.0, 2.0], [3.0, 4.0]];
        let v = vectorize(&img.view());
        assert_eq!(v.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvectorize(&v.view(), 2).unwrap(), img);
        assert_eq!(linear_index(1, 0, 2), 1);
        assert_eq!(coords(2, 2), (0, 1));
    }

    #[test]
    fn gradient_adjoint_pair() {
        let x = Array2::from_shape_fn((5, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let p = Array2::from_shape_fn((5, 5), |(i, j)| (i as f64 * 0.3 - j as f64).sin());
        let q = Array2::from_shape_fn((5, 5), |(i, j)| (i as f64 + 0.7 * j as f64).cos());
        let (gr, gc) = gradient(&x.view());
        let lhs = dot(&gr, &p) + dot(&gc, &q);
        let rhs = dot(&x, &gradient_adjoint(&p.view(), &q.view()));
        assert!((lhs - rhs).abs() < 1e-12);
        let nrm = gradient_normal(&x.view());
        let expected = gradient_adjoint(&gr.view(), &gc.view());
        assert!(diff_norm_sq(&nrm, &expected) < 1e-20);
        assert!((dot(&x, &nrm) - gradient_energy(&x.view())).abs() < 1e-10);
    }

    #[test]
    fn gradient_normal_top_eigenpair() {
        let (n, m) = (7, 5);
        let lam = gradient_normal_norm(n, m);
        let mode = |k: usize, i: usize| (std::f64::consts::PI * (k - 1) as f64 * (i as f64 + 0.5) / k as f64).cos();
        let v = Array2::from_shape_fn((n, m), |(i, j)| mode(n, i) * mode(m, j));
        let hv = gradient_normal(&v.view());
        assert!(diff_norm_sq(&hv, &(&v * lam)) < 1e-20 * dot(&v, &v));
        for seed in 0..20 {
            let x = Array2::from_shape_fn((n, m), |(i, j)| ((seed * 31 + i * 7 + j * 13) as f64).sin());
            assert!(dot(&x, &gradient_normal(&x.view())) <= lam * dot(&x, &x) * (1.0 + 1e-12));
        }
        assert_eq!(gradient_normal_norm(1, 1), 0.0);
    }

    #[test]
    fn constant_image_has_zero_variation() {
        let x = Array2::from_elem((6, 6), 3.5);
        assert_eq!(total_variation(&x.view()), 0.0);
        assert_eq!(gradient_energy(&x.view()), 0.0);
    }

    #[test]
    fn support_set_operations() {
        let a = Support::from_coords(4, &[(0, 0), (1, 2)]).unwrap();
        let b = Support::from_coords(4, &[(1, 2), (3, 3)]).unwrap();
        let u = a.union(&b);
        assert_eq!(u.len(), 3);
        assert!(u.is_superset_of(&a) && u.is_superset_of(&b));
        assert!(Support::from_coords(4, &[(4, 0)]).is_err());
        let img = u.mask();
        assert_eq!(Support::nonzero(&img.view()), u);
    }

    #[test]
    fn support_restricted_smoothness_counts_both_directions() {
        let s = Support::from_coords(3, &[(1, 1), (1, 2)]).unwrap();
        let mut x = Array2::zeros((3, 3));
        x[[1, 1]] = 2.0;
        // each ordered pair contributes once: 2 * (2 - 0)^2
        assert_eq!(support_gradient_energy(&x.view(), &s), 8.0);
    }
}

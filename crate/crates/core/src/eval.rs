//! Reconstruction quality metrics.
//!
//! Supports are compared through a stable matching between estimated and
//! ground-truth pixels, preferences ordered by pixel-centre distance. Pairs
//! farther apart than the tolerance are then dropped before counting.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::covariance::ImageStack;
use crate::error::{Error, Result};
use crate::grid::{coords, Support};
use crate::operators::FWHM_PER_SIGMA;

/// Default matching tolerance in nanometres.
pub const DEFAULT_TOLERANCE_NM: f64 = 40.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposer {
    #[default]
    Estimate,
    Truth,
}

/// Gale–Shapley with complete preference lists. `proposer_prefs[p]` lists
/// acceptors best first and `acceptor_rank[a][p]` is the rank acceptor `a`
/// gives proposer `p` (lower is better). Returns each proposer's partner.
pub fn gale_shapley(proposer_prefs: &[Vec<usize>], acceptor_rank: &[Vec<usize>]) -> Vec<Option<usize>> {
    let n_acc = acceptor_rank.len();
    let mut engaged_to: Vec<Option<usize>> = vec![None; n_acc];
    let mut next = vec![0usize; proposer_prefs.len()];
    let mut partner = vec![None; proposer_prefs.len()];
    let mut free: Vec<usize> = (0..proposer_prefs.len()).rev().collect();
    while let Some(p) = free.pop() {
        let Some(&a) = proposer_prefs[p].get(next[p]) else {
            continue;
        };
        next[p] += 1;
        match engaged_to[a] {
            None => {
                engaged_to[a] = Some(p);
                partner[p] = Some(a);
            }
            Some(q) if acceptor_rank[a][p] < acceptor_rank[a][q] => {
                engaged_to[a] = Some(p);
                partner[p] = Some(a);
                partner[q] = None;
                free.push(q);
            }
            Some(_) => free.push(p),
        }
    }
    partner
}

/// True when no proposer/acceptor pair would both rather be together than
/// with their current partners. Unmatched agents prefer anyone.
pub fn is_stable_matching(
    proposer_prefs: &[Vec<usize>],
    acceptor_rank: &[Vec<usize>],
    matching: &[Option<usize>],
) -> bool {
    let mut acceptor_partner = vec![None; acceptor_rank.len()];
    for (p, m) in matching.iter().enumerate() {
        if let Some(a) = *m {
            if acceptor_partner[a].is_some() {
                return false;
            }
            acceptor_partner[a] = Some(p);
        }
    }
    for (p, prefs) in proposer_prefs.iter().enumerate() {
        for &a in prefs {
            if matching[p] == Some(a) {
                break;
            }
            let acceptor_wants = match acceptor_partner[a] {
                None => true,
                Some(q) => acceptor_rank[a][p] < acceptor_rank[a][q],
            };
            if acceptor_wants {
                return false;
            }
        }
    }
    true
}

fn distance_preferences(from: &[(usize, usize, usize)], to: &[(usize, usize, usize)]) -> Vec<Vec<usize>> {
    from.iter()
        .map(|&(r, c, _)| {
            let mut order: Vec<usize> = (0..to.len()).collect();
            order.sort_by_key(|&j| {
                let (r2, c2, idx) = to[j];
                (r.abs_diff(r2).pow(2) + c.abs_diff(c2).pow(2), idx)
            });
            order
        })
        .collect()
}

fn ranks(prefs: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    prefs
        .iter()
        .map(|list| {
            let mut rank = vec![usize::MAX; n];
            for (k, &p) in list.iter().enumerate() {
                rank[p] = k;
            }
            rank
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardCounts {
    pub jaccard: f64,
    pub correct_detections: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl JaccardCounts {
    fn from_counts(cd: usize, fp: usize, fn_: usize) -> Self {
        let total = cd + fp + fn_;
        let jaccard = if total == 0 { 1.0 } else { cd as f64 / total as f64 };
        JaccardCounts { jaccard, correct_detections: cd, false_positives: fp, false_negatives: fn_ }
    }
}

/// Jaccard index with the estimated pixels proposing.
pub fn jaccard_index(est: &Support, gt: &Support, tol_nm: f64, fine_pixel_nm: f64) -> Result<JaccardCounts> {
    jaccard_index_with(est, gt, tol_nm, fine_pixel_nm, Proposer::Estimate)
}

pub fn jaccard_index_with(
    est: &Support,
    gt: &Support,
    tol_nm: f64,
    fine_pixel_nm: f64,
    proposer: Proposer,
) -> Result<JaccardCounts> {
    if !(tol_nm >= 0.0) {
        return Err(Error::Precondition(format!("tolerance must be nonnegative, got {tol_nm}")));
    }
    if !(fine_pixel_nm > 0.0) {
        return Err(Error::Precondition(format!("pixel size must be positive, got {fine_pixel_nm}")));
    }
    if est.grid() != gt.grid() {
        return Err(Error::dimension("support grid", gt.grid(), est.grid()));
    }
    let points = |s: &Support| -> Vec<(usize, usize, usize)> {
        s.indices()
            .iter()
            .map(|&i| {
                let (r, c) = coords(i, s.grid());
                (r, c, i)
            })
            .collect()
    };
    let e = points(est);
    let g = points(gt);
    let (props, accs) = match proposer {
        Proposer::Estimate => (&e, &g),
        Proposer::Truth => (&g, &e),
    };
    let prefs = distance_preferences(props, accs);
    let acc_rank = ranks(&distance_preferences(accs, props), props.len());
    let matching = gale_shapley(&prefs, &acc_rank);

    let tol_px = tol_nm / fine_pixel_nm;
    let tol_sq = tol_px * tol_px;
    let cd = matching
        .iter()
        .enumerate()
        .filter_map(|(p, m)| m.map(|a| (p, a)))
        .filter(|&(p, a)| {
            let (r, c, _) = props[p];
            let (r2, c2, _) = accs[a];
            (r.abs_diff(r2).pow(2) + c.abs_diff(c2).pow(2)) as f64 <= tol_sq * (1.0 + 1e-12)
        })
        .count();
    Ok(JaccardCounts::from_counts(cd, e.len() - cd, g.len() - cd))
}

/// Peak signal-to-noise ratio in dB with the peak taken from `reference`.
/// An exact match gives `f64::INFINITY`.
pub fn psnr(x: &ArrayView2<f64>, reference: &ArrayView2<f64>) -> Result<f64> {
    if x.dim() != reference.dim() {
        return Err(Error::dimension("image", format!("{:?}", reference.dim()), format!("{:?}", x.dim())));
    }
    let peak = reference.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(peak > 0.0) && !(peak < 0.0) {
        return Err(Error::UndefinedPeak);
    }
    let mse = x
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Stack signal-to-noise ratio in dB against a clean reference stack.
pub fn snr(stack: &ImageStack, reference: &ImageStack) -> Result<f64> {
    if stack.frames().dim() != reference.frames().dim() {
        return Err(Error::dimension(
            "stack",
            format!("{:?}", reference.frames().dim()),
            format!("{:?}", stack.frames().dim()),
        ));
    }
    let signal: f64 = reference.frames().iter().map(|v| v * v).sum();
    let residual: f64 = reference
        .frames()
        .iter()
        .zip(stack.frames().iter())
        .map(|(r, k)| (r - k) * (r - k))
        .sum();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / residual).log10())
}

pub fn noise_variance_error(s_est: f64, sigma2_true: f64) -> Result<f64> {
    if sigma2_true == 0.0 {
        return Err(Error::DivisionByZero("true noise variance"));
    }
    Ok((s_est - sigma2_true).abs() / sigma2_true.abs())
}

/// Infinite metrics serialize as the string `"inf"` since JSON has no
/// representation for them.
mod metric {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => {
                Repr::Text(if *x > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
            }
            Some(x) => Repr::Number(*x).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => None,
            Some(Repr::Number(x)) => Some(x),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Some(f64::INFINITY),
                "-inf" => Some(f64::NEG_INFINITY),
                other => return Err(serde::de::Error::custom(format!("bad metric '{other}'"))),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tolerance_nm: f64,
    pub proposer: Proposer,
    pub jaccard: f64,
    pub correct_detections: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    #[serde(with = "metric")]
    pub psnr_db: Option<f64>,
    #[serde(with = "metric")]
    pub snr_db: Option<f64>,
    #[serde(with = "metric")]
    pub noise_var_rel_err: Option<f64>,
}

impl EvalReport {
    pub fn new(counts: JaccardCounts, tolerance_nm: f64, proposer: Proposer) -> Self {
        EvalReport {
            tolerance_nm,
            proposer,
            jaccard: counts.jaccard,
            correct_detections: counts.correct_detections,
            false_positives: counts.false_positives,
            false_negatives: counts.false_negatives,
            psnr_db: None,
            snr_db: None,
            noise_var_rel_err: None,
        }
    }

    /// Whether the stored index agrees with the stored counts.
    pub fn is_consistent(&self) -> bool {
        let expected = JaccardCounts::from_counts(
            self.correct_detections,
            self.false_positives,
            self.false_negatives,
        );
        expected.jaccard == self.jaccard
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub row: f64,
    pub col: f64,
    pub sigma_px: f64,
    pub offset: f64,
}

impl GaussianFit {
    pub fn fwhm_px(&self) -> f64 {
        FWHM_PER_SIGMA * self.sigma_px
    }

    fn eval(&self, r: f64, c: f64) -> (f64, [f64; 5]) {
        let dr = r - self.row;
        let dc = c - self.col;
        let s2 = self.sigma_px * self.sigma_px;
        let e = (-(dr * dr + dc * dc) / (2.0 * s2)).exp();
        let g = self.amplitude * e;
        let jac = [
            e,
            g * dr / s2,
            g * dc / s2,
            g * (dr * dr + dc * dc) / (s2 * self.sigma_px),
            1.0,
        ];
        (g + self.offset, jac)
    }

    fn shifted(&self, d: &[f64; 5]) -> Self {
        GaussianFit {
            amplitude: self.amplitude + d[0],
            row: self.row + d[1],
            col: self.col + d[2],
            sigma_px: self.sigma_px + d[3],
            offset: self.offset + d[4],
        }
    }
}

fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for k in 0..5 {
        let piv = (k..5).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k].abs() < 1e-300 {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..5 {
            let f = a[i][k] / a[k][k];
            for j in k..5 {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = [0.0; 5];
    for k in (0..5).rev() {
        let s: f64 = (k + 1..5).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

/// Least-squares fit of an isotropic Gaussian plus constant offset using
/// Levenberg–Marquardt, initialized from the brightest pixel.
pub fn fit_gaussian(img: &ArrayView2<f64>) -> Result<GaussianFit> {
    let (rows, cols) = img.dim();
    if rows < 3 || cols < 3 {
        return Err(Error::Precondition("image too small for a Gaussian fit".into()));
    }
    let (mut pr, mut pc, mut peak) = (0, 0, f64::NEG_INFINITY);
    let mut floor = f64::INFINITY;
    for ((r, c), &v) in img.indexed_iter() {
        if v > peak {
            (pr, pc, peak) = (r, c, v);
        }
        floor = floor.min(v);
    }
    let half = floor + 0.5 * (peak - floor);
    let width = img.iter().filter(|&&v| v >= half).count() as f64;
    let mut fit = GaussianFit {
        amplitude: peak - floor,
        row: pr as f64,
        col: pc as f64,
        sigma_px: ((width / std::f64::consts::PI).sqrt() / (2.0 * 2f64.ln()).sqrt()).max(0.5),
        offset: floor,
    };
    let cost = |f: &GaussianFit| -> f64 {
        img.indexed_iter()
            .map(|((r, c), &v)| {
                let d = f.eval(r as f64, c as f64).0 - v;
                d * d
            })
            .sum()
    };
    let mut current = cost(&fit);
    let mut damping = 1e-3;
    for _ in 0..200 {
        let mut jtj = [[0.0; 5]; 5];
        let mut jtr = [0.0; 5];
        for ((r, c), &v) in img.indexed_iter() {
            let (model, jac) = fit.eval(r as f64, c as f64);
            let res = v - model;
            for i in 0..5 {
                jtr[i] += jac[i] * res;
                for j in 0..5 {
                    jtj[i][j] += jac[i] * jac[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += damping * jtj[i][i].max(1e-12);
            }
            let Some(step) = solve5(a, jtr) else { break };
            let cand = fit.shifted(&step);
            let c = cost(&cand);
            if cand.sigma_px > 0.0 && c < current {
                let rel = (current - c) / current.max(f64::MIN_POSITIVE);
                fit = cand;
                current = c;
                damping = (damping * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !fit.sigma_px.is_finite() || fit.sigma_px <= 0.0 {
        return Err(Error::SolverFailure { solver: "gaussian fit", reason: "width collapsed".into() });
    }
    Ok(fit)
}

/// FWHM in nanometres of the Gaussian fitted to `img`.
pub fn fwhm_nm(img: &Array2<f64>, pixel_nm: f64) -> Result<f64> {
    Ok(fit_gaussian(&img.view())?.fwhm_px() * pixel_nm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn hand_counted_jaccard() {
        let gt = Support::from_coords(32, &[(0, 0)]).unwrap();
        let est = Support::from_coords(32, &[(0, 0), (10, 10)]).unwrap();
        let j = jaccard_index(&est, &gt, 40.0, 25.0).unwrap();
        assert_eq!((j.correct_detections, j.false_positives, j.false_negatives), (1, 1, 0));
        assert_eq!(j.jaccard, 0.5);
    }

    #[test]
    fn eight_neighbours_count_at_forty_nm() {
        let gt = Support::from_coords(8, &[(4, 4)]).unwrap();
        for (dr, dc) in [(-1i32, -1i32), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            let est = Support::from_coords(8, &[((4 + dr) as usize, (4 + dc) as usize)]).unwrap();
            assert_eq!(jaccard_index(&est, &gt, 40.0, 25.0).unwrap().jaccard, 1.0);
        }
        let far = Support::from_coords(8, &[(6, 4)]).unwrap();
        assert_eq!(jaccard_index(&far, &gt, 40.0, 25.0).unwrap().jaccard, 0.0);
    }

    #[test]
    fn empty_sets_agree_perfectly() {
        let e = Support::empty(4);
        let j = jaccard_index(&e, &e, 40.0, 25.0).unwrap();
        assert_eq!(j.jaccard, 1.0);
        assert_eq!(j.correct_detections + j.false_positives + j.false_negatives, 0);
    }

    #[test]
    fn psnr_formula() {
        let mut r = Array2::zeros((10, 10));
        r[[0, 0]] = 100.0;
        let x = &r + 1.0;
        assert!((psnr(&x.view(), &r.view()).unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(psnr(&r.view(), &r.view()).unwrap(), f64::INFINITY);
        let z = Array2::<f64>::zeros((3, 3));
        assert!(matches!(psnr(&z.view(), &z.view()), Err(Error::UndefinedPeak)));
    }

    #[test]
    fn snr_formula() {
        let mut reference = Array3::zeros((1, 2, 2));
        reference[[0, 0, 0]] = 10.0;
        let mut stack = reference.clone();
        stack[[0, 1, 1]] = 1.0;
        let r = ImageStack::new(reference, 100.0, 100.0).unwrap();
        let s = ImageStack::new(stack, 100.0, 100.0).unwrap();
        assert!((snr(&s, &r).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr(&r, &r).unwrap(), f64::INFINITY);
    }

    #[test]
    fn noise_error_cases() {
        assert_eq!(noise_variance_error(2.0, 2.0).unwrap(), 0.0);
        assert!((noise_variance_error(1.05, 1.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(noise_variance_error(1.0, 0.0), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn report_round_trips_infinity() {
        let mut rep = EvalReport::new(JaccardCounts::from_counts(3, 1, 0), 40.0, Proposer::Estimate);
        rep.psnr_db = Some(f64::INFINITY);
        rep.snr_db = Some(12.5);
        let text = serde_json::to_string(&rep).unwrap();
        assert!(text.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
        assert!(back.is_consistent());
    }

    #[test]
    fn recovers_gaussian_width() {
        let truth = GaussianFit { amplitude: 5.0, row: 15.3, col: 16.1, sigma_px: 2.7, offset: 1.5 };
        let img = Array2::from_shape_fn((32, 32), |(r, c)| truth.eval(r as f64, c as f64).0);
        let fit = fit_gaussian(&img.view()).unwrap();
        assert!((fit.sigma_px - 2.7).abs() < 1e-6);
        assert!((fit.offset - 1.5).abs() < 1e-6);
    }
}

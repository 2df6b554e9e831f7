//! Synthetic acquisitions of blinking fluorophores on filament phantoms.
//!
//! Each emitter switches between an emitting and a dark state with
//! exponential dwell times and bleaches permanently after an exponential
//! lifetime. Frames integrate the emitting time over the exposure window.
//! The camera model per frame is
//! `gain·QE·Poisson(Ψ X_t + B) + N(0, σ²)`.

use std::path::PathBuf;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::ImageStack;
use crate::error::{Error, Result};
use crate::grid::Support;
use crate::operators::ForwardModel;

/// Domain tags that keep the random streams of different stages apart.
const STREAM_PHANTOM: u64 = 1;
const STREAM_BLINK: u64 = 2;
const STREAM_FRAME: u64 = 3;

fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomSpec {
    /// Seeded smooth curves rasterized on the fine grid.
    Filaments { curves: usize, thickness: usize },
    /// Fine-grid image read from disk; pixel values are emitter counts.
    Image { path: PathBuf },
    /// Explicit fine-grid pixels `[row, col]`, each holding `emitters`.
    Points { pixels: Vec<[usize; 2]>, emitters: f64 },
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::Filaments { curves: 5, thickness: 1 }
    }
}

/// What the bleaching lifetime `bleach_s` counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleachClock {
    /// Time spent in the emitting state; molecules bleach from that state.
    #[default]
    Emitting,
    /// Elapsed time since the start of the acquisition.
    Elapsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Preset {
    Lb,
    Hb,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LB" => Ok(Preset::Lb),
            "HB" => Ok(Preset::Hb),
            other => Err(Error::Config(format!("unknown preset '{other}', expected LB or HB"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub phantom: PhantomSpec,
    pub coarse_size: usize,
    pub grid_factor: usize,
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub pixel_size_nm: f64,
    pub fwhm_nm: f64,
    pub on_ms: f64,
    pub off_ms: f64,
    pub bleach_s: f64,
    pub bleach_clock: BleachClock,
    pub photons_per_frame: f64,
    pub density: f64,
    pub background_photons: f64,
    pub quantum_efficiency: f64,
    pub camera_gain: f64,
    /// Electronic noise variance in camera units. When absent it is set so
    /// that the clean reference has `target_snr_db` against this noise alone.
    pub gaussian_sigma2: Option<f64>,
    pub target_snr_db: f64,
    /// Apply the quantum efficiency before the Poisson draw instead of after.
    pub qe_before_poisson: bool,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            phantom: PhantomSpec::default(),
            coarse_size: 32,
            grid_factor: 4,
            frames: 500,
            frame_rate_hz: 100.0,
            pixel_size_nm: 100.0,
            fwhm_nm: 228.75,
            on_ms: 20.0,
            off_ms: 40.0,
            bleach_s: 20.0,
            bleach_clock: BleachClock::Emitting,
            photons_per_frame: 500.0,
            density: 10.7,
            background_photons: 50.0,
            quantum_efficiency: 0.7,
            camera_gain: 6.0,
            gaussian_sigma2: None,
            target_snr_db: 16.0,
            qe_before_poisson: false,
            seed: 0,
        }
    }
}

/// The standard low- and high-background acquisitions, which differ only in
/// background photons.
pub fn preset(kind: Preset) -> SimulationConfig {
    let background_photons = match kind {
        Preset::Lb => 50.0,
        Preset::Hb => 2500.0,
    };
    SimulationConfig { background_photons, ..SimulationConfig::default() }
}

impl SimulationConfig {
    pub fn fine_size(&self) -> usize {
        self.coarse_size * self.grid_factor
    }

    pub fn frame_ms(&self) -> f64 {
        1000.0 / self.frame_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_rate_hz", self.frame_rate_hz),
            ("pixel_size_nm", self.pixel_size_nm),
            ("fwhm_nm", self.fwhm_nm),
            ("on_ms", self.on_ms),
            ("off_ms", self.off_ms),
            ("bleach_s", self.bleach_s),
            ("quantum_efficiency", self.quantum_efficiency),
            ("camera_gain", self.camera_gain),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("photons_per_frame", self.photons_per_frame),
            ("density", self.density),
            ("background_photons", self.background_photons),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if let Some(s2) = self.gaussian_sigma2 {
            if !(s2 >= 0.0) {
                return Err(Error::Config(format!("gaussian_sigma2 must be nonnegative, got {s2}")));
            }
        }
        if self.grid_factor == 0 || self.coarse_size == 0 {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        Ok(())
    }

    pub fn forward_model(&self) -> Result<ForwardModel> {
        ForwardModel::gaussian(self.coarse_size, self.grid_factor, self.fwhm_nm, self.pixel_size_nm)
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub stack: ImageStack,
    /// Noise-free, background-free frames `QE·gain·Ψ X_t`.
    pub reference: ImageStack,
    /// Emitter counts per fine pixel.
    pub phantom: Array2<f64>,
    /// Time-averaged fine-grid intensity in camera units.
    pub gt_intensity: Array2<f64>,
    pub gt_support: Support,
    /// Background in camera units on the coarse grid.
    pub gt_background: Array2<f64>,
    pub sigma2_used: f64,
}

fn sample_exp(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean.is_infinite() {
        return f64::INFINITY;
    }
    let e: f64 = Exp1.sample(rng);
    e * mean
}

fn catmull_rom(p: [(f64, f64); 4], t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
    };
    (f(p[0].0, p[1].0, p[2].0, p[3].0), f(p[0].1, p[1].1, p[2].1, p[3].1))
}

fn filament_mask(n: usize, curves: usize, thickness: usize, seed: u64) -> Array2<bool> {
    let mut mask = Array2::from_elem((n, n), false);
    let mut rng = stream(seed, STREAM_PHANTOM, 0);
    let nf = n as f64;
    let radius = thickness.max(1) as f64 / 2.0;
    for _ in 0..curves {
        let mut pts = Vec::with_capacity(6);
        let mut pos = (rng.random_range(0.15..0.85) * nf, rng.random_range(0.15..0.85) * nf);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let stride = nf / 5.0;
        // Walk backwards once so the curve passes through the start point.
        pts.push((pos.0 - stride * heading.cos(), pos.1 - stride * heading.sin()));
        for _ in 0..5 {
            pts.push(pos);
            heading += rng.random_range(-0.6..0.6);
            pos = (pos.0 + stride * heading.cos(), pos.1 + stride * heading.sin());
        }
        pts.push(pos);
        for w in pts.windows(4) {
            let seg = [w[0], w[1], w[2], w[3]];
            let steps = (4.0 * stride).ceil() as usize * 4;
            for k in 0..=steps {
                let (r, c) = catmull_rom(seg, k as f64 / steps as f64);
                let (r0, r1) = ((r - radius + 0.5).floor(), (r + radius - 0.5).floor());
                let (c0, c1) = ((c - radius + 0.5).floor(), (c + radius - 0.5).floor());
                let mut rr = r0;
                while rr <= r1.max(r0) {
                    let mut cc = c0;
                    while cc <= c1.max(c0) {
                        if rr >= 0.0 && cc >= 0.0 && rr < nf && cc < nf {
                            mask[[rr as usize, cc as usize]] = true;
                        }
                        cc += 1.0;
                    }
                    rr += 1.0;
                }
            }
        }
    }
    mask
}

/// Fine-grid emitter counts for the configured phantom.
pub fn generate_phantom(cfg: &SimulationConfig) -> Result<Array2<f64>> {
    let n = cfg.fine_size();
    match &cfg.phantom {
        PhantomSpec::Filaments { curves, thickness } => {
            let mask = filament_mask(n, *curves, *thickness, cfg.seed);
            let mut rng = stream(cfg.seed, STREAM_PHANTOM, 1);
            let whole = cfg.density.floor();
            let frac = cfg.density - whole;
            Ok(mask.mapv(|on| {
                if on {
                    whole + if rng.random::<f64>() < frac { 1.0 } else { 0.0 }
                } else {
                    0.0
                }
            }))
        }
        PhantomSpec::Image { path } => {
            let img = crate::io::read_image(path)?;
            if img.dim() != (n, n) {
                return Err(Error::dimension("phantom image", format!("{n}x{n}"), format!("{:?}", img.dim())));
            }
            if img.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config("phantom image must be finite and nonnegative".into()));
            }
            Ok(img)
        }
        PhantomSpec::Points { pixels, emitters } => {
            let mut img = Array2::zeros((n, n));
            for &[r, c] in pixels {
                if r >= n || c >= n {
                    return Err(Error::dimension("phantom pixel", format!("< {n}"), format!("({r}, {c})")));
                }
                img[[r, c]] = *emitters;
            }
            Ok(img)
        }
    }
}

/// Emitters as `(row, col, brightness weight)`. A pixel holding `v > 0`
/// carries `max(1, round(v))` emitters sharing total weight `v`.
fn emitters(phantom: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    // Column-major order so emitter indices follow the pixel indexing.
    for c in 0..phantom.ncols() {
        for r in 0..phantom.nrows() {
            let v = phantom[[r, c]];
            if v > 0.0 {
                let count = v.round().max(1.0) as usize;
                let w = v / count as f64;
                out.extend(std::iter::repeat_n((r, c, w), count));
            }
        }
    }
    out
}

/// Fraction of each frame window an emitter spends emitting.
fn on_fractions(cfg: &SimulationConfig, index: u64, frames: usize) -> Vec<f64> {
    let mut rng = stream(cfg.seed, STREAM_BLINK, index);
    let dt = cfg.frame_ms();
    let budget = sample_exp(&mut rng, cfg.bleach_s * 1000.0);
    let mut bleach_at = match cfg.bleach_clock {
        BleachClock::Elapsed => budget,
        BleachClock::Emitting => f64::INFINITY,
    };
    let p_on = if cfg.on_ms.is_infinite() { 1.0 } else { cfg.on_ms / (cfg.on_ms + cfg.off_ms) };
    let mut on = rng.random::<f64>() < p_on;
    let mut now = 0.0;
    let mut emitted = 0.0;
    let mut next = sample_exp(&mut rng, if on { cfg.on_ms } else { cfg.off_ms });
    let mut fractions = vec![0.0; frames];
    for (f, frac) in fractions.iter_mut().enumerate() {
        let end = (f + 1) as f64 * dt;
        let mut acc = 0.0;
        while now < end.min(bleach_at) {
            let mut seg_end = next.min(end).min(bleach_at);
            if on {
                if cfg.bleach_clock == BleachClock::Emitting && emitted + (seg_end - now) >= budget {
                    seg_end = now + (budget - emitted);
                    bleach_at = seg_end;
                }
                acc += seg_end - now;
                emitted += seg_end - now;
            }
            now = seg_end;
            if now >= next {
                on = !on;
                next = now + sample_exp(&mut rng, if on { cfg.on_ms } else { cfg.off_ms });
            }
        }
        *frac = acc / dt;
    }
    fractions
}

/// Per-frame fine-grid expected photon counts `X_t`, shape `(T, L, L)`.
pub fn simulate_blinking(phantom: &Array2<f64>, cfg: &SimulationConfig) -> Result<Array3<f64>> {
    cfg.validate()?;
    let n = phantom.nrows();
    let t = cfg.frames;
    let list = emitters(phantom);
    let traces: Vec<Vec<f64>> = (0..list.len())
        .into_par_iter()
        .map(|e| on_fractions(cfg, e as u64, t))
        .collect();
    let frames: Vec<Array2<f64>> = (0..t)
        .into_par_iter()
        .map(|f| {
            let mut frame = Array2::zeros((n, n));
            for (e, &(r, c, w)) in list.iter().enumerate() {
                let on = traces[e][f];
                if on > 0.0 {
                    frame[[r, c]] += cfg.photons_per_frame * w * on;
                }
            }
            frame
        })
        .collect();
    Ok(stack_frames(frames, n))
}

fn stack_frames(frames: Vec<Array2<f64>>, n: usize) -> Array3<f64> {
    let mut out = Array3::zeros((frames.len(), n, n));
    for (f, img) in frames.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), f).assign(&img);
    }
    out
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else {
        Poisson::new(lambda).expect("positive finite rate").sample(rng)
    }
}

/// Camera rendering of `X_t` with background, shot noise, gain and read noise.
pub fn render_acquisition(
    x_t: &Array3<f64>,
    phantom: &Array2<f64>,
    cfg: &SimulationConfig,
) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let model = cfg.forward_model()?;
    let (t, n, n2) = x_t.dim();
    if n != model.fine_size() || n2 != n {
        return Err(Error::dimension("emitter frames", model.fine_size(), n));
    }
    let m = model.coarse_size();
    let scale = cfg.quantum_efficiency * cfg.camera_gain;

    let blurred: Vec<Array2<f64>> = (0..t)
        .into_par_iter()
        .map(|f| model.forward_unchecked(&x_t.index_axis(Axis(0), f)))
        .collect();

    let mut reference = Array3::zeros((t, m, m));
    for (f, img) in blurred.iter().enumerate() {
        reference.index_axis_mut(Axis(0), f).assign(&(img * scale));
    }
    let sigma2 = match cfg.gaussian_sigma2 {
        Some(v) => v,
        None => {
            let energy = reference.iter().map(|v| v * v).sum::<f64>() / reference.len() as f64;
            energy / 10f64.powf(cfg.target_snr_db / 10.0)
        }
    };
    let noise = Normal::new(0.0, sigma2.sqrt())
        .map_err(|e| Error::Config(format!("invalid Gaussian noise variance {sigma2}: {e}")))?;

    let frames: Vec<Array2<f64>> = blurred
        .par_iter()
        .enumerate()
        .map(|(f, img)| {
            let mut rng = stream(cfg.seed, STREAM_FRAME, f as u64);
            img.mapv(|v| {
                let rate = v + cfg.background_photons;
                let counts = if cfg.qe_before_poisson {
                    poisson(&mut rng, cfg.quantum_efficiency * rate) * cfg.camera_gain
                } else {
                    poisson(&mut rng, rate) * scale
                };
                if sigma2 > 0.0 {
                    counts + noise.sample(&mut rng)
                } else {
                    counts
                }
            })
        })
        .collect();
    let stack = stack_frames(frames, m);

    let gt_intensity = x_t.mean_axis(Axis(0)).expect("at least one frame") * scale;
    let gt_support = Support::nonzero(&gt_intensity.view());
    Ok(SimulatedDataset {
        stack: ImageStack::new(stack, cfg.pixel_size_nm, cfg.frame_rate_hz)?,
        reference: ImageStack::new(reference, cfg.pixel_size_nm, cfg.frame_rate_hz)?,
        phantom: phantom.clone(),
        gt_intensity,
        gt_support,
        gt_background: Array2::from_elem((m, m), cfg.background_photons * scale),
        sigma2_used: sigma2,
    })
}

/// Phantom, blinking and rendering in one call.
pub fn simulate(cfg: &SimulationConfig) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let phantom = generate_phantom(cfg)?;
    let x_t = simulate_blinking(&phantom, cfg)?;
    render_acquisition(&x_t, &phantom, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SimulationConfig {
        SimulationConfig { coarse_size: 8, grid_factor: 2, frames: 20, seed: 11, ..Default::default() }
    }

    #[test]
    fn presets_differ_only_in_background() {
        let lb = preset(Preset::Lb);
        let hb = preset(Preset::Hb);
        assert_eq!(lb.background_photons, 50.0);
        assert_eq!(hb.background_photons, 2500.0);
        assert_eq!(SimulationConfig { background_photons: 50.0, ..hb.clone() }, lb);
        assert_eq!(lb.fwhm_nm, 228.75);
        assert_eq!(lb.pixel_size_nm, 100.0);
        assert_eq!(lb.frame_rate_hz, 100.0);
    }

    #[test]
    fn phantom_is_seeded() {
        let cfg = small_cfg();
        let a = generate_phantom(&cfg).unwrap();
        assert_eq!(a, generate_phantom(&cfg).unwrap());
        assert!(a.iter().any(|&v| v > 0.0));
        let other = generate_phantom(&SimulationConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn always_on_emitters_are_static() {
        let cfg = SimulationConfig {
            on_ms: f64::INFINITY,
            bleach_s: f64::INFINITY,
            phantom: PhantomSpec::Points { pixels: vec![[3, 4], [10, 2]], emitters: 2.0 },
            ..small_cfg()
        };
        let phantom = generate_phantom(&cfg).unwrap();
        let x = simulate_blinking(&phantom, &cfg).unwrap();
        for frame in x.axis_iter(Axis(0)) {
            assert_eq!(frame.to_owned(), &phantom * cfg.photons_per_frame);
        }
    }

    #[test]
    fn silent_configuration_renders_zeros() {
        let cfg = SimulationConfig {
            phantom: PhantomSpec::Points { pixels: vec![], emitters: 1.0 },
            background_photons: 0.0,
            gaussian_sigma2: Some(0.0),
            ..small_cfg()
        };
        let data = simulate(&cfg).unwrap();
        assert!(data.stack.frames().iter().all(|&v| v == 0.0));
        assert!(data.gt_support.is_empty());
    }

    #[test]
    fn bleached_emitters_stay_dark() {
        let cfg = SimulationConfig {
            bleach_s: 0.001,
            bleach_clock: BleachClock::Elapsed,
            frames: 50,
            ..small_cfg()
        };
        for e in 0..10 {
            let fr = on_fractions(&cfg, e, 50);
            assert!(fr[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn emitting_clock_limits_total_on_time() {
        let cfg = SimulationConfig { bleach_s: 0.001, frames: 400, ..small_cfg() };
        for e in 0..10 {
            let fr = on_fractions(&cfg, e, 400);
            let on_ms: f64 = fr.iter().sum::<f64>() * cfg.frame_ms();
            assert!(on_ms < 50.0, "emitter {e} was on for {on_ms} ms");
            let last = fr.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            assert!(fr[last + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn on_fractions_lie_in_unit_interval() {
        let cfg = small_cfg();
        for e in 0..20 {
            assert!(on_fractions(&cfg, e, 200).iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}

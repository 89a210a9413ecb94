//! Deterministic synthetic infrared scenes.
//!
//! Each image is a smooth cloudy background (blurred white noise,
//! rescaled to [0, 0.7]) plus a few small isotropic Gaussian hot spots
//! and per-pixel sensor noise. The ground-truth mask marks the pixels
//! where a hot spot exceeds half of its own amplitude, which makes the
//! mask independent of the background and of the noise draw. Everything
//! derives from a single seeded stream, so a config produces the same
//! bytes on every run.

use super::write_png_gray;
use crate::tensor::Tensor4;
use crate::{Error, Result};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};
use std::path::Path;

/// Knobs for [`synth_generate`]. Ranges are inclusive (lo, hi) pairs
/// sampled uniformly per image or per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of images to write.
    pub count: usize,
    /// (h, w); both must be multiples of 16 so the default model needs
    /// no padding.
    pub size: (usize, usize),
    /// Targets per image, sampled as a uniform integer.
    pub targets_per_image: (usize, usize),
    /// Gaussian radius of a target, pixels.
    pub target_sigma: (f64, f64),
    /// Peak brightness a target adds above the local background.
    pub target_amplitude: (f64, f64),
    /// Blur radius of the background noise, pixels.
    pub background_smoothness: f64,
    /// Standard deviation of the additive per-pixel noise.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 320,
            size: (64, 64),
            targets_per_image: (1, 4),
            target_sigma: (0.7, 2.5),
            target_amplitude: (0.3, 1.0),
            background_smoothness: 8.0,
            noise_floor: 0.02,
            seed: 0,
        }
    }
}

/// Minimum distance from a target center to any image border.
const BORDER_MARGIN: usize = 4;
/// Minimum distance between two target centers.
const CENTER_SPACING: f64 = 8.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::config(msg));
        if self.count == 0 {
            return err("count must be at least 1".into());
        }
        let (h, w) = self.size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return err(format!("size must be positive multiples of 16, got {h}x{w}"));
        }
        let (t_lo, t_hi) = self.targets_per_image;
        if t_lo < 1 || t_lo > t_hi {
            return err(format!(
                "targets_per_image must satisfy 1 <= lo <= hi, got ({t_lo}, {t_hi})"
            ));
        }
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi;
        if !ordered(self.target_sigma.0, self.target_sigma.1) {
            return err(format!(
                "target_sigma must satisfy 0 < lo <= hi, got {:?}",
                self.target_sigma
            ));
        }
        if !ordered(self.target_amplitude.0, self.target_amplitude.1) {
            return err(format!(
                "target_amplitude must satisfy 0 < lo <= hi, got {:?}",
                self.target_amplitude
            ));
        }
        if !(self.background_smoothness.is_finite() && self.background_smoothness > 0.0) {
            return err(format!(
                "background_smoothness must be positive, got {}",
                self.background_smoothness
            ));
        }
        if !(self.noise_floor.is_finite() && self.noise_floor >= 0.0) {
            return err(format!("noise_floor must be nonnegative, got {}", self.noise_floor));
        }
        Ok(())
    }
}

/// Lattice offsets covered by a target of the given sigma: the bump
/// A exp(-d^2 / 2 sigma^2) exceeds A/2 exactly where d^2 < 2 ln 2 sigma^2.
/// At sigma = 1 that is the center plus its four edge neighbors.
pub fn disc_offsets(sigma: f64) -> Vec<(isize, isize)> {
    let thresh = 2.0 * LN_2 * sigma * sigma;
    let r = thresh.sqrt().ceil() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) < thresh {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Index folding for blur taps that run past the edge: mirror without
/// repeating the border sample, applied as often as needed.
fn reflect_fold(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with reflected edges, kernel cut at 3 sigma.
fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for k in -r..=r {
        kernel.push((-((k * k) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= norm;
    }

    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect_fold(x as isize + ki as isize - r, w);
                acc += kv * field[y * w + sx];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect_fold(y as isize + ki as isize - r, h);
                acc += kv * rows[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Standard normal draw via the Box-Muller transform.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Draws `k` integer centers at least [`BORDER_MARGIN`] from every border
/// and [`CENTER_SPACING`] from each other, or reports the constraints
/// unsatisfiable after a bounded number of attempts.
fn place_targets(
    rng: &mut ChaCha8Rng,
    k: usize,
    h: usize,
    w: usize,
) -> Result<Vec<(usize, usize)>> {
    const MAX_ATTEMPTS: usize = 1000;
    let spacing_sq = CENTER_SPACING * CENTER_SPACING;
    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(k);
    'next_target: for _ in 0..k {
        for _ in 0..MAX_ATTEMPTS {
            let cy = rng.gen_range(BORDER_MARGIN..=h - 1 - BORDER_MARGIN);
            let cx = rng.gen_range(BORDER_MARGIN..=w - 1 - BORDER_MARGIN);
            let clear = centers.iter().all(|&(y, x)| {
                let dy = cy as f64 - y as f64;
                let dx = cx as f64 - x as f64;
                dy * dy + dx * dx >= spacing_sq
            });
            if clear {
                centers.push((cy, cx));
                continue 'next_target;
            }
        }
        return Err(Error::Data(format!(
            "cannot place {k} targets {CENTER_SPACING} px apart within {h}x{w}"
        )));
    }
    Ok(centers)
}

/// Writes `config.count` image/mask pairs under `out_dir` in the
/// [`super::load_dataset`] layout and returns the per-image target count.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<Vec<usize>> {
    config.validate()?;
    let (h, w) = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut counts = Vec::with_capacity(config.count);

    for i in 0..config.count {
        // Cloudy background: blurred white noise, rescaled to [0, 0.7]
        // so the brightest clutter stays below a full-amplitude target.
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let blurred = gaussian_blur(&noise, h, w, config.background_smoothness);
        let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { 0.7 / (hi - lo) } else { 0.0 };
        let mut field: Vec<f64> = blurred.iter().map(|v| (v - lo) * scale).collect();
        let mut mask = vec![0.0f64; h * w];

        let k = rng.gen_range(config.targets_per_image.0..=config.targets_per_image.1);
        let centers = place_targets(&mut rng, k, h, w)?;
        for &(cy, cx) in &centers {
            let sigma = rng.gen_range(config.target_sigma.0..=config.target_sigma.1);
            let amp = rng.gen_range(config.target_amplitude.0..=config.target_amplitude.1);
            let win = (6.0 * sigma).ceil() as isize;
            for dy in -win..=win {
                let y = cy as isize + dy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in -win..=win {
                    let x = cx as isize + dx;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let d2 = (dy * dy + dx * dx) as f64;
                    field[y as usize * w + x as usize] +=
                        amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
            for (dy, dx) in disc_offsets(sigma) {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                    mask[y as usize * w + x as usize] = 1.0;
                }
            }
        }

        for v in &mut field {
            *v = (*v + config.noise_floor * gauss(&mut rng)).clamp(0.0, 1.0);
        }

        let image = Tensor4::from_vec([1, 1, h, w], field)?;
        let mask = Tensor4::from_vec([1, 1, h, w], mask)?;
        let name = format!("synth_{i:04}.png");
        write_png_gray(&out_dir.join("images").join(&name), &image)?;
        write_png_gray(&out_dir.join("masks").join(&name), &mask)?;
        counts.push(k);
    }
    Ok(counts)
}

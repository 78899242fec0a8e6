//! Seeded synthetic fundus-like corpus: bright curvy filaments of width
//! 1–4 px on a smooth, noisy background, with exact truth masks and a
//! full-frame field of view.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{save_binary_map, Dataset, FundusSample};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMap, Map, Tensor};

/// Vessel fraction the generator aims for; always inside `(0.02, 0.20)`.
const TARGET_FRACTION: (f64, f64) = (0.06, 0.14);
const MAX_CURVES: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Curve {
    ctrl: [(f64, f64); 4],
    width: u32,
}

impl Curve {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let mut pt = || (rng.random_range(-0.1..1.1) * s, rng.random_range(-0.1..1.1) * s);
        let ctrl = [pt(), pt(), pt(), pt()];
        Curve {
            ctrl,
            width: rng.random_range(1..=4),
        }
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let u = 1.0 - t;
        let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
        let mut p = (0.0, 0.0);
        for (w, c) in b.iter().zip(&self.ctrl) {
            p.0 += w * c.0;
            p.1 += w * c.1;
        }
        p
    }

    /// Marks pixels whose centre lies within `width / 2` of the curve.
    fn rasterize(&self, mask: &mut BinaryMap) {
        let len: f64 = self
            .ctrl
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum();
        let steps = (len * 4.0).ceil().max(2.0) as usize;
        let r = (self.width as f64 / 2.0).max(0.5);
        let (h, w) = mask.dims();
        for i in 0..=steps {
            let (py, px) = self.at(i as f64 / steps as f64);
            let (y0, y1) = ((py - r).floor().max(0.0), (py + r).ceil().min(h as f64 - 1.0));
            let (x0, x1) = ((px - r).floor().max(0.0), (px + r).ceil().min(w as f64 - 1.0));
            if y0 > y1 || x0 > x1 {
                continue;
            }
            for y in y0 as usize..=y1 as usize {
                for x in x0 as usize..=x1 as usize {
                    let (dy, dx) = (y as f64 + 0.5 - py, x as f64 + 0.5 - px);
                    if dy * dy + dx * dx <= r * r {
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One synthetic sample of `size × size` pixels.
pub fn synthetic_sample(id: &str, size: usize, rng: &mut ChaCha8Rng) -> FundusSample {
    let mut truth = Map::filled(size, size, false);
    let total = (size * size) as f64;
    for _ in 0..MAX_CURVES {
        let mut next = truth.clone();
        Curve::random(rng, size).rasterize(&mut next);
        let frac = next.count_ones() as f64 / total;
        if frac > TARGET_FRACTION.1 {
            continue;
        }
        truth = next;
        if frac >= TARGET_FRACTION.0 {
            break;
        }
    }

    // smooth illumination gradient plus pixel noise
    let tint = [0.9, 0.55, 0.3];
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let base = rng.random_range(0.15..0.25);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut image = Tensor::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let bg = base + gy * (y as f64 / size as f64 - 0.5) + gx * (x as f64 / size as f64 - 0.5);
            let v = bg + if truth.get(y, x) { 0.45 } else { 0.0 };
            for (c, t) in tint.iter().enumerate() {
                let n: f64 = noise.sample(rng);
                image.set(c, y, x, quantize(t * v + n));
            }
        }
    }
    FundusSample {
        id: id.to_string(),
        image,
        truth,
        fov: Map::filled(size, size, true),
        source: Dataset::Synthetic,
    }
}

fn sample_ids(n: usize) -> Vec<String> {
    let digits = n.to_string().len().max(3);
    (1..=n).map(|i| format!("{i:0digits$}")).collect()
}

/// `n` samples from one seed; identical seeds give identical corpora.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Vec<FundusSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_ids(n)
        .iter()
        .map(|id| synthetic_sample(id, size, &mut rng))
        .collect()
}

/// Writes a synthetic corpus in the standard `images/`, `truth/`, `mask/`
/// layout. Returns the generated samples.
pub fn write_synthetic(out_dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<FundusSample>> {
    if n == 0 || size < 16 {
        return Err(Error::Config(format!(
            "synthetic corpus needs n ≥ 1 and size ≥ 16 (got n = {n}, size = {size})"
        )));
    }
    let samples = generate_synthetic(n, size, seed);
    for sub in ["images", "truth", "mask"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let seed_text = seed.to_string();
    let meta = [("generator", "synthetic"), ("seed", seed_text.as_str())];
    for s in &samples {
        let path = out_dir.join("images").join(format!("{}_synth.png", s.id));
        let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let px = |c| (s.image.get(c, y as usize, x as usize) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        save_binary_map(&s.truth, &out_dir.join("truth").join(format!("{}_manual.png", s.id)), &meta)?;
        save_binary_map(&s.fov, &out_dir.join("mask").join(format!("{}_mask.png", s.id)), &meta)?;
    }
    Ok(samples)
}

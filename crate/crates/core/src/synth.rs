//! Seeded synthetic scenes: layered stereo pairs with piecewise-constant
//! disparity and noisy segmentation maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{GridShape, Plane, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoSceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
    /// Foreground rectangles drawn over the background plane.
    pub rectangles: usize,
    /// Standard deviation of Gaussian noise added to each view.
    pub noise: f64,
    /// Side of the constant-intensity blocks that make up each texture.
    pub texture_block: usize,
    /// Texture amplitude around mid-grey, in `(0, 1]`.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for StereoSceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_disp: 15,
            rectangles: 4,
            noise: 0.05,
            texture_block: 1,
            contrast: 1.0,
            seed: 0,
        }
    }
}

/// A rectified pair with the left-view disparity.
#[derive(Debug, Clone)]
pub struct StereoScene {
    pub left: Plane<f64>,
    pub right: Plane<f64>,
    pub disparity: Plane<f64>,
    /// Left pixels whose match lies inside the right view and is not
    /// covered there by a nearer layer.
    pub visible: Plane<bool>,
}

struct Layer {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    disp: usize,
    texture: Vec<f64>,
}

/// Renders a background plane and axis-aligned rectangles, each with a
/// constant disparity and its own random texture. Later rectangles are
/// nearer and have at least the disparity of the layers drawn before them.
pub fn stereo_scene(cfg: &StereoSceneConfig) -> Result<StereoScene> {
    let (h, w, dmax) = (cfg.height, cfg.width, cfg.max_disp);
    if h < 4 || w < 4 || dmax == 0 || dmax >= w {
        return Err(Error::InvalidArgument(format!(
            "cannot render a {h}x{w} scene with disparities up to {dmax}"
        )));
    }
    if cfg.texture_block == 0
        || cfg.noise.is_nan()
        || cfg.noise < 0.0
        || cfg.contrast.is_nan()
        || cfg.contrast <= 0.0
        || cfg.contrast > 1.0
    {
        return Err(Error::InvalidArgument(
            "texture block must be positive, noise non-negative and contrast in (0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = cfg.texture_block;
    let texture = |rng: &mut ChaCha8Rng| {
        let bh = h.div_ceil(block);
        let bw = w.div_ceil(block);
        let blocks: Vec<f64> = (0..bh * bw)
            .map(|_| 0.5 + cfg.contrast * (rng.gen::<f64>() - 0.5))
            .collect();
        (0..h * w)
            .map(|i| blocks[(i / w / block) * bw + (i % w) / block])
            .collect::<Vec<f64>>()
    };
    let mut layers = vec![Layer {
        y0: 0,
        y1: h,
        x0: 0,
        x1: w,
        disp: rng.gen_range(0..=dmax / 3),
        texture: texture(&mut rng),
    }];
    for _ in 0..cfg.rectangles {
        let prev = layers.last().expect("background").disp;
        let rh = rng.gen_range(h / 6..=h / 2).max(2);
        let rw = rng.gen_range(w / 6..=w / 2).max(2);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        layers.push(Layer {
            y0,
            y1: y0 + rh,
            x0,
            x1: x0 + rw,
            disp: rng.gen_range(prev..=dmax),
            texture: texture(&mut rng),
        });
    }
    let mut left = Plane::filled(h, w, 0.0);
    let mut right = Plane::filled(h, w, 0.0);
    let mut disparity = Plane::filled(h, w, 0.0);
    let mut right_disp = Plane::filled(h, w, 0.0);
    // the background is textured in left coordinates; right pixels past its
    // left edge reuse the texture at the border
    let bg = &layers[0];
    for y in 0..h {
        for x in 0..w {
            *left.get_mut(y, x) = bg.texture[y * w + x];
            *disparity.get_mut(y, x) = bg.disp as f64;
            *right.get_mut(y, x) = bg.texture[y * w + (x + bg.disp).min(w - 1)];
            *right_disp.get_mut(y, x) = bg.disp as f64;
        }
    }
    for layer in &layers[1..] {
        for y in layer.y0..layer.y1 {
            for x in layer.x0..layer.x1 {
                let v = layer.texture[y * w + x];
                *left.get_mut(y, x) = v;
                *disparity.get_mut(y, x) = layer.disp as f64;
                if x >= layer.disp {
                    *right.get_mut(y, x - layer.disp) = v;
                    *right_disp.get_mut(y, x - layer.disp) = layer.disp as f64;
                }
            }
        }
    }
    let visible = Plane::from_fn(h, w, |y, x| {
        let d = disparity.at(y, x);
        x as f64 >= d && right_disp.at(y, x - d as usize) == d
    });
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("valid standard deviation");
        for v in left.data_mut().iter_mut().chain(right.data_mut().iter_mut()) {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(StereoScene {
        left,
        right,
        disparity,
        visible,
    })
}

/// Adds zero-mean Gaussian noise to every entry.
pub fn add_gaussian_noise(v: &mut Volume, sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise level must be non-negative, got {sigma}"
        )));
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid standard deviation");
        for x in v.data_mut() {
            *x += normal.sample(rng);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SegmentationScene {
    pub truth: Plane<usize>,
    /// Label map after corruption.
    pub noisy: Plane<usize>,
    /// One-hot encoding of `noisy`.
    pub probs: Volume,
}

/// Piecewise-constant class map (background plus random rectangles), with
/// a fraction `noise` of pixels replaced by a uniformly drawn class.
pub fn segmentation_scene(
    height: usize,
    width: usize,
    classes: usize,
    rectangles: usize,
    noise: f64,
    seed: u64,
) -> Result<SegmentationScene> {
    if height < 2 || width < 2 || classes < 2 || !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(
            "segmentation scene needs at least 2x2 pixels, 2 classes and noise in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = Plane::filled(height, width, rng.gen_range(0..classes));
    for _ in 0..rectangles {
        let rh = rng.gen_range(1..=height / 2);
        let rw = rng.gen_range(1..=width / 2);
        let y0 = rng.gen_range(0..=height - rh);
        let x0 = rng.gen_range(0..=width - rw);
        let c = rng.gen_range(0..classes);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                *truth.get_mut(y, x) = c;
            }
        }
    }
    let noisy = truth.map(|&c| {
        if rng.gen::<f64>() < noise {
            rng.gen_range(0..classes)
        } else {
            c
        }
    });
    let shape = GridShape::new(height, width, classes)?;
    let probs = Volume::from_fn(shape, |y, x, s| if noisy.at(y, x) == s { 1.0 } else { 0.0 });
    Ok(SegmentationScene { truth, noisy, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_scene_is_consistent() {
        let cfg = StereoSceneConfig {
            noise: 0.0,
            seed: 3,
            ..StereoSceneConfig::default()
        };
        let s = stereo_scene(&cfg).unwrap();
        let mut matched = 0;
        let mut total = 0;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let d = s.disparity.at(y, x);
                assert!(d >= 0.0 && d <= cfg.max_disp as f64 && d.fract() == 0.0);
                if x >= d as usize {
                    total += 1;
                    if s.right.at(y, x - d as usize) == s.left.at(y, x) {
                        matched += 1;
                    }
                }
            }
        }
        // everything except occluded pixels matches exactly
        assert!(matched as f64 > 0.8 * total as f64, "{matched}/{total}");
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if s.visible.at(y, x) {
                    let d = s.disparity.at(y, x) as usize;
                    assert_eq!(s.right.at(y, x - d), s.left.at(y, x));
                }
            }
        }
    }

    #[test]
    fn scenes_are_seeded() {
        let cfg = StereoSceneConfig::default();
        let a = stereo_scene(&cfg).unwrap();
        let b = stereo_scene(&cfg).unwrap();
        assert_eq!(a.left, b.left);
        assert_eq!(a.right, b.right);
        let c = stereo_scene(&StereoSceneConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.left, c.left);
    }

    #[test]
    fn segmentation_noise_rate() {
        let s = segmentation_scene(64, 64, 4, 6, 0.1, 7).unwrap();
        let changed = s
            .truth
            .data()
            .iter()
            .zip(s.noisy.data())
            .filter(|(a, b)| a != b)
            .count();
        // a replaced pixel keeps its class with probability 1/4
        let rate = changed as f64 / 4096.0;
        assert!((rate - 0.075).abs() < 0.02, "{rate}");
        assert!(s.probs.pixels().all(|p| p.iter().sum::<f64>() == 1.0));
        assert!(segmentation_scene(4, 4, 1, 0, 0.1, 0).is_err());
    }
}

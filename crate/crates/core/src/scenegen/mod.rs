//! Synthetic crowded-ellipse scenes with pixel-exact instance annotations.
//!
//! Pixel `(x, y)` has its center at integer coordinates `(x, y)`; an image of
//! width `W` spans `[-0.5, W - 0.5)`. Instance centers are drawn from
//! `[0, W-1] × [0, H-1]` so they always round to an in-bounds pixel.

mod augment;
mod dataset;

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, streams};

pub use augment::{add_noise, augment, scale_contrast, AugmentKind};
pub use dataset::{decode_pgm, read_dataset, write_dataset, Dataset, FORMAT_VERSION};

/// Gaussian sample clamped to `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippedGaussian {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ClippedGaussian {
    fn validate(&self, what: &str) -> Result<()> {
        let finite = [self.mean, self.std, self.min, self.max].iter().all(|v| v.is_finite());
        if !finite || self.std < 0.0 || self.min > self.max {
            return Err(Error::Config(format!("{what} distribution {self:?} needs std >= 0 and min <= max")));
        }
        Ok(())
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = Normal::new(self.mean, self.std).map(|d| d.sample(rng)).unwrap_or(self.mean);
        x.clamp(self.min, self.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub foreground_min: f64,
    pub foreground_max: f64,
    pub background_mean: f64,
    pub background_std: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        Self { foreground_min: 0.6, foreground_max: 1.0, background_mean: 0.15, background_std: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    /// Instances per scene (rounded after clamping).
    pub count: ClippedGaussian,
    /// Target pixel area per instance.
    pub area: ClippedGaussian,
    /// Range of the minor/major axis ratio `b / a`.
    pub axis_ratio: (f64, f64),
    pub intensity: IntensityModel,
    /// Minimum distance between instance centers; 0 leaves overlap uncontrolled.
    pub min_center_distance: f64,
}

/// Count and size moments of the synthetic ellipse set (256×256 images).
pub const TABLE3_COUNT: (f64, f64) = (44.8, 20.8);
pub const TABLE3_AREA: (f64, f64) = (94.5, 63.2);
pub const DESK_SIDE: usize = 64;
pub const PAPER_SIDE: usize = 256;

impl GenConfig {
    /// Count clipped to `[1, 4·mean]`, area to `[8, mean + 4·std]`.
    pub fn with_moments(side: usize, count: (f64, f64), area: (f64, f64)) -> Self {
        Self {
            width: side,
            height: side,
            count: ClippedGaussian { mean: count.0, std: count.1, min: 1.0, max: 4.0 * count.0 },
            area: ClippedGaussian { mean: area.0, std: area.1, min: 8.0, max: area.0 + 4.0 * area.1 },
            axis_ratio: (0.2, 0.5),
            intensity: IntensityModel::default(),
            min_center_distance: 0.0,
        }
    }

    /// Unscaled count/size moments at the given image side.
    pub fn table3(side: usize) -> Self {
        Self::with_moments(side, TABLE3_COUNT, TABLE3_AREA)
    }

    /// Desk benchmark: 64×64 images whose count and size moments are both
    /// scaled by the linear side ratio 64/256, which keeps the fraction of
    /// image area covered by objects equal to the full-size data.
    pub fn desk() -> Self {
        let f = DESK_SIDE as f64 / PAPER_SIDE as f64;
        Self::with_moments(
            DESK_SIDE,
            (TABLE3_COUNT.0 * f, TABLE3_COUNT.1 * f),
            (TABLE3_AREA.0 * f, TABLE3_AREA.1 * f),
        )
    }

    /// Histogram range covering `mean + 4·std` of the area distribution,
    /// rounded up to a multiple of 16 so every 16-bin edge is an integer.
    pub fn default_s_max(&self) -> f64 {
        let raw = self.area.mean + 4.0 * self.area.std;
        ((raw / 16.0).ceil() * 16.0).max(16.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        self.count.validate("count")?;
        self.area.validate("area")?;
        if self.count.min < 0.0 {
            return Err(Error::Config("count minimum must be nonnegative".into()));
        }
        if self.area.min <= 0.0 {
            return Err(Error::Config("area minimum must be positive".into()));
        }
        if self.area.min > (self.width * self.height) as f64 {
            return Err(Error::Config(format!(
                "minimum instance area {} exceeds image area {}",
                self.area.min,
                self.width * self.height
            )));
        }
        let (lo, hi) = self.axis_ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("axis ratio range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let im = &self.intensity;
        if !(0.0..=1.0).contains(&im.foreground_min)
            || !(0.0..=1.0).contains(&im.foreground_max)
            || im.foreground_min > im.foreground_max
            || im.background_std < 0.0
        {
            return Err(Error::Config(format!("invalid intensity model {im:?}")));
        }
        if self.min_center_distance < 0.0 || !self.min_center_distance.is_finite() {
            return Err(Error::Config("min_center_distance must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseInstance {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Orientation of the major axis in `[0, π)`.
    pub theta: f64,
    /// In-bounds pixel count of this instance drawn alone.
    pub area_px: u32,
}

impl EllipseInstance {
    /// Whether the pixel center `(x, y)` lies inside the ellipse.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u * u) / (self.a * self.a) + (v * v) / (self.b * self.b) <= 1.0
    }

    /// In-bounds pixel window that can intersect the ellipse.
    fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.a;
        let x0 = (self.cx - r).ceil().max(0.0);
        let x1 = (self.cx + r).floor().min(width as f64 - 1.0);
        let y0 = (self.cy - r).ceil().max(0.0);
        let y1 = (self.cy + r).floor().min(height as f64 - 1.0);
        (x0 <= x1 && y0 <= y1).then_some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }

    pub fn for_each_pixel(&self, width: usize, height: usize, mut f: impl FnMut(usize, usize)) {
        if let Some((x0, x1, y0, y1)) = self.pixel_bounds(width, height) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains(x as f64, y as f64) {
                        f(x, y);
                    }
                }
            }
        }
    }

    pub fn rasterized_area(&self, width: usize, height: usize) -> u32 {
        let mut n = 0;
        self.for_each_pixel(width, height, |_, _| n += 1);
        n
    }

    /// Pixel holding the (rounded) center.
    pub fn center_pixel(&self, width: usize, height: usize) -> (usize, usize) {
        let x = self.cx.round().clamp(0.0, width as f64 - 1.0) as usize;
        let y = self.cy.round().clamp(0.0, height as f64 - 1.0) as usize;
        (x, y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub instances: Vec<EllipseInstance>,
}

impl Scene {
    pub fn areas(&self) -> impl Iterator<Item = u32> + '_ {
        self.instances.iter().map(|i| i.area_px)
    }

    pub fn total_area(&self) -> u64 {
        self.areas().map(u64::from).sum()
    }
}

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImagePatch {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Snap values to the 8-bit grid used on disk.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Draws one scene. Identical `(config, seed)` pairs give identical scenes.
pub fn sample_scene(config: &GenConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let n = config.count.sample(&mut rng).round() as usize;
    let (w, h) = (config.width, config.height);
    let mut instances: Vec<EllipseInstance> = Vec::with_capacity(n);
    for _ in 0..n {
        let target = config.area.sample(&mut rng);
        let ratio = rng.random_range(config.axis_ratio.0..=config.axis_ratio.1);
        // π·a·b = target with b/a = ratio; b floored at one pixel so the
        // center pixel is always covered.
        let b = (target * ratio / PI).sqrt().max(1.0);
        let a = (target / (PI * b)).max(b);
        let theta = rng.random_range(0.0..PI);
        let mut placed = None;
        for _ in 0..1000 {
            let cx = rng.random_range(0.0..=(w - 1) as f64);
            let cy = rng.random_range(0.0..=(h - 1) as f64);
            let d2 = config.min_center_distance.powi(2);
            if instances.iter().all(|o| (o.cx - cx).powi(2) + (o.cy - cy).powi(2) >= d2) {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place instance {} with min center distance {}",
                instances.len(),
                config.min_center_distance
            ))
        })?;
        let mut inst = EllipseInstance { cx, cy, a, b, theta, area_px: 0 };
        inst.area_px = inst.rasterized_area(w, h);
        instances.push(inst);
    }
    Ok(Scene { width: w, height: h, seed, instances })
}

/// Seed of scene `index` in a dataset generated from `master`.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    seed::derive(master, streams::SCENES + index)
}

pub fn sample_scenes(config: &GenConfig, master: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64).map(|i| sample_scene(config, scene_seed(master, i))).collect()
}

/// Renders a scene. Foreground intensity per instance is uniform in the
/// configured range, the background is Gaussian texture, and where instances
/// overlap the brightest wins. Output is quantized to 8 bits.
pub fn rasterize_with(scene: &Scene, model: &IntensityModel) -> ImagePatch {
    let mut rng = seed::sub_rng(scene.seed, streams::TEXTURE);
    let (w, h) = (scene.width, scene.height);
    let bg = Normal::new(model.background_mean, model.background_std).ok();
    let mut img = ImagePatch::filled(w, h, model.background_mean);
    for v in &mut img.data {
        *v = bg.map(|d| d.sample(&mut rng)).unwrap_or(model.background_mean).clamp(0.0, 1.0);
    }
    let mut fg = vec![f64::NEG_INFINITY; w * h];
    for inst in &scene.instances {
        let level = rng.random_range(model.foreground_min..=model.foreground_max);
        inst.for_each_pixel(w, h, |x, y| {
            let p = &mut fg[y * w + x];
            *p = p.max(level);
        });
    }
    for (v, f) in img.data.iter_mut().zip(&fg) {
        if f.is_finite() {
            *v = *f;
        }
    }
    img.quantize();
    img
}

pub fn rasterize(scene: &Scene) -> ImagePatch {
    rasterize_with(scene, &IntensityModel::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(cx: f64, cy: f64, r: f64) -> EllipseInstance {
        EllipseInstance { cx, cy, a: r, b: r, theta: 0.0, area_px: 0 }
    }

    fn brute_force_area(inst: &EllipseInstance, w: usize, h: usize) -> u32 {
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - inst.cx, y as f64 - inst.cy);
                let (s, c) = inst.theta.sin_cos();
                let u = (dx * c + dy * s) / inst.a;
                let v = (-dx * s + dy * c) / inst.b;
                if u * u + v * v <= 1.0 {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn centered_circle_area_close_to_pi_r2() {
        let c = circle(31.5, 31.5, 10.0);
        let area = c.rasterized_area(64, 64);
        assert_eq!(area, brute_force_area(&c, 64, 64));
        assert!((area as f64 / (PI * 100.0) - 1.0).abs() < 0.05, "{area}");
    }

    #[test]
    fn boundary_instance_counts_in_bounds_pixels_only() {
        let c = circle(0.0, 10.0, 5.0);
        let area = c.rasterized_area(32, 32);
        assert_eq!(area, brute_force_area(&c, 32, 32));
        let full = circle(16.0, 16.0, 5.0).rasterized_area(32, 32);
        assert!(area < full && area > full / 3);
    }

    #[test]
    fn sampled_areas_match_brute_force() {
        let cfg = GenConfig::desk();
        for s in 0..20 {
            let scene = sample_scene(&cfg, s).unwrap();
            for inst in &scene.instances {
                assert!(inst.a >= inst.b && inst.b > 0.0);
                assert!((0.0..PI).contains(&inst.theta));
                assert!(inst.cx >= 0.0 && inst.cx <= 63.0 && inst.cy >= 0.0 && inst.cy <= 63.0);
                assert_eq!(inst.area_px, brute_force_area(inst, 64, 64));
                assert!(inst.area_px >= 1);
            }
        }
    }

    #[test]
    fn degenerate_zero_count_gives_empty_scene() {
        let mut cfg = GenConfig::desk();
        cfg.count = ClippedGaussian { mean: 0.0, std: 0.0, min: 0.0, max: 0.0 };
        assert!(sample_scene(&cfg, 3).unwrap().instances.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = GenConfig::table3(64);
        assert_eq!(sample_scene(&cfg, 11).unwrap(), sample_scene(&cfg, 11).unwrap());
        assert_ne!(sample_scene(&cfg, 11).unwrap(), sample_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn unsatisfiable_configs_are_rejected() {
        let mut cfg = GenConfig::desk();
        cfg.area.min = 5000.0;
        cfg.area.max = 6000.0;
        assert!(matches!(sample_scene(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = GenConfig::desk();
        cfg.count.std = -1.0;
        assert!(sample_scene(&cfg, 0).is_err());
        let mut cfg = GenConfig::desk();
        cfg.min_center_distance = 200.0;
        cfg.count = ClippedGaussian { mean: 5.0, std: 0.0, min: 5.0, max: 5.0 };
        assert!(sample_scene(&cfg, 0).is_err());
    }

    #[test]
    fn proximity_knob_is_respected() {
        let mut cfg = GenConfig::desk();
        cfg.min_center_distance = 6.0;
        let scene = sample_scene(&cfg, 5).unwrap();
        for (i, p) in scene.instances.iter().enumerate() {
            for q in &scene.instances[i + 1..] {
                assert!(((p.cx - q.cx).powi(2) + (p.cy - q.cy).powi(2)).sqrt() >= 6.0);
            }
        }
    }

    #[test]
    fn empty_scene_renders_background_only() {
        let scene = Scene { width: 16, height: 16, seed: 1, instances: vec![] };
        let img = rasterize(&scene);
        assert!(img.data.iter().all(|&v| v < 0.6));
        let mean = img.data.iter().sum::<f64>() / 256.0;
        assert!((mean - 0.15).abs() < 0.02, "{mean}");
    }

    #[test]
    fn rasterized_foreground_covers_instance_pixels() {
        let scene = Scene { width: 32, height: 32, seed: 2, instances: vec![circle(10.0, 12.0, 4.0)] };
        let img = rasterize(&scene);
        scene.instances[0].for_each_pixel(32, 32, |x, y| assert!(img.get(x, y) >= 0.6 - 1e-12));
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.data.iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
    }

    #[test]
    fn s_max_defaults() {
        assert_eq!(GenConfig::table3(256).default_s_max(), 352.0);
        assert_eq!(GenConfig::desk().default_s_max(), 96.0);
    }
}

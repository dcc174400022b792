use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EllipseInstance, ImagePatch, Scene};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    Noise,
    Contrast,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 7] = [
        AugmentKind::HFlip,
        AugmentKind::VFlip,
        AugmentKind::Rot90,
        AugmentKind::Rot180,
        AugmentKind::Rot270,
        AugmentKind::Noise,
        AugmentKind::Contrast,
    ];

    pub fn is_geometric(self) -> bool {
        !matches!(self, AugmentKind::Noise | AugmentKind::Contrast)
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::HFlip => "hflip",
            AugmentKind::VFlip => "vflip",
            AugmentKind::Rot90 => "rot90",
            AugmentKind::Rot180 => "rot180",
            AugmentKind::Rot270 => "rot270",
            AugmentKind::Noise => "noise",
            AugmentKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation kind {s:?}")))
    }
}

/// Maps source pixel coordinates to destination coordinates.
fn map_point(kind: AugmentKind, w: usize, h: usize, x: f64, y: f64) -> (f64, f64) {
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    match kind {
        AugmentKind::HFlip => (wm - x, y),
        AugmentKind::VFlip => (x, hm - y),
        // Quarter turn: destination is h wide and w tall.
        AugmentKind::Rot90 => (y, wm - x),
        AugmentKind::Rot180 => (wm - x, hm - y),
        AugmentKind::Rot270 => (hm - y, x),
        AugmentKind::Noise | AugmentKind::Contrast => (x, y),
    }
}

fn map_theta(kind: AugmentKind, theta: f64) -> f64 {
    let t = match kind {
        AugmentKind::HFlip | AugmentKind::VFlip => PI - theta,
        AugmentKind::Rot90 => theta - PI / 2.0,
        AugmentKind::Rot270 => theta + PI / 2.0,
        _ => theta,
    };
    let t = t.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

fn geometric(image: &ImagePatch, scene: &Scene, kind: AugmentKind) -> (ImagePatch, Scene) {
    let (w, h) = (image.width, image.height);
    let (nw, nh) = if matches!(kind, AugmentKind::Rot90 | AugmentKind::Rot270) { (h, w) } else { (w, h) };
    let mut out = ImagePatch::filled(nw, nh, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = map_point(kind, w, h, x as f64, y as f64);
            out.data[ny as usize * nw + nx as usize] = image.get(x, y);
        }
    }
    let instances = scene
        .instances
        .iter()
        .map(|i| {
            let (cx, cy) = map_point(kind, w, h, i.cx, i.cy);
            EllipseInstance { cx, cy, theta: map_theta(kind, i.theta), ..i.clone() }
        })
        .collect();
    (out, Scene { width: nw, height: nh, seed: scene.seed, instances })
}

/// Adds i.i.d. `N(0, sigma²)` noise and clips to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(image: &ImagePatch, sigma: f64, rng: &mut R) -> ImagePatch {
    let mut out = image.clone();
    if sigma > 0.0 {
        let d = Normal::new(0.0, sigma).expect("positive sigma");
        for v in &mut out.data {
            *v = (*v + d.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Scales intensities by `gamma` and clips to `[0, 1]`.
pub fn scale_contrast(image: &ImagePatch, gamma: f64) -> ImagePatch {
    let mut out = image.clone();
    for v in &mut out.data {
        *v = (*v * gamma).clamp(0.0, 1.0);
    }
    out
}

/// Applies one augmentation. Geometric kinds move annotations with the
/// pixels (areas unchanged); photometric kinds leave annotations untouched.
/// Noise σ is drawn from `U[0, 0.05]`, contrast γ from `U[0.8, 1.2]`.
pub fn augment<R: Rng + ?Sized>(
    image: &ImagePatch,
    scene: &Scene,
    kind: AugmentKind,
    rng: &mut R,
) -> Result<(ImagePatch, Scene)> {
    if (image.width, image.height) != (scene.width, scene.height) {
        return Err(Error::Dimension(format!(
            "image {}x{} does not match scene {}x{}",
            image.width, image.height, scene.width, scene.height
        )));
    }
    Ok(match kind {
        AugmentKind::Noise => {
            let sigma = rng.random_range(0.0..=0.05);
            (add_noise(image, sigma, rng), scene.clone())
        }
        AugmentKind::Contrast => {
            let gamma = rng.random_range(0.8..=1.2);
            (scale_contrast(image, gamma), scene.clone())
        }
        _ => geometric(image, scene, kind),
    })
}

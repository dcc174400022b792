//! Training targets derived from annotations: the redundant count map and
//! the nested 16/8/4/2-bin size-histogram ladder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::Scene;

/// Dense grid of per-window object counts, `(H + r − 1) × (W + r − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMap {
    pub rows: usize,
    pub cols: usize,
    /// Receptive-field side.
    pub r: usize,
    pub grid: Vec<f64>,
}

impl CountMap {
    pub fn zeros(rows: usize, cols: usize, r: usize) -> Self {
        Self { rows, cols, r, grid: vec![0.0; rows * cols] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.cols + col]
    }

    /// `Σ grid / r²`.
    pub fn count(&self) -> f64 {
        count_from_map(&self.grid, self.r)
    }
}

fn check_receptive_field(r: usize, h: usize, w: usize) -> Result<()> {
    if r % 2 == 0 {
        return Err(Error::Config(format!("receptive field {r} must be odd")));
    }
    if r >= h.min(w) {
        return Err(Error::Config(format!("receptive field {r} must be smaller than the image ({h}x{w})")));
    }
    Ok(())
}

/// Full cross-correlation of the center-indicator image with an `r×r` ones
/// kernel: each instance adds 1 to the `r×r` block whose top-left cell is
/// its rounded center pixel.
pub fn build_count_map(scene: &Scene, r: usize) -> Result<CountMap> {
    check_receptive_field(r, scene.height, scene.width)?;
    let mut map = CountMap::zeros(scene.height + r - 1, scene.width + r - 1, r);
    for inst in &scene.instances {
        let (x, y) = inst.center_pixel(scene.width, scene.height);
        for row in y..y + r {
            map.grid[row * map.cols + x..row * map.cols + x + r].iter_mut().for_each(|v| *v += 1.0);
        }
    }
    Ok(map)
}

/// Object count recovered from a redundant map.
pub fn count_from_map(grid: &[f64], r: usize) -> f64 {
    grid.iter().sum::<f64>() / (r * r) as f64
}

pub const LADDER_LEVELS: [usize; 4] = [16, 8, 4, 2];

/// Size histograms at 16, 8, 4 and 2 bins over `[0, s_max)`; each coarser
/// level is the pairwise merge of the finer one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinLadder {
    pub s_max: f64,
    pub hist16: Vec<f64>,
    pub hist8: Vec<f64>,
    pub hist4: Vec<f64>,
    pub hist2: Vec<f64>,
}

/// `out[i] = h[2i] + h[2i+1]`.
pub fn merge_pairs(h: &[f64]) -> Vec<f64> {
    h.chunks(2).map(|p| p.iter().sum()).collect()
}

impl BinLadder {
    pub fn from_hist16(s_max: f64, hist16: Vec<f64>) -> Self {
        let hist8 = merge_pairs(&hist16);
        let hist4 = merge_pairs(&hist8);
        let hist2 = merge_pairs(&hist4);
        Self { s_max, hist16, hist8, hist4, hist2 }
    }

    pub fn level(&self, bins: usize) -> Result<&[f64]> {
        match bins {
            16 => Ok(&self.hist16),
            8 => Ok(&self.hist8),
            4 => Ok(&self.hist4),
            2 => Ok(&self.hist2),
            _ => Err(Error::Dimension(format!("no {bins}-bin level in the ladder"))),
        }
    }

    pub fn edges(&self, bins: usize) -> Vec<f64> {
        uniform_edges(self.s_max, bins)
    }
}

pub fn uniform_edges(s_max: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| s_max * i as f64 / bins as f64).collect()
}

/// Bins `area_px` uniformly over `[0, s_max)`; larger areas land in the last bin.
pub fn build_histograms(scene: &Scene, s_max: f64) -> Result<BinLadder> {
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(Error::Config(format!("s_max must be positive, got {s_max}")));
    }
    let mut hist16 = vec![0.0; 16];
    let width = s_max / 16.0;
    for area in scene.areas() {
        let bin = ((area as f64 / width).floor() as usize).min(15);
        hist16[bin] += 1.0;
    }
    Ok(BinLadder::from_hist16(s_max, hist16))
}

/// Per-bin weights proportional to the bin centers, normalized to sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinWeights(pub Vec<f64>);

impl BinWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn uniform_range(s_max: f64, bins: usize) -> Result<Self> {
        bin_weights(&uniform_edges(s_max, bins))
    }
}

pub fn bin_weights(edges: &[f64]) -> Result<BinWeights> {
    if edges.len() < 2 {
        return Err(Error::Config("bin weights need at least one bin".into()));
    }
    let centers: Vec<f64> = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
    let total: f64 = centers.iter().sum();
    if !(total > 0.0) || centers.iter().any(|&c| c < 0.0) {
        return Err(Error::Config(format!("bin centers {centers:?} must be nonnegative with positive sum")));
    }
    Ok(BinWeights(centers.iter().map(|c| c / total).collect()))
}

/// All targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub count_map: CountMap,
    pub ladder: BinLadder,
    pub count: f64,
}

pub fn build_targets(scene: &Scene, r: usize, s_max: f64) -> Result<Targets> {
    Ok(Targets {
        count_map: build_count_map(scene, r)?,
        ladder: build_histograms(scene, s_max)?,
        count: scene.instances.len() as f64,
    })
}

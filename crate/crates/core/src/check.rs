//! Central-difference gradient checks for every layer, every loss term, and
//! the end-to-end tiny model. Shared by the `gradcheck` command and the tests.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{gradcheck, gradcheck_coords_floor, Graph, GradcheckReport, Probe, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{loss_count, loss_kl, loss_total, loss_total_dsn, loss_weighted_l1};
use crate::model::{Model, ModelConfig, OutputVars};
use crate::scenegen::{rasterize, sample_scene, GenConfig, ImagePatch, Scene};
use crate::seed;
use crate::targets::{build_targets, BinWeights, Targets};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// The end-to-end loss is a sum over hundreds of map cells, so its rounding
/// noise is larger; a wider step and an absolute floor of 1e-5 on the error
/// denominator keep near-dead units (|∂L| ≲ 1e-8) from reading as failures.
const MODEL_STEP: f64 = 1e-3;
const MODEL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    fn new(name: &str, r: GradcheckReport) -> Self {
        Self { name: name.to_string(), max_rel_error: r.max_rel_error, worst_coord: r.worst_coord, checked: r.checked, skipped: r.skipped }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

fn rand_vec(rng: &mut seed::Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, -1.0, 1.0)).expect("shape and length agree")
}

/// Runs `build` on a fresh graph with `point` as a trainable leaf of `shape`
/// and reduces its output with a fixed random projection.
fn probe_op<F>(shape: &[usize], point: &[f64], proj_seed: u64, build: &F) -> Result<Probe>
where
    F: Fn(&mut Graph, Var) -> tensorkit::Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(Tensor::new(shape.to_vec(), point.to_vec())?);
    let y = build(&mut g, x)?;
    let n = g.value(y).len();
    let w = g.constant(rand_tensor(&mut seed::rng(proj_seed), &[1, n]));
    let z = g.constant(Tensor::zeros(&[1])?);
    let s = g.dense(y, w, z)?;
    g.backward(s)?;
    let grad = g.grad(x).map_or_else(|| vec![0.0; point.len()], <[f64]>::to_vec);
    Ok(Probe { value: g.value(s).item()?, grad, kinks: g.kink_signature() })
}

fn check_op<F>(name: &str, shape: &[usize], seed: u64, build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, Var) -> tensorkit::Result<Var>,
{
    let point = rand_tensor(&mut seed::rng(seed), shape).into_data();
    let report = gradcheck(|p| probe_op(shape, p, seed ^ 0xabcd, &build).map_err(to_tensor_err), &point, STEP)?;
    Ok(CheckResult::new(name, report))
}

fn to_tensor_err(e: Error) -> tensorkit::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => tensorkit::TensorError::Argument(other.to_string()),
    }
}

/// Every graph operation, each with respect to every differentiable input.
pub fn layer_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seed::sub_rng(seed, 0x51);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let k1 = rand_tensor(&mut rng, &[2, 2, 1, 1]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let v = rand_tensor(&mut rng, &[4]);
    let s = seed.wrapping_mul(31);
    let mut out = vec![
        check_op("conv2d/input", &[2, 5, 5], s + 1, |g, p| {
            let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
            g.conv2d(p, kv, bv, 1)
        })?,
        check_op("conv2d/kernel", &[3, 2, 3, 3], s + 2, |g, p| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(xv, p, bv, 1)
        })?,
        check_op("conv2d/bias", &[3], s + 3, |g, p| {
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            g.conv2d(xv, kv, p, 0)
        })?,
        check_op("conv2d/1x1", &[2, 4, 4], s + 4, |g, p| {
            let (kv, bv) = (g.constant(k1.clone()), g.constant(Tensor::zeros(&[2])?));
            g.conv2d(p, kv, bv, 0)
        })?,
        check_op("leaky_relu", &[2, 3, 3], s + 5, |g, p| g.leaky_relu(p, 0.01))?,
        check_op("softplus", &[2, 3, 3], s + 6, |g, p| g.softplus(p))?,
        check_op("sigmoid", &[7], s + 7, |g, p| g.sigmoid(p))?,
        check_op("max_pool2d", &[2, 4, 4], s + 8, |g, p| g.max_pool2d(p, 2))?,
        check_op("concat", &[3, 2, 2], s + 9, |g, p| {
            let other = g.constant(Tensor::full(&[2, 2, 2], 0.3)?);
            g.concat_channels(other, p)
        })?,
        check_op("add", &[2, 3], s + 10, |g, p| g.add(p, p))?,
        check_op("dropout", &[12], s + 11, |g, p| g.dropout(p, 0.4, true, &mut seed::rng(99)))?,
        check_op("reshape", &[2, 3, 2], s + 12, |g, p| g.reshape(p, &[12]))?,
        check_op("dense/input", &[4], s + 13, |g, p| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            g.dense(p, wv, bv)
        })?,
        check_op("dense/weight", &[3, 4], s + 14, |g, p| {
            let (xv, bv) = (g.constant(v.clone()), g.constant(b.clone()));
            g.dense(xv, p, bv)
        })?,
    ];
    out.push(check_op("dense/bias", &[3], s + 15, |g, p| {
        let (xv, wv) = (g.constant(v.clone()), g.constant(w.clone()));
        g.dense(xv, wv, p)
    })?);
    Ok(out)
}

fn tiny_gen() -> GenConfig {
    GenConfig::with_moments(16, (3.0, 1.0), (12.0, 4.0))
}

fn tiny_scene(seed: u64) -> Result<Scene> {
    sample_scene(&tiny_gen(), seed)
}

fn tiny_targets(scene: &Scene, r: usize) -> Result<Targets> {
    build_targets(scene, r, tiny_gen().default_s_max())
}

/// Loss probe on raw prediction leaves: `[count map | hist8 | hist2 | hist4]`.
fn probe_losses(point: &[f64], side: usize, t: &Targets, which: &str) -> Result<Probe> {
    let mut g = Graph::new();
    let n_map = side * side;
    let map = g.param(Tensor::new(vec![1, side, side], point[..n_map].to_vec())?);
    let h8 = g.param(Tensor::new(vec![8], point[n_map..n_map + 8].to_vec())?);
    let h2 = g.param(Tensor::new(vec![2], point[n_map + 8..n_map + 10].to_vec())?);
    let h4 = g.param(Tensor::new(vec![4], point[n_map + 10..n_map + 14].to_vec())?);
    let s_max = t.ladder.s_max;
    let w8 = BinWeights::uniform_range(s_max, 8)?;
    let loss = match which {
        "count" => loss_count(&mut g, map, &t.count_map)?,
        "kl" => loss_kl(&mut g, h8, t.ladder.level(8)?)?,
        "weighted_l1" => loss_weighted_l1(&mut g, h8, t.ladder.level(8)?, &w8)?,
        "total" => loss_total(&mut g, &OutputVars { count_map: map, hist: h8, hist2: None, hist4: None }, t)?.0,
        _ => {
            let out = OutputVars { count_map: map, hist: h8, hist2: Some(h2), hist4: Some(h4) };
            loss_total_dsn(&mut g, &out, t)?.0
        }
    };
    g.backward(loss)?;
    let grad = [map, h8, h2, h4]
        .iter()
        .flat_map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
        .collect();
    Ok(Probe { value: g.value(loss).item()?, grad, kinks: g.kink_signature() })
}

/// Count L1, KL, weighted L1, and both combined objectives, at a positive
/// random prediction against a random tiny scene.
pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let r = 5;
    let scene = tiny_scene(seed::derive(seed, 0x52))?;
    let t = tiny_targets(&scene, r)?;
    let side = scene.width + r - 1;
    let mut rng = seed::sub_rng(seed, 0x53);
    let point = rand_vec(&mut rng, side * side + 14, 0.05, 3.0);
    ["count", "kl", "weighted_l1", "total", "total_dsn"]
        .iter()
        .map(|&which| {
            let report = gradcheck(|p| probe_losses(p, side, &t, which).map_err(to_tensor_err), &point, STEP)?;
            Ok(CheckResult::new(&format!("loss/{which}"), report))
        })
        .collect()
}

fn probe_model(model: &Model, point: &[f64], image: &ImagePatch, t: &Targets) -> Result<Probe> {
    let mut m = model.clone();
    m.params_mut().assign_flat(point)?;
    let mut g = Graph::new();
    let mut rng = seed::rng(7);
    let (vars, out) = m.forward_graph(&mut g, image, true, &mut rng, None)?;
    let (loss, _) = if m.config().dsn { loss_total_dsn(&mut g, &out, t)? } else { loss_total(&mut g, &out, t)? };
    g.backward(loss)?;
    let grad = vars
        .iter()
        .flat_map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
        .collect();
    Ok(Probe { value: g.value(loss).item()?, grad, kinks: g.kink_signature() })
}

/// The tiny model trained through the full objective (dropout active with a
/// fixed mask), checked on every parameter or on `max_coords` evenly spaced
/// ones.
pub fn model_check(seed: u64, dsn: bool, max_coords: Option<usize>) -> Result<CheckResult> {
    let model = Model::build(ModelConfig::tiny(dsn), seed)?;
    let scene = tiny_scene(seed::derive(seed, 0x54))?;
    let image = rasterize(&scene);
    let t = tiny_targets(&scene, model.config().receptive_field)?;
    let point = model.params().flatten();
    let n = point.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    };
    let report = gradcheck_coords_floor(
        |p| probe_model(&model, p, &image, &t).map_err(to_tensor_err),
        &point,
        MODEL_STEP,
        MODEL_FLOOR,
        &coords,
    )?;
    let name = if dsn { "model/tiny_dsn" } else { "model/tiny" };
    Ok(CheckResult::new(name, report))
}

/// Layers, losses, and both tiny model variants.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = layer_checks(seed)?;
    out.extend(loss_checks(seed)?);
    out.push(model_check(seed, false, None)?);
    out.push(model_check(seed, true, None)?);
    Ok(out)
}

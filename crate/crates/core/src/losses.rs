//! Count and histogram objectives.
//!
//! * count loss: `Σ |P_map − T_map|`
//! * KL loss: `Σ p(T)·ln(p(T)/p(P))` on ε-smoothed normalized histograms
//! * weighted L1: `Σ Wᵢ·|Pᵢ − Tᵢ|` on raw counts, `W` from normalized bin centers
//! * total: `L_count + 0.5·(L_KL + L_wL)`, plus `0.2·(L_KL2 + L_wL2) + 0.3·(L_KL4 + L_wL4)`
//!   when the 2- and 4-bin side heads are present.
//!
//! The slice functions here are also the evaluation metrics `kld` and `wt_L1`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use tensorkit::{Graph, Var};

use crate::error::{Error, Result};
use crate::model::OutputVars;
use crate::targets::{BinWeights, CountMap, Targets};

pub const KL_EPS: f64 = 1e-7;

fn same_len(p: &[f64], t: &[f64]) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::Dimension(format!("prediction has {} entries, target {}", p.len(), t.len())));
    }
    Ok(())
}

fn nonneg(h: &[f64], what: &str) -> Result<()> {
    if h.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Config(format!("{what} histogram has negative entries")));
    }
    Ok(())
}

/// `H / ΣH`, or uniform when the histogram is empty.
pub fn normalize(h: &[f64]) -> Vec<f64> {
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / h.len() as f64; h.len()]
    }
}

fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    let z = 1.0 + eps * p.len() as f64;
    p.iter().map(|v| (v + eps) / z).collect()
}

fn sign_signature(p: &[f64], t: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for (a, b) in p.iter().zip(t) {
        (a.partial_cmp(b).map(|o| o as i8)).hash(&mut h);
    }
    h.finish()
}

/// `Σ |P − T|` and its subgradient (0 where equal).
pub fn l1_with_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    let grad = pred.iter().zip(target).map(|(p, t)| sign(p - t)).collect();
    Ok((value, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `KL(p(T) ‖ p(P))` with natural log and ε-smoothing.
pub fn kl_divergence(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    kl_with_grad(pred, target, eps).map(|(v, _)| v)
}

/// KL value and gradient with respect to the raw (unnormalized) prediction.
/// The gradient is zero at an all-zero prediction, where normalization falls
/// back to the uniform distribution.
pub fn kl_with_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    if pred.is_empty() {
        return Err(Error::Dimension("empty histogram".into()));
    }
    nonneg(pred, "predicted")?;
    nonneg(target, "target")?;
    let t = smooth(&normalize(target), eps);
    let p_norm = normalize(pred);
    let p = smooth(&p_norm, eps);
    let value: f64 = t.iter().zip(&p).map(|(ti, pi)| ti * (ti / pi).ln()).sum();
    let s: f64 = pred.iter().sum();
    let grad = if s > 0.0 {
        let z = 1.0 + eps * pred.len() as f64;
        let g: Vec<f64> = t.iter().zip(&p).map(|(ti, pi)| -ti / (pi * z)).collect();
        let mean: f64 = g.iter().zip(&p_norm).map(|(gi, pi)| gi * pi).sum();
        g.iter().map(|gi| (gi - mean) / s).collect()
    } else {
        vec![0.0; pred.len()]
    };
    Ok((value.max(0.0), grad))
}

/// `Σ Wᵢ·|Pᵢ − Tᵢ|` on raw counts.
pub fn weighted_l1(pred: &[f64], target: &[f64], weights: &BinWeights) -> Result<f64> {
    weighted_l1_with_grad(pred, target, weights).map(|(v, _)| v)
}

pub fn weighted_l1_with_grad(pred: &[f64], target: &[f64], weights: &BinWeights) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    same_len(pred, weights.as_slice())?;
    let w = weights.as_slice();
    let value = pred.iter().zip(target).zip(w).map(|((p, t), w)| w * (p - t).abs()).sum();
    let grad = pred.iter().zip(target).zip(w).map(|((p, t), w)| w * sign(p - t)).collect();
    Ok((value, grad))
}

pub fn loss_count(g: &mut Graph, pred: Var, target: &CountMap) -> Result<Var> {
    let p = g.value(pred).data();
    let (value, grad) = l1_with_grad(p, &target.grid)?;
    let kinks = sign_signature(p, &target.grid);
    Ok(g.scalar_op(value, vec![(pred, grad)], kinks)?)
}

pub fn loss_kl(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let (value, grad) = kl_with_grad(g.value(pred).data(), target, KL_EPS)?;
    Ok(g.scalar_op(value, vec![(pred, grad)], 0)?)
}

pub fn loss_weighted_l1(g: &mut Graph, pred: Var, target: &[f64], weights: &BinWeights) -> Result<Var> {
    let p = g.value(pred).data();
    let (value, grad) = weighted_l1_with_grad(p, target, weights)?;
    let kinks = sign_signature(p, target);
    Ok(g.scalar_op(value, vec![(pred, grad)], kinks)?)
}

/// Coefficients of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub count: f64,
    /// Applied to both KL and weighted L1 of the main histogram.
    pub hist: f64,
    pub side2: f64,
    pub side4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { count: 1.0, hist: 0.5, side2: 0.2, side4: 0.3 }
    }
}

impl LossWeights {
    /// Only the count-map term.
    pub fn count_only() -> Self {
        Self { count: 1.0, hist: 0.0, side2: 0.0, side4: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_count: f64,
    pub l_kl: f64,
    pub l_wl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_kl2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_wl2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_kl4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_wl4: Option<f64>,
    pub l_total: f64,
}

impl LossReport {
    /// Fills `l_total` from the components.
    pub fn combine(mut self, w: &LossWeights) -> Self {
        self.l_total = self.weighted_total(w);
        self
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let side = |a: Option<f64>, b: Option<f64>| a.unwrap_or(0.0) + b.unwrap_or(0.0);
        w.count * self.l_count
            + w.hist * (self.l_kl + self.l_wl)
            + w.side2 * side(self.l_kl2, self.l_wl2)
            + w.side4 * side(self.l_kl4, self.l_wl4)
    }

    pub fn has_side_terms(&self) -> bool {
        self.l_kl2.is_some()
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&LossReport) -> Option<f64>| {
            reports.iter().map(f).collect::<Option<Vec<f64>>>().filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
        };
        LossReport {
            l_count: avg(&|r| r.l_count),
            l_kl: avg(&|r| r.l_kl),
            l_wl: avg(&|r| r.l_wl),
            l_kl2: avg_opt(&|r| r.l_kl2),
            l_wl2: avg_opt(&|r| r.l_wl2),
            l_kl4: avg_opt(&|r| r.l_kl4),
            l_wl4: avg_opt(&|r| r.l_wl4),
            l_total: avg(&|r| r.l_total),
        }
    }
}

fn hist_terms(g: &mut Graph, pred: Var, target: &[f64], s_max: f64) -> Result<(Var, Var)> {
    let bins = g.value(pred).len();
    if bins != target.len() {
        return Err(Error::Dimension(format!("model predicts {bins} bins, target has {}", target.len())));
    }
    let w = BinWeights::uniform_range(s_max, bins)?;
    Ok((loss_kl(g, pred, target)?, loss_weighted_l1(g, pred, target, &w)?))
}

/// Builds the combined objective on the graph. Side terms are included
/// exactly when the outputs carry 2- and 4-bin side predictions.
pub fn objective(g: &mut Graph, out: &OutputVars, targets: &Targets, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let s_max = targets.ladder.s_max;
    let l_count = loss_count(g, out.count_map, &targets.count_map)?;
    let bins = g.value(out.hist).len();
    let (l_kl, l_wl) = hist_terms(g, out.hist, targets.ladder.level(bins)?, s_max)?;
    let mut terms = vec![(l_count, weights.count), (l_kl, weights.hist), (l_wl, weights.hist)];
    let mut report = LossReport {
        l_count: g.value(l_count).item()?,
        l_kl: g.value(l_kl).item()?,
        l_wl: g.value(l_wl).item()?,
        ..Default::default()
    };
    if let (Some(h2), Some(h4)) = (out.hist2, out.hist4) {
        let (kl2, wl2) = hist_terms(g, h2, &targets.ladder.hist2, s_max)?;
        let (kl4, wl4) = hist_terms(g, h4, &targets.ladder.hist4, s_max)?;
        terms.extend([(kl2, weights.side2), (wl2, weights.side2), (kl4, weights.side4), (wl4, weights.side4)]);
        report.l_kl2 = Some(g.value(kl2).item()?);
        report.l_wl2 = Some(g.value(wl2).item()?);
        report.l_kl4 = Some(g.value(kl4).item()?);
        report.l_wl4 = Some(g.value(wl4).item()?);
    }
    let total = g.weighted_sum(&terms)?;
    report.l_total = g.value(total).item()?;
    Ok((total, report))
}

/// Main objective without side heads.
pub fn loss_total(g: &mut Graph, out: &OutputVars, targets: &Targets) -> Result<(Var, LossReport)> {
    if out.hist2.is_some() || out.hist4.is_some() {
        return Err(Error::Config("loss_total expects outputs without side heads".into()));
    }
    objective(g, out, targets, &LossWeights::default())
}

/// Deeply supervised objective with the 2- and 4-bin side terms.
pub fn loss_total_dsn(g: &mut Graph, out: &OutputVars, targets: &Targets) -> Result<(Var, LossReport)> {
    if out.hist2.is_none() || out.hist4.is_none() {
        return Err(Error::Config("loss_total_dsn needs 2- and 4-bin side outputs".into()));
    }
    objective(g, out, targets, &LossWeights::default())
}

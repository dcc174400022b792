//! Count and histogram evaluation measures and the Average-Model baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, KL_EPS};
use crate::model::Model;
use crate::scenegen::{Dataset, ImagePatch};
use crate::targets::{build_histograms, BinWeights};

fn check_pair(p: &[f64], t: &[f64]) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::Dimension(format!("histograms of length {} and {}", p.len(), t.len())));
    }
    Ok(())
}

fn check_nonneg(p: &[f64], t: &[f64]) -> Result<()> {
    check_pair(p, t)?;
    if p.iter().chain(t).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Config("histogram entries must be nonnegative".into()));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::Config("mae of an empty set".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `Σ min(Pᵢ, Tᵢ) / max(ΣP, ΣT)`; 1 when both are empty.
pub fn isec(p: &[f64], t: &[f64]) -> Result<f64> {
    check_nonneg(p, t)?;
    let denom = p.iter().sum::<f64>().max(t.iter().sum());
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(p.iter().zip(t).map(|(a, b)| a.min(*b)).sum::<f64>() / denom)
}

/// Pearson correlation; 0 when either vector is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(Error::Config("correlation needs at least two entries".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Histogram correlation over bins.
pub fn corr(p: &[f64], t: &[f64]) -> Result<f64> {
    pearson(p, t)
}

/// Symmetric χ²: `Σ (Pᵢ − Tᵢ)² / (Pᵢ + Tᵢ)` over bins with `Pᵢ + Tᵢ > 0`.
pub fn chi2(p: &[f64], t: &[f64]) -> Result<f64> {
    check_nonneg(p, t)?;
    Ok(p.iter().zip(t).filter(|(a, b)| *a + *b > 0.0).map(|(a, b)| (a - b).powi(2) / (a + b)).sum())
}

/// Bounded Bhattacharyya distance `sqrt(1 − Σ sqrt(pᵢ qᵢ))` on normalized
/// histograms (empty → uniform), evaluated as `sqrt(½ Σ (√pᵢ − √qᵢ)²)` so
/// identical inputs give exactly 0.
pub fn bhatt(p: &[f64], t: &[f64]) -> Result<f64> {
    check_nonneg(p, t)?;
    let (pn, tn) = (losses::normalize(p), losses::normalize(t));
    let h: f64 = pn.iter().zip(&tn).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok((0.5 * h).clamp(0.0, 1.0).sqrt())
}

/// `KL(p(T) ‖ p(P))`, the histogram loss in evaluation form.
pub fn kld(p: &[f64], t: &[f64]) -> Result<f64> {
    losses::kl_divergence(p, t, KL_EPS)
}

pub fn wt_l1(p: &[f64], t: &[f64], w: &BinWeights) -> Result<f64> {
    losses::weighted_l1(p, t, w)
}

/// Per-image histogram measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistMetrics {
    pub kld: f64,
    pub wt_l1: f64,
    pub isec: f64,
    pub chi2: f64,
    pub corr: f64,
    pub bhatt: f64,
}

pub fn hist_metrics(p: &[f64], t: &[f64], w: &BinWeights) -> Result<HistMetrics> {
    Ok(HistMetrics {
        kld: kld(p, t)?,
        wt_l1: wt_l1(p, t, w)?,
        isec: isec(p, t)?,
        chi2: chi2(p, t)?,
        corr: corr(p, t)?,
        bhatt: bhatt(p, t)?,
    })
}

pub const CSV_HEADER: &str = "method,MAE,kld,wt_L1,isec,chi2,corr,bhatt";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub kld: f64,
    pub wt_l1: f64,
    pub isec: f64,
    pub chi2: f64,
    pub corr: f64,
    pub bhatt: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub fn csv_row(&self, method: &str) -> String {
        format!(
            "{method},{},{},{},{},{},{},{}",
            self.mae, self.kld, self.wt_l1, self.isec, self.chi2, self.corr, self.bhatt
        )
    }

    /// Header line plus one row, newline-terminated.
    pub fn to_csv(&self, method: &str) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row(method))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub true_count: f64,
    pub pred_count: f64,
    pub hist: HistMetrics,
}

/// Count and histogram for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub count: f64,
    pub hist: Vec<f64>,
}

/// Anything that maps an image to a count and a histogram.
pub trait Predictor {
    fn bins(&self) -> usize;
    fn predict_image(&self, image: &ImagePatch) -> Result<Prediction>;
}

impl Predictor for Model {
    fn bins(&self) -> usize {
        self.config().bins
    }

    fn predict_image(&self, image: &ImagePatch) -> Result<Prediction> {
        let out = self.predict(image)?;
        Ok(Prediction { count: out.count, hist: out.hist })
    }
}

/// Predicts the training-set mean count and mean histogram for every image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageModel {
    pub mean_count: f64,
    pub mean_hist: Vec<f64>,
}

impl AverageModel {
    /// Elementwise means over the training targets at `bins` resolution.
    pub fn fit(train: &Dataset, bins: usize, s_max: f64) -> Result<AverageModel> {
        if train.is_empty() {
            return Err(Error::Config("average model needs at least one training scene".into()));
        }
        let n = train.len() as f64;
        let mut mean_hist = vec![0.0; bins];
        let mut mean_count = 0.0;
        for scene in &train.scenes {
            let ladder = build_histograms(scene, s_max)?;
            for (m, v) in mean_hist.iter_mut().zip(ladder.level(bins)?) {
                *m += v / n;
            }
            mean_count += scene.instances.len() as f64 / n;
        }
        Ok(AverageModel { mean_count, mean_hist })
    }

    pub fn prediction(&self) -> Prediction {
        Prediction { count: self.mean_count, hist: self.mean_hist.clone() }
    }
}

impl Predictor for AverageModel {
    fn bins(&self) -> usize {
        self.mean_hist.len()
    }

    fn predict_image(&self, _image: &ImagePatch) -> Result<Prediction> {
        Ok(self.prediction())
    }
}

/// Scores per-image predictions against the dataset's annotations.
pub fn evaluate_predictions(preds: &[Prediction], data: &Dataset, s_max: f64) -> Result<(MetricReport, Vec<ImageMetrics>)> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    if preds.len() != data.len() {
        return Err(Error::Dimension(format!("{} predictions for {} images", preds.len(), data.len())));
    }
    let mut per_image = Vec::with_capacity(data.len());
    for (i, (pred, scene)) in preds.iter().zip(&data.scenes).enumerate() {
        let ladder = build_histograms(scene, s_max)?;
        let target = ladder.level(pred.hist.len())?;
        let w = BinWeights::uniform_range(s_max, target.len())?;
        per_image.push(ImageMetrics {
            index: i,
            true_count: scene.instances.len() as f64,
            pred_count: pred.count,
            hist: hist_metrics(&pred.hist, target, &w)?,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&HistMetrics) -> f64| per_image.iter().map(|m| f(&m.hist)).sum::<f64>() / n;
    let preds_c: Vec<f64> = per_image.iter().map(|m| m.pred_count).collect();
    let trues_c: Vec<f64> = per_image.iter().map(|m| m.true_count).collect();
    let report = MetricReport {
        mae: mae(&preds_c, &trues_c)?,
        kld: mean(|m| m.kld),
        wt_l1: mean(|m| m.wt_l1),
        isec: mean(|m| m.isec),
        chi2: mean(|m| m.chi2),
        corr: mean(|m| m.corr),
        bhatt: mean(|m| m.bhatt),
        n_images: per_image.len(),
    };
    Ok((report, per_image))
}

pub fn predict_all(predictor: &dyn Predictor, data: &Dataset) -> Result<Vec<Prediction>> {
    data.images.iter().map(|img| predictor.predict_image(img)).collect()
}

pub fn evaluate(predictor: &dyn Predictor, data: &Dataset, s_max: f64) -> Result<(MetricReport, Vec<ImageMetrics>)> {
    let preds = predict_all(predictor, data)?;
    evaluate_predictions(&preds, data, s_max)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(isec(&[2.0, 2.0], &[4.0, 0.0]).unwrap(), 0.5);
        assert_eq!(isec(&[5.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert_eq!(isec(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((chi2(&[4.0, 0.0], &[2.0, 2.0]).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!((corr(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(corr(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!(corr(&[1.0], &[1.0]).is_err());
        let b = bhatt(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let hand = (1.0 - (0.125f64.sqrt() + 0.375f64.sqrt())).sqrt();
        assert!((b - hand).abs() < 1e-12 && (b - 0.1846).abs() < 1e-3, "{b}");
        assert_eq!(bhatt(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[2.0, 4.0], &[3.0, 3.0]).unwrap(), 1.0);
        assert!(mae(&[], &[]).is_err());
        assert!(chi2(&[-1.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let r = MetricReport { mae: 1.5, isec: 1.0, corr: 1.0, n_images: 3, ..Default::default() };
        assert_eq!(r.to_csv("m"), "method,MAE,kld,wt_L1,isec,chi2,corr,bhatt\nm,1.5,0,0,1,0,1,0\n");
    }
}

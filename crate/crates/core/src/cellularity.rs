//! Staged training of a scalar score head on top of the count and histogram
//! predictions, with a synthetic area-based score as ground truth.
//!
//! * Stage with `count_branch`: count loss only, count-branch parameters only.
//! * Stage with `all`: full objective on every network parameter.
//! * Stage with `head`: squared score error on the head; the network is frozen.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tensorkit::{xavier_uniform, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{self, Prediction, Predictor};
use crate::model::{Model, ParamGroup};
use crate::scenegen::{Dataset, Scene};
use crate::seed::{self, streams};
use crate::train::{TrainConfig, Trainer};

/// `clamp(Σ area_px / a_ref, 0, 1)`.
pub fn synth_score(scene: &Scene, a_ref: f64) -> Result<f64> {
    if !(a_ref > 0.0) {
        return Err(Error::Config(format!("a_ref must be positive, got {a_ref}")));
    }
    Ok((scene.total_area() as f64 / a_ref).clamp(0.0, 1.0))
}

/// Half the image area.
pub fn default_a_ref(width: usize, height: usize) -> f64 {
    0.5 * (width * height) as f64
}

/// Fraction of comparable pairs (distinct true scores) that the predictions
/// order the same way; tied predictions count ½. Returns ½ when no pair is
/// comparable.
pub fn concordance(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} scores", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Config("concordance needs at least two scores".into()));
    }
    let (mut hits, mut pairs) = (0.0, 0usize);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let dt = truth[j] - truth[i];
            if dt == 0.0 {
                continue;
            }
            pairs += 1;
            let dp = pred[j] - pred[i];
            if dp == 0.0 {
                hits += 0.5;
            } else if (dp > 0.0) == (dt > 0.0) {
                hits += 1.0;
            }
        }
    }
    Ok(if pairs == 0 { 0.5 } else { hits / pairs as f64 })
}

/// `[hist ++ count] → dense → dense → dense(1) → sigmoid`, with fixed
/// per-feature standardization stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHead {
    params: ParamStore,
    slope: f64,
}

const NORM_SHIFT: &str = "norm.shift";
const NORM_SCALE: &str = "norm.scale";

impl ScoreHead {
    pub fn new(bins: usize, width: usize, seed: u64) -> Result<ScoreHead> {
        if width == 0 || bins == 0 {
            return Err(Error::Config("score head widths must be positive".into()));
        }
        let mut rng = seed::sub_rng(seed, streams::HEAD_INIT);
        let n_in = bins + 1;
        let mut p = ParamStore::new();
        p.push(NORM_SHIFT, Tensor::zeros(&[n_in])?)?;
        p.push(NORM_SCALE, Tensor::full(&[n_in], 1.0)?)?;
        for (name, i, o) in [("fc1", n_in, width), ("fc2", width, width), ("out", width, 1)] {
            p.push(format!("{name}.w"), xavier_uniform(&[o, i], i, o, &mut rng)?)?;
            p.push(format!("{name}.b"), Tensor::zeros(&[o])?)?;
        }
        Ok(ScoreHead { params: p, slope: 0.01 })
    }

    pub fn from_params(params: ParamStore) -> Result<ScoreHead> {
        let n_in = params.by_name(NORM_SHIFT).map(|t| t.len()).ok_or_else(|| Error::Config("not a score head".into()))?;
        let width = params.by_name("fc1.b").map(|t| t.len()).ok_or_else(|| Error::Config("not a score head".into()))?;
        let reference = ScoreHead::new(n_in - 1, width, 0)?;
        if reference.params.names() != params.names()
            || reference.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config("score head parameters have unexpected names or shapes".into()));
        }
        Ok(ScoreHead { params, slope: 0.01 })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn bins(&self) -> usize {
        self.params.get(0).len() - 1
    }

    pub fn features(pred: &Prediction) -> Vec<f64> {
        let mut f = pred.hist.clone();
        f.push(pred.count);
        f
    }

    /// Sets the standardization from the mean and spread of `features`.
    pub fn fit_normalization(&mut self, features: &[Vec<f64>]) -> Result<()> {
        let n_in = self.bins() + 1;
        if features.is_empty() || features.iter().any(|f| f.len() != n_in) {
            return Err(Error::Dimension(format!("score head expects {n_in} features per sample")));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..n_in).map(|k| features.iter().map(|f| f[k]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..n_in)
            .map(|k| {
                let var = features.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n;
                1.0 / var.sqrt().max(1e-6)
            })
            .collect();
        self.params.tensors_mut()[0] = Tensor::from_vec(mean)?;
        self.params.tensors_mut()[1] = Tensor::from_vec(scale)?;
        Ok(())
    }

    /// Trainable mask: everything except the standardization.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.params.names().iter().map(|n| !n.starts_with("norm.")).collect()
    }

    fn standardize(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (shift, scale) = (self.params.get(0).data(), self.params.get(1).data());
        if features.len() != shift.len() {
            return Err(Error::Dimension(format!("score head expects {} features, got {}", shift.len(), features.len())));
        }
        Ok(features.iter().zip(shift).zip(scale).map(|((f, m), s)| (f - m) * s).collect())
    }

    /// Records the head on `g`; returns the parameter leaves and the score.
    pub fn forward_graph(&self, g: &mut Graph, features: &[f64], trainable: bool) -> Result<(Vec<Var>, Var)> {
        let x = g.constant(Tensor::from_vec(self.standardize(features)?)?);
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .zip(self.trainable_mask())
            .map(|(t, m)| if trainable && m { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let v = |name: &str| vars[self.params.index_of(name).expect("head parameter")];
        let h = g.dense(x, v("fc1.w"), v("fc1.b"))?;
        let h = g.leaky_relu(h, self.slope)?;
        let h = g.dense(h, v("fc2.w"), v("fc2.b"))?;
        let h = g.leaky_relu(h, self.slope)?;
        let o = g.dense(h, v("out.w"), v("out.b"))?;
        let s = g.sigmoid(o)?;
        Ok((vars, s))
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let (_, s) = self.forward_graph(&mut g, features, false)?;
        Ok(g.value(s).item()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path).map_err(|e| match e {
            tensorkit::TensorError::Io(err) => Error::io(path, err),
            other => other.into(),
        })
    }

    pub fn load(path: &Path) -> Result<ScoreHead> {
        ScoreHead::from_params(ParamStore::load(path).map_err(|e| Error::data(path, e.to_string()))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    CountBranch,
    All,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u32,
    pub epochs: usize,
    pub dataset_dir: PathBuf,
    pub trainable: Vec<Trainable>,
}

impl StageSpec {
    fn kind(&self) -> Result<Trainable> {
        match self.trainable.as_slice() {
            [t] => Ok(*t),
            [] => Err(Error::Config(format!("stage {} trains nothing", self.stage))),
            _ if self.trainable.contains(&Trainable::Head) => {
                Err(Error::Config(format!("stage {}: the head stage must freeze the whole network", self.stage)))
            }
            _ if self.trainable.contains(&Trainable::All) => Ok(Trainable::All),
            _ => Ok(Trainable::CountBranch),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    /// The three-stage schedule over one dataset directory per stage.
    pub fn standard(dirs: [PathBuf; 3], epochs: [usize; 3]) -> StagePlan {
        let kinds = [Trainable::CountBranch, Trainable::All, Trainable::Head];
        StagePlan {
            stages: (0..3)
                .map(|i| StageSpec {
                    stage: i as u32 + 1,
                    epochs: epochs[i],
                    dataset_dir: dirs[i].clone(),
                    trainable: vec![kinds[i]],
                })
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<StagePlan> {
        let bytes = fs::read(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
        let plan: StagePlan = serde_json::from_slice(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan is empty".into()));
        }
        for s in &self.stages {
            s.kind()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOptions {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub s_max: f64,
    pub a_ref: f64,
    pub head_width: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u32,
    pub trainable: Trainable,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: Model,
    pub head: ScoreHead,
    pub reports: Vec<StageReport>,
    /// Network parameters when the first head stage began.
    pub frozen_snapshot: Option<ParamStore>,
}

fn head_epochs(
    head: &mut ScoreHead,
    features: &[Vec<f64>],
    scores: &[f64],
    epochs: usize,
    opts: &StageOptions,
    stream: u64,
) -> Result<Vec<f64>> {
    head.fit_normalization(features)?;
    let mask = head.trainable_mask();
    let mut adam = AdamState::new(AdamConfig { lr: opts.lr, ..AdamConfig::default() }, head.params.tensors());
    let mut rng = seed::sub_rng(opts.seed, stream);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut acc: Vec<Vec<f64>> = head.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in chunk {
                let mut g = Graph::new();
                let (vars, s) = head.forward_graph(&mut g, &features[i], true)?;
                let y = g.value(s).item()?;
                let d = y - scores[i];
                let loss = g.scalar_op(d * d, vec![(s, vec![2.0 * d])], 0)?;
                g.backward(loss)?;
                total += d * d;
                for (a, &v) in acc.iter_mut().zip(&vars) {
                    if let Some(gr) = g.grad(v) {
                        a.iter_mut().zip(gr).for_each(|(x, y)| *x += y / chunk.len() as f64);
                    }
                }
            }
            adam.step(head.params.tensors_mut(), &acc, Some(&mask))?;
        }
        losses.push(total / features.len() as f64);
    }
    Ok(losses)
}

/// Runs the stages in order. `datasets[i]` feeds `plan.stages[i]`.
pub fn run_stages(
    plan: &StagePlan,
    datasets: &[Dataset],
    mut model: Model,
    opts: &StageOptions,
) -> Result<StageOutcome> {
    plan.validate()?;
    if datasets.len() != plan.stages.len() {
        return Err(Error::Config(format!("{} stages but {} datasets", plan.stages.len(), datasets.len())));
    }
    let mut head = ScoreHead::new(model.config().bins, opts.head_width, opts.seed)?;
    let mut reports = Vec::new();
    let mut frozen_snapshot = None;
    for (k, (spec, data)) in plan.stages.iter().zip(datasets).enumerate() {
        if data.is_empty() {
            return Err(Error::Config(format!("stage {} dataset is empty", spec.stage)));
        }
        let kind = spec.kind()?;
        let stage_seed = seed::derive(opts.seed, 0x100 + k as u64);
        let losses = match kind {
            Trainable::Head => {
                if frozen_snapshot.is_none() {
                    frozen_snapshot = Some(model.params().clone());
                }
                let preds = metrics::predict_all(&model, data)?;
                let features: Vec<Vec<f64>> = preds.iter().map(ScoreHead::features).collect();
                let scores: Vec<f64> =
                    data.scenes.iter().map(|s| synth_score(s, opts.a_ref)).collect::<Result<_>>()?;
                head_epochs(&mut head, &features, &scores, spec.epochs, opts, stage_seed)?
            }
            Trainable::CountBranch | Trainable::All => {
                let (weights, mask) = if kind == Trainable::CountBranch {
                    (LossWeights::count_only(), model.group_mask(&[ParamGroup::CountBranch]))
                } else {
                    let all = [ParamGroup::CountBranch, ParamGroup::HistBranch, ParamGroup::Side];
                    (LossWeights::default(), model.group_mask(&all))
                };
                let mut cfg = TrainConfig::new(opts.s_max, stage_seed);
                cfg.epochs = spec.epochs;
                cfg.batch_size = opts.batch_size;
                cfg.lr = opts.lr;
                cfg.augment = opts.augment;
                cfg.weights = weights;
                let mut trainer = Trainer::new(model, cfg, Some(mask))?;
                let logs = trainer.run(data, |_, _| Ok(()))?;
                model = trainer.model;
                logs.iter().map(|l| l.train.l_total).collect()
            }
        };
        reports.push(StageReport { stage: spec.stage, trainable: kind, losses });
    }
    Ok(StageOutcome { model, head, reports, frozen_snapshot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvaluation {
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    pub spearman: f64,
    pub concordance: f64,
}

pub fn evaluate_scores(model: &dyn Predictor, head: &ScoreHead, data: &Dataset, a_ref: f64) -> Result<ScoreEvaluation> {
    let mut predicted = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for (img, scene) in data.images.iter().zip(&data.scenes) {
        predicted.push(head.score(&ScoreHead::features(&model.predict_image(img)?))?);
        truth.push(synth_score(scene, a_ref)?);
    }
    Ok(ScoreEvaluation {
        spearman: metrics::spearman(&predicted, &truth)?,
        concordance: concordance(&predicted, &truth)?,
        predicted,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::EllipseInstance;

    fn scene(areas: &[u32]) -> Scene {
        let instances = areas
            .iter()
            .map(|&area_px| EllipseInstance { cx: 1.0, cy: 1.0, a: 2.0, b: 1.0, theta: 0.0, area_px })
            .collect();
        Scene { width: 10, height: 10, seed: 0, instances }
    }

    #[test]
    fn score_examples() {
        assert_eq!(synth_score(&scene(&[]), 50.0).unwrap(), 0.0);
        assert_eq!(synth_score(&scene(&[30, 20]), 50.0).unwrap(), 1.0);
        assert!((synth_score(&scene(&[100, 100]), 1000.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(synth_score(&scene(&[1]), 0.0).is_err());
        assert_eq!(default_a_ref(64, 64), 2048.0);
    }

    #[test]
    fn concordance_examples() {
        assert_eq!(concordance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(concordance(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((concordance(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(concordance(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert!(concordance(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn head_output_in_unit_interval() {
        let head = ScoreHead::new(8, 16, 1).unwrap();
        for scale in [0.0, 1.0, 1e3, -1e3] {
            let s = head.score(&vec![scale; 9]).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
        assert!(head.score(&[1.0; 4]).is_err());
    }

    #[test]
    fn plan_json_shape() {
        let json = r#"[{"stage":1,"epochs":2,"dataset_dir":"a","trainable":["count_branch"]},
                       {"stage":3,"epochs":1,"dataset_dir":"b","trainable":["head"]}]"#;
        let plan: StagePlan = serde_json::from_str(json).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.stages[1].trainable, vec![Trainable::Head]);
        let bad: StagePlan =
            serde_json::from_str(r#"[{"stage":3,"epochs":1,"dataset_dir":"b","trainable":["head","all"]}]"#).unwrap();
        assert!(bad.validate().is_err());
    }
}

//! Minibatch Adam training with augmentation and per-epoch loss logs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{AdamConfig, AdamState, Graph};

use crate::error::{Error, Result};
use crate::losses::{objective, LossReport, LossWeights};
use crate::model::Model;
use crate::scenegen::{augment, AugmentKind};
use crate::scenegen::{Dataset, ImagePatch, Scene};
use crate::seed::{self, streams, Rng as SeedRng};
use crate::targets::{build_targets, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the data held out for validation losses.
    pub val_frac: f64,
    pub seed: u64,
    pub augment: bool,
    /// Upper edge of the histogram range.
    pub s_max: f64,
    pub weights: LossWeights,
    /// Stops after this many optimizer steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning-rate schedule over the optimizer steps of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero over the planned steps.
    Cosine,
}

impl LrSchedule {
    /// Rate for step `t` (zero-based) of `total`.
    pub fn rate(self, lr: f64, t: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine if total == 0 => lr,
            LrSchedule::Cosine => {
                let p = (t.min(total) as f64) / total as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

impl TrainConfig {
    pub fn new(s_max: f64, seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            val_frac: 0.0,
            seed,
            augment: true,
            s_max,
            weights: LossWeights::default(),
            max_steps: None,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config(format!("val-frac {} outside [0,1)", self.val_frac)));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::Config("s_max must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train: LossReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<LossReport>,
}

/// Deterministic train/validation split: a seeded permutation whose first
/// `floor(n·val_frac)` entries are held out. Both halves are returned sorted.
pub fn split_indices(n: usize, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::sub_rng(seed, streams::SPLIT));
    let n_val = (n as f64 * val_frac).floor() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Loss and parameter gradients for one image. Frozen parameters receive
/// all-zero gradients.
pub fn sample_gradients(
    model: &Model,
    image: &ImagePatch,
    targets: &Targets,
    weights: &LossWeights,
    training: bool,
    rng: &mut dyn rand::RngCore,
    trainable: &[bool],
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let (vars, out) = model.forward_graph(&mut g, image, training, rng, Some(trainable))?;
    let (total, report) = objective(&mut g, &out, targets, weights)?;
    g.backward(total)?;
    let grads = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((report, grads))
}

/// Loss of the model on one image without augmentation or dropout.
pub fn sample_loss(model: &Model, image: &ImagePatch, targets: &Targets, weights: &LossWeights) -> Result<LossReport> {
    let mut g = Graph::new();
    let mask = vec![false; model.params().len()];
    let (_, out) = model.forward_graph(&mut g, image, false, &mut seed::rng(0), Some(&mask))?;
    Ok(objective(&mut g, &out, targets, weights)?.1)
}

pub fn dataset_loss(model: &Model, data: &Dataset, indices: &[usize], s_max: f64, weights: &LossWeights) -> Result<LossReport> {
    let r = model.config().receptive_field;
    let mut reports = Vec::with_capacity(indices.len());
    for &i in indices {
        let t = build_targets(&data.scenes[i], r, s_max)?;
        reports.push(sample_loss(model, &data.images[i], &t, weights)?);
    }
    Ok(LossReport::mean(&reports))
}

/// Nested training subsets: one seeded permutation of `0..n`, cut at
/// `⌈f·n⌉` for each fraction `f ∈ (0, 1]`. Each subset is returned sorted.
pub fn nested_subsets(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::sub_rng(seed, streams::SUBSET));
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("fraction {f} outside (0,1]")));
            }
            let k = ((f * n as f64).ceil() as usize).clamp(1.min(n), n);
            let mut subset = perm[..k].to_vec();
            subset.sort_unstable();
            Ok(subset)
        })
        .collect()
}

const GEOMETRIC: [Option<AugmentKind>; 6] = [
    None,
    Some(AugmentKind::HFlip),
    Some(AugmentKind::VFlip),
    Some(AugmentKind::Rot90),
    Some(AugmentKind::Rot180),
    Some(AugmentKind::Rot270),
];

/// One uniformly chosen geometric transform (or none), then noise and
/// contrast each with probability ½.
pub fn random_augment(image: &ImagePatch, scene: &Scene, rng: &mut SeedRng) -> Result<(ImagePatch, Scene)> {
    let (mut img, mut sc) = (image.clone(), scene.clone());
    if let Some(kind) = GEOMETRIC[rng.random_range(0..GEOMETRIC.len())] {
        (img, sc) = augment(&img, &sc, kind, rng)?;
    }
    for kind in [AugmentKind::Noise, AugmentKind::Contrast] {
        if rng.random_bool(0.5) {
            (img, sc) = augment(&img, &sc, kind, rng)?;
        }
    }
    Ok((img, sc))
}

/// Optimizer state plus the RNG streams of one training run.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: AdamState,
    trainable: Vec<bool>,
    planned_steps: u64,
    shuffle_rng: SeedRng,
    augment_rng: SeedRng,
    dropout_rng: SeedRng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, trainable: Option<Vec<bool>>) -> Result<Self> {
        config.validate()?;
        let trainable = trainable.unwrap_or_else(|| vec![true; model.params().len()]);
        if trainable.len() != model.params().len() {
            return Err(Error::Dimension("trainable mask length differs from parameter count".into()));
        }
        let adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, model.params().tensors());
        let s = config.seed;
        Ok(Self {
            model,
            adam,
            trainable,
            planned_steps: 0,
            shuffle_rng: seed::sub_rng(s, streams::SHUFFLE),
            augment_rng: seed::sub_rng(s, streams::AUGMENT),
            dropout_rng: seed::sub_rng(s, streams::DROPOUT),
            config,
        })
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// One Adam step on the mean gradient of `batch`.
    pub fn step(&mut self, batch: &[(&ImagePatch, &Scene)]) -> Result<LossReport> {
        let r = self.model.config().receptive_field;
        let mut sum: Option<Vec<Vec<f64>>> = None;
        let mut reports = Vec::with_capacity(batch.len());
        for &(image, scene) in batch {
            let (img, sc) = if self.config.augment {
                random_augment(image, scene, &mut self.augment_rng)?
            } else {
                (image.clone(), scene.clone())
            };
            let targets = build_targets(&sc, r, self.config.s_max)?;
            let (report, grads) = sample_gradients(
                &self.model,
                &img,
                &targets,
                &self.config.weights,
                true,
                &mut self.dropout_rng,
                &self.trainable,
            )
            .map_err(as_numeric)?;
            if !report.l_total.is_finite() {
                return Err(Error::Numeric("training loss is not finite".into()));
            }
            reports.push(report);
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            }
        }
        let mut grads = sum.ok_or_else(|| Error::Config("empty batch".into()))?;
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= scale));
        self.adam.config.lr = self.config.schedule.rate(self.config.lr, self.adam.steps(), self.planned_steps);
        self.adam
            .step(self.model.params_mut().tensors_mut(), &grads, Some(&self.trainable))
            .map_err(|e| as_numeric(e.into()))?;
        if self.model.params().tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(LossReport::mean(&reports))
    }

    /// One pass over `indices` in shuffled order. Returns the mean training
    /// report and whether the step budget ran out.
    pub fn epoch(&mut self, data: &Dataset, indices: &[usize]) -> Result<(LossReport, bool)> {
        let mut order = indices.to_vec();
        order.shuffle(&mut self.shuffle_rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if self.budget_spent() {
                return Ok((LossReport::mean(&reports), true));
            }
            let batch: Vec<_> = chunk.iter().map(|&i| (&data.images[i], &data.scenes[i])).collect();
            reports.push(self.step(&batch)?);
        }
        Ok((LossReport::mean(&reports), self.budget_spent()))
    }

    fn budget_spent(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.adam.steps() as usize >= m)
    }

    /// Runs all epochs. `on_epoch` sees every log line together with the
    /// model after that epoch (for checkpointing).
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let (train, val) = split_indices(data.len(), self.config.val_frac, self.config.seed);
        if train.is_empty() {
            return Err(Error::Config("validation split leaves no training data".into()));
        }
        let per_epoch = train.len().div_ceil(self.config.batch_size);
        let planned = self.config.epochs.saturating_mul(per_epoch);
        self.planned_steps = self.config.max_steps.map_or(planned, |m| m.min(planned)) as u64;
        let mut logs = Vec::new();
        let mut epoch = 0;
        while epoch < self.config.epochs && !self.budget_spent() {
            let (report, _) = self.epoch(data, &train)?;
            let val_report = if val.is_empty() {
                None
            } else {
                Some(dataset_loss(&self.model, data, &val, self.config.s_max, &self.config.weights)?)
            };
            epoch += 1;
            let log = EpochLog { epoch, steps: self.adam.steps(), train: report, val: val_report };
            on_epoch(&log, &self.model)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

fn as_numeric(e: Error) -> Error {
    match e {
        Error::Tensor(tensorkit::TensorError::Numeric(m)) => Error::Numeric(m),
        other => other,
    }
}

/// Trains a model from `model` on `data` and returns it with its logs.
pub fn train(model: Model, data: &Dataset, config: TrainConfig, trainable: Option<Vec<bool>>) -> Result<(Model, Vec<EpochLog>)> {
    let mut t = Trainer::new(model, config, trainable)?;
    let logs = t.run(data, |_, _| Ok(()))?;
    Ok((t.model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_anneals_to_zero() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.rate(0.1, 0, 10), 0.1);
        assert!((c.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(c.rate(0.1, 10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 9, 10), 0.1);
    }

    #[test]
    fn unbounded_epochs_stop_at_step_budget() {
        let data = Dataset::generate(&crate::scenegen::GenConfig::table3(16), 5, 4).unwrap();
        let model = Model::build(crate::model::ModelConfig::tiny(false), 0).unwrap();
        let mut tc = TrainConfig::new(32.0, 0);
        tc.epochs = usize::MAX;
        tc.max_steps = Some(3);
        tc.schedule = LrSchedule::Cosine;
        let mut t = Trainer::new(model, tc, None).unwrap();
        t.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!((t.steps(), t.planned_steps), (3, 3));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(50, 0.2, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        assert!(b.iter().all(|i| !a.contains(i)));
        assert_eq!(split_indices(50, 0.2, 3), (a, b));
        assert_eq!(split_indices(7, 0.0, 1).0, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn subsets_are_nested() {
        let s = nested_subsets(40, &[0.25, 0.5, 1.0], 9).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 20, 40]);
        assert!(s[0].iter().all(|i| s[1].contains(i)));
        assert!(nested_subsets(40, &[0.0], 9).is_err());
        assert!(nested_subsets(40, &[1.5], 9).is_err());
        assert_eq!(nested_subsets(3, &[0.1], 9).unwrap()[0].len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(96.0, 0);
        c.validate().unwrap();
        c.val_frac = 1.0;
        assert!(c.validate().is_err());
        c.val_frac = 0.1;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}

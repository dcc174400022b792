//! Acceptance suite: one PASS/FAIL line per criterion. Set
//! `HISTONET_ACCEPTANCE=1,5,7` to run a subset.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use histonet::cellularity::{default_a_ref, evaluate_scores, run_stages, StageOptions, StagePlan};
use histonet::check;
use histonet::losses::{weighted_l1, LossWeights};
use histonet::metrics::{bhatt, chi2, evaluate, isec, kld, AverageModel, MetricReport};
use histonet::scenegen::{rasterize, sample_scenes, Dataset, GenConfig};
use histonet::targets::{build_count_map, build_histograms, merge_pairs, BinWeights};
use histonet::train::{dataset_loss, nested_subsets, LrSchedule, TrainConfig, Trainer};
use histonet::model::sidecar_path;
use histonet::{Model, ModelConfig, Result};
use rand::Rng;

const SEED: u64 = 1;
const TRAIN_SEED: u64 = 100;
const TEST_SEED: u64 = 200;

const GRAD_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-9;
const OVERFIT_RATIO: f64 = 0.05;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_LR: f64 = 1e-2;
const BENCH_TRAIN: usize = 2000;
const BENCH_TEST: usize = 200;
const BENCH_EPOCHS: usize = 30;
const BENCH_LR: f64 = 1e-3;
const MAE_RATIO: f64 = 0.5;
const CHI2_RATIO: f64 = 0.7;
const DSN_SLACK: f64 = 1.1;
const KLD_SLACK: f64 = 0.02;
const CELL_TRAIN: usize = 500;
const CELL_TEST: usize = 100;
const CELL_EPOCHS: [usize; 3] = [4, 12, 300];
const CELL_SPEARMAN: f64 = 0.8;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

/// Shared state of the desk benchmark runs.
#[derive(Default)]
struct Bench {
    data: Option<(Dataset, Dataset)>,
    plain: Option<(MetricReport, Vec<u8>)>,
    average: Option<MetricReport>,
}

impl Bench {
    fn data(&mut self) -> Result<&(Dataset, Dataset)> {
        if self.data.is_none() {
            let cfg = GenConfig::desk();
            self.data = Some((Dataset::generate(&cfg, TRAIN_SEED, BENCH_TRAIN)?, Dataset::generate(&cfg, TEST_SEED, BENCH_TEST)?));
        }
        Ok(self.data.as_ref().expect("generated"))
    }

    fn average(&mut self) -> Result<MetricReport> {
        if self.average.is_none() {
            let (train, test) = self.data()?;
            let s_max = train.config.default_s_max();
            let avg = AverageModel::fit(train, 8, s_max)?;
            self.average = Some(evaluate(&avg, test, s_max)?.0);
        }
        Ok(self.average.clone().expect("evaluated"))
    }

    fn plain(&mut self) -> Result<(MetricReport, Vec<u8>)> {
        if self.plain.is_none() {
            let (train, test) = self.data()?;
            self.plain = Some(bench_run(train, test, false)?);
        }
        Ok(self.plain.clone().expect("trained"))
    }
}

/// Trains the desk 8-bin model on `train` and returns its test report and
/// checkpoint bytes.
fn bench_run(train: &Dataset, test: &Dataset, dsn: bool) -> Result<(MetricReport, Vec<u8>)> {
    let s_max = train.config.default_s_max();
    let mut mc = ModelConfig::desk(8, dsn);
    mc.s_max = s_max;
    let model = Model::build(mc, SEED)?;
    let mut tc = TrainConfig::new(s_max, SEED);
    tc.epochs = BENCH_EPOCHS;
    tc.lr = BENCH_LR;
    tc.schedule = LrSchedule::Cosine;
    let mut trainer = Trainer::new(model, tc, None)?;
    trainer.run(train, |_, _| Ok(()))?;
    let (report, _) = evaluate(&trainer.model, test, s_max)?;
    let dir = tempfile::tempdir().map_err(|e| histonet::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("model.ckpt");
    trainer.model.save(&path)?;
    let mut bytes = fs::read(&path).map_err(|e| histonet::Error::io(&path, e))?;
    let sidecar = sidecar_path(&path);
    bytes.extend(fs::read(&sidecar).map_err(|e| histonet::Error::io(&sidecar, e))?);
    Ok((report, bytes))
}

fn gradients() -> Result<Outcome> {
    let results = check::full_suite(SEED)?;
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("nonempty suite");
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let checked: usize = results.iter().map(|r| r.checked).sum();
    outcome(
        failed.is_empty() && worst.max_rel_error < GRAD_TOL,
        format!(
            "{} checks, {checked} coordinates, worst {} at {:.2e} (< {GRAD_TOL:e}); failed: {failed:?}",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn count_identity() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut shapes = true;
    for (cfg, r, side) in [(GenConfig::desk(), 9, 72), (GenConfig::table3(256), 33, 288)] {
        for s in sample_scenes(&cfg, 7, 500)? {
            let map = build_count_map(&s, r)?;
            shapes &= map.rows == side && map.cols == side;
            worst = worst.max((map.count() - s.instances.len() as f64).abs());
        }
    }
    outcome(shapes && worst < IDENTITY_TOL, format!("1000 scenes, max |count - n| = {worst:.1e}, map sides 72/288 ok: {shapes}"))
}

fn ladder_nesting() -> Result<Outcome> {
    let mut mismatches = 0;
    for cfg in [GenConfig::desk(), GenConfig::table3(256)] {
        let s_max = cfg.default_s_max();
        for s in sample_scenes(&cfg, 8, 500)? {
            let ladder = build_histograms(&s, s_max)?;
            for (fine, coarse) in [(16, 8), (8, 4), (4, 2)] {
                if merge_pairs(ladder.level(fine)?) != ladder.level(coarse)? {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("1000 scenes x 3 levels, {mismatches} mismatches"))
}

fn metric_suite() -> Result<Outcome> {
    let mut rng = histonet::seed::rng(SEED);
    let mut worst_identity = 0.0f64;
    let mut worst_symmetry = 0.0f64;
    let mut out_of_range = 0;
    let mut kld_asymmetric = 0;
    for _ in 0..10_000 {
        let bins = [2, 4, 8, 16][rng.random_range(0..4)];
        let mut draw = || -> Vec<f64> {
            (0..bins).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..30.0) }).collect()
        };
        let (p, t) = (draw(), draw());
        for h in [&p, &t] {
            worst_identity = worst_identity
                .max(kld(h, h)?.abs())
                .max(chi2(h, h)?.abs())
                .max((isec(h, h)? - 1.0).abs())
                .max(bhatt(h, h)?.abs());
        }
        for v in [isec(&p, &t)?, bhatt(&p, &t)?] {
            if !(-IDENTITY_TOL..=1.0 + IDENTITY_TOL).contains(&v) {
                out_of_range += 1;
            }
        }
        worst_symmetry = worst_symmetry
            .max((chi2(&p, &t)? - chi2(&t, &p)?).abs())
            .max((bhatt(&p, &t)? - bhatt(&t, &p)?).abs())
            .max((isec(&p, &t)? - isec(&t, &p)?).abs());
        if (kld(&p, &t)? - kld(&t, &p)?).abs() > IDENTITY_TOL {
            kld_asymmetric += 1;
        }
    }
    outcome(
        worst_identity < IDENTITY_TOL && worst_symmetry < IDENTITY_TOL && out_of_range == 0 && kld_asymmetric > 0,
        format!(
            "10000 pairs, identity err {worst_identity:.1e}, symmetry err {worst_symmetry:.1e}, \
             {out_of_range} out of [0,1], kld asymmetric on {kld_asymmetric}"
        ),
    )
}

fn oracles() -> Result<Outcome> {
    let i = isec(&[2.0, 2.0], &[4.0, 0.0])?;
    let c = chi2(&[4.0, 0.0], &[2.0, 2.0])?;
    let k = kld(&[1.0, 3.0], &[1.0, 1.0])?;
    let w = weighted_l1(&[4.0, 2.0], &[2.0, 2.0], &BinWeights(vec![0.25, 0.75]))?;
    let passed = (i - 0.5).abs() < IDENTITY_TOL && (c - 2.6667).abs() < 1e-4 && (k - 0.1438).abs() < 1e-3 && w == 0.5;
    outcome(passed, format!("isec {i}, chi2 {c:.5}, kld {k:.5}, wL1 {w}"))
}

fn overfit() -> Result<Outcome> {
    let cfg = GenConfig::desk();
    let scenes = sample_scenes(&cfg, 11, 8)?;
    let images = scenes.iter().map(rasterize).collect();
    let data = Dataset { config: cfg.clone(), scenes, images };
    let s_max = cfg.default_s_max();
    let mut mc = ModelConfig::desk(8, false);
    mc.s_max = s_max;
    let model = Model::build(mc, 3)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let weights = LossWeights::default();
    let initial = dataset_loss(&model, &data, &idx, s_max, &weights)?.l_total;
    let mut tc = TrainConfig::new(s_max, 3);
    tc.augment = false;
    tc.lr = OVERFIT_LR;
    tc.epochs = usize::MAX;
    tc.max_steps = Some(OVERFIT_STEPS);
    let mut trainer = Trainer::new(model, tc, None)?;
    trainer.run(&data, |_, _| Ok(()))?;
    let last = dataset_loss(&trainer.model, &data, &idx, s_max, &weights)?;
    let ratio = last.l_total / initial;
    outcome(
        ratio < OVERFIT_RATIO,
        format!(
            "{} steps, L_total {:.1} -> {:.1} (count {:.1}), ratio {ratio:.4} (< {OVERFIT_RATIO})",
            trainer.steps(),
            initial,
            last.l_total,
            last.l_count
        ),
    )
}

fn ordering(bench: &mut Bench) -> Result<Outcome> {
    let avg = bench.average()?;
    let (model, _) = bench.plain()?;
    let (mae_r, chi_r) = (model.mae / avg.mae, model.chi2 / avg.chi2);
    println!("    {}", avg.csv_row("Average"));
    println!("    {}", model.csv_row("HistoNet 8"));
    outcome(
        mae_r < MAE_RATIO && chi_r < CHI2_RATIO,
        format!("MAE ratio {mae_r:.3} (< {MAE_RATIO}), chi2 ratio {chi_r:.3} (< {CHI2_RATIO})"),
    )
}

fn dsn_trend(bench: &mut Bench) -> Result<Outcome> {
    let (plain, _) = bench.plain()?;
    let (train, test) = bench.data()?;
    let (dsn, _) = bench_run(train, test, true)?;
    println!("    {}", plain.csv_row("HistoNet 8"));
    println!("    {}", dsn.csv_row("HistoNet-DSN 8"));
    let (mae_r, wl_r) = (dsn.mae / plain.mae, dsn.wt_l1 / plain.wt_l1);
    outcome(
        mae_r <= DSN_SLACK && wl_r <= DSN_SLACK,
        format!("DSN/plain MAE {mae_r:.3}, wt_L1 {wl_r:.3} (<= {DSN_SLACK})"),
    )
}

fn ablation(bench: &mut Bench) -> Result<Outcome> {
    let (full, _) = bench.plain()?;
    let (train, test) = bench.data()?;
    let subsets = nested_subsets(train.len(), &[0.25, 1.0], SEED)?;
    let (quarter, _) = bench_run(&train.select(&subsets[0]), test, false)?;
    println!("    {}", quarter.csv_row("25%"));
    println!("    {}", full.csv_row("100%"));
    outcome(
        quarter.mae >= full.mae && quarter.kld >= full.kld - KLD_SLACK,
        format!("MAE {:.3} vs {:.3}, kld {:.4} vs {:.4} (slack {KLD_SLACK})", quarter.mae, full.mae, quarter.kld, full.kld),
    )
}

fn cellularity() -> Result<Outcome> {
    let cfg = GenConfig::desk();
    let train = Dataset::generate(&cfg, 300, CELL_TRAIN)?;
    let test = Dataset::generate(&cfg, 400, CELL_TEST)?;
    let plan = StagePlan::standard(["train".into(), "train".into(), "train".into()], CELL_EPOCHS);
    let s_max = cfg.default_s_max();
    let mut mc = ModelConfig::desk(8, false);
    mc.s_max = s_max;
    let opts = StageOptions {
        seed: SEED,
        lr: BENCH_LR,
        batch_size: 4,
        s_max,
        a_ref: default_a_ref(cfg.width, cfg.height),
        head_width: 64,
        augment: true,
    };
    let datasets = vec![train.clone(), train.clone(), train];
    let out = run_stages(&plan, &datasets, Model::build(mc, SEED)?, &opts)?;
    let frozen = out.frozen_snapshot.as_ref() == Some(out.model.params());
    let eval = evaluate_scores(&out.model, &out.head, &test, opts.a_ref)?;
    outcome(
        frozen && eval.spearman > CELL_SPEARMAN,
        format!(
            "network bit-identical after head stage: {frozen}; held-out spearman {:.4} (> {CELL_SPEARMAN}), concordance {:.4}",
            eval.spearman, eval.concordance
        ),
    )
}

fn determinism(bench: &mut Bench) -> Result<Outcome> {
    let (first, first_ckpt) = bench.plain()?;
    let (train, test) = bench.data()?;
    let (second, second_ckpt) = bench_run(train, test, false)?;
    let same_report = serde_json::to_vec(&first).ok() == serde_json::to_vec(&second).ok();
    let same_ckpt = first_ckpt == second_ckpt;
    outcome(same_report && same_ckpt, format!("MetricReport identical: {same_report}; checkpoint identical: {same_ckpt} ({} bytes)", first_ckpt.len()))
}

fn main() -> ExitCode {
    let selected: Option<BTreeSet<u32>> =
        std::env::var("HISTONET_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut bench = Bench::default();
    type Criterion<'a> = (u32, &'a str, Box<dyn FnMut(&mut Bench) -> Result<Outcome>>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Box::new(|_| gradients())),
        (2, "count-map identity", Box::new(|_| count_identity())),
        (3, "ladder nesting", Box::new(|_| ladder_nesting())),
        (4, "metric identities and bounds", Box::new(|_| metric_suite())),
        (5, "hand-computed metric values", Box::new(|_| oracles())),
        (6, "overfit sanity", Box::new(|_| overfit())),
        (7, "desk ordering vs Average", Box::new(ordering)),
        (8, "DSN non-regression", Box::new(dsn_trend)),
        (9, "training-fraction trend", Box::new(ablation)),
        (10, "cellularity stages", Box::new(|_| cellularity())),
        (11, "determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (n, name, mut run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match run(&mut bench) {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name} [{:.1}s]: {detail}", start.elapsed().as_secs_f64());
        if !passed {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}

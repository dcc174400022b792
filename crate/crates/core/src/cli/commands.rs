use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::{
    AblateParams, Arch, Baseline, CellularityParams, EvalParams, GenParams, GradcheckParams, PredictParams, Preset,
    RunConfig, TrainParams, RUN_FILE,
};
use crate::cellularity::{default_a_ref, evaluate_scores, run_stages, StageOptions, StagePlan};
use crate::check;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, AverageModel, ImageMetrics, MetricReport, Predictor, CSV_HEADER};
use crate::model::{sidecar_path, Model, ModelConfig};
use crate::scenegen::{
    decode_pgm, rasterize_with, read_dataset, sample_scenes, write_dataset, Dataset, GenConfig, TABLE3_AREA, TABLE3_COUNT,
};
use crate::svg;
use crate::targets::{build_histograms, uniform_edges};
use crate::train::{nested_subsets, EpochLog, LrSchedule, TrainConfig, Trainer};

fn to_json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn params<P: DeserializeOwned>(run: &RunConfig) -> Result<P> {
    serde_json::from_value(run.params.clone())
        .map_err(|e| Error::Config(format!("invalid {} parameters: {e}", run.command)))
}

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("{flag} is required")));
    }
    Ok(())
}

/// Writes `run.json` into the output directory, then runs the command. With
/// `original` set (a replay into a new directory), the two output trees are
/// compared file by file afterwards.
pub fn execute(run: &RunConfig, original: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    write(&run.out.join(RUN_FILE), &to_json_bytes(run))?;
    match run.command.as_str() {
        "gen" => cmd_gen(&params(run)?, run),
        "train" => cmd_train(&params(run)?, run).map(|_| ()),
        "eval" => cmd_eval(&params(run)?, run),
        "ablate" => cmd_ablate(&params(run)?, run),
        "gradcheck" => cmd_gradcheck(&params(run)?, run),
        "predict" => cmd_predict(&params(run)?, run),
        "cellularity" => cmd_cellularity(&params(run)?, run),
        other => Err(Error::Config(format!("unknown command '{other}' in run file"))),
    }?;
    match original {
        Some(orig) if orig != run.out => compare_trees(orig, &run.out),
        _ => Ok(()),
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::data(dir, format!("cannot list: {e}")))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walked from root").to_path_buf());
        }
    }
    Ok(())
}

fn compare_trees(a: &Path, b: &Path) -> Result<()> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    list_files(a, a, &mut fa)?;
    list_files(b, b, &mut fb)?;
    fa.retain(|p| p != Path::new(RUN_FILE));
    fb.retain(|p| p != Path::new(RUN_FILE));
    fa.sort();
    fb.sort();
    let mut differing = Vec::new();
    for p in &fa {
        let same = fb.binary_search(p).is_ok() && fs::read(a.join(p)).ok() == fs::read(b.join(p)).ok();
        if !same {
            differing.push(p.display().to_string());
        }
    }
    differing.extend(fb.iter().filter(|p| fa.binary_search(p).is_err()).map(|p| p.display().to_string()));
    if differing.is_empty() {
        println!("replay: {} files identical to {}", fa.len(), a.display());
        Ok(())
    } else {
        Err(Error::data(b, format!("replay differs from {} in: {}", a.display(), differing.join(", "))))
    }
}

fn gen_config(p: &GenParams) -> GenConfig {
    let (side, count, area) = match p.preset {
        Preset::Table3 => (crate::scenegen::PAPER_SIDE, TABLE3_COUNT, TABLE3_AREA),
        Preset::Desk => {
            let d = GenConfig::desk();
            (d.width, (d.count.mean, d.count.std), (d.area.mean, d.area.std))
        }
    };
    let mut cfg = GenConfig::with_moments(
        p.size.unwrap_or(side),
        (p.count_mean.unwrap_or(count.0), p.count_std.unwrap_or(count.1)),
        (p.area_mean.unwrap_or(area.0), p.area_std.unwrap_or(area.1)),
    );
    cfg.min_center_distance = p.min_center_distance;
    cfg
}

fn cmd_gen(p: &GenParams, run: &RunConfig) -> Result<()> {
    let cfg = gen_config(p);
    cfg.validate()?;
    let scenes = sample_scenes(&cfg, run.seed, p.n)?;
    let images: Vec<_> = scenes.iter().map(|s| rasterize_with(s, &cfg.intensity)).collect();
    write_dataset(&run.out, &cfg, &scenes, &images)?;
    println!("wrote {} scenes ({}x{}) to {}", p.n, cfg.width, cfg.height, run.out.display());
    Ok(())
}

/// Architecture preset for `arch`, with the histogram settings applied.
pub fn model_config(arch: Arch, side: usize, bins: usize, dsn: bool, s_max: f64) -> Result<ModelConfig> {
    let arch = match (arch, side) {
        (Arch::Auto, 16) => Arch::Tiny,
        (Arch::Auto, 64) => Arch::Desk,
        (Arch::Auto, 256) => Arch::Paper,
        (Arch::Auto, s) => return Err(Error::Config(format!("no architecture preset for {s}x{s} images; pass --arch"))),
        (a, _) => a,
    };
    let mut cfg = match arch {
        Arch::Tiny => ModelConfig::tiny(dsn),
        Arch::Desk => ModelConfig::desk(bins, dsn),
        _ => ModelConfig::paper(bins, dsn),
    };
    cfg.bins = bins;
    cfg.s_max = s_max;
    if cfg.input_side != side {
        return Err(Error::Dimension(format!("{arch:?} expects {}x{} images, data has {side}x{side}", cfg.input_side, cfg.input_side)));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp.ckpt");
    model.save(&tmp)?;
    let renames = [(sidecar_path(&tmp), sidecar_path(path)), (tmp, path.to_path_buf())];
    for (from, to) in renames {
        fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
    }
    Ok(())
}

fn method_name(cfg: &ModelConfig) -> String {
    format!("HistoNet{} {}", if cfg.dsn { "-DSN" } else { "" }, cfg.bins)
}

struct Fit<'a> {
    bins: usize,
    dsn: bool,
    epochs: usize,
    batch: usize,
    lr: f64,
    augment: bool,
    arch: Arch,
    s_max: Option<f64>,
    schedule: LrSchedule,
    val_frac: f64,
    max_steps: Option<usize>,
    init: Option<&'a Path>,
}

/// Trains on `data`, checkpointing to `<dir>/model.ckpt` and logging one
/// JSON line per epoch to `<dir>/train_log.jsonl`. On a numeric failure the
/// last good checkpoint stays in place.
fn fit(data: &Dataset, f: &Fit, seed: u64, dir: &Path) -> Result<(Model, Vec<EpochLog>)> {
    let s_max = f.s_max.unwrap_or_else(|| data.config.default_s_max());
    let model = match f.init {
        Some(path) => {
            let m = Model::load(path)?;
            if m.config().input_side != data.config.width {
                return Err(Error::Dimension(format!("checkpoint expects {}px images", m.config().input_side)));
            }
            m
        }
        None => Model::build(model_config(f.arch, data.config.width, f.bins, f.dsn, s_max)?, seed)?,
    };
    let mut cfg = TrainConfig::new(model.config().s_max, seed);
    cfg.epochs = f.epochs;
    cfg.batch_size = f.batch;
    cfg.lr = f.lr;
    cfg.schedule = f.schedule;
    cfg.augment = f.augment;
    cfg.val_frac = f.val_frac;
    cfg.max_steps = f.max_steps;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut trainer = Trainer::new(model, cfg, None)?;
    let result = trainer.run(data, |entry, model| {
        let line = serde_json::to_string(entry).expect("serializable log");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        save_checkpoint(model, &ckpt)?;
        println!("epoch {} steps {} loss {:.4}", entry.epoch, entry.steps, entry.train.l_total);
        Ok(())
    });
    match result {
        Ok(logs) => Ok((trainer.model, logs)),
        Err(e @ Error::Numeric(_)) => {
            eprintln!("training stopped: {e}; {} holds the last good checkpoint", ckpt.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn cmd_train(p: &TrainParams, run: &RunConfig) -> Result<Model> {
    require(&p.data, "--data")?;
    let data = read_dataset(&p.data)?;
    let f = Fit {
        bins: p.bins,
        dsn: p.dsn,
        epochs: p.epochs,
        batch: p.batch,
        lr: p.lr,
        augment: p.augment,
        arch: p.arch,
        s_max: p.s_max,
        schedule: p.schedule,
        val_frac: p.val_frac,
        max_steps: p.max_steps,
        init: p.init.as_deref(),
    };
    let (model, logs) = fit(&data, &f, run.seed, &run.out)?;
    println!("trained {} for {} epochs; checkpoint {}", method_name(model.config()), logs.len(), run.out.join("model.ckpt").display());
    Ok(model)
}

fn write_metrics(dir: &Path, method: &str, report: &MetricReport, per_image: &[ImageMetrics]) -> Result<()> {
    let doc = json!({ "method": method, "report": report, "per_image": per_image });
    write(&dir.join("metrics.json"), &to_json_bytes(&doc))?;
    write(&dir.join("metrics.csv"), report.to_csv(method).as_bytes())
}

fn cmd_eval(p: &EvalParams, run: &RunConfig) -> Result<()> {
    require(&p.data, "--data")?;
    let data = read_dataset(&p.data)?;
    let (predictor, method, s_max): (Box<dyn Predictor>, String, f64) = match (&p.ckpt, p.baseline) {
        (Some(ckpt), None) => {
            let model = Model::load(ckpt)?;
            if let Some(b) = p.bins.filter(|&b| b != model.config().bins) {
                return Err(Error::Dimension(format!("--bins {b} but the checkpoint predicts {} bins", model.config().bins)));
            }
            let s_max = p.s_max.unwrap_or(model.config().s_max);
            (Box::new(model.clone()), method_name(model.config()), s_max)
        }
        (None, Some(Baseline::Average)) => {
            let fit_data = match &p.fit_data {
                Some(dir) => read_dataset(dir)?,
                None => data.clone(),
            };
            let s_max = p.s_max.unwrap_or_else(|| fit_data.config.default_s_max());
            let bins = p.bins.unwrap_or(8);
            if ![2, 4, 8, 16].contains(&bins) {
                return Err(Error::Dimension(format!("no histogram ladder level with {bins} bins")));
            }
            (Box::new(AverageModel::fit(&fit_data, bins, s_max)?), "Average".to_string(), s_max)
        }
        _ => return Err(Error::Config("pass exactly one of --ckpt or --baseline".into())),
    };
    let preds = crate::metrics::predict_all(predictor.as_ref(), &data)?;
    let (report, per_image) = crate::metrics::evaluate_predictions(&preds, &data, s_max)?;
    write_metrics(&run.out, &method, &report, &per_image)?;
    if p.svg {
        let bins = predictor.bins();
        let edges = uniform_edges(s_max, bins);
        for (i, (pred, scene)) in preds.iter().zip(&data.scenes).enumerate() {
            let ladder = build_histograms(scene, s_max)?;
            let chart = svg::histogram_overlay(&format!("image {i:06}"), &edges, ladder.level(bins)?, &pred.hist);
            write(&run.out.join("svg").join(format!("{i:06}.svg")), chart.as_bytes())?;
        }
    }
    print!("{}", report.to_csv(&method));
    Ok(())
}

fn cmd_ablate(p: &AblateParams, run: &RunConfig) -> Result<()> {
    require(&p.data, "--data")?;
    require(&p.test, "--test")?;
    if p.fractions.is_empty() {
        return Err(Error::Config("--fractions is empty".into()));
    }
    let data = read_dataset(&p.data)?;
    let test = read_dataset(&p.test)?;
    let subsets = nested_subsets(data.len(), &p.fractions, run.seed)?;
    let mut csv = format!("fraction,n_train,{}\n", CSV_HEADER.trim_start_matches("method,"));
    let mut rows = Vec::new();
    for (&frac, subset) in p.fractions.iter().zip(&subsets) {
        let f = Fit {
            bins: p.bins,
            dsn: p.dsn,
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
            augment: p.augment,
            arch: p.arch,
            s_max: p.s_max,
            schedule: p.schedule,
            val_frac: 0.0,
            max_steps: None,
            init: None,
        };
        println!("fraction {frac}: {} training scenes", subset.len());
        let dir = run.out.join(format!("fraction_{frac}"));
        let (model, _) = fit(&data.select(subset), &f, run.seed, &dir)?;
        let (report, _) = evaluate(&model, &test, model.config().s_max)?;
        let row = report.csv_row(&frac.to_string());
        csv.push_str(&row.replacen(',', &format!(",{},", subset.len()), 1));
        csv.push('\n');
        rows.push(json!({ "fraction": frac, "n_train": subset.len(), "report": report, "subset": subset }));
    }
    write(&run.out.join("ablation.csv"), csv.as_bytes())?;
    write(&run.out.join("ablation.json"), &to_json_bytes(&rows))?;
    let xs: Vec<f64> = p.fractions.clone();
    let pick = |key: &str| -> Vec<f64> { rows.iter().map(|r| r["report"][key].as_f64().unwrap_or(f64::NAN)).collect() };
    let mae_chart = svg::line_chart("MAE vs training fraction", "training fraction", "MAE", &xs, &pick("mae"));
    let kld_chart = svg::line_chart("KL divergence vs training fraction", "training fraction", "kld", &xs, &pick("kld"));
    write(&run.out.join("mae_vs_fraction.svg"), mae_chart.as_bytes())?;
    write(&run.out.join("kld_vs_fraction.svg"), kld_chart.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(p: &GradcheckParams, run: &RunConfig) -> Result<()> {
    let mut results = check::layer_checks(run.seed)?;
    results.extend(check::loss_checks(run.seed)?);
    for dsn in [false, true] {
        results.push(check::model_check(run.seed, dsn, p.max_coords)?);
    }
    for r in &results {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {:<18} max_rel_error {:.3e} checked {} skipped {}", r.name, r.max_rel_error, r.checked, r.skipped);
    }
    write(&run.out.join("gradcheck.json"), &to_json_bytes(&results))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_predict(p: &PredictParams, run: &RunConfig) -> Result<()> {
    require(&p.ckpt, "--ckpt")?;
    if p.images.is_empty() && p.data.is_none() {
        return Err(Error::Config("pass --image or --data".into()));
    }
    let model = Model::load(&p.ckpt)?;
    let cfg = model.config();
    let edges = uniform_edges(cfg.s_max, cfg.bins);
    let mut outputs = Vec::new();
    for path in &p.images {
        let bytes = fs::read(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
        let out = model.predict(&decode_pgm(&bytes, path)?)?;
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let chart = svg::histogram_bars(&stem, &edges, &[("predicted", &out.hist)]);
        write(&run.out.join("svg").join(format!("{stem}.svg")), chart.as_bytes())?;
        outputs.push(json!({ "source": path, "output": out }));
    }
    if let Some(dir) = &p.data {
        let data = read_dataset(dir)?;
        for (i, (img, scene)) in data.images.iter().zip(&data.scenes).enumerate() {
            let out = model.predict(img)?;
            let ladder = build_histograms(scene, cfg.s_max)?;
            let target = ladder.level(cfg.bins)?;
            let chart = svg::histogram_overlay(&format!("image {i:06}"), &edges, target, &out.hist);
            write(&run.out.join("svg").join(format!("{i:06}.svg")), chart.as_bytes())?;
            outputs.push(json!({ "source": dir.join("images").join(format!("{i:06}.pgm")), "target": target, "output": out }));
        }
    }
    write(&run.out.join("predictions.json"), &to_json_bytes(&outputs))?;
    println!("wrote {} predictions to {}", outputs.len(), run.out.join("predictions.json").display());
    Ok(())
}

fn cmd_cellularity(p: &CellularityParams, run: &RunConfig) -> Result<()> {
    require(&p.plan, "--plan")?;
    let plan = StagePlan::read(&p.plan)?;
    let base = p.plan.parent().unwrap_or(Path::new("."));
    let datasets: Vec<Dataset> = plan
        .stages
        .iter()
        .map(|s| read_dataset(&if s.dataset_dir.is_absolute() { s.dataset_dir.clone() } else { base.join(&s.dataset_dir) }))
        .collect::<Result<_>>()?;
    let first = &datasets[0].config;
    let s_max = p.s_max.unwrap_or_else(|| first.default_s_max());
    let model = Model::build(model_config(p.arch, first.width, p.bins, p.dsn, s_max)?, run.seed)?;
    let opts = StageOptions {
        seed: run.seed,
        lr: p.lr,
        batch_size: p.batch,
        s_max,
        a_ref: p.a_ref.unwrap_or_else(|| default_a_ref(first.width, first.height)),
        head_width: p.head_width,
        augment: p.augment,
    };
    let outcome = run_stages(&plan, &datasets, model, &opts)?;
    save_checkpoint(&outcome.model, &run.out.join("model.ckpt"))?;
    outcome.head.save(&run.out.join("head.ckpt"))?;
    let frozen = outcome.frozen_snapshot.as_ref().map(|s| s == outcome.model.params());
    for r in &outcome.reports {
        println!("stage {} ({:?}): final loss {:.5}", r.stage, r.trainable, r.losses.last().copied().unwrap_or(f64::NAN));
    }
    if let Some(f) = frozen {
        println!("network parameters unchanged by head stages: {f}");
    }
    let mut doc = json!({ "stages": outcome.reports, "network_frozen_during_head": frozen, "a_ref": opts.a_ref });
    if let Some(test_dir) = &p.test {
        let test = read_dataset(test_dir)?;
        let eval = evaluate_scores(&outcome.model, &outcome.head, &test, opts.a_ref)?;
        println!("held-out spearman {:.4} concordance {:.4}", eval.spearman, eval.concordance);
        doc["evaluation"] = serde_json::to_value(&eval).expect("serializable");
    }
    write(&run.out.join("cellularity.json"), &to_json_bytes(&doc))
}

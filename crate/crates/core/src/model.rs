//! HistoNet-mini: a count branch that predicts a redundant count map and a
//! histogram branch that predicts a size histogram, sharing one stem layer.
//!
//! ```text
//! image ─ stem 3×3 (pad (r−1)/2+1) ─┬─ [3×3 ‖ 1×1] × (r−3)/2 ─ 1×1 ─ softplus ─ count map
//!                                   └─ pool ─ res stage 1 ─ pool ─ res stage 2 ─ pool
//!                                        │                  │      ─ 3×3 ─ 1×1 ─ fc ─ dropout ─ fc ─ softplus ─ hist
//!                                        └─ side head (2)   └─ side head (4)
//! ```
//!
//! The count branch never reduces resolution, so its output side is
//! `H + r − 1` and its receptive field is exactly `r`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tensorkit::{xavier_uniform, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::scenegen::ImagePatch;
use crate::seed::{self, streams};
use crate::targets::CountMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image side H (images are square).
    pub input_side: usize,
    /// Count-branch receptive field r (odd, ≥ 3).
    pub receptive_field: usize,
    /// Stem width; each dual-kernel block emits half from 3×3 and half from 1×1.
    pub count_width: usize,
    /// Channel widths of the two residual stages.
    pub stage_widths: [usize; 2],
    /// Output widths of the final 3×3 and 1×1 convolutions.
    pub head_convs: [usize; 2],
    pub fc_hidden: usize,
    /// Pool factors before stage 1, before stage 2, and before the head.
    pub pools: [usize; 3],
    pub bins: usize,
    /// Upper edge of the histogram range the model was trained on.
    pub s_max: f64,
    pub dsn: bool,
    pub side_convs: [usize; 2],
    pub side_fc: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// 64×64 input, r = 9.
    pub fn desk(bins: usize, dsn: bool) -> Self {
        Self {
            input_side: 64,
            receptive_field: 9,
            count_width: 8,
            stage_widths: [8, 16],
            head_convs: [32, 8],
            fc_hidden: 64,
            pools: [2, 2, 2],
            bins,
            s_max: 96.0,
            dsn,
            side_convs: [8, 4],
            side_fc: 32,
            dropout: 0.3,
            leaky_slope: 0.01,
        }
    }

    /// 16×16 input, r = 5, 8 bins: small enough for exhaustive gradient checks.
    pub fn tiny(dsn: bool) -> Self {
        Self {
            input_side: 16,
            receptive_field: 5,
            count_width: 4,
            stage_widths: [4, 4],
            head_convs: [4, 2],
            fc_hidden: 8,
            pools: [2, 2, 1],
            bins: 8,
            s_max: 32.0,
            dsn,
            side_convs: [2, 2],
            side_fc: 4,
            dropout: 0.3,
            leaky_slope: 0.01,
        }
    }

    /// 256×256 input, r = 33 (count map 288×288). Built and shape-checked,
    /// not trained.
    pub fn paper(bins: usize, dsn: bool) -> Self {
        Self {
            input_side: 256,
            receptive_field: 33,
            count_width: 32,
            stage_widths: [64, 128],
            head_convs: [256, 16],
            fc_hidden: 256,
            pools: [2, 2, 2],
            bins,
            s_max: 352.0,
            dsn,
            side_convs: [64, 16],
            side_fc: 128,
            dropout: 0.3,
            leaky_slope: 0.01,
        }
    }

    /// Side of the count map, `H + r − 1`.
    pub fn map_side(&self) -> usize {
        self.input_side + self.receptive_field - 1
    }

    pub fn dual_blocks(&self) -> usize {
        (self.receptive_field - 3) / 2
    }

    /// Receptive field implied by the layer stack: the stem and every
    /// dual-kernel block each add two rows and columns.
    pub fn analytic_receptive_field(&self) -> usize {
        3 + 2 * self.dual_blocks()
    }

    fn head_side(&self) -> usize {
        self.map_side() / self.pools.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.receptive_field;
        if r < 3 || r % 2 == 0 {
            return Err(Error::Config(format!("receptive field {r} must be odd and at least 3")));
        }
        if r >= self.input_side {
            return Err(Error::Config(format!("receptive field {r} must be smaller than the input side")));
        }
        if !(self.bins >= 8 && self.bins <= 16 && self.bins.is_power_of_two()) {
            return Err(Error::Config(format!("bins must be 8 or 16, got {}", self.bins)));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::Config(format!("s_max {} must be positive", self.s_max)));
        }
        if self.count_width < 2 || self.count_width % 2 != 0 {
            return Err(Error::Config("count_width must be even and at least 2".into()));
        }
        let widths = [self.stage_widths[0], self.stage_widths[1], self.head_convs[0], self.head_convs[1], self.fc_hidden];
        if widths.contains(&0) || (self.dsn && (self.side_convs.contains(&0) || self.side_fc == 0)) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.pools.contains(&0) || self.map_side() % self.pools.iter().product::<usize>() != 0 {
            return Err(Error::Config(format!(
                "pool chain {:?} does not divide the count-map side {}",
                self.pools,
                self.map_side()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} outside [0,1)", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Parameter groups used for staged training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Stem and dual-kernel blocks.
    CountBranch,
    /// Residual stages and histogram head.
    HistBranch,
    /// Side heads.
    Side,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("count.") {
            ParamGroup::CountBranch
        } else if name.starts_with("side") {
            ParamGroup::Side
        } else {
            ParamGroup::HistBranch
        }
    }
}

/// Graph handles of the network outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    /// `[1, H+r−1, H+r−1]`.
    pub count_map: Var,
    pub hist: Var,
    pub hist2: Option<Var>,
    pub hist4: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    #[serde(skip)]
    pub count_map: Option<CountMap>,
    pub count: f64,
    pub hist: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hist2: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hist4: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

struct Builder<'a, R: RngCore> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: RngCore> Builder<'_, R> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let w = xavier_uniform(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, self.rng)?;
        self.store.push(format!("{name}.w"), w)?;
        self.store.push(format!("{name}.b"), Tensor::zeros(&[c_out])?)?;
        Ok(())
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<()> {
        let w = xavier_uniform(&[n_out, n_in], n_in, n_out, self.rng)?;
        self.store.push(format!("{name}.w"), w)?;
        self.store.push(format!("{name}.b"), Tensor::zeros(&[n_out])?)?;
        Ok(())
    }

    fn side_head(&mut self, name: &str, c_in: usize, cfg: &ModelConfig, out: usize) -> Result<()> {
        let [c3, c1] = cfg.side_convs;
        self.conv(&format!("{name}.conv3"), c_in, c3, 3)?;
        self.conv(&format!("{name}.conv1"), c3, c1, 1)?;
        let s = cfg.head_side();
        self.dense(&format!("{name}.fc1"), c1 * s * s, cfg.side_fc)?;
        self.dense(&format!("{name}.fc2"), cfg.side_fc, out)
    }
}

fn build_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = seed::sub_rng(seed, streams::INIT);
    let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
    let c = cfg.count_width;
    b.conv("count.stem", 1, c, 3)?;
    for i in 0..cfg.dual_blocks() {
        b.conv(&format!("count.block{i}.k3"), c, c / 2, 3)?;
        b.conv(&format!("count.block{i}.k1"), c, c / 2, 1)?;
    }
    b.conv("count.out", c, 1, 1)?;
    let mut c_in = c;
    for (s, &w) in cfg.stage_widths.iter().enumerate() {
        b.conv(&format!("hist.stage{s}.entry"), c_in, w, 3)?;
        b.conv(&format!("hist.stage{s}.res1"), w, w, 3)?;
        b.conv(&format!("hist.stage{s}.res2"), w, w, 3)?;
        c_in = w;
    }
    let [h3, h1] = cfg.head_convs;
    b.conv("hist.head.conv3", c_in, h3, 3)?;
    b.conv("hist.head.conv1", h3, h1, 1)?;
    let s = cfg.head_side();
    b.dense("hist.fc1", h1 * s * s, cfg.fc_hidden)?;
    b.dense("hist.fc2", cfg.fc_hidden, cfg.bins)?;
    // Side heads come last so that the plain model's parameters are a
    // prefix of the deeply supervised one's, with identical initial values.
    if cfg.dsn {
        b.side_head("side2", cfg.stage_widths[0], cfg, 2)?;
        b.side_head("side4", cfg.stage_widths[1], cfg, 4)?;
    }
    Ok(b.store)
}

struct Fwd<'a> {
    g: &'a mut Graph,
    vars: &'a [Var],
    store: &'a ParamStore,
    slope: f64,
}

impl Fwd<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.store.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn conv(&mut self, x: Var, name: &str, pad: usize) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        Ok(self.g.conv2d(x, w, b, pad)?)
    }

    fn dense(&mut self, x: Var, name: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        Ok(self.g.dense(x, w, b)?)
    }

    fn act(&mut self, x: Var) -> Result<Var> {
        Ok(self.g.leaky_relu(x, self.slope)?)
    }

    fn pool(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 1 {
            return Ok(x);
        }
        Ok(self.g.max_pool2d(x, k)?)
    }

    fn res_stage(&mut self, x: Var, s: usize) -> Result<Var> {
        let e = self.conv(x, &format!("hist.stage{s}.entry"), 1)?;
        let e = self.act(e)?;
        let u = self.conv(e, &format!("hist.stage{s}.res1"), 1)?;
        let u = self.act(u)?;
        let u = self.conv(u, &format!("hist.stage{s}.res2"), 1)?;
        let sum = self.g.add(u, e)?;
        self.act(sum)
    }

    fn side_head(&mut self, x: Var, name: &str, pool: usize) -> Result<Var> {
        let x = self.pool(x, pool)?;
        let x = self.conv(x, &format!("{name}.conv3"), 1)?;
        let x = self.act(x)?;
        let x = self.conv(x, &format!("{name}.conv1"), 0)?;
        let x = self.act(x)?;
        let x = self.dense(x, &format!("{name}.fc1"))?;
        let x = self.act(x)?;
        let x = self.dense(x, &format!("{name}.fc2"))?;
        Ok(self.g.softplus(x)?)
    }
}

impl Model {
    /// Builds a model with Xavier-uniform weights and zero biases drawn from
    /// the initialization stream of `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = build_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let expected = build_params(&config, 0)?;
        if expected.names() != params.names() {
            return Err(Error::Config("checkpoint parameter names do not match the model configuration".into()));
        }
        for (i, (a, b)) in expected.tensors().iter().zip(params.tensors()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.names()[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// `true` for every parameter in one of `groups`.
    pub fn group_mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        self.params.names().iter().map(|n| groups.contains(&ParamGroup::of(n))).collect()
    }

    fn check_image(&self, image: &ImagePatch) -> Result<()> {
        let h = self.config.input_side;
        if (image.width, image.height) != (h, h) {
            return Err(Error::Dimension(format!(
                "model expects {h}x{h} images, got {}x{}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Parameters flagged in `trainable`
    /// (all when `None`) become gradient-carrying leaves, the rest constants.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        image: &ImagePatch,
        training: bool,
        rng: &mut dyn RngCore,
        trainable: Option<&[bool]>,
    ) -> Result<(Vec<Var>, OutputVars)> {
        self.check_image(image)?;
        let cfg = &self.config;
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable.map_or(true, |m| m[i]) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let mean = image.data.iter().sum::<f64>() / image.data.len() as f64;
        let centered = image.data.iter().map(|v| v - mean).collect();
        let x = g.constant(Tensor::new(vec![1, image.height, image.width], centered)?);
        let mut f = Fwd { g, vars: &vars, store: &self.params, slope: cfg.leaky_slope };

        let stem = f.conv(x, "count.stem", (cfg.receptive_field - 1) / 2 + 1)?;
        let stem = f.act(stem)?;
        let mut h = stem;
        for i in 0..cfg.dual_blocks() {
            let a = f.conv(h, &format!("count.block{i}.k3"), 1)?;
            let b = f.conv(h, &format!("count.block{i}.k1"), 0)?;
            let cat = f.g.concat_channels(a, b)?;
            h = f.act(cat)?;
        }
        let map = f.conv(h, "count.out", 0)?;
        let count_map = f.g.softplus(map)?;

        let [p1, p2, p3] = cfg.pools;
        let t = f.pool(stem, p1)?;
        let t = f.res_stage(t, 0)?;
        let hist2 = if cfg.dsn { Some(f.side_head(t, "side2", p2 * p3)?) } else { None };
        let t = f.pool(t, p2)?;
        let t = f.res_stage(t, 1)?;
        let hist4 = if cfg.dsn { Some(f.side_head(t, "side4", p3)?) } else { None };
        let t = f.pool(t, p3)?;
        let t = f.conv(t, "hist.head.conv3", 1)?;
        let t = f.act(t)?;
        let t = f.conv(t, "hist.head.conv1", 0)?;
        let t = f.act(t)?;
        let t = f.dense(t, "hist.fc1")?;
        let t = f.act(t)?;
        let t = f.g.dropout(t, cfg.dropout, training, rng)?;
        let t = f.dense(t, "hist.fc2")?;
        let hist = f.g.softplus(t)?;
        Ok((vars, OutputVars { count_map, hist, hist2, hist4 }))
    }

    /// Inference-style forward returning plain values.
    pub fn forward(&self, image: &ImagePatch, training: bool, rng: &mut dyn RngCore) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let mask = vec![false; self.params.len()];
        let (_, out) = self.forward_graph(&mut g, image, training, rng, Some(&mask))?;
        Ok(self.read_output(&g, &out))
    }

    pub fn read_output(&self, g: &Graph, out: &OutputVars) -> ModelOutput {
        let side = self.config.map_side();
        let grid = g.value(out.count_map).data().to_vec();
        let map = CountMap { rows: side, cols: side, r: self.config.receptive_field, grid };
        ModelOutput {
            count: map.count(),
            count_map: Some(map),
            hist: g.value(out.hist).data().to_vec(),
            hist2: out.hist2.map(|v| g.value(v).data().to_vec()),
            hist4: out.hist4.map(|v| g.value(v).data().to_vec()),
        }
    }

    /// Deterministic inference (dropout inactive).
    pub fn predict(&self, image: &ImagePatch) -> Result<ModelOutput> {
        self.forward(image, false, &mut seed::rng(0))
    }

    /// Writes the checkpoint to `path` and the configuration to the JSON
    /// sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path).map_err(|e| match e {
            tensorkit::TensorError::Io(err) => Error::io(path, err),
            other => other.into(),
        })?;
        let side = sidecar_path(path);
        let mut json = serde_json::to_vec_pretty(&self.config).expect("serializable config");
        json.push(b'\n');
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let side = sidecar_path(path);
        let bytes = fs::read(&side).map_err(|e| Error::data(&side, format!("cannot read: {e}")))?;
        let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::data(&side, e.to_string()))?;
        let params = ParamStore::load(path).map_err(|e| Error::data(path, e.to_string()))?;
        Model::from_parts(config, params)
    }
}

/// `model.ckpt` → `model.json`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

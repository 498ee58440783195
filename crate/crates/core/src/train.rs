//! Teacher-forced training on `L = L_LM + w·L_reg`: losses, AdamW with
//! cosine annealing, checkpoints that resume bit-identically, and a metrics CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spacetoken_diff::{checkpoint, Bindings, Gradients, ParameterStore, Scalar, Tensor, IGNORE_INDEX};

use crate::error::{Error, IoContext, Result};
use crate::model::{
    decode_rows, embed_stream, embed_views, forward, CoordMode, Example, ModelConfig, Planner, StreamRole,
};
use crate::tokens::StreamElement;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_STATE_FILE: &str = "train_state.json";
pub const OPTIM_M_FILE: &str = "optim_m.ckpt";
pub const OPTIM_V_FILE: &str = "optim_v.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegLossKind {
    Huber,
    Mae,
    Mse,
}

impl RegLossKind {
    pub const ALL: [RegLossKind; 3] = [RegLossKind::Huber, RegLossKind::Mae, RegLossKind::Mse];

    pub fn name(self) -> &'static str {
        match self {
            RegLossKind::Huber => "huber",
            RegLossKind::Mae => "mae",
            RegLossKind::Mse => "mse",
        }
    }

    /// Penalty of one residual component.
    pub fn penalty(self, r: f64, delta: f64) -> f64 {
        match self {
            RegLossKind::Huber => huber(r, delta),
            RegLossKind::Mae => mae(r),
            RegLossKind::Mse => mse(r),
        }
    }
}

/// `0.5 r²` for `|r| ≤ δ`, else `δ(|r| − δ/2)`.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - delta / 2.0)
    }
}

pub fn mae(r: f64) -> f64 {
    r.abs()
}

pub fn mse(r: f64) -> f64 {
    r * r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-annealed to zero over the run.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: RegLossKind,
    pub huber_delta: f64,
    pub reg_weight: f64,
    /// Extra checkpoint every N steps (0: only at epoch ends).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            loss: RegLossKind::Huber,
            huber_delta: 1.0,
            reg_weight: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("huber_delta", self.huber_delta),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("clip_norm", self.clip_norm), ("reg_weight", self.reg_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `peak` at step 0 to 0 at `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub lm_loss: f64,
    /// Already multiplied by `reg_weight`.
    pub reg_loss: f64,
    pub total: f64,
    /// Euclidean waypoint errors (m) of the teacher-forced decoder, per sample.
    pub residuals: Vec<Vec<f64>>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.lm_loss.is_finite() && self.reg_loss.is_finite() && self.total.is_finite()
    }
}

/// Next-element labels for a target stream: Text ids, IND, and the ignore label on spatial payloads.
pub fn lm_labels(target: &[StreamElement], ind: usize) -> Vec<usize> {
    target
        .iter()
        .map(|e| match *e {
            StreamElement::Text(id) => id,
            StreamElement::Indicator => ind,
            StreamElement::Spatial { .. } | StreamElement::EgoStatus => IGNORE_INDEX,
        })
        .collect()
}

/// Elementwise penalty of `pred − target`, summed per row and averaged over rows.
pub fn regression_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, kind: RegLossKind, delta: f64) -> Result<Tensor<T>> {
    let r = pred.sub(target)?;
    let p = match kind {
        RegLossKind::Huber => r.huber(T::lit(delta)),
        RegLossKind::Mae => r.abs(),
        RegLossKind::Mse => r.square(),
    };
    let rows = pred.shape().first().copied().unwrap_or(1).max(1);
    Ok(p.sum().mul_const(T::lit(1.0 / rows as f64)))
}

/// Graph pieces of one sample's objective.
pub struct SampleLoss<T: Scalar> {
    pub lm: Tensor<T>,
    pub reg: Tensor<T>,
    pub residuals: Vec<f64>,
}

pub fn sample_loss<T: Scalar>(
    b: &Bindings<T>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    example: &Example,
    ind: usize,
) -> Result<SampleLoss<T>> {
    let elements = example.target.elements();
    let spatial: Vec<usize> =
        elements.iter().enumerate().filter(|(_, e)| matches!(e, StreamElement::Spatial { .. })).map(|(k, _)| k).collect();
    let expected = match (cfg.mode, cfg.task_specific) {
        (CoordMode::DigitText, _) => 0,
        (CoordMode::SpatialPe, true) => 1,
        (CoordMode::SpatialPe, false) => cfg.horizon,
    };
    if spatial.len() != expected || example.waypoints.len() != cfg.horizon {
        return Err(Error::Training(format!(
            "target stream has {} spatial slots and {} waypoints; model expects {expected} and {}",
            spatial.len(),
            example.waypoints.len(),
            cfg.horizon
        )));
    }
    if spatial.first() == Some(&0) {
        return Err(Error::Training("target stream cannot open with a spatial slot".into()));
    }

    let visual = embed_views(b, cfg, &example.inputs)?;
    let prompt = embed_stream(b, cfg, &example.prompt, &example.inputs, StreamRole::Prompt)?;
    let target = embed_stream(b, cfg, &example.target, &example.inputs, StreamRole::Target)?;
    let start = visual.shape()[0] + prompt.shape()[0];
    let out = forward(b, cfg, &visual, &Tensor::concat_rows(&[prompt, target])?)?;

    let lm = out.logits.slice_rows(start - 1, start - 1 + elements.len())?.cross_entropy(&lm_labels(elements, ind))?;

    if spatial.is_empty() {
        return Ok(SampleLoss { lm, reg: Tensor::scalar(T::zero()), residuals: Vec::new() });
    }
    let rows: Vec<usize> = spatial.iter().map(|k| start + k - 1).collect();
    let decoded = decode_rows(b, cfg, &out.hidden.gather_rows(&rows)?)?;
    let (pred, truth) = if cfg.task_specific {
        let truth: Vec<f64> = example.waypoints.iter().flat_map(|w| [w.x, w.y]).collect();
        (decoded.reshape(&[cfg.horizon, 2])?, truth)
    } else {
        let truth: Vec<f64> = spatial
            .iter()
            .map(|&k| match elements[k] {
                StreamElement::Spatial { coord, .. } => coord,
                _ => unreachable!("filtered to spatial slots"),
            })
            .flat_map(|c| [c.x, c.y])
            .collect();
        (decoded.slice_last(0, 2)?, truth)
    };
    let truth_t = Tensor::new(&[cfg.horizon, 2], truth.iter().map(|&v| T::lit(v)).collect())?;
    let reg = regression_loss(&pred, &truth_t, train.loss, train.huber_delta)?;
    let p = pred.data();
    let residuals = (0..cfg.horizon)
        .map(|i| (p[2 * i].as_f64() - truth[2 * i]).hypot(p[2 * i + 1].as_f64() - truth[2 * i + 1]))
        .collect();
    Ok(SampleLoss { lm, reg, residuals })
}

/// Mean objective over `batch` as one graph, with its report.
pub fn batch_objective<T: Scalar>(
    b: &Bindings<T>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch: &[Example],
    ind: usize,
    step: usize,
) -> Result<(Tensor<T>, LossReport)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut lm_sum: Option<Tensor<T>> = None;
    let mut reg_sum: Option<Tensor<T>> = None;
    let mut residuals = Vec::with_capacity(batch.len());
    for ex in batch {
        let s = sample_loss(b, cfg, train, ex, ind)?;
        lm_sum = Some(match lm_sum {
            Some(acc) => acc.add(&s.lm)?,
            None => s.lm,
        });
        reg_sum = Some(match reg_sum {
            Some(acc) => acc.add(&s.reg)?,
            None => s.reg,
        });
        residuals.push(s.residuals);
    }
    let lm = lm_sum.expect("nonempty batch").mul_const(scale);
    let reg = reg_sum.expect("nonempty batch").mul_const(scale * T::lit(train.reg_weight));
    let total = lm.add(&reg)?;
    let report = LossReport {
        step,
        lm_loss: lm.item()?.as_f64(),
        reg_loss: reg.item()?.as_f64(),
        total: total.item()?.as_f64(),
        residuals,
    };
    Ok((total, report))
}

/// Loss of `batch` under fixed weights, without building gradients.
pub fn batch_loss(planner: &Planner, train: &TrainConfig, batch: &[Example], step: usize) -> Result<LossReport> {
    let b = planner.params.bind_frozen();
    Ok(batch_objective(&b, &planner.config, train, batch, planner.vocab.ind(), step)?.1)
}

/// Example-weighted mean loss over `examples` under fixed weights; residuals are concatenated.
pub fn dataset_loss(planner: &Planner, train: &TrainConfig, examples: &[Example]) -> Result<LossReport> {
    if examples.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    let mut acc = LossReport { step: 0, lm_loss: 0.0, reg_loss: 0.0, total: 0.0, residuals: Vec::new() };
    let n = examples.len() as f64;
    for chunk in examples.chunks(train.batch_size.max(1)) {
        let r = batch_loss(planner, train, chunk, 0)?;
        let w = chunk.len() as f64 / n;
        acc.lm_loss += w * r.lm_loss;
        acc.reg_loss += w * r.reg_loss;
        acc.total += w * r.total;
        acc.residuals.extend(r.residuals);
    }
    Ok(acc)
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: ParameterStore<f32>,
    pub v: ParameterStore<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParameterStore<f32>) -> Self {
        let mut zeros = ParameterStore::new();
        for (name, p) in params.iter() {
            zeros.insert(name, &p.shape, vec![0.0; p.data.len()]).expect("names are unique");
        }
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterStore<f32>, grads: &Gradients<f32>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Training(format!("no gradient for `{name}`")))?;
            let m = &mut self.m.get_mut(name).ok_or_else(|| Error::Training(format!("no moment for `{name}`")))?.data;
            let v = &mut self.v.get_mut(name).expect("moments share names").data;
            let decay = if p.shape.len() >= 2 { (lr * cfg.weight_decay) as f32 } else { 0.0 };
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                p.data[i] -= decay * p.data[i];
                p.data[i] -= (lr * mh / (vh.sqrt() + cfg.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next step to run.
    pub step: usize,
    pub adam_t: u64,
    pub examples: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lm_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub mean_residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub planner: Planner,
    pub config: TrainConfig,
    pub optim: AdamW,
    /// Next step to run.
    pub step: usize,
}

impl Trainer {
    pub fn new(planner: Planner, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = AdamW::new(&planner.params);
        Ok(Self { planner, config, optim, step: 0 })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.config.epochs * self.steps_per_epoch(n)
    }

    /// Example indices of `step`: a per-epoch seeded permutation, cut in order.
    pub fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let per = self.steps_per_epoch(n);
        let (epoch, k) = (step / per, step % per);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let bs = self.config.batch_size;
        order[k * bs..((k + 1) * bs).min(n)].to_vec()
    }

    /// One optimizer step on `examples[batch_indices(step)]`. Parameters are
    /// untouched when the loss or its gradient is not finite.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<LossReport> {
        let n = examples.len();
        let batch: Vec<Example> = self.batch_indices(n, self.step).into_iter().map(|i| examples[i].clone()).collect();
        let b = self.planner.params.bind();
        let (loss, report) =
            batch_objective(&b, &self.planner.config, &self.config, &batch, self.planner.vocab.ind(), self.step)?;
        if !report.is_finite() {
            return Err(Error::Diverged { step: self.step, last_good: None });
        }
        loss.backward()?;
        let mut grads = b.gradients();
        let norm = grads.global_norm().as_f64();
        if !norm.is_finite() {
            return Err(Error::Diverged { step: self.step, last_good: None });
        }
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            grads.scale((self.config.clip_norm / norm) as f32);
        }
        let lr = cosine_lr(self.config.lr, self.step, self.total_steps(n));
        self.optim.step(&mut self.planner.params, &grads, lr, &self.config)?;
        self.step += 1;
        Ok(report)
    }

    pub fn save_checkpoint(&self, dir: &Path, examples: usize) -> Result<()> {
        self.planner.save(dir)?;
        checkpoint::save(&dir.join(OPTIM_M_FILE), &self.optim.m)?;
        checkpoint::save(&dir.join(OPTIM_V_FILE), &self.optim.v)?;
        let state = TrainState { step: self.step, adam_t: self.optim.t, examples, config: self.config.clone() };
        let path = dir.join(TRAIN_STATE_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&state)?).at(&path)
    }

    /// Restores planner, moments and step; returns the example count the run was started with.
    pub fn resume(dir: &Path) -> Result<(Self, usize)> {
        let planner = Planner::load(dir)?;
        let path = dir.join(TRAIN_STATE_FILE);
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(&path).at(&path)?)?;
        let optim = AdamW {
            m: checkpoint::load(&dir.join(OPTIM_M_FILE))?,
            v: checkpoint::load(&dir.join(OPTIM_V_FILE))?,
            t: state.adam_t,
        };
        state.config.validate()?;
        Ok((Self { planner, config: state.config, optim, step: state.step }, state.examples))
    }

    /// Runs the remaining steps. With `out`, appends to `metrics.csv` and
    /// writes checkpoints under `out/checkpoints/step-NNNNNN`. `hook` runs
    /// after every epoch.
    pub fn fit(
        &mut self,
        examples: &[Example],
        out: Option<&Path>,
        mut hook: impl FnMut(&EpochSummary, &Planner) -> Result<()>,
    ) -> Result<TrainSummary> {
        let n = examples.len();
        if n == 0 {
            return Err(Error::Training("dataset is empty".into()));
        }
        let total = self.total_steps(n);
        let per = self.steps_per_epoch(n);
        let mut csv = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).at(dir)?;
                let path = dir.join(METRICS_FILE);
                let fresh = self.step == 0 || !path.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
                if fresh {
                    f.set_len(0).at(&path)?;
                    writeln!(f, "step,lm_loss,reg_loss,total,lr").at(&path)?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut summary = TrainSummary::default();
        let mut last_good = match out {
            Some(dir) => latest_checkpoint(dir)?,
            None => None,
        };
        let mut epoch_reports: Vec<LossReport> = Vec::new();
        while self.step < total {
            let step = self.step;
            let lr = cosine_lr(self.config.lr, step, total);
            let report = match self.train_step(examples) {
                Ok(r) => r,
                Err(Error::Diverged { step, .. }) => return Err(Error::Diverged { step, last_good }),
                Err(e) => return Err(e),
            };
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{},{},{},{}", report.step, report.lm_loss, report.reg_loss, report.total, lr).at(path.as_path())?;
            }
            epoch_reports.push(report.clone());
            summary.reports.push(report);
            let epoch_end = self.step % per == 0;
            let periodic = self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0;
            if let (Some(dir), true) = (out, epoch_end || periodic) {
                let ckpt = dir.join(CHECKPOINT_DIR).join(format!("step-{:06}", self.step));
                self.save_checkpoint(&ckpt, n)?;
                last_good = Some(ckpt.clone());
                summary.checkpoints.push(ckpt);
            }
            if epoch_end {
                let epoch = self.summarize(self.step / per - 1, &epoch_reports);
                epoch_reports.clear();
                hook(&epoch, &self.planner)?;
                summary.epochs.push(epoch);
            }
        }
        Ok(summary)
    }

    fn summarize(&self, epoch: usize, reports: &[LossReport]) -> EpochSummary {
        let k = reports.len().max(1) as f64;
        let residuals: Vec<f64> = reports.iter().flat_map(|r| r.residuals.iter().flatten().copied()).collect();
        EpochSummary {
            epoch,
            lm_loss: reports.iter().map(|r| r.lm_loss).sum::<f64>() / k,
            reg_loss: reports.iter().map(|r| r.reg_loss).sum::<f64>() / k,
            total: reports.iter().map(|r| r.total).sum::<f64>() / k,
            mean_residual: if residuals.is_empty() { 0.0 } else { residuals.iter().sum::<f64>() / residuals.len() as f64 },
        }
    }
}

/// Newest `step-*` checkpoint under `out/checkpoints`.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let dir = out.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        if path.file_name().and_then(|s| s.to_str()).is_some_and(|s| s.starts_with("step-")) && best.as_ref().is_none_or(|b| &path > b) {
            best = Some(path);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_example;
    use crate::prompt::corpus_vocab;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny() -> ModelConfig {
        ModelConfig { width: 32, layers: 1, heads: 2, image: 16, patch: 8, ..ModelConfig::default() }
    }

    fn examples(cfg: &ModelConfig, n: u64) -> Vec<Example> {
        let vocab = corpus_vocab();
        let sc = SceneConfig { image: 16, ..SceneConfig::default() };
        (0..n).map(|s| build_example(&generate_scene(s, &sc).unwrap(), &vocab, cfg).unwrap()).collect()
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
    }

    #[test]
    fn tensor_losses_match_scalar_forms() {
        let pred = Tensor::<f64>::new(&[2, 2], vec![0.3, -2.0, 4.0, 1.0]).unwrap();
        let truth = Tensor::<f64>::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.5]).unwrap();
        let r = [0.3, -2.0, 3.0, -0.5];
        for kind in RegLossKind::ALL {
            let expect = r.iter().map(|&v| kind.penalty(v, 1.0)).sum::<f64>() / 2.0;
            let got = regression_loss(&pred, &truth, kind, 1.0).unwrap().item().unwrap();
            assert!((got - expect).abs() < 1e-12, "{kind:?}");
        }
        assert_eq!(regression_loss(&truth, &truth, RegLossKind::Huber, 1.0).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(3e-4, 50, 100) - 1.5e-4).abs() < 1e-15);
    }

    #[test]
    fn labels_ignore_spatial_payloads() {
        let vocab = corpus_vocab();
        let cfg = tiny();
        let ex = &examples(&cfg, 1)[0];
        let labels = lm_labels(ex.target.elements(), vocab.ind());
        assert_eq!(labels.iter().filter(|&&l| l == IGNORE_INDEX).count(), cfg.horizon);
        assert_eq!(labels.iter().filter(|&&l| l == vocab.ind()).count(), cfg.horizon);
        assert_eq!(*labels.last().unwrap(), crate::tokens::EOS);
    }

    #[test]
    fn report_total_is_sum() {
        let cfg = tiny();
        let planner = Planner::new(cfg.clone(), corpus_vocab(), 0).unwrap();
        let exs = examples(&cfg, 3);
        let r = batch_loss(&planner, &TrainConfig { reg_weight: 0.5, ..TrainConfig::default() }, &exs, 0).unwrap();
        assert!((r.total - (r.lm_loss + r.reg_loss)).abs() < 1e-6);
        assert_eq!(r.residuals.len(), 3);
        assert!(r.residuals.iter().all(|x| x.len() == 6));
    }

    #[test]
    fn digit_mode_has_no_regression() {
        let cfg = tiny().digit_baseline();
        let planner = Planner::new(cfg.clone(), corpus_vocab(), 0).unwrap();
        let r = batch_loss(&planner, &TrainConfig::default(), &examples(&cfg, 2), 0).unwrap();
        assert_eq!(r.reg_loss, 0.0);
        assert!(r.lm_loss > 0.0);
        assert!(r.residuals.iter().all(Vec::is_empty));
    }

    #[test]
    fn loss_kind_leaves_lm_unchanged() {
        let cfg = tiny();
        let planner = Planner::new(cfg.clone(), corpus_vocab(), 2).unwrap();
        let exs = examples(&cfg, 2);
        let lms: Vec<f64> = RegLossKind::ALL
            .iter()
            .map(|&loss| batch_loss(&planner, &TrainConfig { loss, ..TrainConfig::default() }, &exs, 0).unwrap().lm_loss)
            .collect();
        assert_eq!(lms[0], lms[1]);
        assert_eq!(lms[1], lms[2]);
    }

    #[test]
    fn mismatched_stream_rejected() {
        let cfg = tiny();
        let planner = Planner::new(cfg.clone(), corpus_vocab(), 0).unwrap();
        let mut ex = examples(&cfg, 1).remove(0);
        ex.waypoints.pop();
        assert!(batch_loss(&planner, &TrainConfig::default(), &[ex], 0).is_err());
    }

    #[test]
    fn dataset_loss_weights_by_examples() {
        let cfg = tiny();
        let planner = Planner::new(cfg.clone(), corpus_vocab(), 0).unwrap();
        let exs = examples(&cfg, 3);
        let tc = TrainConfig { batch_size: 2, ..TrainConfig::default() };
        let whole = batch_loss(&planner, &tc, &exs, 0).unwrap();
        let chunked = dataset_loss(&planner, &tc, &exs).unwrap();
        assert!((whole.total - chunked.total).abs() < 1e-5);
        assert_eq!(chunked.residuals.len(), 3);
    }

    #[test]
    fn batches_partition_each_epoch() {
        let planner = Planner::new(tiny(), corpus_vocab(), 0).unwrap();
        let t = Trainer::new(planner, TrainConfig { batch_size: 3, ..TrainConfig::default() }).unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|s| t.batch_indices(10, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(10, 0), t.batch_indices(10, 4));
    }

    #[test]
    fn resume_reproduces_next_step() {
        let cfg = tiny();
        let exs = examples(&cfg, 6);
        let tc = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(Planner::new(cfg, corpus_vocab(), 1).unwrap(), tc).unwrap();
        for _ in 0..2 {
            a.train_step(&exs).unwrap();
        }
        a.save_checkpoint(dir.path(), exs.len()).unwrap();
        let (mut b, n) = Trainer::resume(dir.path()).unwrap();
        assert_eq!(n, 6);
        let ra = a.train_step(&exs).unwrap();
        let rb = b.train_step(&exs).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.planner.params, b.planner.params);
        assert_eq!(a.optim, b.optim);
    }

    #[test]
    fn nan_aborts_with_last_good_checkpoint() {
        let exs = examples(&tiny(), 4);
        let out = tempfile::tempdir().unwrap();
        let tc = TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() };
        let mut t = Trainer::new(Planner::new(tiny(), corpus_vocab(), 1).unwrap(), tc).unwrap();
        t.train_step(&exs).unwrap();
        t.train_step(&exs).unwrap();
        let good = out.path().join(CHECKPOINT_DIR).join("step-000002");
        t.save_checkpoint(&good, exs.len()).unwrap();
        t.planner.params.get_mut("head.b").unwrap().data[0] = f32::NAN;
        let before = t.planner.params.clone();
        match t.fit(&exs, Some(out.path()), |_, _| Ok(())) {
            Err(Error::Diverged { step: 2, last_good: Some(p) }) => assert_eq!(p, good),
            other => panic!("{other:?}"),
        }
        assert_eq!(format!("{:?}", t.planner.params), format!("{before:?}"));
    }

    #[test]
    fn fit_writes_metrics_and_checkpoints() {
        let cfg = tiny();
        let exs = examples(&cfg, 4);
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let mut t = Trainer::new(Planner::new(cfg, corpus_vocab(), 1).unwrap(), tc).unwrap();
        let mut hooks = 0;
        let s = t
            .fit(&exs, Some(dir.path()), |_, _| {
                hooks += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(hooks, 2);
        assert_eq!(s.reports.len(), 4);
        assert_eq!(s.checkpoints.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("step,lm_loss,reg_loss,total,lr\n0,"));
    }
}

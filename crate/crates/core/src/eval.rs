//! Open-loop metrics and the ablation runner.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, IoContext, Result};
use crate::geometry::Coordinate3D;
use crate::model::{build_example, CoordMode, ModelConfig, Planner, SceneInputs, SpatialEncoder};
use crate::prompt::{corpus_vocab, planning_prompt};
use crate::scene::{Agent, Scene, EGO_LENGTH, EGO_WIDTH};
use crate::shapes::{region_contains_rect, trajectory_footprints, Point2, Polygon};
use crate::train::{RegLossKind, TrainConfig, Trainer};

/// Waypoints per second.
pub const WAYPOINT_RATE: usize = 2;
/// Decoding budget per scene.
pub const MAX_GENERATION_STEPS: usize = 160;
pub const MATRIX_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Displacement at the horizon timestep.
    #[default]
    Uniad,
    /// Mean displacement over all timesteps up to the horizon.
    Stp3,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Uniad => "uniad",
            Protocol::Stp3 => "stp3",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct L2Horizons {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub avg: f64,
}

/// L2 at 1, 2 and 3 s for six waypoints at 2 Hz.
pub fn l2_horizons(pred: &[Point2], gt: &[Point2], protocol: Protocol) -> Result<L2Horizons> {
    if pred.len() != gt.len() || gt.len() != 3 * WAYPOINT_RATE {
        return Err(Error::Eval(format!(
            "need {} predicted and ground-truth waypoints, got {} and {}",
            3 * WAYPOINT_RATE,
            pred.len(),
            gt.len()
        )));
    }
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1])).collect();
    let at = |seconds: usize| {
        let last = seconds * WAYPOINT_RATE - 1;
        match protocol {
            Protocol::Uniad => d[last],
            Protocol::Stp3 => d[..=last].iter().sum::<f64>() / (last + 1) as f64,
        }
    };
    let (a, b, c) = (at(1), at(2), at(3));
    Ok(L2Horizons { l2_1s: a, l2_2s: b, l2_3s: c, avg: (a + b + c) / 3.0 })
}

/// Percentage of timestamps whose ego footprint overlaps an agent box.
/// Waypoint `t` meets agent pose `t + 1`.
pub fn collision_rate(pred: &[Point2], length: f64, width: f64, agents: &[Agent]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = trajectory_footprints(pred, length, width)
        .iter()
        .enumerate()
        .filter(|(t, fp)| agents.iter().any(|a| a.poses.len() > t + 1 && fp.overlaps(&a.footprint(t + 1))))
        .count();
    100.0 * hits as f64 / pred.len() as f64
}

/// Percentage of timestamps whose ego footprint is not inside the drivable region.
pub fn intersection_rate(pred: &[Point2], length: f64, width: f64, drivable: &[Polygon]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let out = trajectory_footprints(pred, length, width).iter().filter(|fp| !region_contains_rect(drivable, fp)).count();
    100.0 * out as f64 / pred.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
    pub collision: f64,
    pub intersection: f64,
    pub protocol: Protocol,
}

impl TrajectoryMetrics {
    fn values(&self) -> [f64; 6] {
        [self.l2_1s, self.l2_2s, self.l2_3s, self.l2_avg, self.collision, self.intersection]
    }

    fn from_values(v: [f64; 6], protocol: Protocol) -> Self {
        Self { l2_1s: v[0], l2_2s: v[1], l2_3s: v[2], l2_avg: v[3], collision: v[4], intersection: v[5], protocol }
    }

    /// Field-wise mean and population standard deviation.
    pub fn mean_std(all: &[TrajectoryMetrics]) -> Option<(Self, Self)> {
        let first = all.first()?;
        let n = all.len() as f64;
        let mut mean = [0.0; 6];
        for m in all {
            mean.iter_mut().zip(m.values()).for_each(|(a, v)| *a += v / n);
        }
        let mut var = [0.0; 6];
        for m in all {
            var.iter_mut().zip(m.values()).zip(mean).for_each(|((a, v), mu)| *a += (v - mu).powi(2) / n);
        }
        Some((Self::from_values(mean, first.protocol), Self::from_values(var.map(f64::sqrt), first.protocol)))
    }
}

/// Scores one trajectory; missing waypoints repeat the last one (the origin if none), extras are dropped.
pub fn score_trajectory(pred: &[Coordinate3D], scene: &Scene, protocol: Protocol) -> Result<TrajectoryMetrics> {
    let gt = scene.future_xy();
    let pred = pad_waypoints(pred, gt.len());
    let l2 = l2_horizons(&pred, &gt, protocol)?;
    Ok(TrajectoryMetrics {
        l2_1s: l2.l2_1s,
        l2_2s: l2.l2_2s,
        l2_3s: l2.l2_3s,
        l2_avg: l2.avg,
        collision: collision_rate(&pred, EGO_LENGTH, EGO_WIDTH, &scene.agents),
        intersection: intersection_rate(&pred, EGO_LENGTH, EGO_WIDTH, &scene.drivable),
        protocol,
    })
}

pub fn pad_waypoints(pred: &[Coordinate3D], horizon: usize) -> Vec<Point2> {
    let mut out: Vec<Point2> = pred.iter().take(horizon).map(|c| [c.x, c.y]).collect();
    let fill = out.last().copied().unwrap_or([0.0, 0.0]);
    out.resize(horizon, fill);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub seed: u64,
    pub waypoints: Vec<Point2>,
    pub ground_truth: Vec<Point2>,
    pub grammar_valid: bool,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: TrajectoryMetrics,
    /// Percentage of outputs following the target grammar.
    pub grammar_valid: f64,
    pub scenes: usize,
    pub predictions: Vec<ScenePrediction>,
}

/// Greedy-decodes every scene and averages the per-scene metrics.
pub fn evaluate(planner: &Planner, scenes: &[Scene], protocol: Protocol) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Eval("no scenes to evaluate".into()));
    }
    let mut per = Vec::with_capacity(scenes.len());
    let mut predictions = Vec::with_capacity(scenes.len());
    let mut valid = 0usize;
    for scene in scenes {
        let inputs = SceneInputs::from_scene(scene, &planner.config)?;
        let prompt = crate::model::prompt_stream(&planning_prompt(scene), &planner.vocab, &planner.config)?;
        let out = planner.generate(&inputs, &prompt, MAX_GENERATION_STEPS)?;
        let ok = planner.grammar_valid(&out);
        valid += ok as usize;
        per.push(score_trajectory(&out.waypoints, scene, protocol)?);
        predictions.push(ScenePrediction {
            seed: scene.seed,
            waypoints: out.waypoints.iter().map(|c| [c.x, c.y]).collect(),
            ground_truth: scene.future_xy(),
            grammar_valid: ok,
            text: out.text,
        });
    }
    let (metrics, _) = TrajectoryMetrics::mean_std(&per).expect("nonempty");
    Ok(EvalReport { metrics, grammar_valid: 100.0 * valid as f64 / scenes.len() as f64, scenes: scenes.len(), predictions })
}

/// Even seeds train, odd seeds validate.
pub fn split_by_seed_parity(scenes: Vec<Scene>) -> (Vec<Scene>, Vec<Scene>) {
    scenes.into_iter().partition(|s| s.seed % 2 == 0)
}

/// Ablation matrix: base configs plus per-cell JSON overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub base_model: ModelConfig,
    #[serde(default)]
    pub base_train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub protocol: Protocol,
    pub cells: Vec<CellSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    /// Fields overriding `base_model`.
    #[serde(default)]
    pub model: Value,
    /// Fields overriding `base_train`.
    #[serde(default)]
    pub train: Value,
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: &Value) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    match (patch, &mut v) {
        (Value::Null, _) => {}
        (Value::Object(p), Value::Object(b)) => {
            for (k, val) in p {
                b.insert(k.clone(), val.clone());
            }
        }
        _ => return Err(Error::Config(format!("override must be a JSON object, got {patch}"))),
    }
    Ok(serde_json::from_value(v)?)
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MATRIX_SCHEMA {
            return Err(Error::Config(format!("matrix schema {} (expected {MATRIX_SCHEMA})", self.schema_version)));
        }
        if self.seeds.len() < 3 {
            return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", self.seeds.len())));
        }
        if self.cells.is_empty() {
            return Err(Error::Config("ablation matrix has no cells".into()));
        }
        for c in &self.cells {
            let (m, t) = self.resolve(c)?;
            m.validate().map_err(|e| Error::Config(format!("cell `{}`: {e}", c.name)))?;
            t.validate().map_err(|e| Error::Config(format!("cell `{}`: {e}", c.name)))?;
        }
        Ok(())
    }

    pub fn resolve(&self, cell: &CellSpec) -> Result<(ModelConfig, TrainConfig)> {
        Ok((overlay(&self.base_model, &cell.model)?, overlay(&self.base_train, &cell.train)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path).at(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Settings that distinguish cells in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFlags {
    pub mode: CoordMode,
    pub inject_visual: bool,
    pub encode_text_coords: bool,
    pub encode_ego: bool,
    pub alpha: String,
    pub pe_base: f64,
    pub loss: RegLossKind,
    pub spatial_encoder: SpatialEncoder,
    pub task_specific: bool,
}

impl CellFlags {
    pub fn new(m: &ModelConfig, t: &TrainConfig) -> Self {
        let alpha = if m.alpha.learnable { format!("learnable {}", m.alpha.init) } else { format!("fixed {}", m.alpha.init) };
        Self {
            mode: m.mode,
            inject_visual: m.inject_visual,
            encode_text_coords: m.encode_text_coords,
            encode_ego: m.encode_ego,
            alpha,
            pe_base: m.pe_base,
            loss: t.loss,
            spatial_encoder: m.spatial_encoder,
            task_specific: m.task_specific,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<TrajectoryMetrics>,
    pub grammar_valid: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub flags: CellFlags,
    pub seeds: Vec<SeedResult>,
    pub mean: Option<TrajectoryMetrics>,
    pub std: Option<TrajectoryMetrics>,
    pub grammar_valid: Option<f64>,
    /// Set when any seed failed; the cell keeps its row.
    pub failed: Option<String>,
}

impl AblationCell {
    pub fn completed(&self) -> bool {
        self.failed.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: Protocol,
    /// Name of the first cell; deltas are taken against it.
    pub reference: String,
    /// Sorted by mean average L2, failed cells last.
    pub cells: Vec<AblationCell>,
}

/// Trains every cell from scratch per seed, evaluates on `val`, and sorts the rows.
pub fn run_ablation(
    spec: &MatrixSpec,
    train: &[Scene],
    val: &[Scene],
    mut progress: impl FnMut(&str, u64, &SeedResult),
) -> Result<AblationReport> {
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Eval("ablation needs nonempty train and val splits".into()));
    }
    let vocab = corpus_vocab();
    let mut cells = Vec::with_capacity(spec.cells.len());
    for cell in &spec.cells {
        let (model, train_cfg) = spec.resolve(cell)?;
        let examples = train.iter().map(|s| build_example(s, &vocab, &model)).collect::<Result<Vec<_>>>()?;
        let mut seeds = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let outcome = (|| -> Result<(EvalReport, f64)> {
                let planner = Planner::new(model.clone(), vocab.clone(), seed)?;
                let mut trainer = Trainer::new(planner, TrainConfig { seed, ..train_cfg.clone() })?;
                let summary = trainer.fit(&examples, None, |_, _| Ok(()))?;
                let last = summary.epochs.last().map_or(f64::NAN, |e| e.total);
                Ok((evaluate(&trainer.planner, val, spec.protocol)?, last))
            })();
            let result = match outcome {
                Ok((report, loss)) => SeedResult {
                    seed,
                    metrics: Some(report.metrics),
                    grammar_valid: Some(report.grammar_valid),
                    final_loss: Some(loss),
                    error: None,
                },
                Err(e) => SeedResult { seed, metrics: None, grammar_valid: None, final_loss: None, error: Some(e.to_string()) },
            };
            progress(&cell.name, seed, &result);
            seeds.push(result);
        }
        let done: Vec<TrajectoryMetrics> = seeds.iter().filter_map(|s| s.metrics).collect();
        let failed = seeds
            .iter()
            .find_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed)));
        let (mean, std) = match TrajectoryMetrics::mean_std(&done) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        let gv: Vec<f64> = seeds.iter().filter_map(|s| s.grammar_valid).collect();
        cells.push(AblationCell {
            name: cell.name.clone(),
            flags: CellFlags::new(&model, &train_cfg),
            seeds,
            mean,
            std,
            grammar_valid: (!gv.is_empty()).then(|| gv.iter().sum::<f64>() / gv.len() as f64),
            failed,
        });
    }
    let reference = cells[0].name.clone();
    cells.sort_by(|a, b| {
        let key = |c: &AblationCell| if c.completed() { c.mean.map_or(f64::INFINITY, |m| m.l2_avg) } else { f64::INFINITY };
        key(a).total_cmp(&key(b)).then(a.completed().cmp(&b.completed()).reverse())
    });
    Ok(AblationReport { protocol: spec.protocol, reference, cells })
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.name == name)
    }

    fn reference_avg(&self) -> Option<f64> {
        self.cell(&self.reference).and_then(|c| c.mean).map(|m| m.l2_avg)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "cell,status,mode,inject_visual,encode_text_coords,encode_ego,alpha,pe_base,loss,spatial_encoder,task_specific,\
             seeds,l2_1s,l2_2s,l2_3s,l2_avg,l2_avg_std,delta_l2_avg,collision,collision_std,intersection,intersection_std,grammar_valid\n",
        );
        let r = self.reference_avg();
        for c in &self.cells {
            let f = &c.flags;
            let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
            let m = c.mean;
            let sd = c.std;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.name,
                if c.completed() { "ok" } else { "failed" },
                serde_json::to_value(f.mode).map(|v| v.as_str().unwrap_or_default().to_string()).unwrap_or_default(),
                f.inject_visual,
                f.encode_text_coords,
                f.encode_ego,
                f.alpha,
                f.pe_base,
                f.loss.name(),
                serde_json::to_value(f.spatial_encoder).map(|v| v.as_str().unwrap_or_default().to_string()).unwrap_or_default(),
                f.task_specific,
                c.seeds.iter().map(|s| s.seed.to_string()).collect::<Vec<_>>().join(" "),
                num(m.map(|m| m.l2_1s)),
                num(m.map(|m| m.l2_2s)),
                num(m.map(|m| m.l2_3s)),
                num(m.map(|m| m.l2_avg)),
                num(sd.map(|m| m.l2_avg)),
                num(m.zip(r).map(|(m, r)| m.l2_avg - r)),
                num(m.map(|m| m.collision)),
                num(sd.map(|m| m.collision)),
                num(m.map(|m| m.intersection)),
                num(sd.map(|m| m.intersection)),
                num(c.grammar_valid),
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| cell | mode | flags (vis/txt/ego) | α | loss | L2 1s | L2 2s | L2 3s | avg L2 ± std | Δ avg vs `{}` | collision % | intersection % | grammar-valid % |\n",
            self.reference
        );
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        let r = self.reference_avg();
        for c in &self.cells {
            let f = &c.flags;
            let mode = match f.mode {
                CoordMode::SpatialPe => "spatial_pe",
                CoordMode::DigitText => "digit_text",
            };
            let flags = format!("{}/{}/{}", f.inject_visual as u8, f.encode_text_coords as u8, f.encode_ego as u8);
            match (c.mean, c.std, &c.failed) {
                (Some(m), Some(sd), None) => {
                    let delta = r.map_or(String::from("n/a"), |r| {
                        format!("{:+.3} m ({:+.1}%)", m.l2_avg - r, 100.0 * (m.l2_avg - r) / r.max(1e-12))
                    });
                    let _ = writeln!(
                        s,
                        "| {} | {mode} | {flags} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} ± {:.3} | {delta} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.1} |",
                        c.name,
                        f.alpha,
                        f.loss.name(),
                        m.l2_1s,
                        m.l2_2s,
                        m.l2_3s,
                        m.l2_avg,
                        sd.l2_avg,
                        m.collision,
                        sd.collision,
                        m.intersection,
                        sd.intersection,
                        c.grammar_valid.unwrap_or(0.0),
                    );
                }
                _ => {
                    let why = c.failed.clone().unwrap_or_else(|| "no completed seed".into()).replace('|', "/");
                    let _ = writeln!(s, "| {} | {mode} | {flags} | {} | {} | FAILED: {why} ||||||||", c.name, f.alpha, f.loss.name());
                }
            }
        }
        let _ = writeln!(s, "\nProtocol: {}. Seeds per cell: {}.", self.protocol.name(), self.cells.first().map_or(0, |c| c.seeds.len()));
        s
    }
}

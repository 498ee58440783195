//! `spacetoken`: data generation, training, evaluation, ablations, encoding
//! inspection and plots. Exit codes: 0 success, 1 runtime failure, 2 usage.

mod manifest;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spacetoken::dataset::{read_dataset, write_dataset, INDEX_FILE};
use spacetoken::eval::{
    evaluate, run_ablation, split_by_seed_parity, AblationReport, EvalReport, MatrixSpec, Protocol,
};
use spacetoken::model::{
    build_example, CoordMode, ModelConfig, Planner, SceneInputs, SpatialEncoder,
};
use spacetoken::pe::{encode, encode_bev, PeConfig, PeScale, DEFAULT_BASE};
use spacetoken::prompt::{corpus_vocab, planning_prompt};
use spacetoken::scene::{generate_scene, RoadTemplate, Scene, SceneConfig};
use spacetoken::train::{
    dataset_loss, latest_checkpoint, RegLossKind, TrainConfig, Trainer, METRICS_FILE,
};
use spacetoken::Coordinate3D;

use manifest::RunManifest;

pub const CONFIG_SCHEMA: u32 = 1;
const FINAL_DIR: &str = "final";
const SUMMARY_FILE: &str = "train_summary.json";

#[derive(Parser)]
#[command(name = "spacetoken", version, about = "Spatial-token planner toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a planner.
    Train(TrainArgs),
    /// Evaluate a checkpoint with open-loop metrics.
    Eval(EvalArgs),
    /// Run an ablation matrix.
    Ablate(AblateArgs),
    /// Print the spatial encoding of one coordinate as CSV.
    Encode(EncodeArgs),
    /// Emit SVG plots.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: u64,
    /// Scene i uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of straight, curve, intersection.
    #[arg(long, value_delimiter = ',')]
    templates: Option<Vec<String>>,
    #[arg(long)]
    image: Option<usize>,
    #[arg(long)]
    max_agents: Option<usize>,
    /// JSON with `schema_version` and `scene`; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SpatialPe,
    DigitText,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Huber,
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Uniad,
    Stp3,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Uniad => Protocol::Uniad,
            ProtocolArg::Stp3 => Protocol::Stp3,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON with `schema_version`, `model` and `train`; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    reg_weight: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    pe_base: Option<f64>,
    /// Fix α_PE at this value instead of learning it.
    #[arg(long)]
    alpha_fixed: Option<f64>,
    #[arg(long)]
    no_inject_visual: bool,
    #[arg(long)]
    no_encode_text_coords: bool,
    #[arg(long)]
    no_encode_ego: bool,
    #[arg(long)]
    task_specific: bool,
    #[arg(long)]
    learned_encoder: bool,
    #[arg(long)]
    no_feedback_pe: bool,
    /// Continue from the newest checkpoint under --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Planner directory (a checkpoint or `final/`).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "uniad")]
    protocol: ProtocolArg,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Run directory for the report; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// `x,y` or `x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    coord: String,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_BASE)]
    base: f64,
    /// Zero the z block (ground-plane encoding).
    #[arg(long)]
    bev: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics.csv, eval_report.json or ablation_report.json; repeatable.
    #[arg(long)]
    report: Vec<PathBuf>,
    /// Scene index (file order) to overlay; needs --data and --ckpt.
    #[arg(long)]
    scene: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Versioned run configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    #[serde(default)]
    model: Option<Value>,
    #[serde(default)]
    train: Option<Value>,
    #[serde(default)]
    scene: Option<SceneConfig>,
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if cfg.schema_version != CONFIG_SCHEMA {
        bail!(
            "{}: schema_version {} (expected {CONFIG_SCHEMA})",
            path.display(),
            cfg.schema_version
        );
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn select(scenes: Vec<Scene>, split: SplitArg) -> Result<Vec<Scene>> {
    let (train, val) = split_by_seed_parity(scenes);
    let chosen = match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
        SplitArg::All => {
            let mut all = train;
            all.extend(val);
            all.sort_by_key(|s| s.seed);
            all
        }
    };
    if chosen.is_empty() {
        bail!("the selected split holds no scenes (train = even seeds, val = odd seeds)");
    }
    Ok(chosen)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?.scene.unwrap_or_default(),
        None => SceneConfig {
            image: 32,
            ..SceneConfig::default()
        },
    };
    if let Some(t) = &a.templates {
        cfg.templates = t
            .iter()
            .map(|s| RoadTemplate::parse(s.trim()))
            .collect::<spacetoken::Result<_>>()?;
    }
    if let Some(i) = a.image {
        cfg.image = i;
    }
    if let Some(m) = a.max_agents {
        cfg.max_agents = m;
    }
    cfg.validate()?;
    if a.scenes == 0 {
        bail!("--scenes must be positive");
    }
    let manifest = RunManifest::begin(
        "gen-data",
        json!({ "scene": cfg, "scenes": a.scenes, "seed": a.seed }),
        Some(a.seed),
    );
    let scenes = (0..a.scenes)
        .map(|i| generate_scene(a.seed + i, &cfg))
        .collect::<spacetoken::Result<Vec<_>>>()?;
    write_dataset(&a.out, &scenes)?;
    manifest.finish(
        &a.out,
        vec![INDEX_FILE.into(), spacetoken::dataset::BLOB_FILE.into()],
    )?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(
    base: T,
    patch: Option<&Value>,
) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(base)?;
    let (Value::Object(b), Value::Object(p)) = (&mut v, patch) else {
        bail!("config sections must be JSON objects")
    };
    for (k, val) in p {
        b.insert(k.clone(), val.clone());
    }
    Ok(serde_json::from_value(v)?)
}

fn resolve_train(
    a: &TrainArgs,
    image: usize,
    cameras: usize,
) -> Result<(ModelConfig, TrainConfig)> {
    let file = a.config.as_deref().map(read_config).transpose()?;
    let model_patch = file.as_ref().and_then(|f| f.model.clone());
    if let Some(i) = model_patch
        .as_ref()
        .and_then(|m| m.get("image"))
        .and_then(Value::as_u64)
    {
        if i as usize != image {
            bail!("config image {i} disagrees with the dataset's {image}");
        }
    }
    let mut m: ModelConfig = overlay(ModelConfig::default(), model_patch.as_ref())?;
    let mut t: TrainConfig = overlay(
        TrainConfig::default(),
        file.as_ref().and_then(|f| f.train.as_ref()),
    )?;
    m.image = image;
    m.cameras = cameras;
    if let Some(ModeArg::DigitText) = a.mode {
        m = m.digit_baseline();
    } else if let Some(ModeArg::SpatialPe) = a.mode {
        m.mode = CoordMode::SpatialPe;
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(m.width, a.width);
    set!(m.layers, a.layers);
    set!(m.heads, a.heads);
    set!(m.patch, a.patch);
    set!(m.pe_base, a.pe_base);
    set!(t.epochs, a.epochs);
    set!(t.batch_size, a.batch_size);
    set!(t.lr, a.lr);
    set!(t.seed, a.seed);
    set!(t.huber_delta, a.huber_delta);
    set!(t.reg_weight, a.reg_weight);
    set!(t.checkpoint_every, a.checkpoint_every);
    if let Some(v) = a.alpha_fixed {
        m.alpha = PeScale::fixed(v);
    }
    if let Some(l) = a.loss {
        t.loss = match l {
            LossArg::Huber => RegLossKind::Huber,
            LossArg::Mae => RegLossKind::Mae,
            LossArg::Mse => RegLossKind::Mse,
        };
    }
    m.inject_visual &= !a.no_inject_visual;
    m.encode_text_coords &= !a.no_encode_text_coords;
    m.encode_ego &= !a.no_encode_ego;
    m.feedback_pe &= !a.no_feedback_pe;
    m.task_specific |= a.task_specific;
    if a.learned_encoder {
        m.spatial_encoder = SpatialEncoder::LearnedMlp;
    }
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

fn train(a: TrainArgs) -> Result<()> {
    let scenes = select(read_dataset(&a.data)?, a.split)?;
    let image = scenes[0].views.first().map_or(0, |v| v.width());
    let (model, train_cfg) = resolve_train(&a, image, scenes[0].views.len())?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = RunManifest::begin(
        "train",
        json!({ "model": model, "train": train_cfg, "data": a.data, "split": format!("{:?}", a.split).to_lowercase() }),
        Some(train_cfg.seed),
    );
    let vocab = corpus_vocab();
    let examples = scenes
        .iter()
        .map(|s| build_example(s, &vocab, &model))
        .collect::<spacetoken::Result<Vec<_>>>()?;

    let mut trainer = match (a.resume, latest_checkpoint(&a.out)?) {
        (true, Some(ckpt)) => {
            let (t, n) = Trainer::resume(&ckpt)?;
            if n != examples.len() || t.planner.config != model || t.config != train_cfg {
                bail!(
                    "{} was trained with a different dataset or configuration",
                    ckpt.display()
                );
            }
            eprintln!("resuming from {} at step {}", ckpt.display(), t.step);
            t
        }
        (true, None) => bail!("--resume given but {} holds no checkpoint", a.out.display()),
        (false, _) => Trainer::new(
            Planner::new(model.clone(), vocab, train_cfg.seed)?,
            train_cfg.clone(),
        )?,
    };
    let before = dataset_loss(&trainer.planner, &trainer.config, &examples)?.total;
    let summary = trainer.fit(&examples, Some(&a.out), |e, _| {
        eprintln!(
            "epoch {} lm {:.4} reg {:.4} total {:.4} residual {:.3} m",
            e.epoch, e.lm_loss, e.reg_loss, e.total, e.mean_residual
        );
        Ok(())
    })?;
    let final_dir = a.out.join(FINAL_DIR);
    trainer.planner.save(&final_dir)?;
    let after = dataset_loss(&trainer.planner, &trainer.config, &examples)?.total;
    write_json(
        &a.out.join(SUMMARY_FILE),
        &json!({ "steps": trainer.step, "loss_before": before, "loss_after": after, "epochs": summary.epochs }),
    )?;
    let mut outputs = vec![
        METRICS_FILE.to_string(),
        SUMMARY_FILE.into(),
        format!("{FINAL_DIR}/"),
    ];
    outputs.extend(
        summary
            .checkpoints
            .iter()
            .filter_map(|c| c.strip_prefix(&a.out).ok())
            .map(|p| p.display().to_string()),
    );
    manifest.finish(&a.out, outputs)?;
    println!(
        "trained to step {}: training-split loss {before:.4} -> {after:.4}",
        trainer.step
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let planner = Planner::load(&a.ckpt)?;
    let scenes = select(read_dataset(&a.data)?, a.split)?;
    let manifest = RunManifest::begin(
        "eval",
        json!({ "ckpt": a.ckpt, "data": a.data, "protocol": Protocol::from(a.protocol), "model": planner.config }),
        None,
    );
    let report = evaluate(&planner, &scenes, a.protocol.into())?;
    let m = report.metrics;
    let table = format!(
        "| protocol | L2 1s | L2 2s | L2 3s | avg L2 | collision % | intersection % | grammar-valid % | scenes |\n\
         |---|---|---|---|---|---|---|---|---|\n\
         | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.2} | {:.2} | {:.1} | {} |\n",
        m.protocol.name(),
        m.l2_1s,
        m.l2_2s,
        m.l2_3s,
        m.l2_avg,
        m.collision,
        m.intersection,
        report.grammar_valid,
        report.scenes
    );
    match &a.out {
        Some(out) => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("eval_report.json"), &report)?;
            std::fs::write(out.join("metrics.md"), &table).context("writing metrics.md")?;
            manifest.finish(out, vec!["eval_report.json".into(), "metrics.md".into()])?;
            print!("{table}");
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let spec = MatrixSpec::load(&a.matrix)?;
    let (train, val) = split_by_seed_parity(read_dataset(&a.data)?);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = RunManifest::begin("ablate", json!({ "matrix": spec, "data": a.data }), None);
    let report = run_ablation(&spec, &train, &val, |cell, seed, r| {
        match (&r.metrics, &r.error) {
            (Some(m), _) => eprintln!("{cell} seed {seed}: avg L2 {:.3} m", m.l2_avg),
            (_, Some(e)) => eprintln!("{cell} seed {seed}: FAILED {e}"),
            _ => {}
        }
    })?;
    write_json(&a.out.join("ablation_report.json"), &report)?;
    std::fs::write(a.out.join("ablation.csv"), report.to_csv()).context("writing ablation.csv")?;
    std::fs::write(a.out.join("ablation.md"), report.to_markdown())
        .context("writing ablation.md")?;
    manifest.finish(
        &a.out,
        vec![
            "ablation_report.json".into(),
            "ablation.csv".into(),
            "ablation.md".into(),
        ],
    )?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn parse_coord(text: &str) -> Result<(Coordinate3D, bool)> {
    let parts = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("`{p}` is not a number"))
        })
        .collect::<Result<Vec<_>>>()?;
    match parts[..] {
        [x, y] => Ok((Coordinate3D::bev(x, y), true)),
        [x, y, z] => Ok((Coordinate3D::new(x, y, z), false)),
        _ => bail!(
            "--coord takes 2 or 3 comma-separated numbers, got {}",
            parts.len()
        ),
    }
}

fn encode_line(a: &EncodeArgs) -> Result<String> {
    let (c, two_d) = parse_coord(&a.coord)?;
    let cfg = PeConfig::new(a.dim, a.base)?;
    let enc = if a.bev || two_d {
        encode_bev(c.x, c.y, &cfg)?
    } else {
        encode(c, &cfg)?
    };
    Ok(enc
        .values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(","))
}

fn plot(a: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = RunManifest::begin(
        "plot",
        json!({ "reports": a.report, "scene": a.scene, "data": a.data, "ckpt": a.ckpt }),
        None,
    );
    let mut outputs = Vec::new();
    for path in &a.report {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if text.starts_with("step,lm_loss,reg_loss,total,lr") {
            let rows: Vec<Vec<f64>> = text
                .lines()
                .skip(1)
                .map(|l| {
                    l.split(',')
                        .map(|v| v.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()
                .with_context(|| format!("parsing {}", path.display()))?;
            let col = |i: usize| rows.iter().map(|r| [r[0], r[i]]).collect::<Vec<_>>();
            let doc = svg::loss_curves(
                &[("lm_loss", col(1)), ("reg_loss", col(2)), ("total", col(3))],
                "training loss",
            );
            std::fs::write(a.out.join("loss_curves.svg"), doc)?;
            outputs.push("loss_curves.svg".to_string());
        } else if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
            let pred: Vec<_> = report
                .predictions
                .iter()
                .map(|p| p.waypoints.clone())
                .collect();
            let truth: Vec<_> = report
                .predictions
                .iter()
                .map(|p| p.ground_truth.clone())
                .collect();
            let doc = svg::trajectory_fan(
                &pred,
                &truth,
                &format!("planned trajectory distribution ({} scenes)", report.scenes),
            );
            std::fs::write(a.out.join("trajectory_fan.svg"), doc)?;
            outputs.push("trajectory_fan.svg".to_string());
        } else if let Ok(report) = serde_json::from_str::<AblationReport>(&text) {
            let rows: Vec<_> = report
                .cells
                .iter()
                .map(|c| {
                    (
                        c.name.clone(),
                        c.mean.map_or(f64::NAN, |m| m.l2_avg),
                        c.std.map_or(0.0, |m| m.l2_avg),
                    )
                })
                .collect();
            std::fs::write(
                a.out.join("ablation_l2.svg"),
                svg::bar_chart(&rows, "average L2 (m)", "ablation"),
            )?;
            outputs.push("ablation_l2.svg".to_string());
        } else {
            bail!(
                "{} is neither metrics.csv, an eval report nor an ablation report",
                path.display()
            );
        }
    }
    if let Some(index) = a.scene {
        let (Some(data), Some(ckpt)) = (&a.data, &a.ckpt) else {
            bail!("--scene needs --data and --ckpt")
        };
        let scenes = read_dataset(data)?;
        let scene = scenes
            .get(index)
            .with_context(|| format!("scene index {index} out of {}", scenes.len()))?;
        let planner = Planner::load(ckpt)?;
        let inputs = SceneInputs::from_scene(scene, &planner.config)?;
        let prompt = spacetoken::model::prompt_stream(
            &planning_prompt(scene),
            &planner.vocab,
            &planner.config,
        )?;
        let out = planner.generate(&inputs, &prompt, spacetoken::eval::MAX_GENERATION_STEPS)?;
        let pred: Vec<_> = out.waypoints.iter().map(|c| [c.x, c.y]).collect();
        let name = format!("trajectory_scene_{index}.svg");
        let title = format!(
            "scene {index} (seed {}): {}",
            scene.seed,
            scene.command.phrase()
        );
        std::fs::write(
            a.out.join(&name),
            svg::trajectory_overlay(scene, &pred, &title),
        )?;
        outputs.push(name);
    }
    if outputs.is_empty() {
        bail!("nothing to plot: pass --report and/or --scene");
    }
    manifest.finish(&a.out, outputs.clone())?;
    for o in outputs {
        println!("{}", a.out.join(o).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Encode(a) => {
            println!("{}", encode_line(&a)?);
            Ok(())
        }
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(coord: &str, dim: usize) -> String {
        encode_line(&EncodeArgs {
            coord: coord.into(),
            dim,
            base: DEFAULT_BASE,
            bev: false,
        })
        .unwrap()
    }

    #[test]
    fn origin_encoding_line() {
        assert_eq!(enc("0,0,0", 6), "0,1,0,1,0,1");
    }

    #[test]
    fn two_component_coords_are_ground_plane() {
        assert_eq!(enc("0,0", 6), "0,1,0,1,0,0");
    }

    #[test]
    fn bad_coords_rejected() {
        assert!(parse_coord("1").is_err());
        assert!(parse_coord("1,a").is_err());
        assert!(parse_coord("1,2,3,4").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

//! Command-line surface: data synthesis, statistics, training, inference,
//! evaluation, heatmap export and ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::dataset::{self, build_features, generate_scene, read_scene, write_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::groundtruth::{gt_heatmap, SceneStats};
use crate::inference::{self, infer_scene, InferenceConfig, SceneInstances, SelectionMode};
use crate::model::{BlockInput, Model, ModelConfig};
use crate::training::{self, RunConfig, TrainConfig, Variant};

pub const RUN_DIR_ENV: &str = "GICN_RUN_DIR";

#[derive(Debug, Parser)]
#[command(name = "gicn", version, about = "Center-heatmap point cloud instance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic labeled scenes.
    Synth(SynthArgs),
    /// Compute class radii and size groups from training scenes.
    Stats(StatsArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Segment one scene with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Write predicted and ground-truth heatmaps per point.
    ExportHeatmap(ExportArgs),
    /// Train and/or evaluate an ablation variant.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene generator config (JSON); built-in toy config if omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Scene files or directories of `.scn.txt` files.
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub size_groups: usize,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    #[default]
    Compact,
    Paper,
}

/// Training config file: `{"train": {...}, "preset": "compact"}` or an
/// explicit `"model"` section. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub preset: ModelPreset,
    pub model: Option<ModelConfig>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub val: Vec<PathBuf>,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `$GICN_RUN_DIR/<name>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    pub name: String,
    #[arg(long, env = RUN_DIR_ENV, default_value = "runs")]
    pub runs_root: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Greedy,
    Random,
    Topk,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Instance file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PLY colored by instance.
    #[arg(long)]
    pub ply: Option<PathBuf>,
    /// Inference config (JSON); defaults to the one stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub uniform_radius: Option<f64>,
    #[arg(long)]
    pub sample_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Instance file, scene file, or a directory of either.
    #[arg(long)]
    pub pred: PathBuf,
    /// Scene file or directory of scene files.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class names, background first.
    #[arg(long, value_delimiter = ',')]
    pub names: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sample_points: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Default,
    NoSize,
    NoFocal,
    RandomCenters,
    TopkCenters,
    UniformRadius,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Default => Variant::Default,
            VariantArg::NoSize => Variant::NoSize,
            VariantArg::NoFocal => Variant::NoFocal,
            VariantArg::RandomCenters => Variant::RandomCenters,
            VariantArg::TopkCenters => Variant::TopkCenters,
            VariantArg::UniformRadius => Variant::UniformRadius,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub val: Vec<PathBuf>,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = RUN_DIR_ENV, default_value = "runs")]
    pub runs_root: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// For inference-only variants: evaluate this checkpoint instead of
    /// training a default model per seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV of per-seed metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command, returning what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Stats(a) => stats(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => evaluate(&a),
        Command::ExportHeatmap(a) => export_heatmap(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

/// `error[<kind>]: <message>` on a single line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", e.kind())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

/// Expands directories into their files with the given suffix, sorted.
pub fn collect_files(paths: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.to_string_lossy().ends_with(suffix))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            require_file(p)?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("input files"));
    }
    Ok(out)
}

fn load_scenes(paths: &[PathBuf]) -> Result<Vec<Scene>> {
    collect_files(paths, dataset::SCENE_SUFFIX)?
        .iter()
        .map(|p| read_scene(p))
        .collect()
}

fn synth(a: &SynthArgs) -> Result<String> {
    let cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for i in 0..a.count {
        let seed = a.seed + i as u64;
        let scene = generate_scene(&cfg, seed)?;
        write_scene(&scene, &a.out_dir.join(format!("scene_{seed:05}{}", dataset::SCENE_SUFFIX)))?;
    }
    Ok(format!("wrote {} scenes to {}", a.count, a.out_dir.display()))
}

fn stats(a: &StatsArgs) -> Result<String> {
    let scenes = load_scenes(&a.scenes)?;
    let s = SceneStats::compute(&scenes, a.size_groups)?;
    s.save(&a.out)?;
    Ok(format!(
        "{} scenes, {} classes, {} size groups -> {}",
        scenes.len(),
        s.num_classes,
        s.size_groups.k(),
        a.out.display()
    ))
}

fn train_setup(config: Option<&Path>, stats: &SceneStats) -> Result<(TrainConfig, ModelConfig)> {
    let file: TrainFile = match config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let model = file.model.unwrap_or_else(|| match file.preset {
        ModelPreset::Compact => ModelConfig::compact(stats.num_classes, stats.size_groups.k()),
        ModelPreset::Paper => ModelConfig::paper_widths(stats.num_classes, stats.size_groups.k()),
    });
    Ok((file.train, model))
}

fn train(a: &TrainArgs) -> Result<String> {
    require_file(&a.stats)?;
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let stats = SceneStats::load(&a.stats)?;
    let (mut cfg, model) = train_setup(a.config.as_deref(), &stats)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let train_files = collect_files(&a.scenes, dataset::SCENE_SUFFIX)?;
    let val_files = if a.val.is_empty() {
        Vec::new()
    } else {
        collect_files(&a.val, dataset::SCENE_SUFFIX)?
    };
    let scenes = train_files.iter().map(|p| read_scene(p)).collect::<Result<Vec<_>>>()?;
    let val = val_files.iter().map(|p| read_scene(p)).collect::<Result<Vec<_>>>()?;
    let dir = a.run_dir.clone().unwrap_or_else(|| a.runs_root.join(&a.name));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rc = RunConfig {
        train: cfg.clone(),
        model: model.clone(),
        train_scenes: train_files,
        val_scenes: val_files,
        stats: Some(a.stats.clone()),
    };
    let rc_path = dir.join("run_config.json");
    fs::write(&rc_path, serde_json::to_string_pretty(&rc)?).map_err(|e| Error::io(&rc_path, e))?;
    let out = training::train(&scenes, &val, &stats, &model, &cfg, Some(&dir))?;
    let last = out.log.last().expect("at least one epoch");
    let mut msg = format!(
        "trained {} epochs, final loss {:.5}, run dir {}",
        out.log.len(),
        last.total,
        dir.display()
    );
    if let Some((e, ap)) = out.best {
        let _ = write!(msg, ", best val AP@50 {ap:.4} at epoch {e}");
    }
    Ok(msg)
}

fn load_model(path: &Path) -> Result<(Model, serde_json::Value)> {
    require_file(path)?;
    Model::load_checkpoint(path)
}

fn stored_inference(meta: &serde_json::Value) -> Result<InferenceConfig> {
    match meta.get("inference") {
        Some(v) => Ok(serde_json::from_value(v.clone())?),
        None => Ok(InferenceConfig::default()),
    }
}

fn infer(a: &InferArgs) -> Result<String> {
    require_file(&a.scene)?;
    require_file(&a.stats)?;
    let (model, meta) = load_model(&a.checkpoint)?;
    let stats = SceneStats::load(&a.stats)?;
    let mut cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => stored_inference(&meta)?,
    };
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Greedy => SelectionMode::Greedy,
            ModeArg::Random => SelectionMode::Random,
            ModeArg::Topk => SelectionMode::TopK,
        };
    }
    if a.uniform_radius.is_some() {
        cfg.uniform_radius = a.uniform_radius;
    }
    if let Some(n) = a.sample_points {
        cfg.sample_points = n;
    }
    cfg.selection.validate()?;
    let scene = read_scene(&a.scene)?;
    let (inst, _) = infer_scene(&model, &stats, &scene, &cfg)?;
    inference::write_instances(&inst, &a.out)?;
    if let Some(p) = &a.ply {
        inference::write_instance_ply(p, &scene, &inst)?;
    }
    Ok(format!("{} instances -> {}", inst.instances.len(), a.out.display()))
}

/// Scene files count as ground-truth instance sets.
fn read_instance_set(path: &Path) -> Result<SceneInstances> {
    if path.to_string_lossy().ends_with(dataset::SCENE_SUFFIX) {
        Ok(inference::scene_ground_truth(&read_scene(path)?))
    } else {
        inference::read_instances(path)
    }
}

/// File name with the known suffixes removed, used to pair files.
fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [dataset::SCENE_SUFFIX, inference::INSTANCE_SUFFIX, ".txt"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    name
}

fn evaluate(a: &EvalArgs) -> Result<String> {
    let pairs: Vec<(PathBuf, PathBuf)> = if a.gt.is_dir() {
        let gts = collect_files(std::slice::from_ref(&a.gt), dataset::SCENE_SUFFIX)?;
        if !a.pred.is_dir() {
            return Err(Error::Config("--gt is a directory, so --pred must be one too".into()));
        }
        let preds = collect_files(std::slice::from_ref(&a.pred), ".txt")?;
        gts.into_iter()
            .map(|g| {
                let s = stem(&g);
                preds
                    .iter()
                    .find(|p| stem(p) == s)
                    .cloned()
                    .map(|p| (p, g.clone()))
                    .ok_or_else(|| Error::Config(format!("no prediction for {}", g.display())))
            })
            .collect::<Result<_>>()?
    } else {
        require_file(&a.gt)?;
        require_file(&a.pred)?;
        vec![(a.pred.clone(), a.gt.clone())]
    };
    let sets = pairs
        .iter()
        .map(|(p, g)| Ok((read_instance_set(p)?, read_instance_set(g)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = eval::evaluate(&sets, &a.names)?;
    report.write_csv(&a.out)?;
    Ok(report.table())
}

/// Per-point predicted heat, averaged over the blocks covering each point;
/// unsampled block members take their nearest sampled point's value.
pub fn predicted_scene_heatmap(model: &Model, scene: &Scene, cfg: &InferenceConfig) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; scene.len()];
    let mut count = vec![0usize; scene.len()];
    for (bi, block) in dataset::slice_into_cubes(scene, cfg.cube, cfg.stride)?.iter().enumerate() {
        let block = if block.indices.len() > cfg.sample_points {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(bi as u64);
            dataset::sample_points(block, cfg.sample_points, seed)?
        } else {
            block.clone()
        };
        let input = BlockInput::new(build_features(&block, scene), block.positions(scene), model.config.knn)?;
        let q = model.predict_points(&input)?.heatmap;
        let nearest = inference::nearest_sampled(&block, scene);
        for (&i, &r) in block.indices.iter().zip(&nearest) {
            sum[i] += q[r];
            count[i] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect())
}

fn export_heatmap(a: &ExportArgs) -> Result<String> {
    require_file(&a.scene)?;
    let (model, meta) = load_model(&a.checkpoint)?;
    let mut cfg = stored_inference(&meta)?;
    if let Some(n) = a.sample_points {
        cfg.sample_points = n;
    }
    let scene = read_scene(&a.scene)?;
    let pred = predicted_scene_heatmap(&model, &scene, &cfg)?;
    let gt = gt_heatmap(&scene)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["index", "x", "y", "z", "semantic", "instance", "predicted", "ground_truth"])?;
    for (i, p) in scene.positions().iter().enumerate() {
        w.write_record([
            i.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            scene.semantic[i].to_string(),
            scene.instance[i].to_string(),
            pred[i].to_string(),
            gt.values[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    let mae = pred.iter().zip(&gt.values).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64;
    Ok(format!("{} points -> {}, mean abs error {mae:.4}", pred.len(), a.out.display()))
}

fn ablate(a: &AblateArgs) -> Result<String> {
    let variant: Variant = a.variant.into();
    require_file(&a.stats)?;
    let stats = SceneStats::load(&a.stats)?;
    let (base_cfg, model_cfg) = train_setup(a.config.as_deref(), &stats)?;
    let scenes = load_scenes(&a.scenes)?;
    let val = load_scenes(&a.val)?;
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        let mut cfg = TrainConfig {
            seed,
            ..base_cfg.clone()
        };
        let model = match (&a.checkpoint, variant.trains()) {
            (Some(p), false) => load_model(p)?.0,
            _ => {
                let trained_as = if variant.trains() { variant } else { Variant::Default };
                trained_as.apply_train(&mut cfg);
                let dir = a.runs_root.join(format!("{}_s{seed}", trained_as.name()));
                training::train(&scenes, &val, &stats, &model_cfg, &cfg, Some(&dir))?.model
            }
        };
        let mut inf = cfg.inference_config();
        variant.apply_inference(&mut inf, &stats);
        let (p, r, ap) = training::validate(&model, &stats, &val, &inf)?;
        rows.push((seed, p, r, ap));
    }
    let mut text = String::from("variant,seed,mprec,mrec,ap50\n");
    for (seed, p, r, ap) in &rows {
        let _ = writeln!(text, "{},{seed},{p},{r},{ap}", variant.name());
    }
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    }
    Ok(text.trim_end().to_string())
}

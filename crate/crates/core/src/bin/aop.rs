use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use aop_core::ablation::{ablate, render_ablation, AblationScene, AblationSpec};
use aop_core::eliminator::{EliminationMap, Threshold};
use aop_core::eval::{compare, load_result, render_table, write_result, BitMask, Matching, SceneRun};
use aop_core::format::{load_image, load_tensor, save_pgm};
use aop_core::pipeline::{run, Method, PipelineConfig, RunObserver};
use aop_core::predictor::{
    forward, load_weights, mean_target, save_weights, train, PredictorConfig, PredictorWeights, TrainConfig,
};
use aop_core::provider::{synth_embedding, FileAdapter};
use aop_core::sampler::{sample, SamplerConfig};
use aop_core::scenegen::{generate, load_training_sample, scene_dirs, write_json, write_scene_dir, SceneSpec};
use aop_core::{seed, Error};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("AOP_BUILD_HASH"), ")");

#[derive(Parser)]
#[command(name = "aop", version = VERSION, about = "Adaptive prompt generation for promptable segmentation")]
struct Cli {
    /// Seed for every stochastic step; overrides seeds in spec files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of human output.
    #[arg(long, global = true)]
    json: bool,
    /// Write zero latencies so outputs are byte-identical across runs.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes in the directory adapter layout.
    GenData(GenDataArgs),
    /// Train the prompt confidence map predictor.
    Train(TrainArgs),
    /// Predict a confidence map and sample prompts for one image.
    Predict(PredictArgs),
    /// Run a method on one scene.
    Run(RunArgs),
    /// Score run results against ground truth and write a report.
    Eval(EvalArgs),
    /// Print the comparison table for run results.
    Compare(CompareArgs),
    /// Sweep one pipeline parameter over a scene set.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Scene spec JSON; defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scenes written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    accum: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    /// P5/P6 image.
    #[arg(long)]
    image: PathBuf,
    /// AOPT tensor `[c, h, w]`.
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    sigma: f32,
    #[arg(long, default_value_t = 0.2)]
    thr: f32,
    #[arg(long, default_value_t = 2)]
    spacing: usize,
    /// Prompts JSON: `[{id, x, y, score}]`.
    #[arg(long)]
    out: PathBuf,
    /// Optional P5 dump of the confidence map.
    #[arg(long)]
    pcm_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    method: Method,
    /// Scene directory with index.json, masks/ and embedding.aopt.
    #[arg(long)]
    scene: PathBuf,
    /// Predictor weights; required for aop.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Pipeline config JSON; defaults apply to missing fields. Without it,
    /// sampler defaults are scaled to the scene's embedding grid.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Result JSON; masks go to `<stem>_masks/` next to it.
    #[arg(long)]
    out: PathBuf,
    /// Dump the confidence map and per-batch elimination maps as PGM.
    #[arg(long)]
    debug_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Scene directory, or a directory of scene directories.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Greedy matching: one2one uses each mask once, reuse lets ground
    /// truth share predictions. Two empty masks have IoU 1.
    #[arg(long, default_value = "one2one")]
    matching: Matching,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "one2one")]
    matching: Matching,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation spec JSON: `{parameter, values, base}`.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "one2one")]
    matching: Matching,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(err) if err.is_data_error() => 2,
        Some(_) => 3,
        None if e.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 3,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("AOP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("AOP_THREADS must be a non-negative integer, got {value:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Predict(a) => predict_cmd(cli, a),
        Command::Run(a) => run_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Compare(a) => compare_cmd(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn emit<T: Serialize>(cli: &Cli, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", human());
    }
    Ok(())
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> anyhow::Result<()> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    use rayon::prelude::*;
    (0..a.count).into_par_iter().try_for_each(|i| -> anyhow::Result<()> {
        let scene = generate(&spec.nth(i))?;
        let features = synth_embedding(&scene, spec.embed_noise, scene.seed)?;
        write_scene_dir(&scene, &features, &a.out.join(format!("scene_{i:03}")))?;
        Ok(())
    })?;
    write_json(&a.out.join("spec.json"), &spec)?;
    let summary = serde_json::json!({ "scenes": a.count, "out": a.out, "seed": spec.seed });
    emit(cli, &summary, || format!("wrote {} scenes to {}\n", a.count, a.out.display()))
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let dirs = scene_dirs(&a.data)?;
    let dataset = dirs
        .iter()
        .map(|(_, d)| load_training_sample(d))
        .collect::<aop_core::Result<Vec<_>>>()?;
    let first = &dataset[0];
    let pcfg = PredictorConfig::for_embedding(first.embedding.shape()[0], first.embedding.shape()[1]);
    pcfg.validate()?;
    let seed = cli.seed.unwrap_or(0);
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        accum_steps: a.accum,
        seed: seed::derive(seed, &[1]),
        ..TrainConfig::default()
    };
    let init = PredictorWeights::init(pcfg.embed_channels, seed::derive(seed, &[0]))
        .with_output_prior(mean_target(&dataset));
    let quiet = cli.json;
    let outcome = train(&init, &pcfg, &dataset, &cfg, |epoch, loss| {
        if !quiet && (epoch % 10 == 0 || epoch + 1 == a.epochs) {
            eprintln!("epoch {epoch:>4}  loss {loss:.6}");
        }
    })?;
    save_weights(&outcome.weights, &a.out)?;
    let final_loss = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    let summary = serde_json::json!({
        "samples": dataset.len(),
        "epochs": a.epochs,
        "final_loss": final_loss,
        "loss_history": outcome.loss_history,
        "out": a.out,
    });
    emit(cli, &summary, || {
        format!(
            "trained on {} samples for {} epochs, final loss {final_loss:.6}; saved {}\n",
            dataset.len(),
            a.epochs,
            a.out.display()
        )
    })
}

fn predict_cmd(cli: &Cli, a: &PredictArgs) -> anyhow::Result<()> {
    let weights = load_weights(&a.weights)?;
    let image = load_image(&a.image)?;
    let embedding = load_tensor(&a.embedding)?;
    if embedding.ndim() != 3 {
        return Err(Error::Format(format!("{}: embedding must be [c, h, w]", a.embedding.display())).into());
    }
    let pcfg = PredictorConfig::for_embedding(embedding.shape()[0], embedding.shape()[1]);
    let pcm = forward(&weights, &pcfg, &image, &embedding)?;
    let scfg = SamplerConfig {
        smoothing_sigma: a.sigma,
        intensity_threshold: a.thr,
        spacing: a.spacing,
    };
    let pool = sample(&pcm, &scfg)?;
    let prompts: Vec<_> = pool
        .prompts()
        .iter()
        .map(|p| serde_json::json!({ "id": p.id, "x": p.x, "y": p.y, "score": p.score }))
        .collect();
    write_json(&a.out, &prompts)?;
    if let Some(path) = &a.pcm_out {
        save_pgm(path, &pcm.values)?;
    }
    let summary = serde_json::json!({ "prompts": prompts.len(), "out": a.out });
    emit(cli, &summary, || format!("{} prompts written to {}\n", prompts.len(), a.out.display()))
}

struct DebugDump {
    dir: PathBuf,
    error: Option<Error>,
}

impl RunObserver for DebugDump {
    fn on_batch(&mut self, iteration: usize, emap: &EliminationMap, _t: &Threshold, _eliminated: usize) {
        if self.error.is_some() {
            return;
        }
        let mut map = emap.upsampled().clone();
        for v in map.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        if let Err(e) = save_pgm(&self.dir.join(format!("emap_{iteration:03}.pgm")), &map) {
            self.error = Some(e);
        }
    }
}

fn run_cmd(cli: &Cli, a: &RunArgs) -> anyhow::Result<()> {
    let provider = FileAdapter::load(&a.scene)?;
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::for_grid(aop_core::provider::MaskProvider::features(&provider).grid().0),
    };
    cfg.method = a.method;
    cfg.validate()?;
    let weights = match &a.weights {
        Some(p) => Some(load_weights(p)?),
        None if a.method == Method::Aop => {
            return Err(Error::Config("--weights is required for method aop".into()).into())
        }
        None => None,
    };
    let result = match &a.debug_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            if let Some(w) = &weights {
                let pcm = aop_core::pipeline::predict(&provider, w)?;
                save_pgm(&dir.join("pcm.pgm"), &pcm.values)?;
            }
            let mut dump = DebugDump {
                dir: dir.clone(),
                error: None,
            };
            let r = run(&provider, weights.as_ref(), &cfg, &mut dump)?;
            if let Some(e) = dump.error {
                return Err(e.into());
            }
            r
        }
        None => run(&provider, weights.as_ref(), &cfg, &mut aop_core::pipeline::NoObserver)?,
    };
    let scene = a
        .scene
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.scene.display().to_string());
    let file = write_result(&a.out, &scene, a.method, &result, !cli.no_timing)?;
    emit(cli, &file.metrics, || {
        format!(
            "{}: {} masks, {} prompts, {} decoder calls, {} eliminated ({:.1}%)\n",
            a.method,
            file.masks.len(),
            file.metrics.num_prompts,
            file.metrics.decoder_calls,
            file.metrics.eliminated,
            file.metrics.elimination_ratio
        )
    })
}

fn load_runs_and_gt(
    results: &[PathBuf],
    gt_dir: &Path,
) -> anyhow::Result<(Vec<SceneRun>, BTreeMap<String, Vec<BitMask>>)> {
    let runs = results
        .iter()
        .map(|p| load_result(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut gt = BTreeMap::new();
    for (name, dir) in scene_dirs(gt_dir)? {
        let adapter = FileAdapter::load(&dir)?;
        gt.insert(name, adapter.masks().map(BitMask::from_tensor).collect());
    }
    Ok((runs, gt))
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    let (runs, gt) = load_runs_and_gt(&a.results, &a.gt)?;
    let reports = compare(&runs, &gt, a.matching)?;
    write_json(&a.out, &reports)?;
    emit(cli, &reports, || render_table(&reports))
}

fn compare_cmd(cli: &Cli, a: &CompareArgs) -> anyhow::Result<()> {
    let (runs, gt) = load_runs_and_gt(&a.results, &a.gt)?;
    let reports = compare(&runs, &gt, a.matching)?;
    let table = render_table(&reports);
    if let Some(out) = &a.out {
        std::fs::write(out, &table).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    emit(cli, &reports, || table)
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> anyhow::Result<()> {
    let spec: AblationSpec = read_json(&a.spec)?;
    spec.validate()?;
    let weights = match &a.weights {
        Some(p) => Some(load_weights(p)?),
        None if spec.base.method == Method::Aop => {
            return Err(Error::Config("--weights is required for method aop".into()).into())
        }
        None => None,
    };
    let mut adapters = Vec::new();
    for (name, dir) in scene_dirs(&a.scenes)? {
        adapters.push((name, FileAdapter::load(&dir)?));
    }
    let scenes: Vec<AblationScene<'_>> = adapters
        .iter()
        .map(|(name, adapter)| AblationScene {
            name: name.clone(),
            provider: adapter,
            ground_truth: adapter.masks().map(BitMask::from_tensor).collect(),
        })
        .collect();
    let table = ablate(&spec, &scenes, weights.as_ref(), a.matching, !cli.no_timing)?;
    write_json(&a.out, &table)?;
    emit(cli, &table, || render_ablation(&table))?;
    if let Some(reason) = &table.aborted {
        return Err(anyhow::anyhow!("ablation aborted at {reason}"));
    }
    Ok(())
}

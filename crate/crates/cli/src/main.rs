use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use svfap::checkpoint::Checkpoint;
use svfap::complexity::{count_with_head, variant_grid, CostReport, Regime, DEFAULT_HEAD_OUTPUTS};
use svfap::data::{load_dataset, save_ppm, synth_generate, video_grid, Label, SynthSpec, VideoClip};
use svfap::masking::make_tube_mask;
use svfap::metrics::MetricTable;
use svfap::model::reconstruct;
use svfap::tokenizer::{patchify, unpatchify};
use svfap::trainer::{argmax, epoch_means, evaluate, init_params, Objective, StepLog, TrainState, Trainer};
use svfap::{ArchConfig, Preset, RunConfig, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "svfap", version, about = "Masked facial-video pretraining, fine-tuning and cost accounting")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic facial-video dataset.
    Synth(SynthArgs),
    /// Masked-reconstruction pretraining.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning, optionally from a pretraining checkpoint.
    Finetune(FinetuneArgs),
    /// Two-clip evaluation of a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Analytic parameter and FLOP counts.
    Count(CountArgs),
    /// Original / masked / reconstructed frames of one clip as a PPM grid.
    Reconstruct(ReconstructArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override applied after the config file; repeatable, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                RunConfig::parse_onto(base, &text).with_context(|| format!("in config {}", p.display()))?
            }
            None => base,
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 4)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Std of the additive pixel noise.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Manifest of the training clips.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from a checkpoint; its config replaces --config/--set.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Also checkpoint every N epochs.
    #[arg(long)]
    save_every: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Manifest of the labeled training clips.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint whose matching tensors initialize the model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Held-out manifest evaluated after training.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, default_value = "TPSBT-B")]
    preset: Preset,
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// finetune or pretrain; both when omitted.
    #[arg(long)]
    regime: Option<Regime>,
    /// All four ablation variants.
    #[arg(long)]
    table4: bool,
    #[arg(long, default_value_t = DEFAULT_HEAD_OUTPUTS)]
    head_outputs: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "count")]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Pretraining checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Manifest row to show.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Seed of the tube mask.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Provenance record written to `<out>/run.json` by every command.
struct Run {
    out: PathBuf,
    record: Map<String, Value>,
    started: Instant,
}

impl Run {
    fn start(command: &str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
        let mut record = Map::new();
        record.insert("command".into(), json!(command));
        record.insert("argv".into(), json!(std::env::args().collect::<Vec<_>>()));
        record.insert("git".into(), json!(env!("SVFAP_GIT_DESCRIBE")));
        Ok(Run {
            out: out.to_path_buf(),
            record,
            started: Instant::now(),
        })
    }

    fn config(&mut self, cfg: &RunConfig) {
        self.record.insert("config".into(), json!(cfg.to_text()));
        self.record.insert("seed".into(), json!(cfg.train.seed));
    }

    fn set(&mut self, key: &str, value: Value) {
        self.record.insert(key.into(), value);
    }

    fn metrics(&mut self, table: &MetricTable) {
        let m: Map<String, Value> = table.0.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        self.record.insert("metrics".into(), Value::Object(m));
    }

    fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        if let Err(e) = outcome {
            self.record.insert("error".into(), json!(format!("{e:#}")));
        }
        self.record.insert("seconds".into(), json!(self.started.elapsed().as_secs_f64()));
        let path = self.out.join("run.json");
        let text = serde_json::to_string_pretty(&Value::Object(self.record))?;
        fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_clips(manifest: &Path, arch: &ArchConfig) -> Result<(svfap::data::Manifest, Vec<VideoClip>)> {
    let [_, h, w] = arch.input;
    load_dataset(manifest, Some((h, w))).with_context(|| format!("cannot load dataset {}", manifest.display()))
}

fn loss_csv(logs: &[StepLog]) -> String {
    let mut s = String::from("step,epoch,lr,loss\n");
    for l in logs {
        s.push_str(&format!("{},{},{},{}\n", l.step, l.epoch, l.lr, l.loss));
    }
    s
}

fn synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        clips_per_class: a.per_class,
        geometry: [a.frames, a.height, a.width],
        noise_std: a.noise,
        seed: a.seed,
    };
    let manifest = synth_generate(&spec, &a.out)?;
    println!(
        "wrote {} clips of {}×{}×{} to {}",
        manifest.rows.len(),
        a.frames,
        a.height,
        a.width,
        a.out.display()
    );
    run.set("seed", json!(a.seed));
    run.set(
        "config",
        json!({"classes": a.classes, "per_class": a.per_class, "noise": a.noise, "geometry": [a.frames, a.height, a.width]}),
    );
    run.set("metrics", json!({"clips": manifest.rows.len()}));
    Ok(())
}

/// Steps until `until` or the end of training, printing epoch means and
/// saving every `save_every` epochs.
fn train_loop(
    tr: &Trainer,
    state: &mut TrainState,
    until: Option<u64>,
    save: impl Fn(&TrainState) -> Result<()>,
    save_every: Option<u64>,
) -> Result<Vec<StepLog>> {
    let spe = tr.steps_per_epoch();
    let end = until.unwrap_or(u64::MAX).min(tr.total_steps());
    let mut logs = Vec::new();
    let (mut sum, mut n) = (0.0, 0);
    while state.step < end {
        let log = tr.step(state)?;
        sum += log.loss;
        n += 1;
        if state.step.is_multiple_of(spe) {
            println!("epoch {:>4}  loss {:.6}  lr {:.3e}", log.epoch, sum / n as f64, log.lr);
            (sum, n) = (0.0, 0);
            if save_every.is_some_and(|k| k > 0 && (log.epoch + 1) % k == 0) {
                save(state)?;
            }
        }
        logs.push(log);
    }
    Ok(logs)
}

fn pretrain(a: &PretrainArgs, run: &mut Run) -> Result<()> {
    let (cfg, resumed) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.objective != Objective::Pretrain {
                bail!("{} holds a {} checkpoint, not a pretraining one", p.display(), ck.objective.name());
            }
            (RunConfig::new(ck.arch.clone(), ck.train.clone()), Some(ck.state))
        }
        None => (
            a.cfg.resolve(RunConfig::new(ArchConfig::preset(Preset::Base), TrainConfig::pretrain()))?,
            None,
        ),
    };
    run.config(&cfg);
    let (manifest, clips) = load_clips(&a.data, &cfg.arch)?;
    let tr = Trainer::new(cfg.arch.clone(), cfg.train.clone(), Objective::Pretrain, &clips)?;
    let mut state = match resumed {
        Some(s) => {
            println!("resuming at step {}", s.step);
            s
        }
        None => tr.init_state(init_params(&cfg.arch, Objective::Pretrain, None, cfg.train.seed).0),
    };
    let ckpt_path = a.out.join("checkpoint.svfap");
    let save = |s: &TrainState| -> Result<()> {
        Checkpoint {
            arch: cfg.arch.clone(),
            train: cfg.train.clone(),
            objective: Objective::Pretrain,
            state: s.clone(),
            normalization: Some(manifest.normalization),
        }
        .save(&ckpt_path)
        .with_context(|| format!("cannot write {}", ckpt_path.display()))
    };
    println!(
        "pretraining on {} clips: {} steps, peak lr {:.3e}",
        clips.len(),
        tr.total_steps(),
        tr.peak_lr()
    );
    let logs = train_loop(&tr, &mut state, a.max_steps, save, a.save_every)?;
    save(&state)?;
    write(&a.out.join("loss.csv"), &loss_csv(&logs))?;
    let means = epoch_means(&logs);
    let mut metrics = Map::new();
    metrics.insert("steps".into(), json!(state.step));
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        metrics.insert("first_epoch_loss".into(), json!(first.1));
        metrics.insert("last_epoch_loss".into(), json!(last.1));
    }
    run.set("metrics", Value::Object(metrics));
    run.set("checkpoint", json!(ckpt_path.display().to_string()));
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn objective_for(clips: &[VideoClip], manifest: &svfap::data::Manifest) -> Result<Objective> {
    match &clips[0].label {
        Label::Class(_) => Ok(Objective::Classify {
            classes: manifest.num_classes(),
        }),
        Label::Scores(v) => Ok(Objective::Regress { dims: v.len() }),
        Label::None => bail!("fine-tuning needs labeled clips"),
    }
}

fn metric_table(objective: Objective, outputs: &[Vec<f64>], clips: &[VideoClip]) -> Result<MetricTable> {
    Ok(match objective {
        Objective::Classify { classes } => {
            let preds: Vec<usize> = outputs.iter().map(|v| argmax(v)).collect();
            let labels = clips
                .iter()
                .map(|c| match c.label {
                    Label::Class(k) => Ok(k),
                    _ => bail!("{}: expected a class label", c.source_id),
                })
                .collect::<Result<Vec<_>>>()?;
            MetricTable::classification(&preds, &labels, classes)?
        }
        Objective::Regress { .. } => {
            let truth = clips
                .iter()
                .map(|c| match &c.label {
                    Label::Scores(v) => Ok(v.clone()),
                    _ => bail!("{}: expected a score vector", c.source_id),
                })
                .collect::<Result<Vec<_>>>()?;
            MetricTable::regression(outputs, &truth)?
        }
        Objective::Pretrain => bail!("pretraining checkpoints have no prediction head"),
    })
}

fn evaluate_into(run: &mut Run, ck: &Checkpoint, manifest_path: &Path) -> Result<MetricTable> {
    let (_, clips) = load_clips(manifest_path, &ck.arch)?;
    let task = ck
        .objective
        .task()
        .with_context(|| "checkpoint has no prediction head; fine-tune it first")?;
    let outputs = evaluate(&ck.state.params, &ck.arch, &clips, task, ck.train.sample_stride)?;
    let table = metric_table(ck.objective, &outputs, &clips)?;
    print!("{}", table.to_text());
    write(&run.out.join("metrics.csv"), &table.to_csv())?;
    run.metrics(&table);
    Ok(table)
}

fn finetune(a: &FinetuneArgs, run: &mut Run) -> Result<()> {
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let arch = init.as_ref().map(|c| c.arch.clone()).unwrap_or_else(|| ArchConfig::preset(Preset::Base));
    let cfg = a.cfg.resolve(RunConfig::new(arch, TrainConfig::finetune()))?;
    run.config(&cfg);
    let (manifest, clips) = load_clips(&a.data, &cfg.arch)?;
    if clips.is_empty() {
        bail!("{} lists no clips", a.data.display());
    }
    let objective = objective_for(&clips, &manifest)?;
    let tr = Trainer::new(cfg.arch.clone(), cfg.train.clone(), objective, &clips)?;
    let (params, loaded, fresh) = init_params(&cfg.arch, objective, init.as_ref().map(|c| &c.state.params), cfg.train.seed);
    match &a.init {
        Some(p) => println!("initialized from {}: {loaded} tensors loaded, {fresh} freshly initialized", p.display()),
        None => println!("training from scratch: {fresh} freshly initialized tensors"),
    }
    run.set("init", json!({"checkpoint": a.init.as_ref().map(|p| p.display().to_string()), "loaded": loaded, "fresh": fresh}));

    let mut state = tr.init_state(params);
    println!(
        "fine-tuning ({}) on {} clips: {} steps, peak lr {:.3e}",
        objective.name(),
        clips.len(),
        tr.total_steps(),
        tr.peak_lr()
    );
    let logs = train_loop(&tr, &mut state, None, |_| Ok(()), None)?;
    write(&a.out.join("loss.csv"), &loss_csv(&logs))?;
    let ck = Checkpoint {
        arch: cfg.arch.clone(),
        train: cfg.train.clone(),
        objective,
        state,
        normalization: Some(manifest.normalization),
    };
    let ckpt_path = a.out.join("checkpoint.svfap");
    ck.save(&ckpt_path).with_context(|| format!("cannot write {}", ckpt_path.display()))?;
    println!("checkpoint {}", ckpt_path.display());
    run.set("checkpoint", json!(ckpt_path.display().to_string()));
    if let Some(eval) = &a.eval {
        evaluate_into(run, &ck, eval)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, run: &mut Run) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    run.config(&RunConfig::new(ck.arch.clone(), ck.train.clone()));
    evaluate_into(run, &ck, &a.data)?;
    Ok(())
}

fn count(a: &CountArgs, run: &mut Run) -> Result<()> {
    let cfg = a.cfg.resolve(RunConfig::new(ArchConfig::preset(a.preset), TrainConfig::pretrain()))?;
    run.config(&cfg);
    let reports: Vec<CostReport> = if a.table4 {
        variant_grid(&cfg.arch)?
    } else {
        vec![count_with_head(&cfg.arch, a.variant, a.head_outputs)?]
    };
    let mut csv = format!("{}\n", CostReport::csv_header());
    let mut metrics = Map::new();
    for r in &reports {
        println!("{}", r.to_text(a.regime));
        csv.push_str(&r.csv_row());
        csv.push('\n');
        metrics.insert(
            r.variant.to_string(),
            json!({"params": r.params_total(), "params_decoder": r.params_decoder(), "flops": r.flops_finetune(), "flops_p": r.flops_pretrain()}),
        );
    }
    print!("{csv}");
    write(&a.out.join("count.csv"), &csv)?;
    run.set("metrics", Value::Object(metrics));
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs, run: &mut Run) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.objective != Objective::Pretrain {
        bail!("{} is not a pretraining checkpoint", a.checkpoint.display());
    }
    let cfg = &ck.arch;
    run.config(&RunConfig::new(cfg.clone(), ck.train.clone()));
    run.set("seed", json!(a.seed));
    let (_, clips) = load_clips(&a.data, cfg)?;
    let clip = clips
        .get(a.index)
        .with_context(|| format!("index {} out of range for {} clips", a.index, clips.len()))?;
    let frames = svfap::data::sample_clip(clip.pixels.view(), cfg.input[0], ck.train.sample_stride, 0)?;
    let mask = make_tube_mask(cfg.grid(), cfg.masking_ratio, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let (patches, grid) = patchify(frames.view(), cfg.patch)?;
    let pred = reconstruct(&ck.state.params, cfg, frames.view(), &mask)?;

    // masked patches show the dataset mean; the reconstruction keeps the
    // visible input patches, whose predictions carry no loss
    let mut hidden = patches.clone();
    let mut filled = patches.clone();
    for r in mask.masked_rows() {
        hidden.row_mut(r).fill(0.0);
        filled.row_mut(r).assign(&pred.row(r));
    }
    let err: f64 = mask
        .masked_rows()
        .iter()
        .map(|&r| (&pred.row(r) - &patches.row(r)).mapv(|x| x * x).mean().unwrap_or(0.0))
        .sum::<f64>()
        / mask.num_masked() as f64;

    let norm = ck.normalization.unwrap_or_else(svfap::data::Normalization::identity);
    let mut rows = [frames, unpatchify(&hidden, grid, cfg.patch)?, unpatchify(&filled, grid, cfg.patch)?];
    for r in &mut rows {
        norm.invert(r);
    }
    let img = video_grid(&[&rows[0], &rows[1], &rows[2]])?;
    let path = a.out.join("reconstruction.ppm");
    save_ppm(&img, &path)?;
    println!("masked-patch MSE {err:.6}; grid written to {}", path.display());
    run.set("metrics", json!({"masked_mse": err}));
    Ok(())
}

impl Cmd {
    fn name_and_out(&self) -> (&'static str, &Path) {
        match self {
            Cmd::Synth(a) => ("synth", &a.out),
            Cmd::Pretrain(a) => ("pretrain", &a.out),
            Cmd::Finetune(a) => ("finetune", &a.out),
            Cmd::Eval(a) => ("eval", &a.out),
            Cmd::Count(a) => ("count", &a.out),
            Cmd::Reconstruct(a) => ("reconstruct", &a.out),
        }
    }
}

fn execute(cmd: &Cmd) -> Result<()> {
    let (name, out) = cmd.name_and_out();
    let mut run = Run::start(name, out)?;
    let outcome = match cmd {
        Cmd::Synth(a) => synth(a, &mut run),
        Cmd::Pretrain(a) => pretrain(a, &mut run),
        Cmd::Finetune(a) => finetune(a, &mut run),
        Cmd::Eval(a) => eval(a, &mut run),
        Cmd::Count(a) => count(a, &mut run),
        Cmd::Reconstruct(a) => reconstruct_cmd(a, &mut run),
    };
    run.finish(&outcome)?;
    outcome
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

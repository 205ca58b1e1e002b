//! `trajattack`: data preparation, training, attacks, evaluation and the
//! experiment suite behind one binary.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! failure (non-finite loss or parameters).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajattack_core::attack::{
    attack_dataset, read_archive as read_archive_file, write_archive, ArchiveRecord,
};
use trajattack_core::data_io::{
    build_scenes, emit_plot, emit_report, format_summary, generate_mixed, generate_synthetic,
    parse_frames_file, read_scenes_jsonl, write_scenes_jsonl, ReportSummary, SceneWindowConfig,
    SyntheticTemplate,
};
use trajattack_core::experiments::{
    adversarial_finetune, archive_timestep_profile, timestep_sensitivity, transfer_eval,
    FinetuneConfig,
};
use trajattack_core::model::{
    apply_perturbation, collision_flag, metric_ade_fde, metric_cr, AttackConfig, AttackMode,
    Scene,
};
use trajattack_core::predictors::{
    train_pool_lite, ConstantVelocity, DifferentiablePredictor, PoolLite, PoolLiteParams,
    Predictor, SocialForces, TrainConfig,
};
use trajattack_core::Error;

#[derive(Parser)]
#[command(
    name = "trajattack",
    about = "Collision-inducing adversarial attacks on pedestrian trajectory predictors",
    version
)]
struct Cli {
    /// Worker threads for scene-parallel stages (default: all cores).
    /// Output is deterministic regardless of this value.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset
    Gen(GenArgs),
    /// Build scenes from frame-format trajectory data (TSV/CSV)
    Ingest(IngestArgs),
    /// Train the pool-lite predictor
    Train(TrainArgs),
    /// Run a perturbation attack over a dataset
    Attack(AttackArgs),
    /// Evaluate a model: ADE/FDE and collision rate
    Eval(EvalArgs),
    /// Replay an attack archive against a target model
    Transfer(TransferArgs),
    /// Per-timestep sensitivity curves
    Sensitivity(SensitivityArgs),
    /// Adversarial fine-tuning of a pool-lite checkpoint
    Finetune(FinetuneArgs),
}

#[derive(Args)]
struct GenArgs {
    /// head_on | crossing_90deg | parallel | overtake | mixed
    #[arg(long)]
    template: String,
    /// Number of scenes
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Gaussian position noise sigma in meters (repo default)
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, env = "TRAJATTACK_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Frame file: one `frame_id agent_id x y` record per line
    #[arg(long)]
    frames: PathBuf,
    /// Observation horizon in frames
    #[arg(long, default_value_t = 9)]
    t_obs: usize,
    /// Prediction horizon in frames
    #[arg(long, default_value_t = 12)]
    t_pred: usize,
    /// Window stride in frames (repo default)
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Minimum neighbors per scene (repo default)
    #[arg(long, default_value_t = 1)]
    min_neighbors: usize,
    /// Fail on malformed lines instead of skipping them
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Training epochs (repo default)
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Adam learning rate (repo default)
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Mini-batch size in scenes (repo default)
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Hidden width of the recurrent cell (repo default)
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, env = "TRAJATTACK_SEED", default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// cv | pool-lite:CKPT
    #[arg(long)]
    model: String,
    /// none | hard | soft | random
    #[arg(long, default_value = "soft")]
    mode: String,
    /// Max per-timestep perturbation norm in meters
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    /// Collision distance threshold in meters
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    /// Perturbation-size regularizer weight
    #[arg(long, default_value_t = 0.1)]
    lambda_r: f64,
    /// Attention anti-uniformity weight (soft mode)
    #[arg(long, default_value_t = 0.5)]
    lambda_w: f64,
    /// Attack iterations
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Normalized-gradient step length for R in meters (repo default)
    #[arg(long, default_value_t = 0.01)]
    step_size_r: f64,
    /// Step size for attention weights (repo default)
    #[arg(long, default_value_t = 0.1)]
    step_size_w: f64,
    /// Hold neighbor predictions fixed inside the attack loss
    #[arg(long)]
    freeze_neighbors: bool,
    #[arg(long, env = "TRAJATTACK_SEED", default_value_t = 0)]
    seed: u64,
    /// Report output (JSONL: instances then summary)
    #[arg(long)]
    out: PathBuf,
    /// Optional perturbation archive output (JSONL)
    #[arg(long)]
    archive: Option<PathBuf>,
    /// Optional directory for per-instance SVG plots
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// cv | pool-lite:CKPT | sf
    #[arg(long)]
    model: String,
    /// Optional perturbation archive to apply before evaluating
    #[arg(long)]
    perturbations: Option<PathBuf>,
    /// Collision distance threshold in meters
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
}

#[derive(Args)]
struct TransferArgs {
    /// Perturbation archive from the source attack
    #[arg(long)]
    archive: PathBuf,
    /// Target model: cv | pool-lite:CKPT | sf
    #[arg(long)]
    target: String,
    #[arg(long)]
    scenes: PathBuf,
    /// Collision distance threshold in meters
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// cv | pool-lite:CKPT | sf
    #[arg(long)]
    model: String,
    /// Noise magnitude in meters
    #[arg(long, default_value_t = 0.2)]
    magnitude: f64,
    /// Random draws per scene per timestep
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, env = "TRAJATTACK_SEED", default_value_t = 0)]
    seed: u64,
    /// Optional soft-attack archive for the companion |r_t| curve
    #[arg(long)]
    archive: Option<PathBuf>,
    /// CSV output: timestep, prediction_change[, mean_perturbation]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pool-lite checkpoint to fine-tune
    #[arg(long)]
    ckpt: PathBuf,
    /// Training scenes
    #[arg(long)]
    scenes: PathBuf,
    /// Held-out scenes for before/after metrics (default: last 20% of
    /// --scenes, removed from training)
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Perturbation budget during fine-tuning
    #[arg(long, default_value_t = 0.03)]
    epsilon: f64,
    /// Fine-tuning epochs (repo default)
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Learning rate (repo default)
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Mini-batch size in scenes (repo default)
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// soft | random: adversarial vs noise-augmentation control
    #[arg(long, default_value = "soft")]
    augment: String,
    #[arg(long, env = "TRAJATTACK_SEED", default_value_t = 0)]
    seed: u64,
    /// Fine-tuned checkpoint output
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidWeights(_) | Error::NotDifferentiable(_) => 2,
        Error::NonFinite(_) | Error::NonScalarLoss => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // ignore failure when a pool already exists (e.g. in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// cv | pool-lite:CKPT | sf, as a differentiable predictor when required.
fn load_model(spec: &str, need_gradients: bool) -> Result<Box<dyn AnyModel>, Error> {
    if spec == "cv" {
        return Ok(Box::new(ConstantVelocity::default()));
    }
    if let Some(path) = spec.strip_prefix("pool-lite:") {
        let params = PoolLiteParams::load(Path::new(path))?;
        return Ok(Box::new(PoolLite::new(params, 12)));
    }
    if spec == "sf" || spec == "social-forces" {
        if need_gradients {
            return Err(Error::NotDifferentiable("social-forces".into()));
        }
        return Ok(Box::new(NonDiff(SocialForces::default())));
    }
    Err(Error::Config(format!(
        "unknown model {spec:?} (expected cv | pool-lite:CKPT | sf)"
    )))
}

/// Object-safe union over differentiable and plain predictors.
trait AnyModel: Send + Sync {
    fn predictor(&self) -> &(dyn Predictor + Sync);
    fn differentiable(&self) -> Option<&(dyn DifferentiablePredictor + Sync)>;
}

impl AnyModel for ConstantVelocity {
    fn predictor(&self) -> &(dyn Predictor + Sync) {
        self
    }
    fn differentiable(&self) -> Option<&(dyn DifferentiablePredictor + Sync)> {
        Some(self)
    }
}

impl AnyModel for PoolLite {
    fn predictor(&self) -> &(dyn Predictor + Sync) {
        self
    }
    fn differentiable(&self) -> Option<&(dyn DifferentiablePredictor + Sync)> {
        Some(self)
    }
}

struct NonDiff(SocialForces);

impl AnyModel for NonDiff {
    fn predictor(&self) -> &(dyn Predictor + Sync) {
        &self.0
    }
    fn differentiable(&self) -> Option<&(dyn DifferentiablePredictor + Sync)> {
        None
    }
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Sensitivity(a) => cmd_sensitivity(a),
        Cmd::Finetune(a) => cmd_finetune(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), Error> {
    let scenes = if a.template == "mixed" {
        generate_mixed(a.noise, a.count, a.seed)
    } else {
        let template = SyntheticTemplate::parse(&a.template)?;
        generate_synthetic(template, a.noise, a.count, a.seed)
    };
    write_scenes_jsonl(&scenes, &a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<(), Error> {
    let (records, issues) = parse_frames_file(&a.frames, a.strict)?;
    if !issues.is_empty() {
        eprintln!("skipped {} malformed line(s)", issues.len());
    }
    let cfg = SceneWindowConfig {
        t_obs: a.t_obs,
        t_pred: a.t_pred,
        stride: a.stride,
        min_neighbors: a.min_neighbors,
    };
    let scenes = build_scenes(&records, &cfg)?;
    write_scenes_jsonl(&scenes, &a.out)?;
    println!(
        "ingested {} records into {} scenes at {}",
        records.len(),
        scenes.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let scenes = read_scenes_jsonl(&a.scenes)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        hidden: a.hidden,
        seed: a.seed,
    };
    let (params, curve) = train_pool_lite(&scenes, &cfg)?;
    params.save(&a.out)?;
    match (curve.first(), curve.last()) {
        (Some(first), Some(last)) => {
            println!("trained {} epochs: loss {first:.6} -> {last:.6}", curve.len())
        }
        _ => println!("trained 0 epochs (checkpoint is the initialization)"),
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn attack_config(a: &AttackArgs) -> Result<AttackConfig, Error> {
    let cfg = AttackConfig {
        epsilon: a.epsilon,
        gamma: a.gamma,
        lambda_r: a.lambda_r,
        lambda_w: a.lambda_w,
        max_iters: a.max_iters,
        step_size_r: a.step_size_r,
        step_size_w: a.step_size_w,
        mode: AttackMode::parse(&a.mode)?,
        freeze_neighbors: a.freeze_neighbors,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_attack(a: AttackArgs) -> Result<(), Error> {
    let cfg = attack_config(&a)?;
    let scenes = read_scenes_jsonl(&a.scenes)?;
    let model = load_model(&a.model, true)?;
    let predictor = model
        .differentiable()
        .ok_or_else(|| Error::NotDifferentiable(a.model.clone()))?;

    let (reports, stats) = attack_dataset(&scenes, predictor, &cfg, a.seed)?;

    let mut summary = ReportSummary::from(&stats);
    if scenes.iter().all(|s| s.has_futures()) {
        summary.ade_fde_before = Some(mean_ade_fde(&reports, &scenes, false)?);
        summary.ade_fde_after = Some(mean_ade_fde(&reports, &scenes, true)?);
    }
    emit_report(&reports, &summary, &a.out)?;

    if let Some(path) = &a.archive {
        let records: Vec<ArchiveRecord> = reports
            .iter()
            .map(|r| ArchiveRecord::from_report(r, &cfg))
            .collect();
        write_archive(&records, path)?;
    }
    if let Some(dir) = &a.plot_dir {
        std::fs::create_dir_all(dir)?;
        for report in &reports {
            let scene = scenes
                .iter()
                .find(|s| s.scene_id == report.scene_id)
                .expect("report references a dataset scene");
            let instance = scene.with_candidate(report.candidate_index);
            let name = format!("{}_{}.svg", report.scene_id, report.candidate_id);
            emit_plot(&instance, report, &dir.join(name))?;
        }
    }
    print!("{}", format_summary(&summary));
    Ok(())
}

/// Mean ADE/FDE over attack instances, before or after the perturbation.
fn mean_ade_fde(
    reports: &[trajattack_core::model::AttackReport],
    scenes: &[Scene],
    after: bool,
) -> Result<(f64, f64), Error> {
    let mut ade = 0.0;
    let mut fde = 0.0;
    for r in reports {
        let scene = scenes
            .iter()
            .find(|s| s.scene_id == r.scene_id)
            .ok_or_else(|| Error::SceneMismatch(r.scene_id.clone()))?;
        let instance = scene.with_candidate(r.candidate_index);
        let preds = if after {
            &r.predictions_after
        } else {
            &r.predictions_before
        };
        let (a, f) = metric_ade_fde(preds, &instance, false)?;
        ade += a;
        fde += f;
    }
    let n = reports.len().max(1) as f64;
    Ok((ade / n, fde / n))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let scenes = read_scenes_jsonl(&a.scenes)?;
    let model = load_model(&a.model, false)?;
    let predictor = model.predictor();

    let (flags, ade, fde) = match &a.perturbations {
        None => {
            let mut flags = Vec::new();
            let mut ade = 0.0;
            let mut fde = 0.0;
            for scene in &scenes {
                let preds = predictor.predict(scene)?;
                let (sa, sf) = metric_ade_fde(&preds, scene, false)?;
                ade += sa;
                fde += sf;
                for candidate in 0..scene.n() {
                    flags.push(collision_flag(&preds, candidate, a.gamma));
                }
            }
            (flags, ade / scenes.len() as f64, fde / scenes.len() as f64)
        }
        Some(path) => {
            let archive = read_archive_file(path)?;
            let result = transfer_eval(&archive, predictor, &scenes, a.gamma)?;
            let mut ade = 0.0;
            let mut fde = 0.0;
            for rec in &archive {
                let scene = scenes
                    .iter()
                    .find(|s| s.scene_id == rec.scene_id)
                    .ok_or_else(|| Error::SceneMismatch(rec.scene_id.clone()))?;
                let candidate = scene
                    .agents
                    .iter()
                    .position(|ag| ag.id == rec.agent_id)
                    .ok_or_else(|| Error::SceneMismatch(rec.agent_id.clone()))?;
                let instance = scene.with_candidate(candidate);
                let perturbed = apply_perturbation(&instance, &rec.perturbation())?;
                let preds = predictor.predict(&perturbed)?;
                let (sa, sf) = metric_ade_fde(&preds, &instance, false)?;
                ade += sa;
                fde += sf;
            }
            let n = archive.len() as f64;
            (result.flags, ade / n, fde / n)
        }
    };
    println!("model     {}", predictor.name());
    println!("instances {}", flags.len());
    println!("ADE [m]   {ade:.2}");
    println!("FDE [m]   {fde:.2}");
    println!("CR [%]    {:.2}", metric_cr(&flags)?);
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<(), Error> {
    let scenes = read_scenes_jsonl(&a.scenes)?;
    let archive = read_archive_file(&a.archive)?;
    let model = load_model(&a.target, false)?;
    let result = transfer_eval(&archive, model.predictor(), &scenes, a.gamma)?;
    println!("target    {}", model.predictor().name());
    println!("instances {}", result.flags.len());
    println!("CR [%]    {:.2}", result.cr);
    Ok(())
}

fn cmd_sensitivity(a: SensitivityArgs) -> Result<(), Error> {
    let scenes = read_scenes_jsonl(&a.scenes)?;
    let model = load_model(&a.model, false)?;
    let curve = timestep_sensitivity(
        model.predictor(),
        &scenes,
        a.magnitude,
        a.trials,
        a.seed,
    )?;
    let profile = match &a.archive {
        Some(path) => Some(archive_timestep_profile(&read_archive_file(path)?)?),
        None => None,
    };

    let mut csv = String::new();
    csv.push_str(match &profile {
        Some(_) => "timestep,prediction_change,mean_perturbation\n",
        None => "timestep,prediction_change\n",
    });
    for (t, change) in curve.prediction_change.iter().enumerate() {
        match &profile {
            Some(p) => csv.push_str(&format!("{t},{change},{}\n", p[t])),
            None => csv.push_str(&format!("{t},{change}\n")),
        }
    }
    std::fs::write(&a.out, csv)?;
    println!("wrote sensitivity curve to {}", a.out.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<(), Error> {
    let params = PoolLiteParams::load(&a.ckpt)?;
    let all = read_scenes_jsonl(&a.scenes)?;
    let (train, holdout): (Vec<Scene>, Vec<Scene>) = match &a.holdout {
        Some(path) => (all, read_scenes_jsonl(path)?),
        None => {
            let split = (all.len() * 4) / 5;
            if split == 0 || split == all.len() {
                return Err(Error::Config(
                    "dataset too small to split; pass --holdout".into(),
                ));
            }
            let (t, h) = all.split_at(split);
            (t.to_vec(), h.to_vec())
        }
    };
    let mode = match a.augment.as_str() {
        "soft" => AttackMode::Soft,
        "random" => AttackMode::Random,
        other => {
            return Err(Error::Config(format!(
                "unknown augmentation {other:?} (expected soft|random)"
            )))
        }
    };
    let attack_cfg = AttackConfig {
        epsilon: a.epsilon,
        mode,
        ..AttackConfig::default()
    };
    let eval_cfg = AttackConfig::default();
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let out = adversarial_finetune(
        &params,
        12,
        &train,
        &holdout,
        &attack_cfg,
        &eval_cfg,
        &cfg,
    )?;
    out.params.save(&a.out)?;
    println!("                 before     after");
    println!("ADE [m]        {:>8.3}  {:>8.3}", out.before.ade, out.after.ade);
    println!("FDE [m]        {:>8.3}  {:>8.3}", out.before.fde, out.after.fde);
    println!(
        "original CR[%] {:>8.2}  {:>8.2}",
        out.before.cr_original, out.after.cr_original
    );
    println!(
        "attacked CR[%] {:>8.2}  {:>8.2}",
        out.before.cr_attacked, out.after.cr_attacked
    );
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

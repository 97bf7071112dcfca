//! Subcommands of the `cvgl` binary. Every command returns the artifacts it
//! wrote; [`run`] maps errors onto exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use cvgl::ablation::{run_variants, sweep_table, variant_table, VariantResult};
use cvgl::checkpoint::Checkpoint;
use cvgl::config::{cmi_variants, recurrence_sweep, Config, Precision, RECURRENCE_SWEEP};
use cvgl::data::{
    generate_synthetic, load_cvusa_style, load_dataset, save_dataset, DatasetSplit, SplitRole, SyntheticSpec,
    MANIFEST_FILE,
};
use cvgl::evaluation::{complexity_report, extract_all_descriptors, recall_at_k, recall_table, STANDARD_KS};
use cvgl::gkst::write_attention_trace;
use cvgl::model::Batch;
use cvgl::training::{fit_with, prepare_split, FitOptions};
use cvgl::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "cvgl", version, about = "Cross-view geo-localization: data, training, evaluation, ablations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded synthetic dataset of ground/aerial pairs.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a training log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and report complexity.
    Eval(EvalArgs),
    /// Train and compare the ablation variants.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Toy,
    Paper,
}

impl PresetArg {
    fn name(self) -> &'static str {
        match self {
            PresetArg::Toy => "toy",
            PresetArg::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    #[value(name = "32")]
    Single,
    #[value(name = "64")]
    Double,
}

/// Flags shared by commands that build a run configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; its keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset (default toy).
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Overrides `train.seed`.
    #[arg(long, env = "CVGL_SEED")]
    pub seed: Option<u64>,
    /// Overrides `train.precision`.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (with a manifest) or list-file root.
    #[arg(long, env = "CVGL_DATA")]
    pub data: Option<PathBuf>,
    /// `aerial,ground` list file relative to `--data`, instead of a manifest.
    #[arg(long)]
    pub list: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, env = "CVGL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Dataset directory to write.
    #[arg(long, env = "CVGL_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Primitives per scene.
    #[arg(long, default_value_t = 4)]
    pub complexity: usize,
    #[arg(long, default_value_t = 32)]
    pub aerial_size: usize,
    #[arg(long, default_value_t = 16)]
    pub ground_height: usize,
    #[arg(long, default_value_t = 40)]
    pub ground_width: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for checkpoints, `config.toml` and the training log.
    #[arg(long, env = "CVGL_OUT")]
    pub out: PathBuf,
    /// Checkpoint file, or a directory holding a `latest` marker.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Omit wall-clock times so repeated runs write identical logs.
    #[arg(long)]
    pub deterministic: bool,
    /// Validate inputs, write `config.toml` and print the plan without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a directory holding a `latest` marker.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for the recall, complexity and report files.
    #[arg(long, env = "CVGL_OUT")]
    pub out: PathBuf,
    /// Also dump per-head attention weights of the first pair.
    #[arg(long)]
    pub attention_trace: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training split; synthesized when absent.
    #[arg(long, env = "CVGL_DATA")]
    pub data: Option<PathBuf>,
    /// Held-out split; synthesized when absent.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Directory for tables, `ablation.json` and synthesized splits.
    #[arg(long, env = "CVGL_OUT")]
    pub out: PathBuf,
    /// Number of training seeds per variant, counting up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Recurrence depths of the sweep table.
    #[arg(long, value_delimiter = ',', default_values_t = RECURRENCE_SWEEP)]
    pub steps: Vec<usize>,
    /// Size of the synthesized training split.
    #[arg(long, default_value_t = 256)]
    pub train_count: usize,
    /// Size of the synthesized held-out split.
    #[arg(long, default_value_t = 64)]
    pub test_count: usize,
}

/// Outcome of a successful command.
#[derive(Debug, Default)]
pub struct CommandResult {
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary for stdout.
    pub summary: String,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_INTERNAL,
            _ => EXIT_USER,
        };
        Self { code, message: e.to_string() }
    }
}

fn user_error(message: impl Into<String>) -> CommandError {
    CommandError { code: EXIT_USER, message: message.into() }
}

type CmdResult<T = CommandResult> = std::result::Result<T, CommandError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult<PathBuf> {
    fs::write(path, contents).map_err(|e| CommandError::from(Error::io(path, e)))?;
    Ok(path.to_path_buf())
}

fn create_dir(path: &Path) -> CmdResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn json(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// File config (if any) over the preset, then flag overrides.
pub fn resolve_config(args: &ConfigArgs) -> CmdResult<Config> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CommandError::from(Error::io(path, e)))?;
            let mut doc: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| user_error(format!("{}: {}", path.display(), e.message())))?;
            if let Some(p) = args.preset {
                doc.insert("preset".into(), toml::Value::String(p.name().into()));
            }
            Config::parse(&doc.to_string())?
        }
        None => Config::preset(args.preset.map_or("toy", PresetArg::name))?,
    };
    apply_overrides(&mut config, args);
    config.validate()?;
    Ok(config)
}

fn apply_overrides(config: &mut Config, args: &ConfigArgs) {
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(p) = args.precision {
        config.train.precision = match p {
            PrecisionArg::Single => Precision::F32,
            PrecisionArg::Double => Precision::F64,
        };
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
}

pub fn load_split(data: &DataArgs, role: SplitRole) -> CmdResult<DatasetSplit> {
    let Some(root) = &data.data else {
        return Err(user_error("no dataset given: pass --data or set CVGL_DATA"));
    };
    let split = match &data.list {
        Some(list) => load_cvusa_style(root, &root.join(list), role)?,
        None => {
            if !root.join(MANIFEST_FILE).is_file() {
                return Err(user_error(format!(
                    "{} has no {MANIFEST_FILE}; pass --list for list-file datasets",
                    root.display()
                )));
            }
            load_dataset(root, role)?
        }
    };
    if split.is_empty() {
        return Err(user_error(format!("{} holds no pairs", root.display())));
    }
    Ok(split)
}

pub fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let spec = SyntheticSpec {
        count: args.count,
        seed: args.seed,
        noise_level: args.noise,
        scene_complexity: args.complexity,
        aerial_size: args.aerial_size,
        ground_size: [args.ground_height, args.ground_width],
    };
    let split = generate_synthetic(&spec)?;
    let manifest = save_dataset(&args.out, &split, Some(&spec))?;
    Ok(CommandResult {
        summary: format!("wrote {} pairs; manifest {}", split.len(), manifest.display()),
        artifacts: vec![manifest],
    })
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let resume = match &args.resume {
        Some(p) => {
            let path = Checkpoint::resolve(p)?;
            if !path.is_file() {
                return Err(user_error(format!("checkpoint {} not found", path.display())));
            }
            Some(Checkpoint::load(&path)?)
        }
        None => None,
    };
    let config = match (&resume, args.cfg.config.is_some() || args.cfg.preset.is_some()) {
        (Some(ck), false) => {
            let mut c = ck.config.clone();
            apply_overrides(&mut c, &args.cfg);
            c.validate()?;
            c
        }
        _ => resolve_config(&args.cfg)?,
    };
    let split = load_split(&args.data, SplitRole::Train)?;
    create_dir(&args.out)?;
    let log_path = args.out.join(TRAIN_LOG);
    let config_path = write(&args.out.join("config.toml"), config.to_toml())?;
    let mut summary = format!(
        "training preset `{}` for {} epochs on {} pairs",
        config.preset,
        config.train.epochs,
        split.len()
    );
    if args.dry_run {
        return Ok(CommandResult { artifacts: vec![config_path], summary });
    }
    summary.push('\n');
    if resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| CommandError::from(Error::io(&log_path, e)))?;
    }
    let opts = FitOptions {
        checkpoint_dir: Some(&args.out),
        resume,
        log_path: Some(&log_path),
        wall_time: !args.deterministic,
        ..Default::default()
    };
    let report = fit_with(&split, &config, opts)?;
    if let Some(last) = report.steps.last() {
        summary.push_str(&format!("final step loss {:.6}\n", last.loss.total));
    }
    let mut artifacts = vec![config_path];
    match report.checkpoints.last() {
        Some(ck) => {
            summary.push_str(&format!("checkpoint {}", ck.display()));
            artifacts.push(ck.clone());
        }
        None => summary.push_str("no epochs run; no checkpoint written"),
    }
    if log_path.exists() {
        artifacts.push(log_path);
    }
    Ok(CommandResult { artifacts, summary })
}

pub fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let path = Checkpoint::resolve(&args.checkpoint).map_err(|_| {
        user_error(format!("checkpoint {} not found", args.checkpoint.display()))
    })?;
    if !path.is_file() {
        return Err(user_error(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    let split = load_split(&args.data, SplitRole::Test)?;
    let (g, a) = extract_all_descriptors(&split, &ck.model)?;
    let recall = recall_at_k(&g, &a, &STANDARD_KS)?;
    let complexity = complexity_report(&ck.model);
    create_dir(&args.out)?;
    let table = recall_table(&[(ck.config.preset.clone(), recall.clone())]);
    let mut artifacts = vec![
        write(&args.out.join("recall.json"), json(&recall))?,
        write(&args.out.join("complexity.json"), json(&complexity))?,
        write(&args.out.join("report.txt"), &table)?,
    ];
    if args.attention_trace && ck.config.model.transformer_enabled {
        let prepared = prepare_split(&split, &ck.config.model)?;
        let enc = ck.model.encode(&Batch::from_pairs(&prepared[..1], &ck.config.model)?)?;
        let mut buf = Vec::new();
        write_attention_trace(&enc.traces[0], &mut buf).expect("writing to memory");
        artifacts.push(write(&args.out.join("attention_trace.jsonl"), buf)?);
    }
    let summary = format!(
        "{table}params {} | MACs per pair {}",
        complexity.total_params, complexity.total_macs
    );
    Ok(CommandResult { artifacts, summary })
}

fn ablation_split(given: &Option<PathBuf>, out: &Path, name: &str, count: usize, seed: u64, role: SplitRole) -> CmdResult<DatasetSplit> {
    match given {
        Some(dir) => load_split(&DataArgs { data: Some(dir.clone()), list: None }, role),
        None => {
            let spec = SyntheticSpec { count, seed, ..SyntheticSpec::default() };
            let split = generate_synthetic(&spec)?.with_role(role);
            save_dataset(&out.join("data").join(name), &split, Some(&spec))?;
            Ok(split)
        }
    }
}

/// Seeds of the synthesized train and held-out splits.
pub const ABLATION_DATA_SEEDS: (u64, u64) = (1, 2);

pub fn cmd_ablate(args: &AblateArgs) -> CmdResult {
    let config = resolve_config(&args.cfg)?;
    if args.seeds == 0 {
        return Err(user_error("--seeds must be ≥ 1"));
    }
    if args.steps.is_empty() || args.steps.contains(&0) {
        return Err(user_error("--steps needs depths ≥ 1"));
    }
    create_dir(&args.out)?;
    let train = ablation_split(&args.data, &args.out, "train", args.train_count, ABLATION_DATA_SEEDS.0, SplitRole::Train)?;
    let test = ablation_split(&args.test_data, &args.out, "test", args.test_count, ABLATION_DATA_SEEDS.1, SplitRole::Test)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| config.train.seed + i).collect();
    let cmi = run_variants(&cmi_variants(&config.model), &train, &test, &config.train, &seeds)?;
    let sweep = run_variants(&recurrence_sweep(&config.model, &args.steps), &train, &test, &config.train, &seeds)?;
    let cmi_text = variant_table(&cmi);
    let sweep_text = sweep_table(&sweep);
    #[derive(serde::Serialize)]
    struct Ablation<'a> {
        seeds: &'a [u64],
        cmi: &'a [VariantResult],
        recurrence: &'a [VariantResult],
    }
    let artifacts = vec![
        write(&args.out.join("ablation.json"), json(&Ablation { seeds: &seeds, cmi: &cmi, recurrence: &sweep }))?,
        write(&args.out.join("cmi_table.txt"), &cmi_text)?,
        write(&args.out.join("recurrence_table.txt"), &sweep_text)?,
    ];
    Ok(CommandResult { artifacts, summary: format!("{cmi_text}\n{sweep_text}") })
}

pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(result)) => {
            if !result.summary.is_empty() {
                println!("{}", result.summary);
            }
            EXIT_OK
        }
        Ok(Err(e)) => {
            eprintln!("error: {}", e.message);
            e.code
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stft_core::ablation::{self, Axis};
use stft_core::checks;
use stft_core::data::{generate, DataSpec};
use stft_core::{Checkpoint, Dataset, ModelConfig, Trainer};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "stft", version, about = "Spiking Tucker fusion transformer for audio-visual zero-shot learning")]
struct Cli {
    /// Directory that relative output, data and checkpoint paths are
    /// resolved against.
    #[arg(long, env = "STFT_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual dataset.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate one configuration per value of an ablation axis.
    Ablate(AblateArgs),
    /// Finite-difference checks of every operation and the full loss.
    GradCheck(GradCheckArgs),
    /// Formula and oracle checks that need no training.
    OracleCheck,
}

/// Generates one optional flag per configuration field plus the conversion
/// to a TOML override table.
macro_rules! config_flags {
    ($($field:ident: $ty:ty),* $(,)?) => {
        #[derive(Args, Debug)]
        struct ConfigFlags {
            /// Base configuration.
            #[arg(long, default_value = "desk")]
            preset: String,
            /// TOML file layered over the preset.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long, help_heading = "Model configuration")]
                $field: Option<$ty>,
            )*
        }

        impl ConfigFlags {
            fn overrides(&self) -> CliResult<toml::Table> {
                let mut t = toml::Table::new();
                $(
                    if let Some(v) = &self.$field {
                        t.insert(stringify!($field).to_string(), toml::Value::try_from(v)?);
                    }
                )*
                Ok(t)
            }
        }
    };
}

config_flags! {
    a_in: usize,
    v_in: usize,
    h_in: usize,
    h_emb: usize,
    h_hid: usize,
    h_out: usize,
    h_proj: usize,
    heads: usize,
    head_dim: usize,
    text_dim: usize,
    time_steps: usize,
    rank: usize,
    slot_count: usize,
    joint_depth: usize,
    d_enc: f64,
    d_proj: f64,
    d_text: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    gamma: f64,
    w_triplet: f64,
    w_proj_recon: f64,
    use_projection_loss: bool,
    use_reconstruction_loss: bool,
    tau_m: f64,
    resistance: f64,
    v_rest: f64,
    v_th_init: f64,
    v_th_min: f64,
    v_th_max: f64,
    surrogate: String,
    surrogate_half_width: f64,
    alpha_init: f64,
    threshold_mode: String,
    tsf_mode: String,
    glp: bool,
    lkc: bool,
    triplet_mode: String,
    mining: String,
    joint_mode: String,
    seed: u64,
}

impl ConfigFlags {
    fn resolve(&self) -> CliResult<ModelConfig> {
        let base = ModelConfig::preset(&self.preset)?;
        let file = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?),
            None => None,
        };
        Ok(ModelConfig::resolve(&base, file.as_deref(), &self.overrides()?)?)
    }
}

#[derive(Args)]
struct DataFlags {
    #[arg(long, default_value_t = DataSpec::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = DataSpec::default().unseen)]
    unseen: usize,
    #[arg(long, default_value_t = DataSpec::default().train_per_class)]
    train_per_class: usize,
    #[arg(long, default_value_t = DataSpec::default().test_per_class)]
    test_per_class: usize,
    #[arg(long, default_value_t = DataSpec::default().latent_dim)]
    latent_dim: usize,
    /// Noise standard deviation.
    #[arg(long, default_value_t = DataSpec::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = DataSpec::default().seed)]
    data_seed: u64,
}

impl DataFlags {
    fn spec(&self, cfg: &ModelConfig) -> DataSpec {
        DataSpec {
            classes: self.classes,
            unseen: self.unseen,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            latent_dim: self.latent_dim,
            sigma: self.sigma,
            seed: self.data_seed,
            ..DataSpec::for_model(cfg)
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct DataSource {
    /// Dataset directory written by `gen-data`; generated in memory from the
    /// data flags when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: DataFlags,
}

impl DataSource {
    fn load(&self, root: &Path, cfg: &ModelConfig) -> CliResult<Dataset> {
        let data = match &self.data {
            Some(dir) => Dataset::load(&root.join(dir))?,
            None => generate(&self.gen.spec(cfg))?,
        };
        data.check_compatible(cfg)?;
        Ok(data)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory under the output root.
    #[arg(long, default_value = "train")]
    run: PathBuf,
    /// Evaluate every N epochs (0: only after the last one).
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Continue from this checkpoint; its configuration is used, with only
    /// `--epochs` taken from the flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: String,
    /// Comma-separated grid values; the axis defaults when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, default_value = "ablate")]
    run: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Sampled entries per parameter in the full-loss check.
    #[arg(long, default_value_t = 1)]
    coords: usize,
}

fn gen_data(root: &Path, args: &GenDataArgs) -> CliResult<()> {
    let cfg = args.config.resolve()?;
    let data = generate(&args.data.spec(&cfg))?;
    let dir = root.join(&args.out);
    data.save(&dir)?;
    println!(
        "wrote {} train / {} test samples, unseen classes {:?}, to {}",
        data.train.len(),
        data.test.len(),
        data.unseen,
        dir.display()
    );
    Ok(())
}

fn train(root: &Path, args: &TrainArgs) -> CliResult<()> {
    let dir = root.join(&args.run);
    fs::create_dir_all(&dir)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(&root.join(path))?;
            if let Some(e) = args.config.epochs {
                ck.config.epochs = e;
                ck.config_hash = ck.config.hash();
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(&args.config.resolve()?)?,
    };
    let cfg = trainer.cfg().clone();
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let data = args.source.load(root, &cfg)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(dir.join("metrics.jsonl"))?;
    eprintln!(
        "training {} epochs from epoch {} on {} samples (config {})",
        cfg.epochs,
        trainer.epoch,
        data.train.len(),
        &cfg.hash()[..12]
    );
    trainer.fit(&data, args.eval_every, Some(&mut log as &mut dyn Write))?;
    trainer.checkpoint().save(&dir.join("checkpoint.json"))?;
    if let Some(r) = trainer.evals.last() {
        println!("epoch {}: {}", r.epoch, r.report);
    }
    Ok(())
}

fn eval(root: &Path, args: &EvalArgs) -> CliResult<()> {
    let mut trainer = Trainer::from_checkpoint(Checkpoint::load(&root.join(&args.checkpoint))?)?;
    let data = args.source.load(root, &trainer.cfg().clone())?;
    let report = trainer.evaluate(&data)?;
    println!("{}", serde_json::to_string(&report)?);
    eprintln!("{report}");
    Ok(())
}

fn ablate(root: &Path, args: &AblateArgs) -> CliResult<()> {
    let axis: Axis = args.axis.parse()?;
    let base = args.config.resolve()?;
    let values = if args.values.is_empty() {
        axis.default_values()
    } else {
        args.values.clone()
    };
    let points = ablation::grid(axis, &base, &values)?;
    let data = args.source.load(root, &base)?;
    let dir = root.join(&args.run);
    let rows = ablation::run(&points, &data, Some(&dir))?;
    let table = ablation::format_table(axis, &rows);
    fs::write(dir.join("rows.json"), serde_json::to_string_pretty(&rows)?)?;
    fs::write(dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn grad_check(args: &GradCheckArgs) -> CliResult<bool> {
    let mut pass = true;
    let mut worst: Vec<(String, f64, usize, usize)> = Vec::new();
    for seed in 0..args.seeds {
        for r in checks::op_grad_checks(seed)? {
            match worst.iter_mut().find(|w| w.0 == r.name) {
                Some(w) => {
                    w.1 = w.1.max(r.report.max_rel_error);
                    w.2 += r.report.checked;
                    w.3 += r.report.skipped;
                }
                None => worst.push((r.name, r.report.max_rel_error, r.report.checked, r.report.skipped)),
            }
        }
    }
    for (name, err, checked, skipped) in &worst {
        let ok = *err < 1e-6 && *checked > 0;
        pass &= ok;
        println!(
            "{} {name:<28} max rel {err:.2e}  ({checked} checked, {skipped} skipped)",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let (mut err, mut checked, mut skipped) = (0.0f64, 0, 0);
    for seed in 0..args.seeds {
        let r = checks::model_grad_check(seed, args.coords)?;
        err = err.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped;
    }
    let ok = err < 1e-4 && checked > 0;
    pass &= ok;
    println!(
        "{} {:<28} max rel {err:.2e}  ({checked} checked, {skipped} skipped)",
        if ok { "PASS" } else { "FAIL" },
        "full loss"
    );
    Ok(pass)
}

fn oracle_check() -> CliResult<bool> {
    let mut pass = true;
    let mut line = |ok: bool, msg: String| {
        pass &= ok;
        println!("{} {msg}", if ok { "PASS" } else { "FAIL" });
    };
    let (err, row) = checks::published_hm_error();
    line(
        err <= 0.01,
        format!(
            "harmonic mean over {} published rows: max error {err:.4} ({} {})",
            checks::PUBLISHED_GZSL.len(),
            row.model,
            row.dataset
        ),
    );
    let diff = checks::tucker_equivalence(50, 8)?;
    line(diff < 1e-10, format!("Tucker fusion vs dense bilinear, 50 seeds: max diff {diff:.2e}"));
    let (tucker, dense) = checks::published_fusion_counts();
    line(
        tucker == 281_280 && dense == 16_777_216,
        format!("rank-60 fusion at 512/512/64: {tucker} vs {dense} dense"),
    );
    let (constant, single) = checks::tsf_degenerate(50)?;
    line(
        constant < 1e-12 && single < 1e-12,
        format!("TSF constant input diff {constant:.2e}, T=1 diff {single:.2e}"),
    );
    Ok(pass)
}

fn run(cli: &Cli) -> CliResult<bool> {
    let root = &cli.output_root;
    match &cli.command {
        Command::GenData(a) => gen_data(root, a).map(|_| true),
        Command::Train(a) => train(root, a).map(|_| true),
        Command::Eval(a) => eval(root, a).map(|_| true),
        Command::Ablate(a) => ablate(root, a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
        Command::OracleCheck => oracle_check(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

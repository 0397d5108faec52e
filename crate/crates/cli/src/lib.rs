//! The `psta` command line: argument parsing, configuration layering and
//! the subcommands.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, configuration, files),
//! 2 runtime failure (divergence, I/O while writing results).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use pse_tae::config::{parse_ini, parse_overrides, RunConfig};
use pse_tae::data::{format_check, generate_synthetic, read_dataset, write_dataset, Dataset};
use pse_tae::harness::{
    cross_validate, epoch_log_csv, evaluate, inspect_attention, run_ablations, train, Evaluation,
    Metrics, ModelBundle,
};
use pse_tae::Error;

#[derive(Debug, Parser)]
#[command(
    name = "psta",
    version,
    about = "Pixel-set + temporal-attention parcel classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// INI configuration file
    #[arg(short, long, global = true, env = "PSTA_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Configuration override KEY=VALUE (repeatable; PSTA_SET takes a ';'-separated list)
    #[arg(
        long = "set",
        global = true,
        env = "PSTA_SET",
        value_name = "KEY=VALUE",
        value_delimiter = ';'
    )]
    pub set: Vec<String>,

    /// Seed for generation, initialization and sampling (run.seed)
    #[arg(long, global = true, env = "PSTA_SEED")]
    pub seed: Option<String>,

    /// 1 = strict single-threaded, >1 = background batch assembly and parallel evaluation (run.threads)
    #[arg(long, global = true, env = "PSTA_THREADS")]
    pub threads: Option<String>,

    /// Output directory for every artifact of the run
    #[arg(
        short,
        long,
        global = true,
        env = "PSTA_OUT",
        default_value = "psta-out",
        value_name = "DIR"
    )]
    pub out: PathBuf,

    /// Dataset directory or manifest [default: <out>/dataset]
    #[arg(long, global = true, env = "PSTA_DATA", value_name = "PATH")]
    pub data: Option<PathBuf>,

    /// Checkpoint for evaluate, predict and inspect-attention [default: <out>/best.psta]
    #[arg(long, global = true, env = "PSTA_CHECKPOINT", value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Cross-validation fold for train; evaluate defaults to the checkpoint's fold (train.fold)
    #[arg(long, global = true, env = "PSTA_FOLD")]
    pub fold: Option<String>,

    /// Training epochs (train.epochs)
    #[arg(long, global = true, env = "PSTA_EPOCHS")]
    pub epochs: Option<String>,

    /// Parcels per batch (train.batch_size)
    #[arg(long, global = true, env = "PSTA_BATCH_SIZE")]
    pub batch_size: Option<String>,

    /// Split scored by evaluate: test, validation, train or all
    #[arg(long, global = true, env = "PSTA_SPLIT", default_value = "test")]
    pub split: String,

    /// Parcel ids for predict and inspect-attention (repeatable or comma-separated)
    #[arg(
        long = "parcel-id",
        global = true,
        env = "PSTA_PARCEL_ID",
        value_delimiter = ','
    )]
    pub parcel_id: Vec<u64>,

    /// Folds trained by ablate (comma-separated)
    #[arg(
        long,
        global = true,
        env = "PSTA_FOLDS",
        value_delimiter = ',',
        default_value = "0"
    )]
    pub folds: Vec<usize>,

    /// Resolve the configuration, write and print it, then exit
    #[arg(long, global = true, env = "PSTA_DRY_RUN")]
    pub dry_run: bool,

    /// Diagnostics level on stderr: error, warn, info, debug or trace
    #[arg(long, global = true, env = "PSTA_LOG_LEVEL", default_value = "info")]
    pub log_level: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to --data (default <out>/dataset)
    Generate,
    /// Train one fold, keep the best validation epoch and score it on test
    Train,
    /// Score a checkpoint on one split of the dataset
    Evaluate,
    /// Print "<parcel_id>,<class>,<max-prob>" for each --parcel-id
    Predict,
    /// Print per-head attention weights as CSV
    InspectAttention,
    /// Train each ablation variant and write the comparison table
    Ablate,
    /// Train and test every fold, with mean and std
    CrossValidate,
    /// Validate a dataset's manifest and blob without loading pixels
    FormatCheck,
}

/// Dedicated flags and the configuration key each one sets.
const KEYED_FLAGS: &[(&str, &str)] = &[
    ("seed", "run.seed"),
    ("threads", "run.threads"),
    ("fold", "train.fold"),
    ("epochs", "train.epochs"),
    ("batch_size", "train.batch_size"),
];

struct Failure {
    code: i32,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

impl From<pse_tae::data::DataError> for Failure {
    fn from(e: pse_tae::data::DataError) -> Self {
        Error::from(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        msg: msg.into(),
    }
}

/// Layers built-in defaults < config file < environment < command line.
pub fn resolve_config(cli: &Cli, matches: &ArgMatches) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let pairs = parse_ini(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.apply(&pairs)
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    for layer in [ValueSource::EnvVariable, ValueSource::CommandLine] {
        if matches.value_source("set") == Some(layer) {
            for s in &cli.set {
                cfg.apply(&parse_overrides(s)?)?;
            }
        }
        for (id, key) in KEYED_FLAGS {
            if matches.value_source(id) == Some(layer) {
                let v: &String = matches.get_one(id).expect("value present");
                cfg.set(key, v)?;
            }
        }
    }
    Ok(cfg.resolved())
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    })
}

fn write_metrics(dir: &Path, stem: &str, m: &Metrics) -> Result<(), Failure> {
    write(
        &dir.join(format!("{stem}_confusion.csv")),
        &m.confusion_csv(),
    )?;
    write(&dir.join(format!("{stem}_summary.json")), &m.summary())
}

fn predictions_csv(e: &Evaluation) -> String {
    let mut s = String::from("parcel_id,label,predicted,probability\n");
    for p in &e.predictions {
        writeln!(
            s,
            "{},{},{},{}",
            p.parcel_id, p.label, p.predicted, p.probability
        )
        .unwrap();
    }
    s
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: RunConfig,
}

impl Ctx<'_> {
    fn data_path(&self) -> PathBuf {
        self.cli
            .data
            .clone()
            .unwrap_or_else(|| self.cli.out.join("dataset"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cli
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.cli.out.join("best.psta"))
    }

    fn load_data(&self) -> Result<Dataset, Failure> {
        let path = self.data_path();
        info!("reading {}", path.display());
        Ok(read_dataset(&path)?)
    }

    /// Model configuration with `model.classes = auto` filled from the data.
    fn model_for(&self, data: &Dataset) -> pse_tae::classifier::ModelConfig {
        let mut m = self.cfg.model.clone();
        if self.cfg.auto_classes {
            m.classes = data.classes;
        }
        m
    }

    fn snapshot(&self) -> Result<(), Failure> {
        write(
            &self.cli.out.join("resolved_config.ini"),
            &self.cfg.to_ini(),
        )
    }

    fn load_bundle(&mut self) -> Result<ModelBundle, Failure> {
        let path = self.checkpoint_path();
        let bundle = ModelBundle::load(&path).map_err(|e| {
            let f = Failure::from(e);
            Failure {
                msg: format!("{}: {}", path.display(), f.msg),
                ..f
            }
        })?;
        self.cfg.model = bundle.model.cfg.clone();
        self.cfg.auto_classes = false;
        Ok(bundle)
    }
}

fn run_command(cmd: Command, ctx: &mut Ctx<'_>) -> Result<String, Failure> {
    let out = ctx.cli.out.clone();
    let threads = ctx.cfg.threads.max(1);
    match cmd {
        Command::Generate => {
            ctx.cfg.data.validate()?;
            let dir = ctx.data_path();
            let ds = generate_synthetic(&ctx.cfg.data)?;
            write_dataset(&dir, &ds)?;
            ctx.snapshot()?;
            Ok(format!(
                "{}\n",
                dir.join(pse_tae::data::MANIFEST_FILE).display()
            ))
        }
        Command::Train => {
            let data = ctx.load_data()?;
            let model = ctx.model_for(&data);
            ctx.cfg.model = model.clone();
            ctx.snapshot()?;
            let run = train(&model, &ctx.cfg.train, &data, Some(&out))?;
            write(&out.join("epoch_log.csv"), &epoch_log_csv(&run.log))?;
            write_metrics(&out, "test", &run.test.metrics)?;
            write_metrics(&out, "validation", &run.validation)?;
            write(
                &out.join("test_predictions.csv"),
                &predictions_csv(&run.test),
            )?;
            info!(
                "best epoch {}: test OA {:.4} mIoU {:.4}",
                run.best_epoch, run.test.metrics.overall_accuracy, run.test.metrics.miou
            );
            Ok(run.test.metrics.summary())
        }
        Command::Evaluate => {
            let bundle = ctx.load_bundle()?;
            let data = ctx.load_data()?;
            if bundle.model.cfg.classes != data.classes {
                return Err(Error::ClassMismatch {
                    model: bundle.model.cfg.classes,
                    data: data.classes,
                }
                .into());
            }
            ctx.snapshot()?;
            let fold = match ctx.cli.fold.as_deref() {
                Some(_) => ctx.cfg.train.fold,
                None => bundle
                    .meta("checkpoint.fold")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(ctx.cfg.train.fold),
            };
            let split = data.split(fold)?;
            let idx: Vec<usize> = match ctx.cli.split.as_str() {
                "test" => split.test,
                "validation" => split.validation,
                "train" => split.train,
                "all" => (0..data.len()).collect(),
                s => return Err(invalid(format!("unknown split '{s}'"))),
            };
            let records: Vec<_> = idx.iter().map(|&i| &data.records[i]).collect();
            let eval = evaluate(
                &bundle.model,
                &bundle.stats,
                &records,
                ctx.cfg.train.batch_size,
                threads,
            )?;
            let stem = format!("eval_{}", ctx.cli.split);
            write_metrics(&out, &stem, &eval.metrics)?;
            write(
                &out.join(format!("{stem}_predictions.csv")),
                &predictions_csv(&eval),
            )?;
            Ok(eval.metrics.summary())
        }
        Command::Predict => {
            if ctx.cli.parcel_id.is_empty() {
                return Err(invalid("predict needs at least one --parcel-id"));
            }
            let bundle = ctx.load_bundle()?;
            let data = ctx.load_data()?;
            ctx.snapshot()?;
            let records = ctx
                .cli
                .parcel_id
                .iter()
                .map(|&id| data.get(id))
                .collect::<Result<Vec<_>, _>>()?;
            let eval = evaluate(
                &bundle.model,
                &bundle.stats,
                &records,
                ctx.cfg.train.batch_size,
                1,
            )?;
            let mut s = String::new();
            for p in &eval.predictions {
                writeln!(s, "{},{},{:.6}", p.parcel_id, p.predicted, p.probability).unwrap();
            }
            write(&out.join("predictions.csv"), &s)?;
            Ok(s)
        }
        Command::InspectAttention => {
            let bundle = ctx.load_bundle()?;
            let data = ctx.load_data()?;
            ctx.snapshot()?;
            let records = if ctx.cli.parcel_id.is_empty() {
                let fold = bundle
                    .meta("checkpoint.fold")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(0);
                data.split(fold)?
                    .test
                    .iter()
                    .map(|&i| &data.records[i])
                    .collect()
            } else {
                ctx.cli
                    .parcel_id
                    .iter()
                    .map(|&id| data.get(id))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let traces = inspect_attention(
                &bundle.model,
                &bundle.stats,
                &records,
                ctx.cfg.train.batch_size,
            )?;
            let mut s = String::from("parcel_id,head,t,day,weight\n");
            for p in &traces {
                for h in 0..p.trace.heads {
                    for (t, w) in p.trace.head(h).iter().enumerate() {
                        writeln!(s, "{},{h},{t},{},{w}", p.parcel_id, p.days[t]).unwrap();
                    }
                }
            }
            write(&out.join("attention.csv"), &s)?;
            Ok(s)
        }
        Command::Ablate => {
            let data = ctx.load_data()?;
            let model = ctx.model_for(&data);
            ctx.cfg.model = model.clone();
            ctx.snapshot()?;
            let table = run_ablations(
                &model,
                &ctx.cfg.train,
                &data,
                &ctx.cli.folds,
                Some(&out.join("ablation")),
            )?;
            let csv = table.to_csv();
            write(&out.join("ablation.csv"), &csv)?;
            Ok(csv)
        }
        Command::CrossValidate => {
            let data = ctx.load_data()?;
            let model = ctx.model_for(&data);
            ctx.cfg.model = model.clone();
            ctx.snapshot()?;
            let cv = cross_validate(&model, &ctx.cfg.train, &data, Some(&out))?;
            let csv = cv.to_csv();
            write(&out.join("cv.csv"), &csv)?;
            Ok(csv)
        }
        Command::FormatCheck => {
            ctx.snapshot()?;
            let r = format_check(&ctx.data_path())?;
            let counts: Vec<String> = r.class_counts.iter().map(usize::to_string).collect();
            Ok(format!(
                "manifest={}\nblob={}\nparcels={}\nclasses={}\ndates={}\nchannels={}\ntotal_pixels={}\nblob_bytes={}\nclass_counts={}\n",
                r.manifest.display(),
                r.blob.display(),
                r.parcels,
                r.classes,
                r.dates,
                r.channels,
                r.total_pixels,
                r.blob_bytes,
                counts.join(",")
            ))
        }
    }
}

/// Runs one invocation; returns the process exit code. Machine-readable
/// results go to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).unwrap_or(&matches);
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();

    let result = resolve_config(&cli, sub).map_err(invalid).and_then(|cfg| {
        create_dir(&cli.out)?;
        let mut ctx = Ctx { cli: &cli, cfg };
        if cli.dry_run {
            ctx.snapshot()?;
            return Ok(ctx.cfg.to_ini());
        }
        run_command(cli.command, &mut ctx)
    });
    match result {
        Ok(stdout) => {
            print!("{stdout}");
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}

//! Command-line entry points: `pretrain`, `serve` and `replay`.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError};
use crate::exec::Exec;
use crate::model_file::{ModelFile, ModelFileError};
use crate::server::{self, ServerConfig, ServerError};
use crate::session::{ScriptEntry, Session, SessionConfig, SessionError};
use crate::trainer::{self, TrainConfig, TrainError};
use crate::wire::ServerMessage;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Script {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "latentcloud", version, about = "Interactive latent-space annotation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the autoencoder without labels and write a model file.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve an annotation session over WebSocket.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// Start an update automatically after every annotation.
        #[arg(long)]
        auto_update: bool,
        /// Write the received message log here on shutdown (replayable script).
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run an annotation script headlessly and write per-snapshot metrics.
    Replay {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// JSON-lines script.
        #[arg(long)]
        script: PathBuf,
        /// Metrics CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Every snapshot as a JSON line, in wire format.
        #[arg(long)]
        snapshots_out: Option<PathBuf>,
        /// Final label state as JSON.
        #[arg(long)]
        labels_out: Option<PathBuf>,
        /// Fine-tuned model file.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model file from `pretrain`; without it the model is pretrained first.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Synthetic {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl FromStr for Synthetic {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [k, m, d, sigma] = parts[..] else {
            return Err("expected k,m,d,sigma".into());
        };
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{v}: {e}"));
        Ok(Self {
            classes: int(k)?,
            per_class: int(m)?,
            dim: int(d)?,
            spread: sigma.parse().map_err(|e| format!("{sigma}: {e}"))?,
        })
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file; used for evaluation only.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Keep only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Gaussian blobs instead of IDX files: classes,per_class,dim,sigma.
    #[arg(long)]
    pub synthetic: Option<Synthetic>,
    /// Number of classes the classifier head predicts.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seed for initialisation, batching, noise and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// SGD learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Pretraining epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the KL term
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight of the classification term
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Gradient steps per update.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Hidden width of encoder and decoder.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Emit every k-th training snapshot.
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    /// Guarantee a labelled sample in every mini-batch.
    #[arg(long)]
    pub ensure_labeled: bool,
    /// Run without the thread pool.
    #[arg(long)]
    pub sequential: bool,
}

impl TrainArgs {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        c.seed = self.seed.unwrap_or(c.seed);
        c.learning_rate = self.lr.unwrap_or(c.learning_rate);
        c.batch_size = self.batch.unwrap_or(c.batch_size);
        c.pretrain_epochs = self.epochs.unwrap_or(c.pretrain_epochs);
        c.beta = self.beta.unwrap_or(c.beta);
        c.lambda = self.lambda.unwrap_or(c.lambda);
        c.steps_per_update = self.steps.unwrap_or(c.steps_per_update);
        c.snapshot_every = self.snapshot_every.unwrap_or(c.snapshot_every);
        c.ensure_labeled_in_batch |= self.ensure_labeled;
        if let Some(h) = self.hidden {
            c.encoder_hidden = h;
            c.decoder_hidden = h;
        }
        c
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

fn load_dataset(args: &DataArgs, seed: u64) -> Result<Dataset> {
    let ds = match (&args.images, &args.synthetic) {
        (Some(_), Some(_)) => return Err(CliError::Usage("use either --images or --synthetic, not both".into())),
        (None, None) => return Err(CliError::Usage("a dataset is required: --images or --synthetic".into())),
        (Some(images), None) => dataset::load_idx(images, args.labels.as_deref())?,
        (None, Some(s)) => {
            if args.labels.is_some() {
                return Err(CliError::Usage("--labels needs --images".into()));
            }
            dataset::synth_blobs(s.classes, s.per_class, s.dim, s.spread, seed)?
        }
    };
    let ds = match args.limit {
        Some(limit) => ds.truncated(limit),
        None => ds,
    };
    Ok(match args.classes {
        Some(c) => ds.with_classes(c)?,
        None => ds,
    })
}

/// Loads `--model` or pretrains from scratch, then returns dataset, model and config.
fn prepare(model: &ModelArgs, data: &DataArgs, train: &TrainArgs) -> Result<(Dataset, ModelFile)> {
    match &model.model {
        Some(path) => {
            let file = ModelFile::load(path)?;
            let arch = file.params.architecture();
            if train
                .hidden
                .is_some_and(|h| h != arch.encoder_hidden || h != arch.decoder_hidden)
            {
                return Err(CliError::Usage(format!(
                    "--hidden does not match the model's hidden widths {}/{}",
                    arch.encoder_hidden, arch.decoder_hidden
                )));
            }
            let config = train.apply(file.config.clone());
            config.validate()?;
            let ds = load_dataset(data, config.seed)?;
            if ds.dim() != arch.input_dim {
                return Err(SessionError::DimensionMismatch {
                    dataset: ds.dim(),
                    model: arch.input_dim,
                }
                .into());
            }
            if ds.classes() > arch.classes {
                return Err(CliError::Usage(format!(
                    "dataset has {} classes but the model predicts {}",
                    ds.classes(),
                    arch.classes
                )));
            }
            Ok((
                ds,
                ModelFile {
                    params: file.params,
                    config,
                },
            ))
        }
        None => {
            let config = train.apply(TrainConfig::default());
            config.validate()?;
            let ds = load_dataset(data, config.seed)?;
            let params = pretrain_with(train.exec(), &ds, &config)?;
            Ok((ds, ModelFile { params, config }))
        }
    }
}

fn pretrain_with(exec: Exec, ds: &Dataset, config: &TrainConfig) -> Result<crate::model::ModelParameters> {
    let mut t = trainer::Trainer::new(config.init_params(ds)?, config.clone())?.with_exec(exec);
    let steps = config.pretrain_epochs * t.steps_per_epoch(ds.len());
    for _ in 0..steps {
        t.step(ds, None)?;
    }
    Ok(t.into_params())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Parses a JSON-lines script. Blank lines and lines starting with `#` are skipped.
pub fn parse_script(text: &str, path: &Path) -> Result<Vec<ScriptEntry>> {
    let mut out: Vec<ScriptEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let entry: ScriptEntry = serde_json::from_str(t).map_err(|e| CliError::Script {
            path: path.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(prev) = out.last() {
            if entry.after_snapshot < prev.after_snapshot {
                return Err(CliError::Script {
                    path: path.to_owned(),
                    line: line_no,
                    message: format!(
                        "after_snapshot {} is smaller than the previous {}",
                        entry.after_snapshot, prev.after_snapshot
                    ),
                });
            }
        }
        out.push(entry);
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 7] = [
    "iteration",
    "reconstruction",
    "kl",
    "classification",
    "total",
    "silhouette",
    "labeled",
];

fn csv_error(e: csv::Error) -> CliError {
    CliError::Io {
        path: PathBuf::from("<metrics>"),
        source: io::Error::other(e.to_string()),
    }
}

/// Replays `script` and returns `(metrics CSV, snapshot JSON lines, session)`.
pub fn replay(
    dataset: Dataset,
    model: ModelFile,
    script: &[ScriptEntry],
    exec: Exec,
) -> Result<(Vec<u8>, Vec<u8>, Session)> {
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out.write_record(CSV_HEADER).map_err(csv_error)?;
    let mut rows: Vec<[String; 7]> = Vec::new();
    let mut snapshots = Vec::new();
    let config = SessionConfig {
        train: model.config,
        auto_update: false,
    };
    let session = Session::replay(dataset, model.params, config, script, &mut |_, m| {
        let ServerMessage::Snapshot(s) = m else { return };
        let metrics = trainer::compute_metrics_with(exec, &s.positions3(), &s.label_state);
        rows.push([
            s.iteration.to_string(),
            s.losses.reconstruction.to_string(),
            s.losses.kl.to_string(),
            s.losses.classification.to_string(),
            s.losses.total.to_string(),
            metrics.silhouette.map(|v| v.to_string()).unwrap_or_default(),
            metrics.labeled.to_string(),
        ]);
        snapshots.extend_from_slice(m.to_json().as_bytes());
        snapshots.push(b'\n');
    })?;
    for r in &rows {
        csv_out.write_record(r).map_err(csv_error)?;
    }
    let csv_bytes = csv_out.into_inner().map_err(|e| csv_error(e.into_error().into()))?;
    Ok((csv_bytes, snapshots, session))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { data, train, out } => {
            let config = train.apply(TrainConfig::default());
            config.validate()?;
            let ds = load_dataset(&data, config.seed)?;
            let params = pretrain_with(train.exec(), &ds, &config)?;
            let none = vec![None; ds.len()];
            let loss = trainer::evaluate(train.exec(), &params, &ds, &none, config.weights())?;
            write_file(&out, &ModelFile { params, config }.to_bytes())?;
            println!(
                "wrote {} ({} samples, reconstruction {:.4}, kl {:.4})",
                out.display(),
                ds.len(),
                loss.reconstruction,
                loss.kl
            );
            Ok(())
        }
        Command::Serve {
            model,
            data,
            train,
            host,
            port,
            auto_update,
            record,
        } => {
            let (ds, file) = prepare(&model, &data, &train)?;
            let listener = server::bind(format!("{host}:{port}"))?;
            let config = SessionConfig {
                train: file.config,
                auto_update,
            };
            let (session, greeting) = Session::open(ds, file.params, config)?;
            let shutdown = Arc::new(AtomicBool::new(false));
            {
                let flag = shutdown.clone();
                ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                    .map_err(|e| CliError::Usage(format!("cannot install interrupt handler: {e}")))?;
            }
            eprintln!(
                "listening on ws://{}",
                listener.local_addr().map_err(ServerError::from)?
            );
            let session = server::serve(listener, session, greeting, shutdown, ServerConfig::default())?;
            if let Some(path) = record {
                write_file(&path, &script_bytes(session.log()))?;
            }
            Ok(())
        }
        Command::Replay {
            model,
            data,
            train,
            script,
            out,
            snapshots_out,
            labels_out,
            model_out,
        } => {
            let text = fs::read_to_string(&script).map_err(|source| CliError::Io {
                path: script.clone(),
                source,
            })?;
            let entries = parse_script(&text, &script)?;
            let (ds, file) = prepare(&model, &data, &train)?;
            let config = file.config.clone();
            let (csv_bytes, snaps, session) = replay(ds, file, &entries, train.exec())?;
            match out {
                Some(p) => write_file(&p, &csv_bytes)?,
                None => io::stdout().write_all(&csv_bytes).map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })?,
            }
            if let Some(p) = snapshots_out {
                write_file(&p, &snaps)?;
            }
            if let Some(p) = labels_out {
                let json = serde_json::to_vec(session.labels()).expect("label store serialises");
                write_file(&p, &json)?;
            }
            if let Some(p) = model_out {
                let file = ModelFile {
                    params: session.params().clone(),
                    config,
                };
                write_file(&p, &file.to_bytes())?;
            }
            Ok(())
        }
    }
}

/// A session log as a replayable script.
pub fn script_bytes(entries: &[ScriptEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        out.extend(serde_json::to_vec(e).expect("script entries serialise"));
        out.push(b'\n');
    }
    out
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", single_line(&e));
            1
        }
    }
}

fn single_line(e: &dyn std::error::Error) -> String {
    let mut text = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        let more = s.to_string();
        if !text.contains(&more) {
            text.push_str(": ");
            text.push_str(&more);
        }
        source = s.source();
    }
    text.replace('\n', " ")
}

//! `mslayout`: synthetic corpora, training, inference, evaluation and the
//! annotation service from the command line.

mod raster;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use mslayout_core::corpus::{
    parse_annotation_file, read_manifest_file, write_annotation_file, write_manifest_file,
    Collection, DocumentAnnotation, Split,
};
use mslayout_core::eval::emit_report;
use mslayout_core::synth::{generate_corpus, SynthConfig};
use mslayout_model::checkpoint;
use mslayout_model::infer::{layout_to_annotation, run_inference, InferenceConfig};
use mslayout_model::train::{run_training, TrainingConfig, TrainingDocument};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error(transparent)]
    Corpus(#[from] mslayout_core::corpus::CorpusError),
    #[error(transparent)]
    Synth(#[from] mslayout_core::synth::SynthError),
    #[error(transparent)]
    Eval(#[from] mslayout_core::eval::EvalError),
    #[error(transparent)]
    Model(#[from] mslayout_model::ModelError),
    #[error(transparent)]
    Service(#[from] mslayout_service::ServiceError),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mslayout", version, about = "Instance-level layout parsing of manuscript images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus.
    Synth {
        /// Generator parameters (JSON); defaults apply to absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.15, 0.15])]
        splits: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and write a checkpoint plus loss log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Training configuration (JSON): stages, optimizer, network, sampling.
        #[arg(long)]
        stages: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse one image or every image of a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline thresholds (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one split (train, validation, test).
        #[arg(long)]
        split: Option<String>,
        /// JSON report; aligned text tables go next to it with a `.txt` suffix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation web service.
    Serve {
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn synth(config: Option<&Path>, n: usize, seed: u64, splits: &[f64], out: &Path) -> Result<()> {
    let cfg: SynthConfig = read_json(config)?;
    let fractions = [splits[0], splits[1], splits[2]];
    let corpus = generate_corpus(&cfg, n, fractions, seed)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for doc in &corpus.documents {
        raster::save_gray(&doc.image, &out.join(&doc.annotation.image_path))?;
    }
    write_annotation_file(&corpus.annotations(), out.join("annotations.json"))?;
    write_manifest_file(&corpus.manifest, out.join("manifest.json"))?;
    log::info!("wrote {n} documents to {}", out.display());
    Ok(())
}

fn train(corpus: &Path, manifest: &Path, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg: TrainingConfig = read_json(config)?;
    let docs = parse_annotation_file(corpus)?;
    let manifest = read_manifest_file(manifest)?;
    let base = corpus.parent().unwrap_or(Path::new("."));
    let train_docs = docs
        .into_iter()
        .filter(|d| manifest.split_of(&d.doc_id) == Some(Split::Train))
        .map(|annotation| {
            let image = raster::load_rgb(&base.join(&annotation.image_path))?;
            Ok(TrainingDocument { annotation, image })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join("loss_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut write_failure = None;
    let outcome = run_training(&train_docs, &manifest, &cfg, seed, |record| {
        log::info!(
            "stage {} epoch {}: total {:.4} (rpn {:.4}, class {:.4}, bbox {:.4}, mask {:.4})",
            record.stage,
            record.epoch,
            record.total,
            record.components.rpn,
            record.components.class,
            record.components.bbox,
            record.components.mask
        );
        let line = serde_json::to_string(record).expect("epoch records serialize");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            write_failure.get_or_insert(e);
        }
    })?;
    if let Some(source) = write_failure {
        return Err(CliError::Io { path: log_path, source });
    }
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&outcome.network, &ckpt)?;
    let cfg_text = serde_json::to_string_pretty(&cfg).expect("training config serializes");
    write_text(&out.join("training_config.json"), &(cfg_text + "\n"))?;
    log::info!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_owned()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| raster::is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no images found in {}", path.display())));
    }
    Ok(files)
}

fn infer(ckpt: &Path, image: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: InferenceConfig = read_json(config)?;
    let net = checkpoint::load(ckpt)?;
    let mut docs = Vec::new();
    for file in image_files(image)? {
        let rgb = raster::load_rgb(&file)?;
        let doc_id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let template = DocumentAnnotation {
            doc_id,
            image_path: file.to_string_lossy().into_owned(),
            width: rgb.width as u32,
            height: rgb.height as u32,
            collection: Collection::Synthetic,
            script: String::new(),
            regions: Vec::new(),
        };
        let (layout, trace) = run_inference(&net, &rgb, &cfg)?;
        log::info!("{}: {:?}", template.doc_id, trace);
        docs.push(layout_to_annotation(&layout, &template)?);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_annotation_file(&docs, out)?;
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split {other:?}"))),
    }
}

fn evaluate(pred: &Path, gt: &Path, manifest: &Path, split: Option<&str>, out: &Path) -> Result<()> {
    let split = split.map(parse_split).transpose()?;
    let preds = parse_annotation_file(pred)?;
    let gts = parse_annotation_file(gt)?;
    let manifest = read_manifest_file(manifest)?;
    let report = emit_report(&preds, &gts, &manifest, split)?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    write_text(out, &(json + "\n"))?;
    let tables = report.render();
    let mut txt = out.as_os_str().to_owned();
    txt.push(".txt");
    write_text(Path::new(&txt), &tables)?;
    print!("{tables}");
    Ok(())
}

fn serve(corpus_dir: &Path, store: &Path, host: std::net::IpAddr, port: u16) -> Result<()> {
    let store = Arc::new(mslayout_service::Store::open_corpus_dir(corpus_dir, Some(store))?);
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    let addr = SocketAddr::new(host, port);
    runtime
        .block_on(mslayout_service::serve(store, addr))
        .map_err(|source| CliError::Io {
            path: PathBuf::from(addr.to_string()),
            source,
        })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            n,
            seed,
            splits,
            out,
        } => synth(config.as_deref(), n, seed, &splits, &out),
        Command::Train {
            corpus,
            manifest,
            stages,
            seed,
            out,
        } => train(&corpus, &manifest, stages.as_deref(), seed, &out),
        Command::Infer {
            ckpt,
            image,
            out,
            config,
        } => infer(&ckpt, &image, &out, config.as_deref()),
        Command::Evaluate {
            pred,
            gt,
            manifest,
            split,
            out,
        } => evaluate(&pred, &gt, &manifest, split.as_deref(), &out),
        Command::Serve {
            corpus_dir,
            store,
            port,
            host,
        } => serve(&corpus_dir, &store, host, port),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

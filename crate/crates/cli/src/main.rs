//! `inpaint`: the level-inpainting pipeline from corpus to report, plus the
//! augmentation and serving front ends.
//!
//! Log verbosity comes from `INPAINT_LOG` (default `info`).

mod manifest;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use inpaint_core::augment::{apply_plan, suggest_low_structure_regions, AugmentPlan};
use inpaint_core::corpus::{load_split, parse_level, vglc_manifest, CorpusSplit, SplitManifest, TileAlphabet, TileGrid, LEVEL_HEIGHT};
use inpaint_core::dataset::{Dataset, DatasetCache, DatasetConfig};
use inpaint_core::eval::{run_experiment, Contender, ExperimentConfig, StructureSet};
use inpaint_core::markov::{GenerationMode, MarkovInpainter, MarkovModel, DEFAULT_OFFSETS};
use inpaint_core::models::{build, train, Architecture, Inpainter, LossWeighting, ModelConfig, NeuralInpainter, TrainConfig};
use inpaint_core::netcore::Network;
use inpaint_core::store::{FinalLosses, NamedTensorStore, StoreMetadata};
use inpaint_service::{load_model, AppState};
use manifest::{manifest_path, write_atomic, ManifestBuilder};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "inpaint", version, about = "Level inpainting for tile-based platformer levels")]
struct Cli {
    /// Alphabet JSON; the 13-tile default is used when absent.
    #[arg(long, global = true)]
    alphabet: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated stand-in corpus with its split manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Cut the corpus into masked samples and cache them.
    BuildDataset {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an autoencoder or U-net.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "ae")]
        arch: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the Markov baseline on the training levels.
    FitMarkov {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score models on the test samples and write the report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Trained weights or Markov tables, evaluated as they are each run.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Architectures retrained from scratch for every run (seed + run).
        #[arg(long = "retrain")]
        retrain: Vec<Architecture>,
        /// Fit and include the Markov baseline.
        #[arg(long)]
        markov: bool,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply an augmentation plan to a level file.
    Inpaint {
        #[arg(long)]
        level: PathBuf,
        /// Plan JSON; without it, `--suggest` low-structure masks are used.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        suggest: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weight store or Markov table.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        /// Directory of weight stores and Markov tables.
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

#[derive(Args, Serialize)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Split manifest; defaults to `<corpus>/manifest.json`, then the built-in VGLC split.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Weight of masked cells in the loss; full-output loss when absent.
    #[arg(long)]
    mask_weight: Option<f64>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validation_fraction: self.val_fraction,
            ..Default::default()
        }
    }

    fn loss(&self) -> LossWeighting {
        match self.mask_weight {
            Some(w) => LossWeighting::MaskWeighted { mask_weight: w },
            None => LossWeighting::Full,
        }
    }
}

fn alphabet(path: Option<&Path>) -> Result<TileAlphabet> {
    match path {
        Some(p) => TileAlphabet::load(p).with_context(|| format!("loading alphabet {}", p.display())),
        None => Ok(TileAlphabet::smb()),
    }
}

fn manifest_file(args: &CorpusArgs) -> Option<PathBuf> {
    args.manifest
        .clone()
        .or_else(|| Some(args.corpus.join("manifest.json")).filter(|p| p.is_file()))
}

fn load_corpus(args: &CorpusArgs, alphabet: &TileAlphabet) -> Result<CorpusSplit> {
    if !args.corpus.is_dir() {
        bail!("corpus directory {} does not exist", args.corpus.display());
    }
    let manifest = match manifest_file(args) {
        Some(p) => SplitManifest::load(&p).with_context(|| format!("loading manifest {}", p.display()))?,
        None => vglc_manifest(),
    };
    let split = load_split(&args.corpus, &manifest, alphabet)?;
    Ok(split.padded(LEVEL_HEIGHT, alphabet.sky_symbol())?)
}

fn load_dataset(path: &Path, alphabet: &TileAlphabet) -> Result<(DatasetCache, CorpusSplit, Dataset<f32>)> {
    let cache = DatasetCache::load(path, alphabet).with_context(|| format!("loading dataset {}", path.display()))?;
    let split = cache.split(alphabet)?;
    let ds = cache.dataset::<f32>(alphabet)?;
    Ok((cache, split, ds))
}

fn fit_markov(split: &CorpusSplit, alphabet: &TileAlphabet) -> Result<MarkovModel> {
    let grids: Vec<&TileGrid> = split.train.iter().map(|l| &l.grid).collect();
    Ok(MarkovModel::fit(&grids, alphabet, &DEFAULT_OFFSETS)?)
}

fn train_network(arch: Architecture, seed: u64, ds: &Dataset<f32>, args: &TrainArgs) -> Result<(Network<f32>, ModelConfig, FinalLosses)> {
    let mcfg = ModelConfig::new(arch, seed);
    let net = build::<f32>(&mcfg)?;
    log::info!("training {arch} (seed {seed}) on {} samples", ds.train.len());
    let (net, history) = train(net, &ds.train, args.loss(), &args.config(), seed)?;
    let last = history.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    log::info!(
        "{arch}: {} epochs, best validation loss {:.5} at epoch {}",
        history.epochs.len(),
        history.best_val_loss,
        history.best_epoch
    );
    let losses = FinalLosses {
        train: last,
        validation: history.best_val_loss,
        best_epoch: history.best_epoch,
    };
    Ok((net, mcfg, losses))
}

fn cmd_gen_corpus(out: &Path, seed: u64) -> Result<()> {
    #[derive(Serialize)]
    struct Config {
        seed: u64,
    }
    let mut m = ManifestBuilder::new("gen-corpus", &Config { seed });
    m.seed(seed).output(out);
    let manifest = inpaint_core::synth::write_corpus(out, seed)?;
    log::info!("wrote {} levels to {}", manifest.levels.len(), out.display());
    m.finish(&manifest_path(out))?;
    Ok(())
}

fn cmd_build_dataset(alphabet: &TileAlphabet, corpus: &CorpusArgs, stride: usize, out: &Path) -> Result<()> {
    let cfg = DatasetConfig {
        stride,
        ..Default::default()
    };
    let mut m = ManifestBuilder::new("build-dataset", &(corpus, cfg));
    m.input(&corpus.corpus);
    if let Some(p) = manifest_file(corpus) {
        m.input(&p);
    }
    let split = load_corpus(corpus, alphabet)?;
    let cache = DatasetCache::build(&split, alphabet, &cfg)?;
    log::info!(
        "{} train samples from {} levels, {} test samples from {} levels",
        cache.train_count(),
        split.train.len(),
        cache.test_count(),
        split.test.len()
    );
    write_atomic(out, cache.to_json().as_bytes())?;
    m.output(out);
    m.finish(&manifest_path(out))?;
    Ok(())
}

fn cmd_train(alphabet: &TileAlphabet, dataset: &Path, arch: Architecture, seed: u64, args: &TrainArgs, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("train", &(arch, args));
    m.seed(seed).input(dataset);
    let (cache, _, ds) = load_dataset(dataset, alphabet)?;
    let (net, mcfg, losses) = train_network(arch, seed, &ds, args)?;
    let meta = StoreMetadata {
        model: mcfg,
        train: Some(args.config()),
        alphabet_hash: alphabet.hash(),
        alphabet_depth: alphabet.depth(),
        corpus_hash: Some(cache.corpus_hash),
        final_losses: Some(losses),
    };
    write_atomic(out, &NamedTensorStore::from_network(&net, meta).to_bytes())?;
    m.output(out);
    m.finish(&manifest_path(out))?;
    Ok(())
}

fn cmd_fit_markov(alphabet: &TileAlphabet, dataset: &Path, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("fit-markov", &DEFAULT_OFFSETS);
    m.input(dataset);
    let (_, split, _) = load_dataset(dataset, alphabet)?;
    let model = fit_markov(&split, alphabet)?;
    write_atomic(out, serde_json::to_string_pretty(&model.to_file())?.as_bytes())?;
    m.output(out);
    m.finish(&manifest_path(out))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    alphabet: &TileAlphabet,
    dataset: &Path,
    models: &[PathBuf],
    retrain: &[Architecture],
    markov: bool,
    runs: usize,
    seed: u64,
    args: &TrainArgs,
    out: &Path,
) -> Result<()> {
    if models.is_empty() && retrain.is_empty() && !markov {
        bail!("nothing to evaluate: pass --model, --retrain or --markov");
    }
    let mut m = ManifestBuilder::new("eval", &(retrain, markov, runs, args));
    m.seed(seed).input(dataset);
    let (_, split, ds) = load_dataset(dataset, alphabet)?;
    let mut contenders: Vec<Contender<f32>> = Vec::new();
    for arch in retrain {
        let arch = *arch;
        let ds = &ds;
        contenders.push(Contender {
            id: arch.tag().into(),
            build: Box::new(move |run| {
                let (net, _, _) = train_network(arch, seed + run as u64, ds, args)
                    .map_err(|e| inpaint_core::models::ModelError::BadConfig(e.to_string()))?;
                Ok(Box::new(NeuralInpainter {
                    id: arch.tag().into(),
                    net,
                    alphabet: alphabet.clone(),
                }) as Box<dyn Inpainter<f32>>)
            }),
        });
    }
    for path in models {
        m.input(path);
        let loaded = load_model(path, alphabet)?.with_context(|| format!("{} is not a model artifact", path.display()))?;
        let id = loaded.info.id.clone();
        let shared: Arc<dyn Inpainter<f32>> = Arc::from(loaded.inpainter);
        contenders.push(Contender {
            id,
            build: Box::new(move |_| Ok(Box::new(Shared(shared.clone())) as Box<dyn Inpainter<f32>>)),
        });
    }
    if markov {
        let model = fit_markov(&split, alphabet)?;
        contenders.push(Contender {
            id: "Markov".into(),
            build: Box::new(move |_| {
                Ok(Box::new(MarkovInpainter {
                    id: "Markov".into(),
                    model: model.clone(),
                    alphabet: alphabet.clone(),
                    mode: GenerationMode::Sample,
                }) as Box<dyn Inpainter<f32>>)
            }),
        });
    }
    let cfg = ExperimentConfig {
        runs,
        seed,
        structures: StructureSet::for_alphabet(alphabet),
    };
    let output = run_experiment(&contenders, &ds.test, &split, alphabet, &cfg)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("report.json"), output.report.to_json().as_bytes())?;
    write_atomic(&out.join("report.csv"), output.report.to_csv()?.as_bytes())?;
    write_atomic(&out.join("report.txt"), output.report.to_table().as_bytes())?;
    let mut lines = String::new();
    for rec in &output.instances {
        lines.push_str(&serde_json::to_string(rec)?);
        lines.push('\n');
    }
    write_atomic(&out.join("instances.jsonl"), lines.as_bytes())?;
    println!("{}", output.report.to_table());
    m.output(out);
    m.finish(&manifest_path(out))?;
    Ok(())
}

/// A loaded model shared across runs.
struct Shared(Arc<dyn Inpainter<f32>>);

impl Inpainter<f32> for Shared {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn inpaint_items(&self, items: &[inpaint_core::models::InpaintItem<'_, f32>]) -> Result<Vec<inpaint_core::dataset::Fragment>, inpaint_core::models::ModelError> {
        self.0.inpaint_items(items)
    }
}

fn cmd_inpaint(alphabet: &TileAlphabet, level: &Path, plan: Option<&Path>, suggest: usize, seed: u64, weights: &Path, out: &Path) -> Result<()> {
    let mut m = ManifestBuilder::new("inpaint", &(suggest, seed));
    m.seed(seed).input(level).input(weights);
    let text = std::fs::read_to_string(level).with_context(|| format!("reading {}", level.display()))?;
    let raw = parse_level(&text, alphabet)?;
    let grid = inpaint_core::corpus::pad_to_height(&raw, LEVEL_HEIGHT, alphabet.sky_symbol())?;
    let model = load_model(weights, alphabet)?.with_context(|| format!("{} is not a model artifact", weights.display()))?;
    let level_id = level.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let plan = match plan {
        Some(p) => {
            m.input(p);
            AugmentPlan::load(p).with_context(|| format!("loading plan {}", p.display()))?
        }
        None => {
            let plan = AugmentPlan {
                level_id,
                masks: suggest_low_structure_regions(&grid, alphabet, suggest, 4, 5),
                model_id: model.info.id.clone(),
                seed,
            };
            let plan_path = out.with_extension("plan.json");
            write_atomic(&plan_path, plan.to_json().as_bytes())?;
            m.output(&plan_path);
            plan
        }
    };
    let augmented = apply_plan(&grid, alphabet, &plan, model.inpainter.as_ref())?;
    // Padding rows are dropped again when the model left them as sky.
    let extra = LEVEL_HEIGHT - raw.height();
    let sky = alphabet.sky_symbol();
    let keep_padding = (0..extra).any(|r| augmented.row(r).chars().any(|c| c != sky));
    let result = if keep_padding {
        log::warn!("inpainting wrote into the padding rows; keeping all {LEVEL_HEIGHT} rows");
        augmented
    } else {
        let rows: Vec<String> = augmented.to_rows().into_iter().skip(extra).collect();
        TileGrid::from_rows(&rows, alphabet)?
    };
    write_atomic(out, result.to_text().as_bytes())?;
    log::info!("applied {} masks to {}", plan.masks.len(), level.display());
    m.output(out);
    m.finish(&manifest_path(out))?;
    Ok(())
}

fn cmd_serve(alphabet: TileAlphabet, weights: &Path, corpus: &CorpusArgs, bind: SocketAddr) -> Result<()> {
    let split = load_corpus(corpus, &alphabet)?;
    let state = AppState::load(weights, alphabet, split)?;
    if state.models.is_empty() {
        log::warn!("no models found in {}", weights.display());
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(inpaint_service::serve(Arc::new(state), bind))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let alphabet = alphabet(cli.alphabet.as_deref())?;
    match &cli.command {
        Command::GenCorpus { out, seed } => cmd_gen_corpus(out, *seed),
        Command::BuildDataset { corpus, stride, out } => cmd_build_dataset(&alphabet, corpus, *stride, out),
        Command::Train {
            dataset,
            arch,
            seed,
            train,
            out,
        } => cmd_train(&alphabet, dataset, *arch, *seed, train, out),
        Command::FitMarkov { dataset, out } => cmd_fit_markov(&alphabet, dataset, out),
        Command::Eval {
            dataset,
            models,
            retrain,
            markov,
            runs,
            seed,
            train,
            out,
        } => cmd_eval(&alphabet, dataset, models, retrain, *markov, *runs, *seed, train, out),
        Command::Inpaint {
            level,
            plan,
            suggest,
            seed,
            weights,
            out,
        } => cmd_inpaint(&alphabet, level, plan.as_deref(), *suggest, *seed, weights, out),
        Command::Serve { weights, corpus, bind } => cmd_serve(alphabet, weights, corpus, *bind),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INPAINT_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

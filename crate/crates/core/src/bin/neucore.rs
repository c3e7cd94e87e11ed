use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neucore::data::{
    generate_split, make_zero_shot_split, write_dataset, write_triplets, Color, DataError, Dataset, GeneratorConfig,
    Lexicon, PosSet,
};
use neucore::harness::{
    alignment_heatmap, evaluate, localization_report, recall_keys, train, write_heatmap, write_rankings, HarnessError,
    PatchCache, TrainConfig, TrainedModel,
};

#[derive(Parser)]
#[command(name = "neucore", version, about = "Composed image retrieval on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset directory.
    GenerateData(GenerateArgs),
    /// Train a model and write a checkpoint plus metrics.jsonl.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Extract validation triplets that mention concepts never seen in training.
    ZeroShotSplit(ZeroShotArgs),
    /// Export alignment heatmaps and localization statistics.
    AlignViz(AlignVizArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid side in cells.
    #[arg(long, default_value_t = 4)]
    grid: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Comma-separated colors never mentioned by training modifiers.
    #[arg(long, value_delimiter = ',')]
    holdout_colors: Vec<String>,
    #[arg(long, default_value_t = 4)]
    edits_per_reference: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `val` or `train`.
    #[arg(long, default_value = "val")]
    split: String,
    /// Restrict queries to the zero-shot split of the validation set.
    #[arg(long)]
    zero_shot: bool,
    /// Write one JSON line per query with the ranked gallery.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "noun+adj+verb+adv")]
    pos: String,
}

#[derive(Args)]
struct AlignVizArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Triplet id; with `--concept`, writes one heatmap.
    #[arg(long)]
    triplet: Option<String>,
    #[arg(long)]
    concept: Option<String>,
    /// Output stem (`<stem>.pgm`, `<stem>.json`) or report path.
    #[arg(long)]
    out: PathBuf,
    /// Pixels per cell in the PGM.
    #[arg(long, default_value_t = 8)]
    scale: usize,
}

fn data_err(e: DataError) -> HarnessError {
    HarnessError::Data(e)
}

fn generate(a: &GenerateArgs) -> Result<(), HarnessError> {
    let holdout = a
        .holdout_colors
        .iter()
        .map(|w| Color::from_word(w).ok_or_else(|| HarnessError::Config(format!("unknown color {w:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = GeneratorConfig {
        rows: a.grid,
        cols: a.grid,
        patch: a.patch,
        edits_per_reference: a.edits_per_reference,
        holdout_colors: holdout,
        ..GeneratorConfig::default()
    };
    cfg.validate().map_err(data_err)?;
    let train = generate_split(&cfg, a.seed, "a", a.train).map_err(data_err)?;
    let val_cfg = GeneratorConfig {
        holdout_colors: Vec::new(),
        ..cfg.clone()
    };
    let val = generate_split(&val_cfg, a.seed.wrapping_add(0x7A1), "b", a.val).map_err(data_err)?;
    write_dataset(&a.out, &cfg, &train, &val).map_err(data_err)?;
    println!("wrote {} train and {} val triplets to {}", train.len(), val.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<(), HarnessError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for s in &a.sets {
        cfg.set_pair(s)?;
    }
    cfg.seed = Some(a.seed);
    cfg.validate()?;
    let ds = Dataset::load(&a.data)?;
    let out = train(&cfg, &ds, Some(&a.out))?;
    if let Some(last) = out.log.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn query_split(ds: &Dataset, split: &str, zero_shot: bool, pos: &PosSet) -> Result<Vec<neucore::data::TripletRecord>, HarnessError> {
    let records = match split {
        "val" => ds.val.clone(),
        "train" => ds.train.clone(),
        other => return Err(HarnessError::Config(format!("unknown split {other:?}"))),
    };
    if !zero_shot {
        return Ok(records);
    }
    let mods: Vec<&str> = ds.train.iter().map(|t| t.modifier.as_str()).collect();
    let (concepts, kept) = make_zero_shot_split(&mods, &records, &Lexicon::standard(), pos)?;
    log::info!("zero-shot concepts {concepts:?}, {} queries", kept.len());
    Ok(kept)
}

fn run_eval(a: &EvalArgs) -> Result<(), HarnessError> {
    let ds = Dataset::load(&a.data)?;
    let model = TrainedModel::load(&a.checkpoint)?;
    let cache = PatchCache::build(&ds.images, model.model.patch)?;
    let all = match a.split.as_str() {
        "train" => &ds.train,
        _ => &ds.val,
    };
    let gallery: Vec<String> = all.iter().map(|r| r.tgt_image.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let queries = query_split(&ds, &a.split, a.zero_shot, &model.config.pos)?;
    if queries.is_empty() {
        return Err(HarnessError::Data(DataError::Empty("no queries in the selected split".into())));
    }
    let (metrics, rankings) = evaluate(&model, &cache, &queries, Some(&gallery), None)?;
    if let Some(p) = &a.dump {
        write_rankings(p, &rankings)?;
    }
    let report = serde_json::json!({
        "queries": metrics.queries,
        "gallery": metrics.gallery,
        "recall": recall_keys(&metrics),
        "summary": metrics.summary(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_zero_shot(a: &ZeroShotArgs) -> Result<(), HarnessError> {
    let pos: PosSet = a.pos.parse()?;
    let ds = Dataset::load(&a.data)?;
    let mods: Vec<&str> = ds.train.iter().map(|t| t.modifier.as_str()).collect();
    let (concepts, kept) = make_zero_shot_split(&mods, &ds.val, &Lexicon::standard(), &pos)?;
    write_triplets(&a.out, &kept)?;
    let report = serde_json::json!({ "concepts": concepts, "triplets": kept.len() });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_align_viz(a: &AlignVizArgs) -> Result<(), HarnessError> {
    let ds = Dataset::load(&a.data)?;
    let model = TrainedModel::load(&a.checkpoint)?;
    let cache = PatchCache::build(&ds.images, model.model.patch)?;
    match (&a.triplet, &a.concept) {
        (Some(id), Some(concept)) => {
            let rec = ds
                .val
                .iter()
                .chain(&ds.train)
                .find(|r| &r.id == id)
                .ok_or_else(|| HarnessError::Data(DataError::Missing { kind: "triplet", id: id.clone() }))?;
            let h = alignment_heatmap(&model, &cache, rec, concept)?;
            let (pgm, json) = write_heatmap(&a.out, &h, a.scale)?;
            println!("wrote {} and {}", pgm.display(), json.display());
        }
        (None, None) => {
            let report = localization_report(&model, &cache, &ds.val)?;
            write_json(&a.out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        _ => return Err(HarnessError::Config("--triplet and --concept go together".into())),
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), HarnessError> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::ZeroShotSplit(a) => run_zero_shot(a),
        Command::AlignViz(a) => run_align_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

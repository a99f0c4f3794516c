mod io;

use std::fs::{self, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wildreid_core::catalog::{self, Schema};
use wildreid_core::grid::{self, GridDataset, GridSpec, GroupBy, RayonExecutor, ReportTable};
use wildreid_core::local::{self, Aggregation};
use wildreid_core::losses::{ArcFaceConfig, Mining, TripletConfig};
use wildreid_core::matcher::{self, IdentityDatabase, MatchConfig};
use wildreid_core::simgen::{self, SimSpec};
use wildreid_core::split::{self, SplitManifest, SplitMode};
use wildreid_core::train::{self, LossConfig, TrainConfig};

use crate::io::{
    emit, journal_path, read_catalog, read_descriptors, read_embeddings, read_text, require_output, write_atomic,
};

#[derive(Parser, Debug)]
#[command(name = "wildreid", version, about = "Wildlife re-identification toolkit", args_override_self = true)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "WILDREID_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Output file (output directory for `simgen`). Standard output when omitted, where allowed.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a metadata table into a catalog.
    Ingest(IngestArgs),
    /// Image and identity counts of a catalog.
    Stats {
        #[arg(long)]
        catalog: PathBuf,
    },
    /// Split a catalog into reference and query sides.
    Split(SplitArgs),
    /// Check a split manifest against its catalog.
    VerifySplit {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Nearest-neighbour identity prediction from embeddings.
    Match(MatchArgs),
    /// Identity prediction from local descriptors with the ratio test.
    LocalMatch(LocalMatchArgs),
    /// Choose a ratio-test threshold by leave-one-out accuracy.
    Calibrate(CalibrateArgs),
    /// Train a projection head and write the projected embeddings.
    TrainHead(TrainHeadArgs),
    /// Run a hyperparameter grid over datasets.
    Grid(GridArgs),
    /// Summary statistics of grid records.
    Aggregate(AggregateArgs),
    /// Dataset-by-method comparison table.
    Report(ReportArgs),
    /// Generate a synthetic dataset.
    Simgen(SimgenArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Dataset name for rows without a dataset column.
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "image_id")]
    image_id_col: String,
    #[arg(long, default_value = "identity")]
    identity_col: String,
    #[arg(long, default_value = "dataset")]
    dataset_col: String,
    #[arg(long, default_value = "timestamp")]
    timestamp_col: String,
    #[arg(long, default_value = "payload_ref")]
    payload_col: String,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Closed,
    Open,
    Disjoint,
    TimeAware,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// Fraction of query identities absent from the reference side (open mode).
    #[arg(long, default_value_t = 0.5)]
    new_fraction: f64,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Reference embeddings.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Catalog holding the identities of the reference images.
    #[arg(long)]
    catalog: PathBuf,
    /// Majority vote over the k nearest references instead of 1-NN.
    #[arg(long)]
    vote_k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregationArg {
    Image,
    Identity,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Image => Aggregation::ReferenceImage,
            AggregationArg::Identity => Aggregation::IdentitySum,
        }
    }
}

#[derive(Args, Debug)]
struct LocalMatchArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "image")]
    aggregation: AggregationArg,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Comma-separated candidate thresholds, increasing.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "image")]
    aggregation: AggregationArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Arcface,
    Triplet,
}

#[derive(Args, Debug)]
struct TrainHeadArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Train on the reference side of this split only.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: LossArg,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Defaults to 0.5 for ArcFace and 0.2 for Triplet.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, default_value_t = 64.0)]
    scale: f64,
    /// all, hard, semi or semi-band.
    #[arg(long, default_value = "all")]
    mining: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Per-epoch learning rate and loss.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Dataset directories, each with catalog.csv, embeddings.wdem and an
    /// optional manifest.txt (a closed 0.8 split otherwise).
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long)]
    records: PathBuf,
    /// setting, dataset, method or any axis name.
    #[arg(long, default_value = "method")]
    by: String,
    /// Also write box-plot data as JSON.
    #[arg(long)]
    boxplot: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "source")]
struct ReportSource {
    /// Table with a `dataset` column followed by one column per method.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Grid records; cells hold the best accuracy in percent.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    source: ReportSource,
    /// Axis spanning the columns when reading records.
    #[arg(long, default_value = "method")]
    columns: String,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
}

#[derive(Args, Debug)]
struct SimgenArgs {
    #[arg(long, default_value = "sim")]
    dataset: String,
    #[arg(long, default_value_t = 10)]
    identities: usize,
    #[arg(long, default_value_t = 30)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Cluster tightness; `inf` gives noiseless copies.
    #[arg(long, default_value_t = 50.0)]
    concentration: f64,
    /// Spread each identity's images over this many days.
    #[arg(long)]
    days: Option<u32>,
    /// Also write this many local descriptors per image.
    #[arg(long)]
    descriptors: Option<usize>,
    #[arg(long, default_value_t = 32)]
    descriptor_dim: usize,
}

struct Ctx {
    seed: u64,
    output: Option<PathBuf>,
}

impl Ctx {
    fn output(&self) -> Option<&Path> {
        self.output.as_deref()
    }
}

fn delimiter(c: char) -> Result<u8> {
    u8::try_from(c).ok().filter(u8::is_ascii).with_context(|| format!("delimiter `{c}` is not ASCII"))
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let schema = Schema {
        image_id: a.image_id_col.clone(),
        identity: a.identity_col.clone(),
        dataset: Some(a.dataset_col.clone()),
        timestamp: Some(a.timestamp_col.clone()),
        payload_ref: Some(a.payload_col.clone()),
        delimiter: delimiter(a.delimiter)?,
    };
    let cat =
        catalog::ingest(&a.metadata, &a.name, &schema).with_context(|| format!("reading {}", a.metadata.display()))?;
    log::info!("{} images", cat.len());
    emit(ctx.output(), |w| Ok(catalog::emit(&cat, w, b',')?))
}

fn stats(ctx: &Ctx, path: &Path) -> Result<()> {
    let s = catalog::stats(&read_catalog(path)?)?;
    emit(ctx.output(), |w| Ok(catalog::write_stats(&s, w, b',')?))
}

fn split_cmd(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let cat = read_catalog(&a.catalog)?;
    let mode = match a.mode {
        ModeArg::Closed => SplitMode::ClosedSet,
        ModeArg::Open => SplitMode::OpenSet { new_identity_fraction: a.new_fraction },
        ModeArg::Disjoint => SplitMode::DisjointSet,
        ModeArg::TimeAware => SplitMode::TimeAware,
    };
    let manifest = split::split(&cat, mode, a.ratio, ctx.seed)?;
    log::info!("{} reference and {} query images", manifest.train_ids.len(), manifest.test_ids.len());
    emit(ctx.output(), |w| Ok(w.write_all(manifest.to_text().as_bytes())?))
}

fn verify_split(ctx: &Ctx, catalog: &Path, manifest: &Path) -> Result<()> {
    let cat = read_catalog(catalog)?;
    let manifest = SplitManifest::from_text(&read_text(manifest)?)?;
    let violations = split::verify(&manifest, &cat)?;
    let mut text = String::new();
    for v in &violations {
        text.push_str(&format!("{v}\n"));
    }
    if violations.is_empty() {
        text.push_str("ok\n");
    }
    emit(ctx.output(), |w| Ok(w.write_all(text.as_bytes())?))?;
    if !violations.is_empty() {
        bail!("split has {} violations, first: {}", violations.len(), violations[0]);
    }
    Ok(())
}

fn match_cmd(ctx: &Ctx, a: &MatchArgs) -> Result<()> {
    let cat = read_catalog(&a.catalog)?;
    let reference = read_embeddings(&a.db)?;
    let query = read_embeddings(&a.query)?;
    let labels = cat.identities_for(reference.row_ids())?;
    let db = IdentityDatabase::build(&reference, labels)?;
    let predictions = matcher::match_with(&db, &query, MatchConfig { vote_k: a.vote_k })?;
    if let Ok(truth) = cat.identities_for(query.row_ids()) {
        log::info!("top-1 accuracy {}", matcher::evaluate(&predictions, &truth)?);
    }
    emit(ctx.output(), |w| Ok(matcher::write_predictions(&predictions, w, b',')?))
}

fn local_match(ctx: &Ctx, a: &LocalMatchArgs) -> Result<()> {
    let cat = read_catalog(&a.catalog)?;
    let (_, references) = read_descriptors(&a.db)?;
    let (_, queries) = read_descriptors(&a.query)?;
    let ref_ids: Vec<String> = references.iter().map(|r| r.image_id().to_string()).collect();
    let identities = cat.identities_for(&ref_ids)?;
    let tallies = local::tally_all(&queries, &references, a.threshold)?;
    let predictions = tallies
        .iter()
        .map(|t| local::predict_identity(t, &identities, a.aggregation.into()))
        .collect::<Result<Vec<_>, _>>()?;
    emit(ctx.output(), |w| Ok(local::write_local_predictions(&predictions, w, b',')?))
}

fn calibrate(ctx: &Ctx, a: &CalibrateArgs) -> Result<()> {
    let cat = read_catalog(&a.catalog)?;
    let (_, references) = read_descriptors(&a.db)?;
    let ref_ids: Vec<String> = references.iter().map(|r| r.image_id().to_string()).collect();
    let identities = cat.identities_for(&ref_ids)?;
    let grid = a.grid.clone().unwrap_or_else(local::default_grid);
    let cal = local::calibrate_threshold(&references, &identities, &grid, a.aggregation.into())?;
    log::info!("selected threshold {}", cal.threshold);
    emit(ctx.output(), |w| Ok(local::write_calibration(&cal, w, b',')?))
}

fn train_head(ctx: &Ctx, a: &TrainHeadArgs) -> Result<()> {
    let cat = read_catalog(&a.catalog)?;
    let features = read_embeddings(&a.features)?;
    let train_set = match &a.manifest {
        Some(path) => {
            let manifest = SplitManifest::from_text(&read_text(path)?)?;
            let rows: std::collections::HashMap<&str, usize> =
                features.row_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let positions = manifest
                .train_ids
                .iter()
                .map(|id| rows.get(id.as_str()).copied().with_context(|| format!("no embedding for image `{id}`")))
                .collect::<Result<Vec<_>>>()?;
            features.select(&positions)?
        }
        None => features.clone(),
    };
    let labels = cat.identities_for(train_set.row_ids())?;
    let loss = match a.loss {
        LossArg::Arcface => LossConfig::ArcFace(ArcFaceConfig { margin: a.margin.unwrap_or(0.5), scale: a.scale }),
        LossArg::Triplet => {
            LossConfig::Triplet(TripletConfig { margin: a.margin.unwrap_or(0.2), mining: a.mining.parse::<Mining>()? })
        }
    };
    let cfg = TrainConfig {
        momentum: a.momentum,
        epochs: a.epochs,
        batch_size: a.batch_size,
        embedding_dim: a.embedding_dim,
        seed: ctx.seed,
        ..TrainConfig::new(loss, a.lr)
    };
    let head = train::train_head(&train_set, &labels, &cfg)?;
    if let Some(last) = head.trace.last() {
        log::info!("final mean loss {}", last.mean_loss);
    }
    let projected = head.project(&features)?;
    if let Some(path) = &a.trace {
        write_atomic(path, |w| Ok(train::write_trace(&head.trace, w, b',')?))?;
    }
    let out = require_output(ctx.output(), "train-head")?;
    write_atomic(out, |w| Ok(projected.write_to(w)?))
}

fn load_dataset(dir: &Path, seed: u64) -> Result<GridDataset> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .with_context(|| format!("dataset path {} has no name", dir.display()))?;
    let cat = catalog::ingest(&dir.join("catalog.csv"), &name, &Schema::default())
        .with_context(|| format!("reading catalog of {name}"))?;
    let features = read_embeddings(&dir.join("embeddings.wdem"))?;
    let manifest_path = dir.join("manifest.txt");
    let manifest = if manifest_path.exists() {
        SplitManifest::from_text(&read_text(&manifest_path)?).with_context(|| format!("manifest of {name}"))?
    } else {
        split::split(&cat, SplitMode::ClosedSet, 0.8, seed).with_context(|| format!("splitting {name}"))?
    };
    Ok(GridDataset { name, catalog: cat, features, manifest })
}

/// Complete lines of an interrupted run's journal.
fn read_journal(path: &Path) -> Result<Vec<grid::RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_text(path)?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    Ok(grid::read_records(complete.as_bytes())?)
}

fn grid_cmd(ctx: &Ctx, a: &GridArgs) -> Result<()> {
    let out = require_output(ctx.output(), "grid")?;
    let spec = GridSpec::parse(&read_text(&a.spec)?).with_context(|| format!("grid spec {}", a.spec.display()))?;
    log::info!("{} settings", spec.count());
    let datasets = a.datasets.iter().map(|d| load_dataset(d, ctx.seed)).collect::<Result<Vec<_>>>()?;

    let journal = journal_path(out);
    let previous = read_journal(&journal)?;
    if !previous.is_empty() {
        log::info!("resuming with {} finished runs", previous.len());
    }
    // drop any torn last line before appending
    write_atomic(&journal, |w| Ok(grid::write_records(&previous, w)?))?;
    let sink = Mutex::new(OpenOptions::new().create(true).append(true).open(&journal)?);
    let on_record = |r: &grid::RunRecord| {
        let mut f = sink.lock().expect("journal lock");
        if let Err(e) = grid::write_records(std::slice::from_ref(r), &mut *f) {
            log::warn!("journal write failed: {e}");
        }
    };
    let records = grid::run_grid(&spec, &datasets, &RayonExecutor::default(), ctx.seed, &previous, &on_record)?;
    drop(sink);
    let n_div = records.iter().filter(|r| r.diverged).count();
    log::info!("{} runs, {} diverged", records.len(), n_div);
    write_atomic(out, |w| Ok(grid::write_records(&records, w)?))?;
    fs::remove_file(&journal)?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<grid::RunRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(grid::read_records(BufReader::new(f))?)
}

fn aggregate(ctx: &Ctx, a: &AggregateArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let by: GroupBy = a.by.parse()?;
    let groups = grid::aggregate(&records, &by);
    if let Some(path) = &a.boxplot {
        let doc = grid::boxplot_json(&groups);
        write_atomic(path, |w| Ok(w.write_all(doc.as_bytes())?))?;
    }
    emit(ctx.output(), |w| Ok(grid::write_aggregates(&groups, w, b',')?))
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let table = match (&a.source.table, &a.source.records) {
        (Some(path), _) => {
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            ReportTable::from_csv(BufReader::new(f), b',')?
        }
        (None, Some(path)) => ReportTable::from_records(&read_records(path)?, &a.columns)?,
        (None, None) => bail!("report needs --table or --records"),
    };
    emit(ctx.output(), |w| match a.format {
        FormatArg::Markdown => Ok(w.write_all(table.to_markdown().as_bytes())?),
        FormatArg::Csv => Ok(table.write_csv(w, b',')?),
    })
}

fn simgen_cmd(ctx: &Ctx, a: &SimgenArgs) -> Result<()> {
    let dir = require_output(ctx.output(), "simgen")?;
    let spec = SimSpec {
        dataset: a.dataset.clone(),
        days: a.days,
        ..SimSpec::new(a.identities, a.images, a.dim, a.concentration, ctx.seed)
    };
    let (cat, embeddings) = simgen::gen_embeddings(&spec)?;
    let descriptors = match a.descriptors {
        Some(k) => Some(simgen::gen_descriptors(&SimSpec { dim: a.descriptor_dim, ..spec.clone() }, k)?.1),
        None => None,
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("catalog.csv"), |w| Ok(catalog::emit(&cat, w, b',')?))?;
    write_atomic(&dir.join("embeddings.wdem"), |w| Ok(embeddings.write_to(w)?))?;
    if let Some(sets) = descriptors {
        write_atomic(&dir.join("descriptors.wdds"), |w| Ok(local::write_descriptors(&sets, a.descriptor_dim, w)?))?;
    }
    log::info!("{} identities, {} images", a.identities, cat.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(usize::from(n)).build_global()?;
    }
    let ctx = Ctx { seed: cli.seed, output: cli.output };
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Stats { catalog } => stats(&ctx, catalog),
        Command::Split(a) => split_cmd(&ctx, a),
        Command::VerifySplit { catalog, manifest } => verify_split(&ctx, catalog, manifest),
        Command::Match(a) => match_cmd(&ctx, a),
        Command::LocalMatch(a) => local_match(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::TrainHead(a) => train_head(&ctx, a),
        Command::Grid(a) => grid_cmd(&ctx, a),
        Command::Aggregate(a) => aggregate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Simgen(a) => simgen_cmd(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

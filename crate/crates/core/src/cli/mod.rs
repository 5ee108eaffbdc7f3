//! The `curatree` command line.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 internal
//! invariant violation. Failures print one `key=value` line on stderr:
//! `error=<Kind> exit=<code> message="<text>"`.

mod manifest;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::batches::{self, BatchMode, CuratedTiles, ObservationLedger, StratifiedBatcher};
use crate::diagnostics::{self, SynthParams};
use crate::exec;
use crate::kmeans::{KMeansConfig, Seeding};
use crate::sampler::{self, Target};
use crate::store;
use crate::tree::{self, TreeConfig};

pub use manifest::{file_digest, manifest_path, RunManifest};

pub const THREADS_ENV: &str = "CURATREE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "curatree", version, about = "Hierarchical k-means data curation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic heavy-tailed Gaussian mixture as an embedding file.
    Generate(GenerateArgs),
    /// Build a hierarchical k-means tree from an embedding file.
    BuildTree(BuildTreeArgs),
    /// Print the level structure of a tree file.
    Inspect(InspectArgs),
    /// Draw a curated subset from a tree.
    Sample(SampleArgs),
    /// Plan training batches over a curated subset.
    Batches(BatchesArgs),
    /// Diagnostics as CSV.
    #[command(subcommand)]
    Stats(StatsCommand),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub points: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub components: usize,
    #[arg(long, default_value_t = 1.2)]
    pub tail: f64,
    #[arg(long, default_value_t = 10.0)]
    pub mean_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub component_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Generating component per row, one integer per line.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SeedingArg {
    PlusPlus,
    RandomRows,
    MaxMin,
}

impl From<SeedingArg> for Seeding {
    fn from(s: SeedingArg) -> Self {
        match s {
            SeedingArg::PlusPlus => Seeding::PlusPlus,
            SeedingArg::RandomRows => Seeding::RandomRows,
            SeedingArg::MaxMin => Seeding::MaxMin,
        }
    }
}

#[derive(Args, Debug)]
pub struct BuildTreeArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Cluster counts bottom-up, e.g. 3500,350,35,7.
    #[arg(long, value_delimiter = ',', required = true)]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "plus-plus")]
    pub seeding: SeedingArg,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Omit centroid payloads from the tree file.
    #[arg(long)]
    pub no_centroids: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub tree: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub level: usize,
    #[arg(long, conflicts_with = "size", required_unless_present = "size")]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub size: Option<u64>,
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Stratified,
    Random,
}

#[derive(Args, Debug)]
pub struct BatchesArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub subset: PathBuf,
    #[arg(long)]
    pub batch_size: usize,
    #[arg(long)]
    pub num_batches: usize,
    #[arg(long, value_enum, default_value = "stratified")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ledger_out: PathBuf,
    /// Resume stratified planning from a ledger checkpoint.
    #[arg(long)]
    pub resume_ledger: Option<PathBuf>,
    /// Index of the first planned batch when resuming.
    #[arg(long, default_value_t = 0)]
    pub start_batch: usize,
}

#[derive(Subcommand, Debug)]
pub enum StatsCommand {
    /// TV against uniform for curated subsets over several fractions.
    TvCurve(TvCurveArgs),
    /// Adjusted Rand index between two label files.
    Ari(AriArgs),
    /// Cluster sizes at one level.
    Sizes(LevelArgs),
    /// Cluster id of every row at one level, one per line.
    Labels(LevelArgs),
}

#[derive(Args, Debug)]
pub struct TvCurveArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub sampling_level: usize,
    /// Defaults to the sampling level.
    #[arg(long)]
    pub measure_level: Option<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AriArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LevelArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub level: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure reported as a single parsable line.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.to_string(),
            code: 2,
            message: message.into(),
        }
    }

    fn invariant(message: impl Into<String>) -> Self {
        CliError {
            kind: "InvariantViolation".into(),
            code: 4,
            message: message.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "error={} exit={} message={:?}",
            self.kind,
            self.code,
            self.message.replace('\n', " ")
        )
    }
}

/// Variant name from a Debug rendering, looking through wrapper variants.
fn kind_of(debug: &str) -> String {
    let mut s = debug;
    for wrapper in ["KMeans(", "Tree(", "Sample(", "Mismatch("] {
        if let Some(rest) = s.strip_prefix(wrapper) {
            s = rest;
        }
    }
    s.chars().take_while(|c| c.is_alphanumeric()).collect()
}

macro_rules! cli_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                let kind = kind_of(&format!("{e:?}"));
                let code = if kind == "Io" { 3 } else { 2 };
                CliError { kind, code, message: e.to_string() }
            }
        }
    )*};
}

cli_error_from!(
    store::StoreError,
    crate::tree::TreeError,
    crate::sampler::SampleError,
    crate::batches::BatchError,
    diagnostics::DiagError,
    diagnostics::AriError,
    diagnostics::SynthError
);

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        let code = if e.kind() == io::ErrorKind::NotFound { 2 } else { 3 };
        let kind = if code == 2 { "NotFound" } else { "Io" };
        CliError {
            kind: kind.into(),
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError {
        kind: "Io".into(),
        code: 3,
        message: format!("{}: {e}", path.display()),
    })?))
}

/// Run `body` against `--out` or stdout. A file output gets a manifest.
fn emit(
    out: Option<&Path>,
    manifest: &mut RunManifest,
    started: Instant,
    body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> CliResult {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            body(&mut w)?;
            w.flush()?;
            finish(manifest, started, p)?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn finish(manifest: &mut RunManifest, started: Instant, artifact: &Path) -> CliResult {
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write_for(artifact)?;
    Ok(())
}

/// The flag spelling of a value, e.g. `plus-plus`.
fn value_name(v: impl ValueEnum) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

fn read_labels(path: &Path) -> CliResult<Vec<u64>> {
    let f = File::open(path).map_err(|e| CliError::validation("NotFound", format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<u64>().map_err(|e| {
            CliError::validation(
                "MalformedLabels",
                format!("{} line {}: {e}", path.display(), i + 1),
            )
        })?);
    }
    Ok(out)
}

fn write_labels(labels: &[u32], w: &mut dyn Write) -> io::Result<()> {
    for l in labels {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> CliResult {
    let started = Instant::now();
    let params = SynthParams {
        num_points: a.points,
        dim: a.dim,
        num_components: a.components,
        tail_exponent: a.tail,
        mean_scale: a.mean_scale,
        component_std: a.component_std,
        seed: a.seed,
    };
    let (m, labels) = diagnostics::generate_heavy_tailed(&params)?;
    store::write_embeddings(&a.out, &m)?;
    let mut man = RunManifest::new("generate");
    man.set("points", a.points)
        .set("dim", a.dim)
        .set("components", a.components)
        .set("tail", a.tail)
        .set("mean_scale", a.mean_scale)
        .set("component_std", a.component_std);
    man.seed = Some(a.seed);
    finish(&mut man, started, &a.out)?;
    if let Some(lp) = &a.labels_out {
        let mut w = create(lp)?;
        write_labels(&labels, &mut w)?;
        w.flush()?;
        man.write_for(lp)?;
    }
    println!("wrote {} rows of dim {} to {}", m.count(), m.dim(), a.out.display());
    Ok(())
}

fn cmd_build_tree(a: &BuildTreeArgs) -> CliResult {
    let started = Instant::now();
    let km = KMeansConfig {
        k: 1,
        max_iters: a.max_iters,
        tol: a.tol,
        seed: a.seed,
        seeding: a.seeding.into(),
        exec: exec::Exec::default(),
    };
    let cfg = TreeConfig::new(a.levels.clone(), km);
    // cheap checks before reading a large file
    if let Err(e) = cfg.validate(usize::MAX) {
        return Err(e.into());
    }
    let data = store::load_embeddings(&a.embeddings, a.normalize)?;
    let t = tree::build_tree(&data, &cfg)?;
    let t = if a.no_centroids { t.without_centroids() } else { t };
    tree::save_tree(&t, &a.out)?;

    let mut man = RunManifest::new("build-tree");
    man.set("levels", &a.levels)
        .set("normalize", a.normalize)
        .set("seeding", value_name(a.seeding))
        .set("max_iters", a.max_iters)
        .set("tol", a.tol)
        .set("no_centroids", a.no_centroids);
    man.seed = Some(a.seed);
    man.input(&a.embeddings)?;
    finish(&mut man, started, &a.out)?;

    println!("rows={} dim={} depth={}", t.count(), t.dim(), t.depth());
    print_levels(&t);
    Ok(())
}

fn print_levels(t: &tree::ClusterTree) {
    println!("level,clusters,min_size,max_size,mean_size,cv");
    for s in t.level_summaries() {
        println!(
            "{},{},{},{},{},{}",
            s.level,
            s.clusters,
            s.min,
            s.max,
            diagnostics::format_sig(s.mean, 12),
            diagnostics::format_sig(s.cv, 12)
        );
    }
}

fn cmd_inspect(a: &InspectArgs) -> CliResult {
    let t = tree::load_tree(&a.tree)?;
    println!(
        "rows={} dim={} depth={} centroids={}",
        t.count(),
        t.dim(),
        t.depth(),
        t.has_centroids()
    );
    print_levels(&t);
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> CliResult {
    let started = Instant::now();
    let t = tree::load_tree(&a.tree)?;
    let target = match (a.fraction, a.size) {
        (Some(f), None) => Target::Fraction(f),
        (None, Some(n)) => Target::Size(n),
        _ => return Err(CliError::validation("InvalidTarget", "give exactly one of --fraction, --size")),
    };
    let s = sampler::sample_subset(&t, a.level, target, a.seed, a.exact)?;
    s.validate_against(&t)
        .map_err(|e| CliError::invariant(format!("sampled subset inconsistent with tree: {e}")))?;
    sampler::subset_save(&s, &a.out)?;

    let mut man = RunManifest::new("sample");
    man.set("level", a.level)
        .set("fraction", a.fraction)
        .set("size", a.size)
        .set("exact", a.exact);
    man.seed = Some(a.seed);
    man.input(&a.tree)?;
    finish(&mut man, started, &a.out)?;

    let counts = diagnostics::level_counts_of_rows(&t, a.level, &s.row_indices)?;
    let tv = if s.is_empty() {
        "nan".to_string()
    } else {
        diagnostics::format_sig(diagnostics::tv_of_counts(&counts)?, 12)
    };
    println!("target={} achieved={} tv_level{}={}", s.target, s.achieved(), a.level, tv);
    Ok(())
}

fn cmd_batches(a: &BatchesArgs) -> CliResult {
    let started = Instant::now();
    let t = tree::load_tree(&a.tree)?;
    let subset = sampler::subset_load(&a.subset, Some(t.count() as u64))?;
    let tiles = CuratedTiles::top_level(&subset, &t)?;
    let (plan_batches, ledger, deficits) = match a.mode {
        ModeArg::Stratified => {
            let ledger = match &a.resume_ledger {
                Some(p) => ObservationLedger::load(p, &tiles)?,
                None => ObservationLedger::new(&tiles),
            };
            let mut it = StratifiedBatcher::resume(&tiles, ledger, a.batch_size, a.seed, a.start_batch)?;
            let bs: Vec<_> = it.by_ref().take(a.num_batches).collect();
            let (ledger, deficits) = it.into_parts();
            (bs, ledger, deficits)
        }
        ModeArg::Random => {
            let (plan, ledger) = batches::plan_random(&tiles, a.batch_size, a.num_batches, a.seed)?;
            (plan.batches, ledger, Vec::new())
        }
    };
    if matches!(a.mode, ModeArg::Stratified) && ledger.max_spread() > 1 {
        return Err(CliError::invariant("observation counts spread by more than one within a cluster"));
    }
    batches::save_batches(&plan_batches, &a.out)?;
    ledger.save(&a.ledger_out)?;

    let mut man = RunManifest::new("batches");
    man.set("batch_size", a.batch_size)
        .set("num_batches", a.num_batches)
        .set("mode", value_name(a.mode))
        .set("ledger_out", a.ledger_out.display().to_string())
        .set("start_batch", a.start_batch);
    man.seed = Some(a.seed);
    man.input(&a.tree)?.input(&a.subset)?;
    if let Some(p) = &a.resume_ledger {
        man.input(p)?;
    }
    finish(&mut man, started, &a.out)?;
    man.write_for(&a.ledger_out)?;

    let mode = match a.mode {
        ModeArg::Stratified => BatchMode::Stratified,
        ModeArg::Random => BatchMode::Random,
    };
    let clusters = ledger.cluster_index().len();
    println!(
        "mode={:?} batches={} batch_size={} clusters={} tiles={}",
        mode,
        plan_batches.len(),
        a.batch_size,
        clusters,
        tiles.len()
    );
    if let Some(first) = plan_batches.first() {
        let mut hist = std::collections::BTreeMap::new();
        for &q in first.composition.values() {
            *hist.entry(q).or_insert(0usize) += 1;
        }
        let parts: Vec<String> = hist.iter().map(|(q, n)| format!("{q}x{n}")).collect();
        println!("first_batch_quotas={}", parts.join(" "));
    }
    let rep = batches::ledger_report(&ledger);
    println!(
        "coverage={} multiplicity={} observations={} deficit_events={}",
        diagnostics::format_sig(rep.coverage, 12),
        rep.multiplicity,
        rep.total,
        deficits.len()
    );
    Ok(())
}

fn cmd_stats(c: &StatsCommand) -> CliResult {
    let started = Instant::now();
    match c {
        StatsCommand::TvCurve(a) => {
            let t = tree::load_tree(&a.tree)?;
            let measure = a.measure_level.unwrap_or(a.sampling_level);
            let curve = diagnostics::tv_curve(&t, a.sampling_level, measure, &a.fractions, a.seed)?;
            let mut man = RunManifest::new("stats tv-curve");
            man.set("sampling_level", a.sampling_level)
                .set("measure_level", measure)
                .set("fractions", &a.fractions);
            man.seed = Some(a.seed);
            man.input(&a.tree)?;
            emit(a.out.as_deref(), &mut man, started, |w| {
                diagnostics::write_tv_curve(&curve, w)
            })
        }
        StatsCommand::Ari(a) => {
            let la = read_labels(&a.a)?;
            let lb = read_labels(&a.b)?;
            let ari = diagnostics::adjusted_rand_index(&la, &lb)?;
            let mut man = RunManifest::new("stats ari");
            man.input(&a.a)?.input(&a.b)?;
            emit(a.out.as_deref(), &mut man, started, |w| {
                writeln!(w, "n,ari")?;
                writeln!(w, "{},{}", la.len(), diagnostics::format_sig(ari, 12))
            })
        }
        StatsCommand::Sizes(a) => {
            let t = tree::load_tree(&a.tree)?;
            let rows = diagnostics::cluster_size_histogram(&t, a.level)?;
            let mut man = RunManifest::new("stats sizes");
            man.set("level", a.level);
            man.input(&a.tree)?;
            emit(a.out.as_deref(), &mut man, started, |w| {
                diagnostics::write_size_histogram(&rows, w)
            })
        }
        StatsCommand::Labels(a) => {
            let t = tree::load_tree(&a.tree)?;
            let labels = t.row_labels(a.level)?;
            let mut man = RunManifest::new("stats labels");
            man.set("level", a.level);
            man.input(&a.tree)?;
            emit(a.out.as_deref(), &mut man, started, |w| write_labels(&labels, w))
        }
    }
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::BuildTree(a) => cmd_build_tree(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Batches(a) => cmd_batches(a),
        Command::Stats(s) => cmd_stats(s),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::validation("InvalidArguments", first).line());
            return 2;
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.trim().parse::<usize>() {
            Ok(n) => {
                exec::init_threads(n);
            }
            Err(_) => {
                eprintln!(
                    "{}",
                    CliError::validation("InvalidEnvironment", format!("{THREADS_ENV}={v:?} is not an integer")).line()
                );
                return 2;
            }
        }
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code
        }
    }
}

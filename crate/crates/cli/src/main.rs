use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use fragdiff_core::align::{self, SelectionRule};
use fragdiff_core::diffusion::{self, DiffusionConfig, ScoreTable};
use fragdiff_core::features::{self, SynthParams};
use fragdiff_core::graph::{self, Partition};
use fragdiff_core::metrics;
use fragdiff_core::patch::{self, Extent, PadPolicy, PatchIndex, TilingLayout};
use fragdiff_core::pipeline::{self, CommandTrainer, RunConfig};
use fragdiff_core::pseudolabel::{self, DatasetSources, WeightSchedule};
use fragdiff_core::raster::DirStore;
use fragdiff_core::scenario::{self, ScenarioParams, StubMode};
use fragdiff_core::{AffinityGraph, Domain, Raster};

#[derive(Parser)]
#[command(name = "fragdiff", version, about = "Cross-domain fragment diffusion for crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut every `<image>.fgr` raster of a directory into sliding-window patches.
    Patchify(PatchifyArgs),
    /// Feature manifest utilities.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
    /// Affinity graph utilities.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Score queries against the gallery by diffusion.
    Diffuse(DiffuseArgs),
    /// Rank-1 matches per query, filtered by a selection rule.
    Align(AlignArgs),
    /// Fuse ground truth and predictions of matched pairs into a label dataset.
    Pseudolabel(PseudolabelArgs),
    /// Count errors of predicted against ground-truth density maps.
    Eval(EvalArgs),
    /// Run the iterative adaptation loop from a key = value config.
    Run(RunArgs),
    /// Write a synthetic two-domain scenario with a ready-to-run config.
    Scenario(ScenarioArgs),
    /// Check every journaled artifact of a run directory against its checksum.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
    #[command(hide = true)]
    StubTrainer(StubArgs),
}

fn parse_extent(v: &str) -> std::result::Result<Extent, String> {
    let err = || format!("expected N or HxW, got {v:?}");
    let (h, w) = match v.split_once(['x', 'X']) {
        Some((h, w)) => (h, w),
        None => (v, v),
    };
    Ok((h.trim().parse().map_err(|_| err())?, w.trim().parse().map_err(|_| err())?))
}

#[derive(Clone, Copy, ValueEnum)]
enum Pad {
    Edge,
    None,
}

#[derive(Args)]
struct PatchifyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "128", value_parser = parse_extent)]
    window: Extent,
    #[arg(long, default_value = "64", value_parser = parse_extent)]
    stride: Extent,
    #[arg(long, value_enum, default_value = "edge")]
    pad: Pad,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Load a manifest and its blob, reporting any inconsistency.
    Validate { manifest: PathBuf },
    /// Rescale every vector to unit norm.
    Normalize {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clustered two-domain features.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n_source: usize,
    #[arg(long, default_value_t = 200)]
    m_target: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 0.2)]
    shift: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the cluster label of every record, in record order.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Mutual-kNN affinity graph over all records.
    Build {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = graph::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = features::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerQuery,
    Batch,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Cg,
    Iterate,
    Truncated,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuerySide {
    Target,
    Source,
}

#[derive(Args)]
struct DiffuseArgs {
    #[arg(long)]
    graph: PathBuf,
    /// The feature manifest the graph was built from.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = diffusion::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "per-query")]
    mode: ModeArg,
    #[arg(long, default_value_t = diffusion::DEFAULT_NN)]
    nn: usize,
    #[arg(long, value_enum, default_value = "cg")]
    solver: SolverArg,
    #[arg(long, value_enum, default_value = "target")]
    queries: QuerySide,
    /// Truncation size for the truncated solver (default 5k).
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long, default_value_t = diffusion::DEFAULT_CG_TOL)]
    tol: f64,
    #[arg(long, default_value_t = diffusion::DEFAULT_CG_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = diffusion::DEFAULT_WALK_MAX_ITER)]
    walk_max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Threshold,
    TopPercent,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_enum, default_value = "threshold")]
    rule: RuleArg,
    #[arg(long, default_value_t = align::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = align::DEFAULT_TOP_PERCENT)]
    top_percent: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_wt(v: &str) -> std::result::Result<WeightSchedule, String> {
    if v == "auto" {
        return Ok(WeightSchedule::Auto);
    }
    v.parse()
        .map(WeightSchedule::Fixed)
        .map_err(|_| format!("expected auto or a number, got {v:?}"))
}

#[derive(Args)]
struct PseudolabelArgs {
    #[arg(long)]
    matches: PathBuf,
    /// Source ground-truth fragments.
    #[arg(long)]
    gt: PathBuf,
    /// Target prediction fragments.
    #[arg(long)]
    pred: PathBuf,
    /// Target image patches to copy next to the labels.
    #[arg(long)]
    patches: Option<PathBuf>,
    #[arg(long, default_value = "auto", value_parser = parse_wt)]
    wt: WeightSchedule,
    /// Iteration number; sets w_t under the auto schedule.
    #[arg(long, default_value_t = 1)]
    iteration: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Treat both directories as fragment stores and stitch each image from
    /// the non-overlapping tiling of its patches (needs --stride too).
    #[arg(long, value_parser = parse_extent, requires = "stride")]
    window: Option<Extent>,
    #[arg(long, value_parser = parse_extent, requires = "window")]
    stride: Option<Extent>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workspace: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    shift: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Trainer command written into the config; defaults to this binary's
    /// improving stub trainer.
    #[arg(long)]
    trainer: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StubKind {
    Copy,
    Improve,
}

#[derive(Args)]
struct StubArgs {
    #[arg(long, value_enum)]
    mode: StubKind,
    #[arg(long, required_if_eq("mode", "improve"))]
    scenario: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features_in: PathBuf,
    #[arg(long)]
    features_out: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

/// `*.fgr` files of a directory keyed by file stem, sorted.
fn rasters_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "fgr") {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct PatchListing {
    window: Extent,
    stride: Extent,
    image_count: usize,
    max_patches_per_image: usize,
    patches: Vec<PatchIndex>,
}

fn patchify(args: PatchifyArgs) -> Result<()> {
    let mut images = Vec::new();
    for (stem, path) in rasters_by_stem(&args.input)? {
        let id: u32 = stem
            .parse()
            .map_err(|_| anyhow!("{}: image files must be named <number>.fgr", path.display()))?;
        images.push((id, Raster::load(&path)?));
    }
    if images.is_empty() {
        bail!("no .fgr rasters in {}", args.input.display());
    }
    let pad = match args.pad {
        Pad::Edge => PadPolicy::Edge,
        Pad::None => PadPolicy::None,
    };
    let set = patch::patchify(&images, args.window, args.stride, pad)?;
    let store = DirStore::new(&args.out);
    for (index, raster) in &set.patches {
        store.put(index.id, raster)?;
    }
    write_json(
        &args.out.join("patches.json"),
        &PatchListing {
            window: set.window,
            stride: set.stride,
            image_count: set.image_count,
            max_patches_per_image: set.max_patches_per_image,
            patches: set.patches.iter().map(|(p, _)| *p).collect(),
        },
    )?;
    println!("{} patches from {} images", set.patches.len(), set.image_count);
    Ok(())
}

fn features_cmd(command: FeaturesCommand) -> Result<()> {
    match command {
        FeaturesCommand::Validate { manifest } => {
            let set = features::load(&manifest)?;
            let (s, t) = set.counts();
            set.unit_vectors()?;
            println!("ok: {} records ({s} source, {t} target), d = {}", set.len(), set.d());
        }
        FeaturesCommand::Normalize { manifest, out } => {
            let set = features::normalize(&features::load(&manifest)?)?;
            features::save(&set, &out)?;
            println!("wrote {} unit vectors to {}", set.len(), out.display());
        }
        FeaturesCommand::Synth(a) => {
            let synth = features::synth_two_domain(&SynthParams {
                n_source: a.n_source,
                m_target: a.m_target,
                d: a.d,
                clusters: a.clusters,
                domain_shift: a.shift,
                noise: a.noise,
                seed: a.seed,
            })?;
            features::save(&synth.set, &a.out)?;
            if let Some(path) = a.labels {
                write_json(&path, &synth.labels)?;
            }
            println!("wrote {} records to {}", synth.set.len(), a.out.display());
        }
    }
    Ok(())
}

fn graph_cmd(command: GraphCommand) -> Result<()> {
    let GraphCommand::Build { features, k, gamma, out } = command;
    let set = features::load(&features)?;
    let g = graph::build_mutual_knn(&set, k, gamma)?;
    g.save(&out)?;
    let d = g.diagnostics();
    println!("{} nodes, {} edges, {} isolated", g.node_count(), d.edges, d.isolated_nodes);
    Ok(())
}

fn diffuse_cmd(a: DiffuseArgs) -> Result<()> {
    let set = features::load(&a.features)?;
    let g = AffinityGraph::load(&a.graph)?;
    let query_domain = match a.queries {
        QuerySide::Target => Domain::Target,
        QuerySide::Source => Domain::Source,
    };
    let partition = Partition::by_domain(&g.domains, query_domain);
    let config = DiffusionConfig {
        alpha: a.alpha,
        mode: match a.mode {
            ModeArg::PerQuery => diffusion::Mode::PerQuery,
            ModeArg::Batch => diffusion::Mode::Batch,
        },
        solver: match a.solver {
            SolverArg::Cg => diffusion::Solver::Cg,
            SolverArg::Iterate => diffusion::Solver::Iterate,
            SolverArg::Truncated => diffusion::Solver::Truncated,
        },
        nn: a.nn,
        tol: a.tol,
        cg_max_iter: a.max_iter,
        walk_max_iter: a.walk_max_iter,
        truncation: a.truncation,
    };
    let run = diffusion::diffuse(&set, &g, &partition, &config)?;
    run.table.save(&a.out)?;
    if run.not_converged > 0 {
        warn!("not-converged: {} queries", run.not_converged);
    }
    println!(
        "{} query rows, {} scores, {} empty states",
        run.table.rows.len(),
        run.table.triple_count(),
        run.empty_states
    );
    Ok(())
}

fn align_cmd(a: AlignArgs) -> Result<()> {
    let table = ScoreTable::load(&a.scores)?;
    let rank1 = align::rank1_matches(&table)?;
    let rule = match a.rule {
        RuleArg::Threshold => SelectionRule::Threshold { lambda: a.lambda },
        RuleArg::TopPercent => SelectionRule::TopPercent { p: a.top_percent },
    };
    let kept = align::filter(&rank1.pairs, rule)?;
    align::write_matches(&a.out, &kept.pairs)?;
    println!(
        "{} rank-1 pairs, {} kept, {} unscored queries",
        rank1.pairs.len(),
        kept.pairs.len(),
        rank1.unscored.len()
    );
    Ok(())
}

fn pseudolabel_cmd(a: PseudolabelArgs) -> Result<()> {
    let matches = align::read_matches(&a.matches)?;
    let gt = DirStore::new(&a.gt);
    let pred = DirStore::new(&a.pred);
    let patches = a.patches.as_ref().map(DirStore::new);
    let sources = DatasetSources {
        gt: &gt,
        predictions: &pred,
        patches: patches.as_ref().map(|p| p as _),
    };
    let w_t = a.wt.weight(a.iteration);
    let manifest = pseudolabel::build_dataset(&matches, &sources, w_t, a.iteration, &a.out)?;
    let blank = manifest.entries.iter().filter(|e| e.max_phi < pseudolabel::LABEL_FLOOR).count();
    println!("{} labels at w_t = {w_t} ({blank} blank)", manifest.entries.len());
    Ok(())
}

fn image_counts(dir: &Path, tiling: Option<(Extent, Extent)>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    match tiling {
        None => {
            for (stem, path) in rasters_by_stem(dir)? {
                out.insert(stem, metrics::count(&Raster::load(&path)?));
            }
        }
        Some((window, stride)) => {
            let store = DirStore::new(dir);
            let mut by_image: BTreeMap<u32, Vec<_>> = BTreeMap::new();
            for id in store.ids()? {
                by_image.entry(id.image).or_default().push(id);
            }
            for (image, ids) in by_image {
                let mut counts = Vec::new();
                for p in patch::tiling_subset(&ids, window, stride)? {
                    counts.push((p, metrics::count(&Raster::load(&store.path_of(p.id))?)));
                }
                out.insert(image.to_string(), patch::stitch_counts(&counts, TilingLayout::tiles(window))?);
            }
        }
    }
    Ok(out)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let tiling = a.window.zip(a.stride);
    let preds = image_counts(&a.pred, tiling)?;
    let gts = image_counts(&a.gt, tiling)?;
    if gts.is_empty() {
        bail!("no ground-truth rasters in {}", a.gt.display());
    }
    let mut rows = Vec::with_capacity(gts.len());
    for (image, &gt) in &gts {
        let pred = *preds
            .get(image)
            .ok_or_else(|| anyhow!("no prediction for image {image} in {}", a.pred.display()))?;
        rows.push((image.clone(), pred, gt));
    }
    let report = metrics::evaluate(&rows)?;
    write_json(&a.report, &report)?;
    println!("{} images: MAE {:.4}, RMSE {:.4}", rows.len(), report.mae, report.rmse);
    Ok(())
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let trainer = CommandTrainer::new(config.trainer.clone())?;
    info!("run {} in {}", config.run_id(), a.workspace.display());
    let report = pipeline::run_pipeline(&config, &a.workspace, &trainer)?;
    for notice in &report.notices {
        println!("{notice}");
    }
    for rec in &report.records {
        let mae = rec.eval.as_ref().map_or("-".to_string(), |e| format!("{:.4}", e.mae));
        println!("t={} matches={} labels={} mae={mae}", rec.t, rec.counts.matches, rec.counts.labels);
    }
    if let Some(reason) = &report.stop_reason {
        println!("stopped: {reason}");
    }
    println!(
        "{}: {}/{} iterations",
        pipeline::run_dir(&config, &a.workspace).display(),
        report.iterations_completed,
        report.max_iterations
    );
    Ok(())
}

fn scenario_cmd(a: ScenarioArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let root = a.out.canonicalize()?;
    let trainer = match a.trainer {
        Some(t) => t,
        None => {
            let exe = std::env::current_exe()?;
            format!("\"{}\" stub-trainer --mode improve --scenario \"{}\"", exe.display(), root.display())
        }
    };
    let params = ScenarioParams {
        images: a.images,
        seed: a.seed,
        domain_shift: a.shift,
        noise: a.noise,
        ..ScenarioParams::default()
    };
    let s = scenario::write_scenario(&root, &params, &trainer)?;
    println!("{}", s.config.display());
    Ok(())
}

fn verify_cmd(run: &Path) -> Result<ExitCode> {
    let problems = pipeline::verify_run(run)?;
    if problems.is_empty() {
        println!("ok");
        return Ok(ExitCode::SUCCESS);
    }
    for p in &problems {
        println!("{p}");
    }
    Ok(ExitCode::FAILURE)
}

fn stub_cmd(a: StubArgs) -> Result<()> {
    let mode = match a.mode {
        StubKind::Copy => StubMode::Copy,
        StubKind::Improve => StubMode::Improve {
            scenario: a.scenario.expect("required by clap"),
        },
    };
    scenario::run_stub(&mode, &a.dataset, &a.features_in, &a.features_out)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Patchify(a) => patchify(a)?,
        Command::Features { command } => features_cmd(command)?,
        Command::Graph { command } => graph_cmd(command)?,
        Command::Diffuse(a) => diffuse_cmd(a)?,
        Command::Align(a) => align_cmd(a)?,
        Command::Pseudolabel(a) => pseudolabel_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Run(a) => run_cmd(a)?,
        Command::Scenario(a) => scenario_cmd(a)?,
        Command::Verify { run } => return verify_cmd(&run),
        Command::StubTrainer(a) => stub_cmd(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            match err.downcast_ref::<fragdiff_core::Error>() {
                Some(core) => eprintln!("error [{}]: {err:#}", core.code()),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use wmbench::client::{query_items, EndpointConfig, HttpTransport, ResponseSource, RESIZE_FILTER_NAME};
use wmbench::evaluate::{load_items, load_predictions, verify_corpus};
use wmbench::io::{read_json, read_jsonl, write_json, write_jsonl};
use wmbench::manifest::{EndpointInfo, ImagePreprocessing, RunManifest};
use wmbench::pipeline::{qa_stage, run_pipeline, sample_stage, PipelineConfig, TrajectorySamples};
use wmbench::server::{serve, AppState, PlannedAssignment};
use wmbench::store::AnswerStore;
use wmbench_core::agreement::{
    agreement_report, stratified_iaa_sample, CorpusEntry, IaaAssignment, UnitMode, DEFAULT_LEVEL, DEFAULT_RESAMPLES,
};
use wmbench_core::analysis::{analyze, SemanticCategoryMap};
use wmbench_core::qa::{EncodingMode, QaItem};
use wmbench_core::segment::{segment, RawTrajectory, SegmentedFrameSet, SignatureGrain};
use wmbench_core::synthetic::{kitchen_episode, segmentation_fixture, toggle_episode};
use wmbench_core::verify::{metrics_report, GroupKey, Verdict};

const DATA_DIR_ENV: &str = "ENACT_DATA_DIR";

#[derive(Parser)]
#[command(name = "wmbench", version, about = "Scene-graph world-modeling benchmark toolkit")]
struct Cli {
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reduce a raw trajectory to its key frames.
    Segment(SegmentArgs),
    /// Sample key-frame trajectories from segmented frame sets.
    Sample(SampleArgs),
    /// Build QA items from sampled trajectories.
    GenQa(GenQaArgs),
    /// Score predictions against the items.
    Verify(VerifyArgs),
    /// Aggregate verdicts into accuracy tables.
    Metrics(MetricsArgs),
    /// Categorize the errors in rejected predictions.
    Analyze(AnalyzeArgs),
    /// Inter-annotator agreement over an answer log.
    Iaa(IaaArgs),
    /// Draw a stratified re-annotation plan.
    IaaSample(IaaSampleArgs),
    /// Segment, sample and generate QA for a directory of trajectories.
    Run(RunArgs),
    /// Collect model answers into an answer log.
    Query(QueryArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Write the built-in synthetic trajectories.
    Synth,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    window: Option<u64>,
    /// Signature grain: component or category.
    #[arg(long, value_parser = parse_grain)]
    grain: Option<SignatureGrain>,
}

#[derive(Args)]
struct SampleArgs {
    /// Segmented frame set(s).
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Step range such as `3..10`.
    #[arg(long, value_parser = parse_steps)]
    steps: Option<(usize, usize)>,
    #[arg(long)]
    per_step: Option<usize>,
}

#[derive(Args)]
struct GenQaArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    encoding: Option<EncodingMode>,
    /// Allow unshuffled candidate lists.
    #[arg(long)]
    allow_identity: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    qa: PathBuf,
    /// Predictions file or answer log.
    #[arg(long)]
    pred: PathBuf,
    /// Only use this responder's lines.
    #[arg(long)]
    responder: Option<String>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    verdicts: PathBuf,
    /// Comma-separated grouping keys: steps, task.
    #[arg(long, value_delimiter = ',')]
    by: Vec<GroupKey>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    responder: Option<String>,
    /// JSON object from predicate to semantic category.
    #[arg(long)]
    semantic_map: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct IaaArgs {
    #[arg(long)]
    answers: PathBuf,
    #[arg(long, default_value = "slot")]
    unit: UnitMode,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct IaaSampleArgs {
    #[arg(long)]
    qa: PathBuf,
    /// Main-study answer log; each item's first annotator is its source.
    #[arg(long)]
    answers: PathBuf,
    #[arg(long, default_value_t = 2)]
    per_cell: usize,
    #[arg(long, value_parser = parse_steps, default_value = "3..10")]
    steps: (usize, usize),
}

#[derive(Args)]
struct RunArgs {
    /// Directory of trajectory JSON files, or a single file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_steps)]
    steps: Option<(usize, usize)>,
    #[arg(long)]
    per_step: Option<usize>,
    #[arg(long)]
    encoding: Option<EncodingMode>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    qa: PathBuf,
    /// Endpoint adapter config (TOML).
    #[arg(long, conflicts_with = "offline", required_unless_present = "offline")]
    endpoint: Option<PathBuf>,
    /// Read answers from a predictions file instead of an endpoint.
    #[arg(long)]
    offline: Option<PathBuf>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    responder: String,
    /// Image root; defaults to $ENACT_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Re-annotation plan; without it items are handed out first come.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Built annotation UI to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Image root; defaults to $ENACT_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn parse_steps(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => (lo, hi.trim_start_matches('=')),
        None => (s, s),
    };
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad step range {s:?}"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad step range {s:?}"))?;
    if lo > hi {
        return Err(format!("empty step range {s:?}"));
    }
    Ok((lo, hi))
}

fn parse_grain(s: &str) -> Result<SignatureGrain, String> {
    match s {
        "component" => Ok(SignatureGrain::Component),
        "category" => Ok(SignatureGrain::Category),
        _ => Err(format!("unknown grain {s:?}")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn data_dir(arg: Option<PathBuf>) -> Option<PathBuf> {
    arg.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn finish(mut manifest: RunManifest, output: &Path) -> Result<()> {
    manifest.outputs.push(output.to_owned());
    manifest.finish();
    let path = manifest.write_for(output)?;
    tracing::info!(manifest = %path.display(), "wrote");
    Ok(())
}

fn trajectory_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_owned()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no trajectory files in {}", input.display());
    }
    Ok(files)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Segment(a) => cmd_segment(&cli, cfg, a),
        Command::Sample(a) => cmd_sample(&cli, cfg, a),
        Command::GenQa(a) => cmd_gen_qa(&cli, cfg, a),
        Command::Verify(a) => cmd_verify(&cli, a),
        Command::Metrics(a) => cmd_metrics(&cli, a),
        Command::Analyze(a) => cmd_analyze(&cli, a),
        Command::Iaa(a) => cmd_iaa(&cli, cfg, a),
        Command::IaaSample(a) => cmd_iaa_sample(&cli, cfg, a),
        Command::Run(a) => cmd_run(&cli, cfg, a),
        Command::Query(a) => cmd_query(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth => cmd_synth(&cli),
    }
}

fn cmd_segment(cli: &Cli, mut cfg: PipelineConfig, a: &SegmentArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        cfg.segment.sim_threshold = t;
    }
    if let Some(w) = a.window {
        cfg.segment.window = w;
    }
    if let Some(g) = a.grain {
        cfg.segment.grain = g;
    }
    let raw: RawTrajectory = read_json(&a.input)?;
    let set = segment(&raw, &cfg.segment).with_context(|| format!("segmenting {}", a.input.display()))?;
    let out = out_path(cli, "segmented.json");
    write_json(&out, &set)?;
    tracing::info!(key_frames = set.len(), raw_frames = raw.frames.len(), "segmented");
    let mut m = RunManifest::start("segment").with_dataset(&a.input)?;
    m.seed = Some(cfg.seed);
    finish(m, &out)
}

fn cmd_sample(cli: &Cli, mut cfg: PipelineConfig, a: &SampleArgs) -> Result<()> {
    if let Some((lo, hi)) = a.steps {
        (cfg.min_steps, cfg.max_steps) = (lo, hi);
    }
    if let Some(q) = a.per_step {
        cfg.per_step = q;
    }
    cfg.validate()?;
    let mut all = Vec::new();
    for path in &a.input {
        let frames: SegmentedFrameSet = read_json(path)?;
        let s = sample_stage(&frames, cfg.steps(), cfg.per_step, cfg.seed)
            .with_context(|| format!("sampling {}", path.display()))?;
        all.push(s);
    }
    let out = out_path(cli, "trajectories.json");
    write_json(&out, &all)?;
    let mut m = RunManifest::start("sample");
    m.seed = Some(cfg.seed);
    finish(m, &out)
}

fn cmd_gen_qa(cli: &Cli, mut cfg: PipelineConfig, a: &GenQaArgs) -> Result<()> {
    if let Some(e) = a.encoding {
        cfg.encoding = e;
    }
    cfg.allow_identity |= a.allow_identity;
    let samples: Vec<TrajectorySamples> = read_json(&a.trajectories)?;
    let mut items = Vec::new();
    for s in &samples {
        let qa = qa_stage(s, cfg.encoding, cfg.allow_identity, cfg.seed)
            .with_context(|| format!("generating QA for {}", s.trajectory_id))?;
        for sk in &qa.skipped {
            tracing::warn!(id = %sk.id, reason = %sk.reason, "skipped item");
        }
        items.extend(qa.items);
    }
    let out = out_path(cli, "qa.jsonl");
    write_jsonl(&out, &items)?;
    tracing::info!(items = items.len(), "wrote QA items");
    let mut m = RunManifest::start("gen-qa").with_dataset(&a.trajectories)?;
    m.seed = Some(cfg.seed);
    m.encoding = Some(cfg.encoding);
    finish(m, &out)
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> Result<()> {
    let items = load_items(&a.qa)?;
    let preds = load_predictions(&a.pred, a.responder.as_deref())?;
    let verdicts = verify_corpus(&items, &preds);
    let accepted = verdicts.iter().filter(|v| v.accepted).count();
    let out = out_path(cli, "verdicts.jsonl");
    write_jsonl(&out, &verdicts)?;
    println!("{accepted}/{} accepted", verdicts.len());
    let mut m = RunManifest::start("verify").with_dataset(&a.qa)?;
    m.responder = a.responder.clone();
    finish(m, &out)
}

fn cmd_metrics(cli: &Cli, a: &MetricsArgs) -> Result<()> {
    let verdicts: Vec<Verdict> = read_jsonl(&a.verdicts)?;
    let report = metrics_report(&verdicts, &a.by)?;
    match &cli.out {
        Some(out) => {
            write_json(out, &report)?;
            finish(RunManifest::start("metrics").with_dataset(&a.verdicts)?, out)
        }
        None => {
            print!("{}", wmbench_core::scenegraph::canonical_json(&report));
            Ok(())
        }
    }
}

fn cmd_analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<()> {
    let items = load_items(&a.qa)?;
    let preds = load_predictions(&a.pred, a.responder.as_deref())?;
    let map = match &a.semantic_map {
        Some(p) => read_json(p)?,
        None => SemanticCategoryMap::default(),
    };
    let (records, report) = analyze(&items, &preds, &map)?;
    let out = out_path(cli, "errors.jsonl");
    write_jsonl(&out, &records)?;
    let report_path = a.report.clone().unwrap_or_else(|| out.with_file_name("analysis_report.json"));
    write_json(&report_path, &report)?;
    tracing::info!(errors = records.len(), report = %report_path.display(), "analysis written");
    let mut m = RunManifest::start("analyze").with_dataset(&a.qa)?;
    m.responder = a.responder.clone();
    m.outputs.push(report_path);
    finish(m, &out)
}

fn annotations(path: &Path) -> Result<Vec<wmbench_core::agreement::AnnotationRecord>> {
    let records: Vec<wmbench::store::AnswerRecord> = read_jsonl(path)?;
    let mut out = Vec::new();
    for r in &records {
        match r.annotation() {
            Some(a) => out.push(a),
            None => tracing::warn!(item = %r.item_id, responder = %r.responder_id, "answer without a permutation ignored"),
        }
    }
    Ok(out)
}

fn cmd_iaa(cli: &Cli, cfg: PipelineConfig, a: &IaaArgs) -> Result<()> {
    let records = annotations(&a.answers)?;
    let report = agreement_report(&records, a.unit, a.resamples, a.level, cfg.seed)?;
    let out = a.report.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("iaa.json"));
    write_json(&out, &report)?;
    println!(
        "alpha = {:.4} [{:.4}, {:.4}] over {} items",
        report.alpha, report.ci_low, report.ci_high, report.items
    );
    let mut m = RunManifest::start("iaa").with_dataset(&a.answers)?;
    m.seed = Some(cfg.seed);
    finish(m, &out)
}

fn cmd_iaa_sample(cli: &Cli, cfg: PipelineConfig, a: &IaaSampleArgs) -> Result<()> {
    let items: BTreeMap<String, QaItem> = load_items(&a.qa)?.into_iter().map(|i| (i.id.clone(), i)).collect();
    let records: Vec<wmbench::store::AnswerRecord> = read_jsonl(&a.answers)?;
    let mut seen = BTreeSet::new();
    let mut corpus = Vec::new();
    for r in records {
        let Some(item) = items.get(&r.item_id) else {
            bail!("answer log names unknown item {}", r.item_id);
        };
        if seen.insert(r.item_id.clone()) {
            corpus.push(CorpusEntry {
                item_id: r.item_id,
                task: item.task,
                steps: item.steps,
                annotator: r.responder_id,
            });
        }
    }
    let plan = stratified_iaa_sample(&corpus, a.per_cell, a.steps.0..=a.steps.1, cfg.seed)?;
    let out = out_path(cli, "iaa_plan.jsonl");
    write_jsonl(&out, &plan)?;
    tracing::info!(items = plan.len(), "wrote re-annotation plan");
    let mut m = RunManifest::start("iaa-sample").with_dataset(&a.answers)?;
    m.seed = Some(cfg.seed);
    finish(m, &out)
}

fn cmd_run(cli: &Cli, mut cfg: PipelineConfig, a: &RunArgs) -> Result<()> {
    if let Some((lo, hi)) = a.steps {
        (cfg.min_steps, cfg.max_steps) = (lo, hi);
    }
    if let Some(q) = a.per_step {
        cfg.per_step = q;
    }
    if let Some(e) = a.encoding {
        cfg.encoding = e;
    }
    let files = trajectory_files(&a.input)?;
    let inputs = files.iter().map(|f| read_json(f)).collect::<wmbench::Result<Vec<RawTrajectory>>>()?;
    let output = run_pipeline(&inputs, &cfg)?;
    let dir = out_path(cli, "run");
    for s in &output.segmented {
        write_json(&dir.join("segmented").join(format!("{}.json", s.trajectory_id)), s)?;
    }
    write_json(&dir.join("trajectories.json"), &output.samples)?;
    write_jsonl(&dir.join("qa.jsonl"), &output.items)?;
    write_json(&dir.join("pipeline_report.json"), &output.report)?;
    println!(
        "{} items ({} forward, {} inverse), shortfall {}",
        output.items.len(),
        output.report.forward_items,
        output.report.inverse_items,
        output.report.total_shortfall
    );
    let mut m = RunManifest::start("run");
    m.dataset = Some(a.input.clone());
    m.seed = Some(cfg.seed);
    m.encoding = Some(cfg.encoding);
    m.outputs = vec![
        dir.join("segmented"),
        dir.join("trajectories.json"),
        dir.join("qa.jsonl"),
        dir.join("pipeline_report.json"),
    ];
    m.finish();
    m.write_for(&dir)?;
    Ok(())
}

fn cmd_query(a: &QueryArgs) -> Result<()> {
    let endpoint = a.endpoint.as_deref().map(EndpointConfig::from_toml).transpose()?;
    let items = load_items(&a.qa)?;
    let known = items.iter().map(|i| i.id.clone()).collect();
    let store = AnswerStore::open(&a.store, Some(known))?;
    let mut m = RunManifest::start("query").with_dataset(&a.qa)?;
    m.responder = Some(a.responder.clone());
    m.encoding = items.first().map(|i| i.encoding);

    let report = match (endpoint, &a.offline) {
        (_, Some(preds)) => {
            let preds = load_predictions(preds, None)?.into_iter().map(|p| (p.item_id.clone(), p)).collect();
            query_items(&items, &ResponseSource::Offline(preds), &store, &a.responder, Some(&m.run_id))?
        }
        (Some(cfg), None) => {
            m.endpoint = Some(EndpointInfo {
                url: cfg.url.clone(),
                model: cfg.model.clone(),
                temperature: cfg.temperature,
            });
            m.image_preprocessing = cfg.image_size.map(|s| ImagePreprocessing {
                width: s,
                height: s,
                filter: RESIZE_FILTER_NAME.into(),
            });
            let transport = HttpTransport::new()?;
            let Some(root) = data_dir(a.data_dir.clone()) else {
                bail!("set --data-dir or {DATA_DIR_ENV} so images can be found");
            };
            let sleep = |d| std::thread::sleep(d);
            let source = ResponseSource::Remote {
                cfg: &cfg,
                transport: &transport,
                data_dir: root,
                sleep: &sleep,
            };
            query_items(&items, &source, &store, &a.responder, Some(&m.run_id))?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    println!(
        "{} answered, {} already stored, {} unanswered",
        report.answered,
        report.already_stored,
        report.unanswered.len()
    );
    finish(m, &a.store)
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let items = load_items(&a.qa)?;
    let known = items.iter().map(|i| i.id.clone()).collect();
    let store = AnswerStore::open(&a.store, Some(known))?;
    let mut state = AppState::new(items, store)
        .with_data_dir(data_dir(a.data_dir.clone()))
        .with_ui_dir(a.ui_dir.clone());
    if let Some(plan) = &a.plan {
        let plan: Vec<IaaAssignment> = read_jsonl(plan)?;
        let flat: Vec<PlannedAssignment> = plan
            .iter()
            .flat_map(|p| {
                p.assigned_to.iter().map(|who| PlannedAssignment {
                    item_id: p.item_id.clone(),
                    annotator: who.clone(),
                })
            })
            .collect();
        state = state.with_plan(&flat);
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(Arc::new(state), a.bind))?;
    Ok(())
}

fn cmd_synth(cli: &Cli) -> Result<()> {
    let dir = out_path(cli, "synthetic");
    let mut outputs = Vec::new();
    for t in [segmentation_fixture(), kitchen_episode(), toggle_episode()] {
        let path = dir.join(format!("{}.json", t.trajectory_id));
        write_json(&path, &t)?;
        outputs.push(path);
    }
    println!("wrote {} trajectories to {}", outputs.len(), dir.display());
    Ok(())
}

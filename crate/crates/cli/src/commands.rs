//! Subcommand implementations. Every command reads files, writes files, and
//! prints one machine-parsable JSON summary line to stdout.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use attrpipe_core::annotator::{
    run_bulk, schedule, AnnotatorBackend, LatencyModel, PriorityPolicy, RemoteBackend,
    RetryPolicy, SyntheticBackend,
};
use attrpipe_core::corpus::{
    AttributeDefinition, AttributeVocabulary, Corpus, GoldenItem, VocabularyPolicy,
};
use attrpipe_core::distillation::{
    bulk_score, silver_examples, train_student, SilverExample, StudentModel,
};
use attrpipe_core::evaluation::{
    evaluate_annotator, merge_raters, pairwise_mean_kappa, threshold_sweep,
};
use attrpipe_core::formats::{
    export_corpus, ingest_corpus, read_annotations, read_attributes, read_golden, write_annotations,
    write_embedding_sidecar, write_golden, write_jsonl, IngestMode,
};
use attrpipe_core::index::VectorIndex;
use attrpipe_core::math::standard_normal;
use attrpipe_core::replay::{
    end_to_end_with, generate_world, run_ab_detailed, truth_vocabularies, ArmConfig,
    EndToEndConfig, SessionRow,
};
use attrpipe_core::retrieval::{build_profile, restricted_retrieve, GatingRule};

use crate::args::{
    AnnotateArgs, BackendKind, Command, DistillArgs, EvaluateArgs, IndexBuildArgs, IndexCommand,
    IndexVocabArgs, IngestArgs, IrrArgs, MergeRatersArgs, PolicyArg, ReportArgs, RetrieveArgs,
    ScoreArgs, SimulateArgs,
};
use crate::config::{config_echo, validate_config, PipelineConfig, Violation};

pub enum CliError {
    /// Config violations: exit 3, each violation named by its field path.
    Config(Vec<Violation>),
    /// Anything else that stopped the run: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit(self) -> ! {
        match self {
            CliError::Config(violations) => {
                eprintln!(
                    "{}",
                    json!({"error": "config", "violations": violations})
                );
                std::process::exit(3);
            }
            CliError::Runtime(message) => {
                eprintln!("{}", json!({"error": "runtime", "message": message}));
                std::process::exit(1);
            }
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read '{}': {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("bad JSON in '{}': {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write '{}': {e}", path.display())))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    attrpipe_core::formats::read_jsonl(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

/// Highest version of the named attribute in the definitions file.
fn pick_attribute(defs: &[AttributeDefinition], name: &str) -> Result<AttributeDefinition, CliError> {
    defs.iter()
        .filter(|d| d.name == name)
        .max_by_key(|d| d.version)
        .cloned()
        .ok_or_else(|| CliError::Runtime(format!("attribute '{name}' not in attributes file")))
}

fn load_corpus(config: &PipelineConfig, path: &Path, dim: usize) -> Result<Corpus, CliError> {
    let mode = if config.corpus.lenient {
        IngestMode::Lenient
    } else {
        IngestMode::Strict
    };
    let (corpus, report) = ingest_corpus(path, dim, mode).map_err(runtime)?;
    if !report.rejects.is_empty() {
        log::warn!(
            "{}: skipped {} bad line(s) in lenient mode",
            path.display(),
            report.rejects.len()
        );
    }
    Ok(corpus)
}

fn load_attributes(config: &PipelineConfig) -> Result<Vec<AttributeDefinition>, CliError> {
    read_attributes(Path::new(&config.attributes.path)).map_err(runtime)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The synthetic backend's direction for an attribute is a pure function of
/// (seed, attribute name), so reruns with the same seed annotate identically.
fn synthetic_backend(
    dim: usize,
    sharpness: f64,
    clock: i64,
    seed: u64,
    attribute: &str,
) -> Result<SyntheticBackend, CliError> {
    let mut backend = SyntheticBackend::new(dim, sharpness, clock);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(attribute.as_bytes()));
    let direction: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    backend.add_direction(attribute, &direction).map_err(runtime)?;
    Ok(backend)
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(args) => ingest(args),
        Command::Annotate(args) => annotate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Irr(args) => irr(args),
        Command::MergeRaters(args) => merge(args),
        Command::Distill(args) => distill(args),
        Command::Score(args) => score(args),
        Command::Index(IndexCommand::Build(args)) => index_build(args),
        Command::Index(IndexCommand::Vocab(args)) => index_vocab(args),
        Command::Retrieve(args) => retrieve(args),
        Command::Simulate(args) => simulate(args),
        Command::Report(args) => report(args),
    }
}

fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    validate_config(path).map_err(CliError::Config)
}

fn ingest(args: IngestArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let input = args
        .input
        .unwrap_or_else(|| PathBuf::from(&config.corpus.path));
    let mode = if args.lenient || config.corpus.lenient {
        IngestMode::Lenient
    } else {
        IngestMode::Strict
    };
    let (corpus, report) = ingest_corpus(&input, config.corpus.dim, mode).map_err(runtime)?;
    export_corpus(&corpus, &args.out).map_err(runtime)?;
    if let Some(base) = args.sidecar {
        let bin = base.with_extension("bin");
        let manifest = base.with_extension("manifest.json");
        write_embedding_sidecar(&corpus, &bin, &manifest).map_err(runtime)?;
    }
    for reject in &report.rejects {
        log::warn!("skipped line {}: {}", reject.line_no, reject.reason);
    }
    emit(json!({
        "loaded": report.loaded,
        "rejected": report.rejects.len(),
        "out": args.out,
    }));
    Ok(())
}

fn annotate(args: AnnotateArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let corpus = load_corpus(&config, Path::new(&config.corpus.path), config.corpus.dim)?;
    let defs = load_attributes(&config)?;
    let def = pick_attribute(&defs, &args.attribute)?;

    let policy = match args.priority_weights {
        Some(w) => PriorityPolicy {
            w_new: w.w_new,
            w_trending: w.w_trending,
            w_impact: w.w_impact,
        },
        None => PriorityPolicy {
            w_new: config.scheduler.w_new,
            w_trending: config.scheduler.w_trending,
            w_impact: config.scheduler.w_impact,
        },
    };
    let budget = args.budget.unwrap_or(config.scheduler.budget);
    let batch_size = args.batch_size.unwrap_or(config.scheduler.batch_size);
    let parallelism = args.parallelism.unwrap_or(config.scheduler.parallelism);
    let batches = schedule(&corpus, &def, &policy, budget, batch_size).map_err(runtime)?;

    let kind = match args.backend {
        Some(BackendKind::Synthetic) => "synthetic",
        Some(BackendKind::Remote) => "remote",
        None => config.backend.kind.as_str(),
    };
    let backend: Box<dyn AnnotatorBackend> = match kind {
        "synthetic" => Box::new(synthetic_backend(
            corpus.dim(),
            config.backend.sharpness,
            config.backend.clock,
            args.seed.unwrap_or(config.seeds.backend),
            &def.name,
        )?),
        "remote" => {
            let endpoint = args
                .endpoint
                .clone()
                .filter(|e| !e.is_empty())
                .unwrap_or_else(|| config.backend.endpoint.clone());
            if endpoint.is_empty() {
                return Err(CliError::Config(vec![Violation {
                    field: "backend.endpoint".to_string(),
                    reason: "required for the remote backend".to_string(),
                }]));
            }
            Box::new(RemoteBackend::new(&endpoint, RetryPolicy::default()))
        }
        other => {
            return Err(CliError::Config(vec![Violation {
                field: "backend.kind".to_string(),
                reason: format!("must be \"synthetic\" or \"remote\", got \"{other}\""),
            }]));
        }
    };

    let (annotations, run_report) = run_bulk(
        backend.as_ref(),
        &batches,
        parallelism,
        Some(&LatencyModel::default()),
    )
    .map_err(runtime)?;
    write_annotations(&args.out, &annotations).map_err(runtime)?;
    if let Some(path) = &args.report {
        write_json(path, &run_report)?;
    }
    if let Some(path) = &args.silver_out {
        let silver = silver_examples(&corpus, &annotations).map_err(runtime)?;
        write_jsonl(path, &silver).map_err(runtime)?;
    }
    emit(json!({
        "attribute": def.name,
        "version": def.version,
        "annotated": annotations.len(),
        "failures": run_report.failures.len(),
        "simulated_latency_seconds": run_report.simulated_latency_seconds,
    }));
    Ok(())
}

fn golden_pairs(items: &[GoldenItem]) -> Vec<(String, bool)> {
    items.iter().map(|i| (i.item_id.clone(), i.truth)).collect()
}

fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let golden = read_golden(&args.golden).map_err(runtime)?;
    let pairs = golden_pairs(&golden);
    let annotations = read_annotations(&args.annotations).map_err(runtime)?;
    let value = match &args.sweep {
        Some(thresholds) => {
            let reports =
                threshold_sweep(&pairs, &annotations, thresholds).map_err(runtime)?;
            serde_json::to_value(&reports).expect("reports serialize")
        }
        None => {
            let report =
                evaluate_annotator(&pairs, &annotations, args.threshold).map_err(runtime)?;
            serde_json::to_value(&report).expect("report serializes")
        }
    };
    if let Some(path) = &args.out {
        write_json(path, &value)?;
    }
    emit(value);
    Ok(())
}

fn irr(args: IrrArgs) -> Result<(), CliError> {
    let golden = read_golden(&args.golden).map_err(runtime)?;
    let labeled: Vec<&GoldenItem> = golden
        .iter()
        .filter(|i| i.rater_labels.is_some())
        .collect();
    if labeled.is_empty() {
        return Err(CliError::Runtime(
            "no rater labels in the golden file".to_string(),
        ));
    }
    let names: Vec<String> = labeled[0]
        .rater_labels
        .as_ref()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    for item in &labeled {
        let keys: Vec<&String> = item.rater_labels.as_ref().unwrap().keys().collect();
        if keys.len() != names.len() || keys.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(CliError::Runtime(format!(
                "item '{}' has a different rater panel",
                item.item_id
            )));
        }
    }
    let raters: Vec<Vec<bool>> = names
        .iter()
        .map(|name| {
            labeled
                .iter()
                .map(|item| item.rater_labels.as_ref().unwrap()[name])
                .collect()
        })
        .collect();
    let panel = pairwise_mean_kappa(&raters).map_err(runtime)?;
    let value = json!({"raters": names, "agreement": panel});
    if let Some(path) = &args.out {
        write_json(path, &value)?;
    }
    emit(value);
    Ok(())
}

fn merge(args: MergeRatersArgs) -> Result<(), CliError> {
    let golden = read_golden(&args.golden).map_err(runtime)?;
    let items: Vec<(String, Vec<bool>)> = golden
        .iter()
        .map(|item| {
            let labels = item
                .rater_labels
                .as_ref()
                .map(|m| m.values().copied().collect())
                .unwrap_or_default();
            (item.item_id.clone(), labels)
        })
        .collect();
    let outcome = merge_raters(&items);
    let by_id: BTreeMap<&String, &GoldenItem> =
        golden.iter().map(|i| (&i.item_id, i)).collect();
    let merged: Vec<GoldenItem> = outcome
        .golden
        .iter()
        .map(|(id, truth)| GoldenItem {
            item_id: id.clone(),
            truth: *truth,
            rater_labels: by_id[id].rater_labels.clone(),
        })
        .collect();
    write_golden(&args.out, &merged).map_err(runtime)?;
    if let Some(path) = &args.ties {
        write_json(path, &outcome.ties)?;
    }
    emit(json!({"merged": merged.len(), "ties": outcome.ties.len()}));
    Ok(())
}

fn distill(args: DistillArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let defs = load_attributes(&config)?;
    let def = pick_attribute(&defs, &args.attribute)?;
    let silver: Vec<SilverExample> = read_jsonl(&args.silver)?;
    let mut distill_config =
        config.distillation_config(args.seed.unwrap_or(config.seeds.distillation));
    if let Some(epochs) = args.epochs {
        distill_config.epochs = epochs;
    }
    let (model, log) =
        train_student(&def.name, def.version, &silver, &distill_config).map_err(runtime)?;
    write_json(&args.out, &model)?;
    if let Some(path) = &args.log {
        write_json(path, &log)?;
    }
    emit(json!({
        "attribute": model.attribute_name,
        "version": model.attribute_version,
        "train_examples": log.train_examples,
        "validation_examples": log.validation_examples,
        "initial_validation_loss": log.initial_validation_loss,
        "final_validation_loss": log.validation_loss_per_epoch.last(),
    }));
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let model: StudentModel = read_json(&args.model)?;
    let corpus_path = args
        .corpus
        .unwrap_or_else(|| PathBuf::from(&config.corpus.path));
    let corpus = load_corpus(&config, &corpus_path, model.input_dim)?;
    let defs = load_attributes(&config)?;
    let def = defs
        .iter()
        .find(|d| d.name == model.attribute_name && d.version == model.attribute_version)
        .cloned()
        .ok_or_else(|| {
            CliError::Runtime(format!(
                "attribute '{}' v{} not in attributes file",
                model.attribute_name, model.attribute_version
            ))
        })?;
    let annotations = bulk_score(&model, &corpus, &def, args.clock).map_err(runtime)?;
    write_annotations(&args.out, &annotations).map_err(runtime)?;
    emit(json!({
        "attribute": def.name,
        "version": def.version,
        "scored": annotations.len(),
    }));
    Ok(())
}

fn index_build(args: IndexBuildArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let corpus_path = args
        .corpus
        .unwrap_or_else(|| PathBuf::from(&config.corpus.path));
    let corpus = load_corpus(&config, &corpus_path, config.corpus.dim)?;
    let clusters = args.clusters.unwrap_or(config.index.clusters);
    let seed = args.seed.unwrap_or(config.seeds.index);
    VectorIndex::build_clustered(&corpus, clusters, seed).map_err(runtime)?;
    let manifest = json!({
        "corpus": corpus_path,
        "records": corpus.len(),
        "dim": corpus.dim(),
        "clusters": clusters,
        "seed": seed,
    });
    write_json(&args.out, &manifest)?;
    emit(manifest);
    Ok(())
}

fn index_vocab(args: IndexVocabArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let mut corpus = load_corpus(&config, Path::new(&config.corpus.path), config.corpus.dim)?;
    let defs = load_attributes(&config)?;
    for def in defs {
        corpus.add_attribute(def).map_err(runtime)?;
    }
    let def = corpus
        .latest_attribute(&args.attribute)
        .cloned()
        .ok_or_else(|| {
            CliError::Runtime(format!(
                "attribute '{}' not in attributes file",
                args.attribute
            ))
        })?;
    let annotations = read_annotations(&args.annotations).map_err(runtime)?;
    let upsert = corpus.upsert_annotations(annotations);
    for (annotation, reject) in &upsert.rejected {
        log::warn!(
            "rejected annotation for '{}': {reject}",
            annotation.video_id
        );
    }
    let threshold = args.threshold.unwrap_or(def.decision_threshold);
    let policy = match args.policy {
        PolicyArg::TeacherOnly => VocabularyPolicy::TeacherOnly,
        PolicyArg::StudentOnly => VocabularyPolicy::StudentOnly,
        PolicyArg::TeacherPrecedence => VocabularyPolicy::TeacherPrecedence,
    };
    let vocabulary = corpus
        .build_vocabulary(&def, threshold, policy)
        .map_err(runtime)?;
    write_json(&args.out, &vocabulary)?;
    emit(json!({
        "attribute": vocabulary.attribute_name,
        "version": vocabulary.attribute_version,
        "members": vocabulary.member_ids.len(),
        "written": upsert.written,
        "rejected": upsert.rejected.len(),
    }));
    Ok(())
}

#[derive(Debug, serde::Deserialize)]
struct HistoryLine {
    video_id: String,
    watched_at: i64,
}

fn retrieve(args: RetrieveArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let corpus = load_corpus(&config, Path::new(&config.corpus.path), config.corpus.dim)?;
    let history: Vec<HistoryLine> = read_jsonl(&args.user_history)?;
    let history: Vec<(String, i64)> = history
        .into_iter()
        .map(|l| (l.video_id, l.watched_at))
        .collect();
    let mut vocabularies = Vec::new();
    for path in &args.vocab {
        vocabularies.push(read_json::<AttributeVocabulary>(path)?);
    }
    let index = match args.probes {
        Some(_) => VectorIndex::build_clustered(&corpus, config.index.clusters, config.seeds.index)
            .map_err(runtime)?,
        None => VectorIndex::build_exact(&corpus).map_err(runtime)?,
    };
    let gating = GatingRule {
        default_tau: args.tau.unwrap_or(config.gating.tau),
        tau_overrides: BTreeMap::new(),
        gamma: config.gating.gamma,
        quota: args.quota.or(config.gating.quota),
    };
    let profile = build_profile(&args.user_id, &history, &index, &vocabularies, gating.gamma)
        .map_err(runtime)?;
    let slate = restricted_retrieve(&profile, &vocabularies, &gating, &index, args.k, args.probes)
        .map_err(runtime)?;
    write_json(
        &args.out,
        &json!({
            "user_id": profile.user_id,
            "affinities": profile.affinities,
            "slate": slate,
        }),
    )?;
    emit(json!({
        "items": slate.items.len(),
        "triggered": slate.triggered,
        "cold_start": slate.cold_start,
    }));
    Ok(())
}

fn write_session_csv(
    path: &Path,
    arms: &[(&str, &[SessionRow])],
) -> Result<(), CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot write '{}': {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |line: String| {
        writeln!(w, "{line}")
            .map_err(|e| CliError::Runtime(format!("cannot write '{}': {e}", path.display())))
    };
    put("arm,user_id,session,impressions,consumed,matched_consumed".to_string())?;
    for (arm, rows) in arms {
        for r in *rows {
            put(format!(
                "{arm},{},{},{},{},{}",
                r.user_id, r.session, r.impressions, r.consumed, r.matched_consumed
            ))?;
        }
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write '{}': {e}", path.display())))
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(config.seeds.world);
    let world_config = config.world_config(seed);
    let world = generate_world(&world_config).map_err(runtime)?;
    let k = config.simulation.k;
    let baseline = ArmConfig::unrestricted("baseline", k);
    let gating = GatingRule {
        default_tau: config.gating.tau,
        tau_overrides: BTreeMap::new(),
        gamma: config.gating.gamma,
        quota: config.gating.quota,
    };
    let treatment = ArmConfig {
        name: "treatment".to_string(),
        vocabularies: truth_vocabularies(&world),
        gating,
        k,
        probes: None,
    };
    let (base, treat, delta) = run_ab_detailed(
        &world,
        &baseline,
        &treatment,
        config.simulation.sessions_per_user,
    )
    .map_err(runtime)?;
    if let Some(path) = &args.emit_csv {
        write_session_csv(
            path,
            &[
                ("baseline", base.sessions.as_slice()),
                ("treatment", treat.sessions.as_slice()),
            ],
        )?;
    }
    write_json(
        &args.out,
        &json!({
            "seed": seed,
            "world": world_config,
            "config": config_echo(&config),
            "baseline": base.report,
            "treatment": treat.report,
            "delta": delta,
        }),
    )?;
    emit(json!({
        "baseline_rate": base.report.matched_consumption_rate,
        "treatment_rate": treat.report.matched_consumption_rate,
        "delta": delta,
    }));
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(config.seeds.world);
    let sim = &config.simulation;
    let e2e = EndToEndConfig {
        world: config.world_config(seed),
        golden_size: sim.golden_size,
        silver_budget: sim.silver_budget,
        held_out_size: sim.held_out_size,
        fidelity_gate: sim.fidelity_gate,
        fidelity_gap_limit: sim.fidelity_gap_limit,
        distill: config.distillation_config(config.seeds.distillation),
        k: sim.k,
        sessions_per_user: sim.sessions_per_user,
        corrupt_silver: args.corrupt_silver,
    };
    let consolidated = end_to_end_with(&e2e).map_err(runtime)?;
    write_json(&args.out, &consolidated)?;
    emit(json!({
        "fidelity_gate_passed": consolidated.fidelity_gate_passed,
        "baseline_rate": consolidated.baseline.matched_consumption_rate,
        "treatment_rate": consolidated.treatment.matched_consumption_rate,
        "delta": consolidated.delta,
    }));
    Ok(())
}

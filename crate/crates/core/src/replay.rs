//! Synthetic world generation and an offline A/B replay harness: baseline
//! unrestricted retrieval vs treatment attribute-restricted retrieval over
//! simulated users.
//!
//! The world separates what users watch from what satisfies them: each user
//! has a favorite attribute (matched items are consumed at a higher rate)
//! and a decoy interest that pollutes the watch history without predicting
//! satisfied consumption. Embedding similarity alone chases the polluted
//! history; high-precision vocabulary membership recovers the favorite.
//!
//! Everything downstream of a seed is deterministic. Per-session randomness
//! comes from a stream keyed by (seed, user index, session index) with one
//! uniform per slate position, so arms are paired: identical slates consume
//! identically, and any execution order yields the same counts. Reports
//! carry no wall-clock values.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    annotate_one, run_bulk, schedule, AnnotatorError, LatencyModel, PriorityPolicy, RunReport,
    SyntheticBackend,
};
use crate::corpus::{
    Annotation, AttributeDefinition, AttributeVocabulary, Corpus, CorpusError, PrioritySignals,
    VideoRecord, VocabularyPolicy,
};
use crate::distillation::{
    bulk_score, evaluate_fidelity, silver_examples, train_student, DistillError,
    DistillationConfig, FidelityReport, SilverExample,
};
use crate::evaluation::{evaluate_annotator, EvalError, EvaluationReport};
use crate::index::{IndexError, VectorIndex};
use crate::math::{normalize, standard_normal};
use crate::retrieval::{build_profile, restricted_retrieve, GatingRule, RetrievalError};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid world config: {reason}")]
    BadWorldConfig { reason: String },
    #[error("invalid arm config: {reason}")]
    BadArmConfig { reason: String },
    #[error(
        "fidelity gate failed for '{attribute}': agreement {agreement:.4} (need >= \
         {required_agreement:.4}), score gap {gap:.4} (need <= {gap_limit:.4})"
    )]
    FidelityGate {
        attribute: String,
        agreement: f64,
        gap: f64,
        required_agreement: f64,
        gap_limit: f64,
    },
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Knobs for the synthetic world. Video embeddings are unit-normalized
/// draws from a Gaussian mixture around the attribute directions:
/// x = normalize(alpha * w_c + sigma * eps), eps ~ N(0, I).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub dim: usize,
    pub n_videos: usize,
    pub n_users: usize,
    pub attributes: Vec<String>,
    /// Mixture concentration along the component direction.
    pub alpha: f64,
    /// Component noise scale.
    pub sigma: f64,
    /// Teacher sharpness for ground-truth scores.
    pub sharpness: f64,
    /// Label cutoff. High values make membership a precision statement:
    /// only embeddings deep inside an attribute's cone qualify, which is
    /// what gives restriction an edge over raw similarity. At exactly 0.5
    /// the label reduces to a sign test on the dot product, with the
    /// closed-form base rate P(label_a) = mean_c Phi(alpha <w_a, w_c> / sigma).
    pub decision_threshold: f64,
    pub history_len: usize,
    /// Fraction of history drawn from the favorite's ground-truth members.
    pub favorite_share: f64,
    /// Fraction of history drawn from the decoy component; the remainder is
    /// uniform over the corpus.
    pub decoy_share: f64,
    /// Consumption probability for an impression matching the favorite;
    /// must exceed p_base.
    pub p_match: f64,
    /// Consumption probability for everything else.
    pub p_base: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dim: 32,
            n_videos: 10_000,
            n_users: 200,
            attributes: vec![
                "authentic".to_string(),
                "calming".to_string(),
                "energetic".to_string(),
                "funny".to_string(),
            ],
            alpha: 4.0,
            sigma: 1.0,
            sharpness: 4.0,
            decision_threshold: 0.95,
            history_len: 12,
            favorite_share: 0.35,
            decoy_share: 0.45,
            p_match: 0.5,
            p_base: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |reason: String| Err(ReplayError::BadWorldConfig { reason });
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.n_videos < 1 || self.n_users < 1 {
            return bad("n_videos and n_users must be >= 1".to_string());
        }
        if self.attributes.is_empty() {
            return bad("at least one attribute required".to_string());
        }
        let unique: BTreeSet<&String> = self.attributes.iter().collect();
        if unique.len() != self.attributes.len() {
            return bad("attribute names must be unique".to_string());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("sigma", self.sigma),
            ("sharpness", self.sharpness),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return bad(format!(
                "decision_threshold must be in [0,1], got {}",
                self.decision_threshold
            ));
        }
        for (name, p) in [
            ("favorite_share", self.favorite_share),
            ("decoy_share", self.decoy_share),
            ("p_match", self.p_match),
            ("p_base", self.p_base),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0,1], got {p}"));
            }
        }
        if self.favorite_share + self.decoy_share > 1.0 {
            return bad(format!(
                "favorite_share + decoy_share must be <= 1, got {}",
                self.favorite_share + self.decoy_share
            ));
        }
        if self.p_match <= self.p_base {
            return bad(format!(
                "p_match ({}) must exceed p_base ({})",
                self.p_match, self.p_base
            ));
        }
        if self.history_len < 1 {
            return bad("history_len must be >= 1".to_string());
        }
        Ok(())
    }
}

/// One simulated user. `favorite` drives consumption; `decoy` only pollutes
/// the history. `planted` names the attributes whose ground-truth members
/// count as matched impressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub user_id: String,
    pub favorite: String,
    pub decoy: String,
    pub planted: BTreeSet<String>,
    pub history: Vec<(String, i64)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// attribute name -> unit direction
    pub directions: BTreeMap<String, Vec<f64>>,
    pub corpus: Corpus,
    pub attribute_defs: Vec<AttributeDefinition>,
    /// Mixture component -> video ids drawn from it.
    pub component_members: BTreeMap<String, Vec<String>>,
    /// Ground-truth positive sets per attribute, from the teacher rule.
    pub truth: BTreeMap<String, BTreeSet<String>>,
    pub users: Vec<SimUser>,
}

impl SyntheticWorld {
    /// The teacher this world is labeled by.
    pub fn teacher(&self) -> SyntheticBackend {
        let mut backend = SyntheticBackend::new(self.config.dim, self.config.sharpness, 0);
        for (name, w) in &self.directions {
            backend.add_direction(name, w).expect("directions are valid");
        }
        backend
    }

    pub fn video_id(i: usize) -> String {
        format!("vid{i:06}")
    }
}

/// Deterministically builds corpus, ground truth, and users from the config
/// seed. Draw order is fixed: directions, then videos, then user histories.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld, ReplayError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;

    let mut directions = BTreeMap::new();
    for name in &config.attributes {
        let w = normalize(&(0..d).map(|_| standard_normal(&mut rng)).collect::<Vec<f64>>());
        directions.insert(name.clone(), w);
    }

    let mut corpus = Corpus::new(d);
    let mut component_members: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let attr_count = config.attributes.len();
    for i in 0..config.n_videos {
        let component = &config.attributes[rng.gen_range(0..attr_count)];
        let w = &directions[component];
        let raw: Vec<f64> = (0..d)
            .map(|j| config.alpha * w[j] + config.sigma * standard_normal(&mut rng))
            .collect();
        let id = SyntheticWorld::video_id(i);
        component_members
            .entry(component.clone())
            .or_default()
            .push(id.clone());
        corpus.insert_record(VideoRecord {
            id,
            title: format!("video {i}"),
            description: format!("synthetic item near {component}"),
            embedding: normalize(&raw),
            upload_time: i as i64,
            priority_signals: PrioritySignals {
                is_new: rng.gen_bool(0.1),
                trending_score: rng.gen_range(0.0..1.0),
                impact_score: rng.gen_range(0.0..10.0),
            },
        })?;
    }

    let mut attribute_defs = Vec::new();
    for name in &config.attributes {
        let def = AttributeDefinition::basic(name, 1, config.decision_threshold);
        corpus.add_attribute(def.clone())?;
        attribute_defs.push(def);
    }

    let teacher = {
        let mut backend = SyntheticBackend::new(d, config.sharpness, 0);
        for (name, w) in &directions {
            backend.add_direction(name, w).expect("fresh directions");
        }
        backend
    };
    let mut truth: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for name in &config.attributes {
        let mut positives = BTreeSet::new();
        for record in corpus.records() {
            let score = teacher
                .score(name, &record.embedding)
                .expect("teacher knows every attribute");
            if score >= config.decision_threshold {
                positives.insert(record.id.clone());
            }
        }
        truth.insert(name.clone(), positives);
    }

    let all_ids: Vec<String> = corpus.records().map(|r| r.id.clone()).collect();
    let mut users = Vec::new();
    for u in 0..config.n_users {
        let fav_idx = u % attr_count;
        let decoy_idx = if attr_count == 1 {
            0
        } else {
            (fav_idx + 1 + (u / attr_count) % (attr_count - 1)) % attr_count
        };
        let favorite = config.attributes[fav_idx].clone();
        let decoy = config.attributes[decoy_idx].clone();
        let favorite_pool: Vec<&String> = {
            let members = &truth[&favorite];
            if members.is_empty() {
                all_ids.iter().collect()
            } else {
                members.iter().collect()
            }
        };
        let decoy_pool: Vec<&String> = match component_members.get(&decoy) {
            Some(ids) if !ids.is_empty() => ids.iter().collect(),
            _ => all_ids.iter().collect(),
        };
        let mut history = Vec::with_capacity(config.history_len);
        for t in 0..config.history_len {
            let r: f64 = rng.gen();
            let id = if r < config.favorite_share {
                favorite_pool[rng.gen_range(0..favorite_pool.len())].clone()
            } else if r < config.favorite_share + config.decoy_share {
                decoy_pool[rng.gen_range(0..decoy_pool.len())].clone()
            } else {
                all_ids[rng.gen_range(0..all_ids.len())].clone()
            };
            history.push((id, t as i64));
        }
        users.push(SimUser {
            user_id: format!("user{u:04}"),
            favorite: favorite.clone(),
            decoy,
            planted: BTreeSet::from([favorite]),
            history,
        });
    }

    Ok(SyntheticWorld {
        config: config.clone(),
        directions,
        corpus,
        attribute_defs,
        component_members,
        truth,
        users,
    })
}

/// Ground-truth vocabularies straight from the world's positive sets.
pub fn truth_vocabularies(world: &SyntheticWorld) -> Vec<AttributeVocabulary> {
    world
        .truth
        .iter()
        .map(|(name, members)| AttributeVocabulary {
            attribute_name: name.clone(),
            attribute_version: 1,
            member_ids: members.clone(),
            built_from: VocabularyPolicy::TeacherOnly,
            threshold: world.config.decision_threshold,
        })
        .collect()
}

/// One experiment arm: which vocabularies restricted retrieval may use and
/// how gating is configured. An empty vocabulary list is an unrestricted
/// baseline through the same code path.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmConfig {
    pub name: String,
    pub vocabularies: Vec<AttributeVocabulary>,
    pub gating: GatingRule,
    pub k: usize,
    pub probes: Option<usize>,
}

impl ArmConfig {
    pub fn unrestricted(name: &str, k: usize) -> Self {
        Self {
            name: name.to_string(),
            vocabularies: Vec::new(),
            gating: GatingRule::default(),
            k,
            probes: None,
        }
    }

    pub fn restricted(name: &str, vocabularies: Vec<AttributeVocabulary>, k: usize) -> Self {
        Self {
            name: name.to_string(),
            vocabularies,
            gating: GatingRule::default(),
            k,
            probes: None,
        }
    }

    fn validate(&self) -> Result<(), ReplayError> {
        if self.k < 1 {
            return Err(ReplayError::BadArmConfig {
                reason: format!("arm '{}': k must be >= 1", self.name),
            });
        }
        self.gating.validate()?;
        Ok(())
    }
}

/// Outcome of one arm over every (user, session) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub impressions: u64,
    pub total_consumed: u64,
    pub matched_consumed: u64,
    /// matched_consumed / impressions: the satisfied-consumption proxy.
    pub matched_consumption_rate: f64,
    /// Consumed matched impressions credited to each planted attribute
    /// containing the item.
    pub per_attribute: BTreeMap<String, u64>,
}

fn session_rng(seed: u64, user_idx: usize, session_idx: usize) -> ChaCha8Rng {
    // splitmix64 finalizer over a lane unique to (user, session)
    let mut x = seed
        ^ (user_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (session_idx as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

/// One (user, session) outcome, for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub user_id: String,
    pub session: usize,
    pub impressions: u64,
    pub consumed: u64,
    pub matched_consumed: u64,
}

struct SessionCounts {
    impressions: u64,
    consumed: u64,
    matched_consumed: u64,
    per_attribute: BTreeMap<String, u64>,
    rows: Vec<SessionRow>,
}

/// Consumption for one user's slate across their sessions. Draw j gates
/// slate position j, so arms serving the same item set consume identically.
fn simulate_sessions(
    world: &SyntheticWorld,
    user_idx: usize,
    slate_matches: &[Vec<&String>],
    sessions: usize,
) -> SessionCounts {
    let mut counts = SessionCounts {
        impressions: 0,
        consumed: 0,
        matched_consumed: 0,
        per_attribute: BTreeMap::new(),
        rows: Vec::with_capacity(sessions),
    };
    for s in 0..sessions {
        let mut rng = session_rng(world.config.seed, user_idx, s);
        let mut row = SessionRow {
            user_id: world.users[user_idx].user_id.clone(),
            session: s,
            impressions: 0,
            consumed: 0,
            matched_consumed: 0,
        };
        for matches in slate_matches {
            let u: f64 = rng.gen();
            row.impressions += 1;
            let rate = if matches.is_empty() {
                world.config.p_base
            } else {
                world.config.p_match
            };
            if u < rate {
                row.consumed += 1;
                if !matches.is_empty() {
                    row.matched_consumed += 1;
                    for attr in matches {
                        *counts.per_attribute.entry((*attr).clone()).or_insert(0) += 1;
                    }
                }
            }
        }
        counts.impressions += row.impressions;
        counts.consumed += row.consumed;
        counts.matched_consumed += row.matched_consumed;
        counts.rows.push(row);
    }
    counts
}

fn run_arm(
    world: &SyntheticWorld,
    index: &VectorIndex,
    arm: &ArmConfig,
    sessions: usize,
) -> Result<(ArmReport, Vec<SessionRow>), ReplayError> {
    arm.validate()?;
    let per_user: Vec<SessionCounts> = world
        .users
        .par_iter()
        .enumerate()
        .map(|(user_idx, user)| -> Result<SessionCounts, ReplayError> {
            let profile = build_profile(
                &user.user_id,
                &user.history,
                index,
                &arm.vocabularies,
                arm.gating.gamma,
            )?;
            let slate = restricted_retrieve(
                &profile,
                &arm.vocabularies,
                &arm.gating,
                index,
                arm.k,
                arm.probes,
            )?;
            let slate_matches: Vec<Vec<&String>> = slate
                .items
                .iter()
                .map(|item| {
                    user.planted
                        .iter()
                        .filter(|attr| world.truth[*attr].contains(&item.video_id))
                        .collect()
                })
                .collect();
            Ok(simulate_sessions(world, user_idx, &slate_matches, sessions))
        })
        .collect::<Result<_, _>>()?;

    let mut report = ArmReport {
        arm: arm.name.clone(),
        impressions: 0,
        total_consumed: 0,
        matched_consumed: 0,
        matched_consumption_rate: 0.0,
        per_attribute: BTreeMap::new(),
    };
    let mut rows = Vec::new();
    for c in per_user {
        report.impressions += c.impressions;
        report.total_consumed += c.consumed;
        report.matched_consumed += c.matched_consumed;
        for (attr, n) in c.per_attribute {
            *report.per_attribute.entry(attr).or_insert(0) += n;
        }
        rows.extend(c.rows);
    }
    if report.impressions > 0 {
        report.matched_consumption_rate =
            report.matched_consumed as f64 / report.impressions as f64;
    }
    Ok((report, rows))
}

/// One arm's aggregate report plus its per-session rows in (user, session)
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub report: ArmReport,
    pub sessions: Vec<SessionRow>,
}

/// `run_ab` keeping the per-session rows of both arms.
pub fn run_ab_detailed(
    world: &SyntheticWorld,
    baseline: &ArmConfig,
    treatment: &ArmConfig,
    sessions_per_user: usize,
) -> Result<(ArmOutcome, ArmOutcome, f64), ReplayError> {
    if sessions_per_user < 1 {
        return Err(ReplayError::BadArmConfig {
            reason: "sessions_per_user must be >= 1".to_string(),
        });
    }
    let index = VectorIndex::build_exact(&world.corpus)?;
    let (base, base_rows) = run_arm(world, &index, baseline, sessions_per_user)?;
    let (treat, treat_rows) = run_arm(world, &index, treatment, sessions_per_user)?;
    let delta = treat.matched_consumption_rate - base.matched_consumption_rate;
    Ok((
        ArmOutcome {
            report: base,
            sessions: base_rows,
        },
        ArmOutcome {
            report: treat,
            sessions: treat_rows,
        },
        delta,
    ))
}

/// Runs both arms over the same users and paired per-session randomness.
/// Returns (baseline, treatment, delta) with
/// delta = treatment rate - baseline rate.
pub fn run_ab(
    world: &SyntheticWorld,
    baseline: &ArmConfig,
    treatment: &ArmConfig,
    sessions_per_user: usize,
) -> Result<(ArmReport, ArmReport, f64), ReplayError> {
    let (base, treat, delta) = run_ab_detailed(world, baseline, treatment, sessions_per_user)?;
    Ok((base.report, treat.report, delta))
}

/// Full-pipeline configuration. `corrupt_silver` inverts the teacher's
/// scores before training, demonstrating the fidelity gate rejecting a
/// poisoned distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndConfig {
    pub world: WorldConfig,
    pub golden_size: usize,
    pub silver_budget: usize,
    pub held_out_size: usize,
    /// Minimum held-out hard-label agreement per attribute.
    pub fidelity_gate: f64,
    /// Maximum held-out mean absolute score gap per attribute. Agreement
    /// alone is gameable at skewed base rates (an all-negative student
    /// agrees with a tiny positive set almost everywhere); the gap is not.
    pub fidelity_gap_limit: f64,
    pub distill: DistillationConfig,
    pub k: usize,
    pub sessions_per_user: usize,
    pub corrupt_silver: bool,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            golden_size: 200,
            silver_budget: 5_000,
            held_out_size: 1_000,
            fidelity_gate: 0.95,
            fidelity_gap_limit: 0.1,
            distill: DistillationConfig::default(),
            k: 20,
            sessions_per_user: 3,
            corrupt_silver: false,
        }
    }
}

/// Per-attribute record of the distillation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationStageReport {
    pub attribute: String,
    pub silver_examples: usize,
    pub final_validation_loss: Option<f64>,
    pub fidelity: FidelityReport,
    pub vocabulary_size: usize,
}

/// Everything the end-to-end run produced. A pure function of the config:
/// two runs with the same config serialize byte-identically, so nothing
/// here may depend on wall clock, host, or thread interleaving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedReport {
    pub seed: u64,
    pub world: WorldConfig,
    pub golden_size: usize,
    pub teacher_evaluation: Vec<EvaluationReport>,
    pub annotation_runs: Vec<RunReport>,
    pub distillation: Vec<DistillationStageReport>,
    pub fidelity_gate: f64,
    pub fidelity_gap_limit: f64,
    pub fidelity_gate_passed: bool,
    pub baseline: ArmReport,
    pub treatment: ArmReport,
    pub delta: f64,
}

/// The default full pipeline at a given seed.
pub fn end_to_end(seed: u64) -> Result<ConsolidatedReport, ReplayError> {
    let mut config = EndToEndConfig::default();
    config.world.seed = seed;
    end_to_end_with(&config)
}

/// golden set -> teacher evaluation -> prioritized bulk annotation ->
/// distillation -> fidelity gate -> student vocabularies -> paired A/B.
pub fn end_to_end_with(config: &EndToEndConfig) -> Result<ConsolidatedReport, ReplayError> {
    let world = generate_world(&config.world)?;
    let teacher = world.teacher();
    let mut rng = ChaCha8Rng::seed_from_u64(config.world.seed);
    rng.set_stream(100);
    use rand::seq::SliceRandom;

    // Golden set: a seeded sample with ground-truth labels.
    let all_ids: Vec<String> = world.corpus.records().map(|r| r.id.clone()).collect();
    let golden_size = config.golden_size.clamp(1, all_ids.len());
    let golden_ids = {
        let mut ids = all_ids.clone();
        ids.shuffle(&mut rng);
        ids.truncate(golden_size);
        ids.sort();
        ids
    };

    // The teacher against golden truth, per attribute.
    let mut teacher_evaluation = Vec::new();
    for def in &world.attribute_defs {
        let golden: Vec<(String, bool)> = golden_ids
            .iter()
            .map(|id| (id.clone(), world.truth[&def.name].contains(id)))
            .collect();
        let annotations: Vec<Annotation> = golden_ids
            .iter()
            .map(|id| {
                let record = world.corpus.record(id).expect("golden ids are corpus ids");
                annotate_one(&teacher, record, def)
            })
            .collect::<Result<_, _>>()?;
        teacher_evaluation.push(evaluate_annotator(
            &golden,
            &annotations,
            def.decision_threshold,
        )?);
    }

    // Prioritized bulk annotation produces the silver sets.
    let latency = LatencyModel::default();
    let policy = PriorityPolicy::default();
    let mut annotation_runs = Vec::new();
    let mut silver_by_attr: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for def in &world.attribute_defs {
        let batches = schedule(&world.corpus, def, &policy, config.silver_budget, 64)?;
        let (annotations, run_report) = run_bulk(&teacher, &batches, 4, Some(&latency))?;
        annotation_runs.push(run_report);
        silver_by_attr.insert(def.name.clone(), annotations);
    }

    // One student per attribute, gated on held-out fidelity.
    let mut distillation = Vec::new();
    let mut students = Vec::new();
    let mut gate_failure: Option<(String, FidelityReport)> = None;
    for def in &world.attribute_defs {
        let annotations = &silver_by_attr[&def.name];
        let mut silver = silver_examples(&world.corpus, annotations)?;
        if config.corrupt_silver {
            for example in &mut silver {
                example.teacher_score = 1.0 - example.teacher_score;
                example.teacher_label = example.teacher_score >= def.decision_threshold;
            }
        }
        let (student, log) = train_student(&def.name, def.version, &silver, &config.distill)?;

        let silver_ids: BTreeSet<&String> = annotations.iter().map(|a| &a.video_id).collect();
        let mut held_out_pool: Vec<&String> =
            all_ids.iter().filter(|id| !silver_ids.contains(id)).collect();
        if held_out_pool.is_empty() {
            held_out_pool = all_ids.iter().collect();
        }
        held_out_pool.shuffle(&mut rng);
        held_out_pool.truncate(config.held_out_size.max(1));
        let held_out: Vec<SilverExample> = held_out_pool
            .iter()
            .map(|id| {
                let record = world.corpus.record(id).expect("pool ids are corpus ids");
                let score = teacher
                    .score(&def.name, &record.embedding)
                    .expect("known attribute");
                SilverExample {
                    embedding: record.embedding.clone(),
                    teacher_score: score,
                    teacher_label: score >= def.decision_threshold,
                }
            })
            .collect();
        let fidelity = evaluate_fidelity(&student, &held_out, def.decision_threshold)?;
        if fidelity.agreement < config.fidelity_gate
            || fidelity.mean_abs_score_gap > config.fidelity_gap_limit
        {
            gate_failure.get_or_insert((def.name.clone(), fidelity.clone()));
        }
        distillation.push(DistillationStageReport {
            attribute: def.name.clone(),
            silver_examples: silver.len(),
            final_validation_loss: log.validation_loss_per_epoch.last().copied(),
            fidelity,
            vocabulary_size: 0,
        });
        students.push(student);
    }
    if let Some((attribute, fidelity)) = gate_failure {
        return Err(ReplayError::FidelityGate {
            attribute,
            agreement: fidelity.agreement,
            gap: fidelity.mean_abs_score_gap,
            required_agreement: config.fidelity_gate,
            gap_limit: config.fidelity_gap_limit,
        });
    }

    // Students annotate everything; vocabularies come from those labels.
    let mut corpus = world.corpus.clone();
    for (def, student) in world.attribute_defs.iter().zip(&students) {
        let annotations = bulk_score(student, &world.corpus, def, 0)?;
        let upsert = corpus.upsert_annotations(annotations);
        debug_assert!(upsert.rejected.is_empty());
    }
    let mut vocabularies = Vec::new();
    for (def, stage) in world.attribute_defs.iter().zip(distillation.iter_mut()) {
        let vocab =
            corpus.build_vocabulary(def, def.decision_threshold, VocabularyPolicy::StudentOnly)?;
        stage.vocabulary_size = vocab.len();
        vocabularies.push(vocab);
    }

    // Paired offline A/B: unrestricted baseline vs student-vocabulary
    // restricted treatment.
    let baseline = ArmConfig::unrestricted("baseline", config.k);
    let treatment = ArmConfig::restricted("treatment", vocabularies, config.k);
    let (baseline, treatment, delta) =
        run_ab(&world, &baseline, &treatment, config.sessions_per_user)?;

    Ok(ConsolidatedReport {
        seed: config.world.seed,
        world: config.world.clone(),
        golden_size,
        teacher_evaluation,
        annotation_runs,
        distillation,
        fidelity_gate: config.fidelity_gate,
        fidelity_gap_limit: config.fidelity_gap_limit,
        fidelity_gate_passed: true,
        baseline,
        treatment,
        delta,
    })
}

//! Experiment orchestration: one condition in, one metrics report out.
//!
//! A condition is (attack kind, intensity, poison rate, target component)
//! over the seeded synthetic benchmark. The flow per evaluation instance
//! is retrieve Top-M, rerank to Top-K, generate, compare to gold. With the
//! attack kind `None` the pipeline runs without any retrieved context at
//! all (the bare-model baseline); `RagClean` runs the untouched knowledge
//! base.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::ToyAnswerModel;
use crate::harness::bench::{
    instance_query, retrieve_context, synth_benchmark_with, Benchmark, PipelineConfig,
    DEFAULT_STEALTH_EPS, POSITIVE_ANSWER,
};
use crate::harness::metrics::{metrics, MetricsReport};
use crate::harness::poison::{poison_kb, AttackSettings, AttackerContext, CraftKind, InjectionSummary};
use crate::kb::KnowledgeBase;
use crate::rerank::BilinearReranker;
use crate::retrieval::Query;

/// The ten seeds shipped with the crate; experiments default to the first.
pub const DEFAULT_SEEDS: [u64; 10] = [11, 23, 37, 41, 53, 67, 71, 83, 97, 101];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// Bare model: retrieval disabled, empty context.
    None,
    /// Retrieval enabled over the clean knowledge base.
    RagClean,
    /// Textual poisoning (negation flip, or white-box at `PlusPlus`).
    Textpo,
    /// Visual poisoning (embedding-space, or pixel-space at `PlusPlus`).
    Imapo,
    /// Joint cross-modal poisoning.
    Mixed,
    /// Independent text and image poisoning superposed on each entry.
    MixedSuperpose,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttackKind::None,
            "rag_clean" | "rag-clean" | "clean" => AttackKind::RagClean,
            "textpo" => AttackKind::Textpo,
            "imapo" => AttackKind::Imapo,
            "mixed" => AttackKind::Mixed,
            "mixed_superpose" | "mixed-superpose" => AttackKind::MixedSuperpose,
            other => {
                return Err(Error::Precondition(format!(
                    "unknown attack kind '{other}' (none|rag_clean|textpo|imapo|mixed|mixed_superpose)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intensity {
    Standard,
    /// Doubled optimizer iterations and the white-box attack variants.
    PlusPlus,
}

impl Intensity {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => Intensity::Standard,
            "plusplus" | "++" => Intensity::PlusPlus,
            other => {
                return Err(Error::Precondition(format!(
                    "unknown intensity '{other}' (standard|plusplus)"
                )))
            }
        })
    }
}

/// Which pipeline stage the injections target; `All` is the full attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetComponent {
    All,
    Retriever,
    Reranker,
    Generator,
}

impl TargetComponent {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => TargetComponent::All,
            "retriever" => TargetComponent::Retriever,
            "reranker" => TargetComponent::Reranker,
            "generator" => TargetComponent::Generator,
            other => {
                return Err(Error::Precondition(format!(
                    "unknown component '{other}' (all|retriever|reranker|generator)"
                )))
            }
        })
    }
}

/// Everything one experimental condition needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Benchmark instance count (half train, half eval) and knowledge-base
    /// size.
    pub n: usize,
    pub dim: usize,
    pub noise_level: f64,
    pub poison_rate: f64,
    pub attack_kind: AttackKind,
    pub intensity: Intensity,
    pub target_component: TargetComponent,
    pub stealth_eps: f64,
    pub pipeline: PipelineConfig,
    pub attack: AttackSettings,
    /// Size of the attacker's representative query sample.
    pub attacker_queries: usize,
    pub target_answer: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: DEFAULT_SEEDS[0],
            n: 200,
            dim: 64,
            noise_level: 0.1,
            poison_rate: 0.15,
            attack_kind: AttackKind::RagClean,
            intensity: Intensity::Standard,
            target_component: TargetComponent::All,
            stealth_eps: DEFAULT_STEALTH_EPS,
            pipeline: PipelineConfig::default(),
            attack: AttackSettings::default(),
            attacker_queries: 8,
            target_answer: "No".into(),
        }
    }
}

impl ExperimentConfig {
    /// Human-readable condition label used in reports, e.g.
    /// `mixed++ (35%)`.
    pub fn condition_label(&self) -> String {
        let rate = format!("{:.0}%", self.poison_rate * 100.0);
        let plus = if self.intensity == Intensity::PlusPlus {
            "++"
        } else {
            ""
        };
        let component = match self.target_component {
            TargetComponent::All => String::new(),
            TargetComponent::Retriever => " [retriever]".into(),
            TargetComponent::Reranker => " [reranker]".into(),
            TargetComponent::Generator => " [generator]".into(),
        };
        match self.attack_kind {
            AttackKind::None => "no-rag".into(),
            AttackKind::RagClean => "clean-rag".into(),
            AttackKind::Textpo => format!("textpo{plus} ({rate}){component}"),
            AttackKind::Imapo => format!("imapo{plus} ({rate}){component}"),
            AttackKind::Mixed => format!("mixed{plus} ({rate}){component}"),
            AttackKind::MixedSuperpose => format!("mixed-superpose{plus} ({rate}){component}"),
        }
    }

    fn craft_kind(&self) -> CraftKind {
        match self.target_component {
            TargetComponent::Retriever => CraftKind::RetrieverAlign,
            TargetComponent::Reranker => CraftKind::RerankerScale,
            TargetComponent::Generator => CraftKind::GeneratorPush,
            TargetComponent::All => match (self.attack_kind, self.intensity) {
                (AttackKind::Textpo, Intensity::Standard) => CraftKind::TextFlip,
                (AttackKind::Textpo, Intensity::PlusPlus) => CraftKind::TextWhitebox,
                (AttackKind::Imapo, Intensity::Standard) => CraftKind::ImageEmbedding,
                (AttackKind::Imapo, Intensity::PlusPlus) => CraftKind::ImagePixel,
                (AttackKind::Mixed, _) => CraftKind::CrossModal,
                (AttackKind::MixedSuperpose, _) => CraftKind::Superpose,
                (AttackKind::None | AttackKind::RagClean, _) => CraftKind::TextFlip,
            },
        }
    }

    fn attack_iters(&self) -> usize {
        match self.intensity {
            Intensity::Standard => self.attack.iters,
            Intensity::PlusPlus => self.attack.iters * 2,
        }
    }
}

/// A finished condition: the metrics plus the gate statistics when
/// poisoning ran.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub injection: Option<InjectionSummary>,
}

/// Seeded sample of training-split queries standing in for the attacker's
/// knowledge of the query distribution.
pub fn attacker_query_sample(
    benchmark: &Benchmark,
    kb: &KnowledgeBase,
    count: usize,
    seed: u64,
) -> Result<Vec<Query>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77ac);
    let train = benchmark.train_split();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(count.max(1).min(train.len()));
    idx.iter()
        .map(|&i| instance_query(&train[i], kb.text_encoder(), kb.image_encoder()))
        .collect()
}

/// Apply the configured poisoning to a (cloned) knowledge base.
pub fn apply_poisoning(
    kb: &mut KnowledgeBase,
    cfg: &ExperimentConfig,
    benchmark: &Benchmark,
    model: &ToyAnswerModel,
) -> Result<Option<InjectionSummary>> {
    match cfg.attack_kind {
        AttackKind::None | AttackKind::RagClean => Ok(None),
        _ => {
            let queries = attacker_query_sample(benchmark, kb, cfg.attacker_queries, cfg.seed)?;
            let ctx = AttackerContext {
                model,
                queries: &queries,
                target_answer: cfg.target_answer.clone(),
            };
            let summary = poison_kb(
                kb,
                cfg.poison_rate,
                cfg.craft_kind(),
                cfg.attack_iters(),
                cfg.seed ^ 0x9015,
                &ctx,
                &cfg.attack,
            )?;
            Ok(Some(summary))
        }
    }
}

/// Evaluate the pipeline on the benchmark's evaluation split against the
/// given (possibly poisoned) knowledge base.
pub fn evaluate(
    benchmark: &Benchmark,
    kb: &KnowledgeBase,
    model: &ToyAnswerModel,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let mut predictions = Vec::new();
    let mut golds = Vec::new();
    for inst in benchmark.eval_split() {
        let query = instance_query(inst, kb.text_encoder(), kb.image_encoder())?;
        let context = if cfg.attack_kind == AttackKind::None {
            Vec::new()
        } else {
            retrieve_context(&query, kb, &cfg.pipeline)?
        };
        predictions.push(model.generate(&query, &context)?.to_string());
        golds.push(inst.gold_answer.clone());
    }
    Ok(metrics(&predictions, &golds, POSITIVE_ANSWER)?.with_condition(&cfg.condition_label()))
}

/// Run one condition end to end: build the benchmark, poison the knowledge
/// base as configured, and score the evaluation split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (benchmark, kb, model) =
        synth_benchmark_with(cfg.seed, cfg.n, cfg.dim, cfg.noise_level, &cfg.pipeline, cfg.stealth_eps)?;
    run_with_benchmark(&benchmark, &kb, &model, cfg)
}

/// Run one condition against pre-built benchmark artifacts. The knowledge
/// base is cloned, never mutated, so several conditions can share a build.
pub fn run_with_benchmark(
    benchmark: &Benchmark,
    clean_kb: &KnowledgeBase,
    model: &ToyAnswerModel,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    let mut kb = clean_kb.clone();
    let injection = apply_poisoning(&mut kb, cfg, benchmark, model)?;
    let report = evaluate(benchmark, &kb, model, cfg)?;
    Ok(ExperimentOutcome { report, injection })
}

/// Run a list of conditions over one shared benchmark build per seed.
pub fn run_suite(base: &ExperimentConfig, conditions: &[ExperimentConfig]) -> Result<Vec<ExperimentOutcome>> {
    let (benchmark, kb, model) = synth_benchmark_with(
        base.seed,
        base.n,
        base.dim,
        base.noise_level,
        &base.pipeline,
        base.stealth_eps,
    )?;
    conditions
        .iter()
        .map(|cfg| run_with_benchmark(&benchmark, &kb, &model, cfg))
        .collect()
}

/// Signatures of the three stage-targeted poisoning modes on a controlled
/// fixture; see [`ablation_diagnostic`].
#[derive(Debug, Clone)]
pub struct AblationDiagnostic {
    /// Retriever mode displaced at least one benign entry from Top-M.
    pub retriever_changes_topm: bool,
    /// Reranker mode left every benign Top-M member, order, and score
    /// bit-identical.
    pub reranker_preserves_benign_topm: bool,
    /// Reranker mode changed the Top-K context.
    pub reranker_changes_topk: bool,
    /// Generator mode flipped the answer with the Top-K context held fixed
    /// (the injected entry swapped in for its base).
    pub generator_flips_answer_fixed_context: bool,
}

impl AblationDiagnostic {
    pub fn all_hold(&self) -> bool {
        self.retriever_changes_topm
            && self.reranker_preserves_benign_topm
            && self.reranker_changes_topk
            && self.generator_flips_answer_fixed_context
    }
}

/// Verify that each component-targeted poisoning mode perturbs exactly its
/// own stage on a small controlled fixture.
pub fn ablation_diagnostic(seed: u64) -> Result<AblationDiagnostic> {
    use crate::harness::poison::craft_injection;
    use crate::rerank::top_k;
    use crate::retrieval::top_m;

    let cfg = ExperimentConfig {
        seed,
        n: 40,
        dim: 32,
        ..ExperimentConfig::default()
    };
    let (benchmark, kb, model) =
        synth_benchmark_with(cfg.seed, cfg.n, cfg.dim, cfg.noise_level, &cfg.pipeline, cfg.stealth_eps)?;
    let queries = attacker_query_sample(&benchmark, &kb, cfg.attacker_queries, seed)?;
    let ctx = AttackerContext {
        model: &model,
        queries: &queries,
        target_answer: cfg.target_answer.clone(),
    };
    let settings = AttackSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a6);

    // a diagnostic query whose clean answer is the positive label, so the
    // generator push toward the target ("No") is observable
    let mut probe = None;
    for inst in benchmark.eval_split() {
        let q = instance_query(inst, kb.text_encoder(), kb.image_encoder())?;
        let context = retrieve_context(&q, &kb, &cfg.pipeline)?;
        if !context.is_empty() && model.generate(&q, &context)? == POSITIVE_ANSWER {
            probe = Some((q, context.iter().map(|e| e.id.clone()).collect::<Vec<_>>()));
            break;
        }
    }
    let (query, _) = probe.ok_or_else(|| {
        Error::Precondition("diagnostic fixture found no positive-answer instance".into())
    })?;

    // clean-stage outputs with a binding M
    let clean_all = top_m(&query, &kb, &crate::retrieval::RetrievalConfig {
        m: kb.len(),
        ..cfg.pipeline.retrieval
    })?;
    if clean_all.is_empty() {
        return Err(Error::Precondition("diagnostic query retrieves nothing".into()));
    }
    let m_binding = clean_all.len().min(5).max(1);
    let retr_cfg = crate::retrieval::RetrievalConfig {
        m: m_binding,
        ..cfg.pipeline.retrieval
    };
    let clean_topm_ids: Vec<String> = top_m(&query, &kb, &retr_cfg)?
        .iter()
        .map(|s| s.entry.id.clone())
        .collect();

    // --- retriever mode: the injected entry displaces a benign member ---
    let retriever_changes_topm = {
        let mut kb2 = kb.clone();
        let base_id = clean_topm_ids.last().unwrap().clone();
        let draft = craft_injection(
            CraftKind::RetrieverAlign,
            &base_id,
            &kb2,
            &ctx,
            &settings,
            300,
            "diag-retr",
            2_000_000,
            &mut rng,
        )?;
        kb2.submit_injection(draft, &base_id)?;
        let poisoned: Vec<String> = top_m(&query, &kb2, &retr_cfg)?
            .iter()
            .map(|s| s.entry.id.clone())
            .collect();
        let benign_members: Vec<&String> =
            poisoned.iter().filter(|id| !id.starts_with("diag-")).collect();
        poisoned.contains(&"diag-retr".to_string())
            && benign_members.len() < clean_topm_ids.len()
    };

    // --- reranker mode: benign retrieval untouched, Top-K changed ---
    let wide_cfg = crate::retrieval::RetrievalConfig {
        m: kb.len() + 8,
        ..cfg.pipeline.retrieval
    };
    let reranker = {
        let mut kb2 = kb.clone();
        let clean_wide = top_m(&query, &kb, &wide_cfg)?;
        let rerank_model = BilinearReranker::seeded(cfg.pipeline.rerank.seed, kb.dim())?;
        let clean_topk: Vec<String> = top_k(&clean_wide, &query, &cfg.pipeline.rerank, &rerank_model)?
            .iter()
            .map(|r| r.entry.id.clone())
            .collect();
        // base the clone on the most relevant clean context entry
        let base_id = clean_topk[0].clone();
        let draft = craft_injection(
            CraftKind::RerankerScale,
            &base_id,
            &kb2,
            &ctx,
            &settings,
            10,
            "diag-rerank",
            2_000_001,
            &mut rng,
        )?;
        kb2.submit_injection(draft, &base_id)?;

        let poisoned_wide = top_m(&query, &kb2, &wide_cfg)?;
        let benign_seq: Vec<(String, u64)> = poisoned_wide
            .iter()
            .filter(|s| !s.entry.id.starts_with("diag-"))
            .map(|s| (s.entry.id.clone(), s.score.to_bits()))
            .collect();
        let clean_seq: Vec<(String, u64)> = clean_wide
            .iter()
            .map(|s| (s.entry.id.clone(), s.score.to_bits()))
            .collect();
        let preserved = benign_seq == clean_seq;

        let poisoned_topk: Vec<String> =
            top_k(&poisoned_wide, &query, &cfg.pipeline.rerank, &rerank_model)?
                .iter()
                .map(|r| r.entry.id.clone())
                .collect();
        (preserved, poisoned_topk != clean_topk)
    };

    // --- generator mode: answer flips with the context held fixed ---
    let generator_flips = {
        let mut kb2 = kb.clone();
        let clean_context = retrieve_context(&query, &kb, &cfg.pipeline)?;
        let clean_ids: Vec<String> = clean_context.iter().map(|e| e.id.clone()).collect();
        let base_id = clean_ids[0].clone();
        let strong = AttackSettings {
            // the diagnostic wants a guaranteed flip, not a stealthy one
            stealth_fit: false,
            ..settings.clone()
        };
        let draft = craft_injection(
            CraftKind::GeneratorPush,
            &base_id,
            &kb2,
            &ctx,
            &strong,
            600,
            "diag-gen",
            2_000_002,
            &mut rng,
        )?;
        let mut kb3 = kb2.clone();
        kb3.set_stealth_eps(f64::INFINITY)?;
        kb3.submit_injection(draft, &base_id)?;

        let before = model.generate(&query, &clean_context)?.to_string();
        // same Top-K slots, with the injected entry standing in for its base
        let swapped: Vec<&crate::kb::KBEntry> = clean_ids
            .iter()
            .map(|id| {
                if *id == base_id {
                    kb3.get("diag-gen").unwrap()
                } else {
                    kb3.get(id).unwrap()
                }
            })
            .collect();
        let after = model.generate(&query, &swapped)?.to_string();
        before == POSITIVE_ANSWER && after != before
    };

    Ok(AblationDiagnostic {
        retriever_changes_topm,
        reranker_preserves_benign_topm: reranker.0,
        reranker_changes_topk: reranker.1,
        generator_flips_answer_fixed_context: generator_flips,
    })
}

//! Seeded synthetic VQA benchmark: latent-condition image/report pairs, a
//! populated knowledge base, and an answer model trained on the clean
//! pipeline.
//!
//! The latent condition is binary ("finding present" or not). It drives a
//! bright patch block in the image and the phrasing of the report, so the
//! modalities are genuinely correlated and a linear model can separate the
//! classes; the noise level controls how cleanly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::generator::{pool_features, train_logistic, AnswerVocab, ToyAnswerModel};
use crate::kb::{KBEntry, KnowledgeBase};
use crate::rerank::{BilinearReranker, RerankConfig};
use crate::retrieval::{Query, RetrievalConfig};
use crate::vecmath::PixelGrid;

pub const IMAGE_SIZE: usize = 16;
pub const PATCH_SIZE: usize = 4;
pub const DEFAULT_STEALTH_EPS: f64 = 0.15;

/// Retrieval + rerank stage settings shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieval: RetrievalConfig::default(),
            rerank: RerankConfig::default(),
        }
    }
}

/// One benchmark task: an image, a question about it, and the gold answer.
#[derive(Debug, Clone)]
pub struct VQAInstance {
    pub id: String,
    pub image: PixelGrid,
    pub question: String,
    pub gold_answer: String,
    /// Ground-truth latent condition; used only by the benchmark generator
    /// and kept for diagnostics.
    pub abnormal: bool,
}

/// The instance set plus everything needed to run the pipeline on it.
/// Instances split in half: the first half trains the answer model, the
/// second half is the evaluation set.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub instances: Vec<VQAInstance>,
    pub dim: usize,
    pub seed: u64,
    pub noise_level: f64,
}

impl Benchmark {
    pub fn train_split(&self) -> &[VQAInstance] {
        &self.instances[..self.instances.len() / 2]
    }

    pub fn eval_split(&self) -> &[VQAInstance] {
        &self.instances[self.instances.len() / 2..]
    }
}

const ABNORMAL_REPORTS: [&str; 5] = [
    "There is consolidation in the right lower lobe.",
    "Patchy opacity with focal consolidation.",
    "Findings are consistent with pneumonia and consolidation.",
    "New consolidation concerning for infection.",
    "There is a pleural effusion with adjacent consolidation.",
];

const NORMAL_REPORTS: [&str; 5] = [
    "No acute cardiopulmonary abnormality.",
    "No focal consolidation or effusion.",
    "The lungs are clear without consolidation.",
    "No consolidation, effusion, or pneumothorax.",
    "Heart size is normal with no consolidation.",
];

const QUESTIONS: [&str; 3] = [
    "Is there consolidation in the lungs?",
    "Does the image show an acute abnormality?",
    "Is there evidence of consolidation or effusion?",
];

pub const POSITIVE_ANSWER: &str = "Yes";
pub const NEGATIVE_ANSWER: &str = "No";

/// Condition-dependent image: a dim background with a bright block of
/// patches when the finding is present, plus Gaussian pixel noise scaled
/// by `noise_level`.
fn condition_image(abnormal: bool, noise_level: f64, rng: &mut ChaCha8Rng) -> PixelGrid {
    PixelGrid::from_fn(IMAGE_SIZE, IMAGE_SIZE, |r, c| {
        let in_block = (4..12).contains(&r) && (4..12).contains(&c);
        let base = if abnormal && in_block { 0.75 } else { 0.35 };
        let z: f64 = StandardNormal.sample(rng);
        (base + noise_level * 0.15 * z).clamp(0.0, 1.0)
    })
}

fn condition_report(abnormal: bool, rng: &mut ChaCha8Rng) -> &'static str {
    if abnormal {
        ABNORMAL_REPORTS[rng.random_range(0..ABNORMAL_REPORTS.len())]
    } else {
        NORMAL_REPORTS[rng.random_range(0..NORMAL_REPORTS.len())]
    }
}

/// Embed an instance into a retrieval query.
pub fn instance_query(
    inst: &VQAInstance,
    text_encoder: &TextEncoder,
    image_encoder: &ImageEncoder,
) -> Result<Query> {
    Query::new(
        image_encoder.embed_image(&inst.image)?,
        text_encoder.embed_text(&inst.question)?,
        &inst.question,
    )
}

/// Run retrieval and reranking for a query and return the context entries.
pub fn retrieve_context<'a>(
    query: &Query,
    kb: &'a KnowledgeBase,
    pipeline: &PipelineConfig,
) -> Result<Vec<&'a KBEntry>> {
    let candidates = crate::retrieval::top_m(query, kb, &pipeline.retrieval)?;
    let model = BilinearReranker::seeded(pipeline.rerank.seed, kb.dim())?;
    let ranked = crate::rerank::top_k(&candidates, query, &pipeline.rerank, &model)?;
    Ok(ranked.into_iter().map(|r| r.entry).collect())
}

/// Generate the benchmark, populate the knowledge base with benign pairs,
/// and train the answer model on the clean pipeline over the train split.
///
/// Everything is a pure function of the arguments; the same seed gives the
/// same benchmark, knowledge base, and model bit for bit. Training must
/// reach 90% accuracy on the clean pipeline or this errors with advice to
/// raise `n` or lower `noise_level`.
pub fn synth_benchmark(
    seed: u64,
    n: usize,
    dim: usize,
    noise_level: f64,
) -> Result<(Benchmark, KnowledgeBase, ToyAnswerModel)> {
    synth_benchmark_with(seed, n, dim, noise_level, &PipelineConfig::default(), DEFAULT_STEALTH_EPS)
}

/// [`synth_benchmark`] with explicit pipeline settings and gate threshold.
pub fn synth_benchmark_with(
    seed: u64,
    n: usize,
    dim: usize,
    noise_level: f64,
    pipeline: &PipelineConfig,
    stealth_eps: f64,
) -> Result<(Benchmark, KnowledgeBase, ToyAnswerModel)> {
    if n < 20 {
        return Err(Error::Precondition(format!(
            "benchmark needs n >= 20 instances, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::Precondition(format!(
            "noise_level must be in [0,1], got {noise_level}"
        )));
    }
    let text_encoder = TextEncoder::new(seed ^ 0x7e57_7e57, dim)?;
    let image_encoder = ImageEncoder::new(seed ^ 0x1a6e_1a6e, dim, PATCH_SIZE, IMAGE_SIZE, IMAGE_SIZE)?;
    let mut kb = KnowledgeBase::new(text_encoder, image_encoder, stealth_eps)?;

    // knowledge base population: independent draws of the same generative
    // process, timestamped with a logical counter for reproducibility
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let abnormal = rng.random_bool(0.5);
        let image = condition_image(abnormal, noise_level, &mut rng);
        let report = condition_report(abnormal, &mut rng);
        let draft = kb.draft_from_raw(&format!("kb-{i:04}"), report, image, "benchmark", i as u64)?;
        kb.insert_benign(draft)?;
    }

    // benchmark instances
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let abnormal = rng.random_bool(0.5);
        let image = condition_image(abnormal, noise_level, &mut rng);
        let question = QUESTIONS[rng.random_range(0..QUESTIONS.len())];
        instances.push(VQAInstance {
            id: format!("q-{i:04}"),
            image,
            question: question.to_string(),
            gold_answer: if abnormal { POSITIVE_ANSWER } else { NEGATIVE_ANSWER }.to_string(),
            abnormal,
        });
    }
    let benchmark = Benchmark {
        instances,
        dim,
        seed,
        noise_level,
    };

    // train on the clean pipeline over the first half
    let vocab = AnswerVocab::yes_no();
    let mut examples = Vec::new();
    for inst in benchmark.train_split() {
        let query = instance_query(inst, kb.text_encoder(), kb.image_encoder())?;
        let context = retrieve_context(&query, &kb, pipeline)?;
        let phi = pool_features(dim, &query, &context)?;
        let label = vocab.index_of(&inst.gold_answer).expect("answer in vocab");
        examples.push((phi, label));
    }
    let model = train_logistic(&examples, dim, vocab, 300, 2.0, 1e-4)?;

    // the clean-pipeline accuracy gate
    let mut correct = 0usize;
    for inst in benchmark.train_split() {
        let query = instance_query(inst, kb.text_encoder(), kb.image_encoder())?;
        let context = retrieve_context(&query, &kb, pipeline)?;
        if model.generate(&query, &context)? == inst.gold_answer {
            correct += 1;
        }
    }
    let train_acc = correct as f64 / benchmark.train_split().len() as f64;
    if train_acc < 0.9 {
        return Err(Error::Precondition(format!(
            "answer model reached only {:.1}% clean accuracy; increase n or lower noise_level",
            100.0 * train_acc
        )));
    }

    Ok((benchmark, kb, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_benchmark() {
        let (b1, kb1, m1) = synth_benchmark(7, 40, 32, 0.1).unwrap();
        let (b2, kb2, m2) = synth_benchmark(7, 40, 32, 0.1).unwrap();
        assert_eq!(kb1.to_file_string(), kb2.to_file_string());
        assert_eq!(m1, m2);
        assert_eq!(b1.instances.len(), b2.instances.len());
        for (a, b) in b1.instances.iter().zip(&b2.instances) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.question, b.question);
            assert_eq!(a.gold_answer, b.gold_answer);
        }
    }

    #[test]
    fn zero_noise_reaches_perfect_clean_accuracy() {
        let pipeline = PipelineConfig::default();
        let (bench, kb, model) = synth_benchmark(3, 60, 64, 0.0).unwrap();
        let mut correct = 0usize;
        for inst in bench.eval_split() {
            let q = instance_query(inst, kb.text_encoder(), kb.image_encoder()).unwrap();
            let ctx = retrieve_context(&q, &kb, &pipeline).unwrap();
            if model.generate(&q, &ctx).unwrap() == inst.gold_answer {
                correct += 1;
            }
        }
        assert_eq!(correct, bench.eval_split().len());
    }

    #[test]
    fn minimum_instance_count_enforced() {
        assert!(synth_benchmark(1, 20, 32, 0.1).is_ok());
        assert!(matches!(
            synth_benchmark(1, 19, 32, 0.1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn kb_entries_are_benign_and_consistent() {
        let (_, kb, _) = synth_benchmark(11, 24, 32, 0.2).unwrap();
        assert_eq!(kb.len(), 24);
        assert_eq!(kb.benign_ids().len(), 24);
        kb.verify_digests().unwrap();
    }

    #[test]
    fn reports_are_flippable_by_the_negation_rules() {
        let (_, kb, _) = synth_benchmark(13, 30, 32, 0.1).unwrap();
        for e in kb.entries() {
            let flip = crate::attacks::ta_blackbox(&e.report_text).unwrap();
            assert!(!flip.is_noop(), "no rule fires on {:?}", e.report_text);
        }
    }
}

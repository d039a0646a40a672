//! Craft adversarial entries from selected benign bases and push them
//! through the knowledge-base gate.
//!
//! The attacker here plays the semi-open threat model: it may read the
//! knowledge base, knows the answer model, and holds a sample of
//! representative queries, but every injection must pass the stealth gate.
//! Candidates that would overshoot the gate are blended back toward their
//! base pair first (the attacker self-enforcing the plausibility bound);
//! anything still rejected is counted, not fatal.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{
    cmci, ta_blackbox, ta_whitebox, va_global, CmciConfig, TaConfig, VaConfig, VaMode,
};
use crate::diffusion::{synthesize_seed, AnalyticGaussianDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::generator::ToyAnswerModel;
use crate::kb::{dsem_embeddings, EntryDraft, ImageData, KBEntry, KnowledgeBase};
use crate::retrieval::Query;
use crate::vecmath::{cosine, l2_norm, Embedding, PixelGrid};

/// What the attacker knows: the answer model and a representative query
/// sample drawn from the same distribution the victim serves.
#[derive(Debug, Clone)]
pub struct AttackerContext<'a> {
    pub model: &'a ToyAnswerModel,
    pub queries: &'a [Query],
    pub target_answer: String,
}

/// Attack optimizer knobs used by the harness when crafting injections.
#[derive(Debug, Clone)]
pub struct AttackSettings {
    /// Optimizer iterations at standard intensity; the "++" variants double
    /// this.
    pub iters: usize,
    pub alpha: f64,
    pub beta_step: f64,
    pub eps_ball: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Blend over-aggressive candidates back toward their base pair until
    /// they satisfy the gate.
    pub stealth_fit: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            iters: 300,
            alpha: 0.05,
            beta_step: 0.05,
            eps_ball: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            stealth_fit: true,
        }
    }
}

/// How one injection is crafted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CraftKind {
    /// Black-box negation flip of the base report.
    TextFlip,
    /// White-box ascent on the text embedding.
    TextWhitebox,
    /// Visual attack in embedding space from a synthesized seed.
    ImageEmbedding,
    /// Visual attack in pixel space from a synthesized seed.
    ImagePixel,
    /// Joint cross-modal optimization of the pair.
    CrossModal,
    /// Flipped text plus an embedding-space visual attack on one entry.
    Superpose,
    /// Ablation: push both embeddings toward the query directions so only
    /// the retrieval score is optimized.
    RetrieverAlign,
    /// Ablation: scale both embeddings by a power of two; retrieval
    /// cosines are bit-identical to the base, relevance is amplified.
    RerankerScale,
    /// Ablation: cross-modal optimizer with the alignment term off, so only
    /// the generator objective is optimized.
    GeneratorPush,
}

/// Outcome counters for one poisoning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSummary {
    pub attempts: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub mean_dsem: f64,
    pub injected_ids: Vec<String>,
}

impl InjectionSummary {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

/// Scale factor for [`CraftKind::RerankerScale`]; a power of two keeps the
/// scaled cosines bit-identical.
pub const RERANK_SCALE: f64 = 8.0;

fn blend(a: &[f64], b: &[f64], gamma: f64) -> Vec<f64> {
    // gamma = 1 is the full candidate, 0 is the base
    a.iter()
        .zip(b)
        .map(|(base, cand)| base + gamma * (cand - base))
        .collect()
}

/// Largest blend factor in [0, 1] whose pair distance stays within the
/// gate. `dsem_at(0)` is the base itself (distance zero), so a feasible
/// point always exists; the returned factor is re-verified.
fn fit_gamma(eps: f64, dsem_at: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if dsem_at(1.0)? <= eps {
        return Ok(1.0);
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if dsem_at(mid)? <= eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// The candidate embeddings and raw payloads before gate fitting.
struct Candidate {
    report_text: String,
    image: ImageData,
    image_emb: Embedding,
    text_emb: Embedding,
}

/// Simple cosine-sum ascent used by the retrieval-only ablation crafting:
/// move `start` toward high summed cosine with `targets`.
fn align_embedding(start: &Embedding, targets: &[&Embedding], iters: usize, alpha: f64) -> Result<Embedding> {
    let mut e = start.as_slice().to_vec();
    let objective = |v: &[f64]| -> Result<f64> {
        let mut total = 0.0;
        for t in targets {
            total += cosine(v, t)?;
        }
        Ok(total)
    };
    let mut f = objective(&e)?;
    for _ in 0..iters {
        let norm = l2_norm(&e);
        if norm == 0.0 {
            return Err(Error::DegenerateVector("alignment embedding"));
        }
        let unit: Vec<f64> = e.iter().map(|v| v / norm).collect();
        let mut grad = vec![0.0; e.len()];
        for t in targets {
            let tn = t.l2_norm();
            let c = cosine(&e, t)?;
            for ((g, tv), u) in grad.iter_mut().zip(t.iter()).zip(&unit) {
                *g += tv / (tn * norm) - c * u / norm;
            }
        }
        // backtracking halving, same policy as the attack optimizers
        let mut a = alpha;
        for _ in 0..40 {
            let cand: Vec<f64> = e.iter().zip(&grad).map(|(x, g)| x + a * g).collect();
            if let Ok(fc) = objective(&cand) {
                if fc >= f {
                    e = cand;
                    f = fc;
                    break;
                }
            }
            a *= 0.5;
        }
    }
    Embedding::new(e)
}

fn craft(
    kind: CraftKind,
    base: &KBEntry,
    kb: &KnowledgeBase,
    ctx: &AttackerContext<'_>,
    settings: &AttackSettings,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate> {
    let base_image = match &base.image {
        ImageData::Inline(g) => g.clone(),
        ImageData::Reference(_) => {
            return Err(Error::Precondition(format!(
                "attack base '{}' has no inline image",
                base.id
            )))
        }
    };
    let pick_query = |rng: &mut ChaCha8Rng| ctx.queries[rng.random_range(0..ctx.queries.len())].clone();

    match kind {
        CraftKind::TextFlip => {
            let flip = ta_blackbox(&base.report_text)?;
            let text_emb = kb.text_encoder().embed_text(&flip.text)?;
            Ok(Candidate {
                report_text: flip.text,
                image: ImageData::Inline(base_image),
                image_emb: base.image_emb.clone(),
                text_emb,
            })
        }
        CraftKind::TextWhitebox => {
            let cfg = TaConfig {
                alpha: settings.alpha,
                iters,
                target_answer: ctx.target_answer.clone(),
                line_search: true,
            };
            let r = ta_whitebox(ctx.queries, &base.image_emb, &base.text_emb, ctx.model, &cfg)?;
            Ok(Candidate {
                report_text: String::new(),
                image: ImageData::Inline(base_image),
                image_emb: base.image_emb.clone(),
                text_emb: r.text_emb.expect("textual attack returns a text embedding"),
            })
        }
        CraftKind::ImageEmbedding | CraftKind::ImagePixel => {
            // diffusion-synthesized seed image shaped like the base
            let schedule = NoiseSchedule::default_linear();
            let denoiser = AnalyticGaussianDenoiser::new(base_image.as_slice().to_vec(), 0.1)?;
            let seed_img = synthesize_seed(
                &base.report_text,
                base_image.height(),
                base_image.width(),
                &schedule,
                &denoiser,
                rng.random(),
            )?;
            let mode = if kind == CraftKind::ImagePixel {
                VaMode::Pixel
            } else {
                VaMode::Embedding
            };
            let cfg = VaConfig {
                alpha: settings.alpha,
                iters,
                mode,
                line_search: true,
            };
            let r = va_global(ctx.queries, &seed_img, kb.image_encoder(), &cfg)?;
            let (image, image_emb) = match r.image {
                Some(img) => {
                    let emb = kb.image_encoder().embed_image(&img)?;
                    (ImageData::Inline(img), emb)
                }
                None => (
                    ImageData::Reference(format!("va-emb:{}", base.id)),
                    r.image_emb.expect("embedding-mode attack returns an embedding"),
                ),
            };
            Ok(Candidate {
                report_text: base.report_text.clone(),
                image,
                image_emb,
                text_emb: base.text_emb.clone(),
            })
        }
        CraftKind::CrossModal | CraftKind::GeneratorPush => {
            let cfg = CmciConfig {
                lambda1: if kind == CraftKind::GeneratorPush {
                    0.0
                } else {
                    settings.lambda1
                },
                lambda2: settings.lambda2,
                alpha: settings.alpha,
                beta_step: settings.beta_step,
                eps_ball: settings.eps_ball,
                iters,
                target_answer: ctx.target_answer.clone(),
                line_search: true,
                image_first: true,
            };
            let q = pick_query(rng);
            let r = cmci(&base_image, &base.text_emb, &q, ctx.model, kb.image_encoder(), &cfg)?;
            let img = r.image.expect("cross-modal attack returns an image");
            let image_emb = kb.image_encoder().embed_image(&img)?;
            Ok(Candidate {
                report_text: String::new(),
                image: ImageData::Inline(img),
                image_emb,
                text_emb: r.text_emb.expect("cross-modal attack returns a text embedding"),
            })
        }
        CraftKind::Superpose => {
            let flip = ta_blackbox(&base.report_text)?;
            let text_emb = kb.text_encoder().embed_text(&flip.text)?;
            let cfg = VaConfig {
                alpha: settings.alpha,
                iters,
                mode: VaMode::Embedding,
                line_search: true,
            };
            let r = va_global(ctx.queries, &base_image, kb.image_encoder(), &cfg)?;
            Ok(Candidate {
                report_text: flip.text,
                image: ImageData::Reference(format!("va-emb:{}", base.id)),
                image_emb: r.image_emb.expect("embedding-mode attack returns an embedding"),
                text_emb,
            })
        }
        CraftKind::RetrieverAlign => {
            let image_targets: Vec<&Embedding> = ctx.queries.iter().map(|q| &q.image_emb).collect();
            let text_targets: Vec<&Embedding> = ctx.queries.iter().map(|q| &q.question_emb).collect();
            let image_emb = align_embedding(&base.image_emb, &image_targets, iters, settings.alpha)?;
            let text_emb = align_embedding(&base.text_emb, &text_targets, iters, settings.alpha)?;
            Ok(Candidate {
                report_text: String::new(),
                image: ImageData::Reference(format!("retr:{}", base.id)),
                image_emb,
                text_emb,
            })
        }
        CraftKind::RerankerScale => Ok(Candidate {
            report_text: String::new(),
            image: ImageData::Reference(format!("rerank:{}", base.id)),
            image_emb: base.image_emb.scaled(RERANK_SCALE)?,
            text_emb: base.text_emb.scaled(RERANK_SCALE)?,
        }),
    }
}

/// Blend a crafted candidate toward its base until the gate accepts it.
/// Inline images are blended in pixel space and re-encoded so embedding
/// consistency survives; reference images blend their embedding directly.
/// Candidates with raw text keep it untouched (their distance is already
/// small); embedding-only text blends freely.
fn stealth_fit(cand: Candidate, base: &KBEntry, kb: &KnowledgeBase) -> Result<Candidate> {
    let eps = kb.stealth_eps();
    let base_image = match &base.image {
        ImageData::Inline(g) => Some(g),
        ImageData::Reference(_) => None,
    };
    let blend_text = cand.report_text.is_empty();

    let realize = |gamma: f64, cand: &Candidate| -> Result<Candidate> {
        let (image, image_emb) = match (&cand.image, base_image) {
            (ImageData::Inline(g), Some(bg)) if g.same_shape(bg) => {
                let px = blend(bg.as_slice(), g.as_slice(), gamma);
                let img = PixelGrid::new(g.height(), g.width(), px)?;
                let emb = kb.image_encoder().embed_image(&img)?;
                (ImageData::Inline(img), emb)
            }
            _ => {
                let e = blend(&base.image_emb, &cand.image_emb, gamma);
                (cand.image.clone(), Embedding::new(e)?)
            }
        };
        let text_emb = if blend_text {
            Embedding::new(blend(&base.text_emb, &cand.text_emb, gamma))?
        } else {
            cand.text_emb.clone()
        };
        Ok(Candidate {
            report_text: cand.report_text.clone(),
            image,
            image_emb,
            text_emb,
        })
    };

    let dsem_at = |gamma: f64| -> Result<f64> {
        let c = realize(gamma, &cand)?;
        dsem_embeddings(&base.image_emb, &base.text_emb, &c.image_emb, &c.text_emb)
    };
    let gamma = fit_gamma(eps, dsem_at)?;
    realize(gamma, &cand)
}

/// Craft one injection draft for a given base entry. Exposed for the
/// stage-isolation diagnostics; [`poison_kb`] drives it across a whole
/// knowledge base.
pub fn craft_injection(
    kind: CraftKind,
    base_id: &str,
    kb: &KnowledgeBase,
    ctx: &AttackerContext<'_>,
    settings: &AttackSettings,
    iters: usize,
    injection_id: &str,
    timestamp: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EntryDraft> {
    if ctx.queries.is_empty() {
        return Err(Error::Precondition("attacker context has no queries".into()));
    }
    let base = kb
        .get(base_id)
        .ok_or_else(|| Error::UnknownId(base_id.to_string()))?
        .clone();
    let mut cand = craft(kind, &base, kb, ctx, settings, iters, rng)?;
    if settings.stealth_fit {
        cand = stealth_fit(cand, &base, kb)?;
    }
    Ok(EntryDraft {
        id: injection_id.to_string(),
        report_text: cand.report_text,
        image: cand.image,
        image_emb: cand.image_emb,
        text_emb: cand.text_emb,
        source: "poison".into(),
        timestamp,
    })
}

/// Select `floor(rate * benign_count)` benign bases (seeded, without
/// replacement), craft one injection per base, and submit each through the
/// stealth gate. Rejections are counted in the summary, never fatal.
pub fn poison_kb(
    kb: &mut KnowledgeBase,
    rate: f64,
    kind: CraftKind,
    iters: usize,
    seed: u64,
    ctx: &AttackerContext<'_>,
    settings: &AttackSettings,
) -> Result<InjectionSummary> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Precondition(format!(
            "poison rate must be in [0,1], got {rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bases = kb.benign_ids();
    bases.sort();
    let count = (rate * bases.len() as f64).floor() as usize;
    bases.shuffle(&mut rng);
    bases.truncate(count);

    let mut summary = InjectionSummary {
        attempts: 0,
        accepted: 0,
        rejected: 0,
        mean_dsem: 0.0,
        injected_ids: Vec::new(),
    };
    let mut dsem_sum = 0.0;
    for (k, base_id) in bases.iter().enumerate() {
        let injection_id = format!("inj-{k:04}");
        let timestamp = 1_000_000 + k as u64;
        let draft = craft_injection(
            kind,
            base_id,
            kb,
            ctx,
            settings,
            iters,
            &injection_id,
            timestamp,
            &mut rng,
        )?;
        let outcome = kb.submit_injection(draft, base_id)?;
        summary.attempts += 1;
        dsem_sum += outcome.dsem();
        match outcome {
            crate::kb::InjectionOutcome::Accepted { id, .. } => {
                summary.accepted += 1;
                summary.injected_ids.push(id);
            }
            crate::kb::InjectionOutcome::Rejected { .. } => summary.rejected += 1,
        }
    }
    if summary.attempts > 0 {
        summary.mean_dsem = dsem_sum / summary.attempts as f64;
    }
    Ok(summary)
}

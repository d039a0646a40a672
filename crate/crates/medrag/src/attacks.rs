//! The three poisoning attack optimizers plus the black-box negation flip
//! and the stealth check.
//!
//! - **TA** (textual): gradient ascent on the summed log-probability of a
//!   target answer with respect to an adversarial text embedding, or a
//!   rule-based negation flip when no gradients are available.
//! - **VA** (visual, global): gradient ascent on the summed cosine between
//!   one adversarial image and many query text embeddings, in pixel space
//!   (through the linear encoder) or directly in embedding space.
//! - **CMCI** (cross-modal conflict injection): alternating ascent on a
//!   weighted sum of an image-text alignment term and the log-probability
//!   of a misleading answer, with the image projected back into an
//!   L-infinity ball around the original every step.
//!
//! All optimizers support backtracking line search (step halving whenever a
//! step would decrease the objective), which makes every objective trace
//! non-decreasing; a fixed-step mode reproduces plain gradient ascent.

use std::fmt::Write as _;

use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::generator::{GradBlock, ToyAnswerModel};
use crate::kb::{dsem_embeddings, ImageData, KBEntry, Provenance, Tag};
use crate::retrieval::Query;
use crate::vecmath::{self, cosine, l2_norm, project_linf, Embedding, PixelGrid};

/// Textual attack settings. The query-set size `d` is the length of the
/// query list handed to [`ta_whitebox`].
#[derive(Debug, Clone)]
pub struct TaConfig {
    pub alpha: f64,
    pub iters: usize,
    pub target_answer: String,
    /// Backtracking halving on (monotone trace) or plain fixed steps.
    pub line_search: bool,
}

impl Default for TaConfig {
    fn default() -> Self {
        TaConfig {
            alpha: 0.05,
            iters: 500,
            target_answer: "No".into(),
            line_search: true,
        }
    }
}

/// Whether the visual attack optimizes raw pixels through the encoder or
/// the image embedding directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaMode {
    Pixel,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct VaConfig {
    pub alpha: f64,
    pub iters: usize,
    pub mode: VaMode,
    pub line_search: bool,
}

impl Default for VaConfig {
    fn default() -> Self {
        VaConfig {
            alpha: 0.05,
            iters: 500,
            mode: VaMode::Embedding,
            line_search: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CmciConfig {
    /// Weight of the cross-modal alignment term.
    pub lambda1: f64,
    /// Weight of the misleading-answer log-probability term.
    pub lambda2: f64,
    /// Image step size.
    pub alpha: f64,
    /// Text step size.
    pub beta_step: f64,
    /// Radius of the L-infinity ball the image must stay inside.
    pub eps_ball: f64,
    pub iters: usize,
    pub target_answer: String,
    pub line_search: bool,
    /// Update the image before the text each iteration (the shipped order);
    /// flip to update text first.
    pub image_first: bool,
}

impl Default for CmciConfig {
    fn default() -> Self {
        CmciConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 0.05,
            beta_step: 0.05,
            eps_ball: 0.1,
            iters: 500,
            target_answer: "No".into(),
            line_search: true,
            image_first: true,
        }
    }
}

impl CmciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0) {
            return Err(Error::Precondition(
                "lambda1, lambda2 must be >= 0 and not both zero".into(),
            ));
        }
        if !(self.eps_ball >= 0.0) {
            return Err(Error::Precondition(format!(
                "eps_ball must be >= 0, got {}",
                self.eps_ball
            )));
        }
        if !(self.alpha > 0.0) || !(self.beta_step > 0.0) {
            return Err(Error::Precondition("step sizes must be > 0".into()));
        }
        Ok(())
    }
}

/// One recorded optimizer iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    /// Stealth distance of the current candidate pair to the attack's base
    /// pair (channel-restricted for the single-modality attacks).
    pub dsem: f64,
}

/// Output of one attack run: the optimized artifacts, the per-iteration
/// trace, and the final stealth distance. `accepted` stays `None` until
/// the candidate has actually been pushed through a knowledge-base gate.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub text_emb: Option<Embedding>,
    pub image: Option<PixelGrid>,
    pub image_emb: Option<Embedding>,
    pub trace: Vec<TracePoint>,
    pub final_objective: f64,
    pub exit_grad_norm: f64,
    pub dsem: f64,
    pub accepted: Option<bool>,
}

impl AttackResult {
    /// CSV export of the trace: `iter,objective,grad_norm,dsem` header plus
    /// one row per recorded iterate.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,objective,grad_norm,dsem\n");
        for p in &self.trace {
            let _ = writeln!(out, "{},{},{},{}", p.iter, p.objective, p.grad_norm, p.dsem);
        }
        out
    }

    /// Objective trace values only.
    pub fn objectives(&self) -> Vec<f64> {
        self.trace.iter().map(|p| p.objective).collect()
    }
}

/// Ascent step with optional backtracking.
///
/// Tries `project(x + a g)`; while the projected step would decrease the
/// objective (or fails to evaluate), halves `a`. Gives up after ~60
/// halvings and returns `x` unchanged, so with line search enabled the
/// returned objective never decreases.
fn ascent_step(
    x: &[f64],
    f0: f64,
    grad: &[f64],
    alpha0: f64,
    line_search: bool,
    project: impl Fn(&[f64]) -> Result<Vec<f64>>,
    objective: impl Fn(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, f64)> {
    let mut a = alpha0;
    for _ in 0..60 {
        let stepped: Vec<f64> = x.iter().zip(grad).map(|(xi, gi)| xi + a * gi).collect();
        let cand = project(&stepped)?;
        match objective(&cand) {
            Ok(f) if f.is_finite() && (!line_search || f >= f0) => return Ok((cand, f)),
            Ok(f) if !f.is_finite() && !line_search => {
                return Err(Error::NonFinite("attack objective"))
            }
            Ok(_) => {}
            Err(e) if !line_search => return Err(e),
            Err(_) => {}
        }
        a *= 0.5;
    }
    Ok((x.to_vec(), f0))
}

/// Scratch context entry holding a candidate (image embedding, text
/// embedding) pair during optimization.
fn scratch_entry(image_emb: Embedding, text_emb: Embedding) -> KBEntry {
    KBEntry {
        id: "adv-candidate".into(),
        report_text: String::new(),
        image: ImageData::Reference("adv-candidate".into()),
        image_emb,
        text_emb,
        provenance: Provenance {
            source: "attack-optimizer".into(),
            timestamp: 0,
            digest: String::new(),
            tag: Tag::Injected,
            injected_from: None,
        },
    }
}

// ---------------------------------------------------------------------------
// Textual attack
// ---------------------------------------------------------------------------

/// Result of the rule-based negation flip.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipResult {
    pub text: String,
    /// Number of sentences a rule fired on; zero means the input passed
    /// through untouched (the "no-op" status).
    pub flipped_sentences: usize,
}

impl FlipResult {
    pub fn is_noop(&self) -> bool {
        self.flipped_sentences == 0
    }
}

/// Finding terms the flip rules anchor on.
const FINDINGS: &[&str] = &[
    "consolidation",
    "consolidations",
    "effusion",
    "effusions",
    "pneumothorax",
    "edema",
    "cardiomegaly",
    "opacity",
    "opacities",
    "atelectasis",
    "fracture",
    "fractures",
    "pneumonia",
    "abnormality",
    "abnormalities",
    "infiltrate",
    "infiltrates",
    "lesion",
    "mass",
    "nodule",
    "congestion",
    "emphysema",
    "fibrosis",
    "thickening",
];

/// Marker pairs (negated form, affirmed form). Each rule is a swap between
/// the two sides, so every rule is an involution by construction. The
/// first pair's affirmed side is empty: deleting a bare "no" affirms, and
/// the insertion rule restores it.
const MARKER_PAIRS: &[(&[&str], &[&str])] = &[
    (&["no"], &[]),
    (&["without"], &["with"]),
    (&["negative", "for"], &["positive", "for"]),
    (&["absence", "of"], &["presence", "of"]),
    (&["free", "of"], &["notable", "for"]),
    (&["clear", "of"], &["concerning", "for"]),
];

/// Words the insertion rule will not scan past when locating the start of
/// the finding's noun phrase.
const PHRASE_BOUNDARY: &[&str] = &[
    "the", "a", "an", "is", "are", "was", "were", "of", "with", "without", "within", "there",
    "in", "on", "at", "for", "and", "or", "to", "shows", "show", "showing", "demonstrates",
    "demonstrate", "reveals", "reveal", "seen", "noted", "suggests", "suggest", "no",
];

fn normalize_token(tok: &str) -> String {
    tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Flip the factual polarity of one sentence. Returns `None` when no rule
/// applies.
fn flip_sentence(sentence: &str) -> Option<String> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let norm: Vec<String> = words.iter().map(|w| normalize_token(w)).collect();
    let finding = norm.iter().position(|t| FINDINGS.contains(&t.as_str()))?;

    // matches a marker sequence starting at word j, returning its
    // replacement and length
    let match_marker = |j: usize| -> Option<(&'static [&'static str], usize)> {
        for (neg, aff) in MARKER_PAIRS {
            if !neg.is_empty()
                && j + neg.len() <= finding
                && neg.iter().zip(&norm[j..]).all(|(m, t)| *m == t)
            {
                return Some((aff, neg.len()));
            }
            if !aff.is_empty()
                && j + aff.len() <= finding
                && aff.iter().zip(&norm[j..]).all(|(m, t)| *m == t)
            {
                return Some((neg, aff.len()));
            }
        }
        None
    };

    // swap rule: the last marker occurrence before the finding
    for j in (0..finding).rev() {
        if let Some((replacement, len)) = match_marker(j) {
            let was_sentence_initial =
                j == 0 && words[0].chars().next().is_some_and(char::is_uppercase);
            let mut out: Vec<String> = Vec::new();
            out.extend(words[..j].iter().map(|w| w.to_string()));
            out.extend(replacement.iter().map(|w| w.to_string()));
            out.extend(words[j + len..].iter().map(|w| w.to_string()));
            if was_sentence_initial {
                if let Some(first) = out.first_mut() {
                    *first = capitalize_first(first);
                }
            }
            return Some(out.join(" "));
        }
    }

    // insertion rule: prepend "no" at the start of the finding's phrase
    let mut pos = finding;
    while pos > 0 && !PHRASE_BOUNDARY.contains(&norm[pos - 1].as_str()) {
        pos -= 1;
    }
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    if pos == 0 && words[0].chars().next().is_some_and(char::is_uppercase) {
        out[0] = lowercase_first(&out[0]);
        out.insert(0, "No".into());
    } else {
        out.insert(pos, "no".into());
    }
    Some(out.join(" "))
}

/// Rule-based negation flip over a whole report: the black-box textual
/// attack. The first applicable rule fires once per sentence; sentences
/// with no matching rule pass through unchanged.
pub fn ta_blackbox(report: &str) -> Result<FlipResult> {
    if report.trim().is_empty() {
        return Err(Error::EmptyText("report to flip"));
    }
    let mut out = String::new();
    let mut flipped = 0usize;
    let mut rest = report;
    while !rest.is_empty() {
        let end = rest.find(['.', '!', '?']).map(|i| i + 1).unwrap_or(rest.len());
        let (sentence, tail) = rest.split_at(end);
        let terminal = sentence
            .chars()
            .last()
            .filter(|c| ['.', '!', '?'].contains(c));
        let body = match terminal {
            Some(_) => &sentence[..sentence.len() - 1],
            None => sentence,
        };
        // preserve surrounding whitespace exactly
        let lead_len = body.len() - body.trim_start().len();
        let trail_len = body.trim_start().len() - body.trim().len();
        let core = body.trim();
        match flip_sentence(core) {
            Some(newcore) if newcore != core => {
                flipped += 1;
                out.push_str(&body[..lead_len]);
                out.push_str(&newcore);
                out.push_str(&body[body.len() - trail_len..]);
            }
            _ => out.push_str(body),
        }
        if let Some(t) = terminal {
            out.push(t);
        }
        rest = tail;
    }
    Ok(FlipResult {
        text: out,
        flipped_sentences: flipped,
    })
}

// ---------------------------------------------------------------------------
// White-box optimizers
// ---------------------------------------------------------------------------

/// Objective of the white-box textual attack: the summed log-probability of
/// the target answer across the query set, as a function of the candidate
/// text embedding.
pub fn ta_objective(
    t_adv: &[f64],
    queries: &[Query],
    image_emb: &Embedding,
    model: &ToyAnswerModel,
    target: &str,
) -> Result<f64> {
    let entry = scratch_entry(image_emb.clone(), Embedding::new(t_adv.to_vec())?);
    let mut total = 0.0;
    for q in queries {
        total += model.log_prob(target, q, &[&entry])?;
    }
    Ok(total)
}

fn ta_gradient(
    t_adv: &[f64],
    queries: &[Query],
    image_emb: &Embedding,
    model: &ToyAnswerModel,
    target: &str,
) -> Result<Vec<f64>> {
    let entry = scratch_entry(image_emb.clone(), Embedding::new(t_adv.to_vec())?);
    let mut grad = vec![0.0; t_adv.len()];
    for q in queries {
        let g = model.grad_logp(target, q, &[&entry], 0, GradBlock::TextEmb)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok(grad)
}

/// Gradient-ascent textual attack: optimize a text embedding to maximize
/// the likelihood of the target answer across a set of queries, with the
/// paired image embedding held fixed.
pub fn ta_whitebox(
    queries: &[Query],
    image_emb: &Embedding,
    t_init: &Embedding,
    model: &ToyAnswerModel,
    cfg: &TaConfig,
) -> Result<AttackResult> {
    if queries.is_empty() {
        return Err(Error::Precondition("textual attack needs >= 1 query".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Precondition("step size alpha must be > 0".into()));
    }
    if t_init.is_zero() {
        return Err(Error::DegenerateVector("initial text embedding"));
    }
    model
        .vocab()
        .index_of(&cfg.target_answer)
        .ok_or_else(|| Error::UnknownId(format!("answer label '{}'", cfg.target_answer)))?;

    let dsem_of = |t: &[f64]| -> Result<f64> {
        // image channel unchanged by this attack, so its cosine is 1
        Ok(0.5 * (1.0 - cosine(t, t_init)?))
    };
    let objective = |t: &[f64]| ta_objective(t, queries, image_emb, model, &cfg.target_answer);

    let mut t = t_init.as_slice().to_vec();
    let mut f = objective(&t)?;
    let mut grad = ta_gradient(&t, queries, image_emb, model, &cfg.target_answer)?;
    let mut trace = vec![TracePoint {
        iter: 0,
        objective: f,
        grad_norm: l2_norm(&grad),
        dsem: dsem_of(&t)?,
    }];

    for iter in 1..=cfg.iters {
        let (next, fnext) =
            ascent_step(&t, f, &grad, cfg.alpha, cfg.line_search, |x| Ok(x.to_vec()), objective)?;
        t = next;
        f = fnext;
        grad = ta_gradient(&t, queries, image_emb, model, &cfg.target_answer)?;
        trace.push(TracePoint {
            iter,
            objective: f,
            grad_norm: l2_norm(&grad),
            dsem: dsem_of(&t)?,
        });
    }

    let exit_grad_norm = trace.last().map(|p| p.grad_norm).unwrap_or(0.0);
    let dsem = trace.last().map(|p| p.dsem).unwrap_or(0.0);
    Ok(AttackResult {
        text_emb: Some(Embedding::new(t)?),
        image: None,
        image_emb: Some(image_emb.clone()),
        trace,
        final_objective: f,
        exit_grad_norm,
        dsem,
        accepted: None,
    })
}

/// Objective of the global visual attack: the summed cosine between the
/// candidate image embedding and every query's text embedding.
pub fn va_objective(image_emb: &[f64], queries: &[Query]) -> Result<f64> {
    let mut total = 0.0;
    for q in queries {
        total += cosine(image_emb, &q.question_emb)?;
    }
    Ok(total)
}

/// Gradient of [`va_objective`] with respect to a free embedding vector.
fn va_embedding_gradient(e: &[f64], queries: &[Query]) -> Result<Vec<f64>> {
    let norm = l2_norm(e);
    if norm == 0.0 {
        return Err(Error::DegenerateVector("visual attack embedding"));
    }
    let unit: Vec<f64> = e.iter().map(|v| v / norm).collect();
    let mut grad = vec![0.0; e.len()];
    for q in queries {
        let qn = q.question_emb.l2_norm();
        let c = cosine(e, &q.question_emb)?;
        for ((g, qv), u) in grad.iter_mut().zip(q.question_emb.iter()).zip(&unit) {
            *g += (qv / (qn * norm)) - c * u / norm;
        }
    }
    Ok(grad)
}

/// Cotangent on the (normalized) image embedding for the pixel-space
/// gradient: the sum of normalized query text embeddings.
fn va_embedding_cotangent(queries: &[Query]) -> Result<Vec<f64>> {
    let d = queries[0].question_emb.dim();
    let mut cot = vec![0.0; d];
    for q in queries {
        let qn = q.question_emb.l2_norm();
        if qn == 0.0 {
            return Err(Error::DegenerateVector("query text embedding"));
        }
        for (c, v) in cot.iter_mut().zip(q.question_emb.iter()) {
            *c += v / qn;
        }
    }
    Ok(cot)
}

/// Global visual attack: optimize one image (or its embedding) to score
/// highly against many query text embeddings at once.
///
/// Pixel mode ascends through the linear encoder and clamps pixels to
/// `[0, 1]` after every step; embedding mode ascends on the embedding
/// directly, starting from the encoding of `img_init`.
pub fn va_global(
    queries: &[Query],
    img_init: &PixelGrid,
    encoder: &ImageEncoder,
    cfg: &VaConfig,
) -> Result<AttackResult> {
    if queries.is_empty() {
        return Err(Error::Precondition("visual attack needs >= 1 query".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Precondition("step size alpha must be > 0".into()));
    }
    let e_init = encoder.embed_image(img_init)?;

    match cfg.mode {
        VaMode::Embedding => {
            let objective = |e: &[f64]| va_objective(e, queries);
            let dsem_of = |e: &[f64]| -> Result<f64> { Ok(0.5 * (1.0 - cosine(e, &e_init)?)) };

            let mut e = e_init.as_slice().to_vec();
            let mut f = objective(&e)?;
            let mut grad = va_embedding_gradient(&e, queries)?;
            let mut trace = vec![TracePoint {
                iter: 0,
                objective: f,
                grad_norm: l2_norm(&grad),
                dsem: dsem_of(&e)?,
            }];
            for iter in 1..=cfg.iters {
                let (next, fnext) =
                    ascent_step(&e, f, &grad, cfg.alpha, cfg.line_search, |x| Ok(x.to_vec()), objective)?;
                e = next;
                f = fnext;
                grad = va_embedding_gradient(&e, queries)?;
                trace.push(TracePoint {
                    iter,
                    objective: f,
                    grad_norm: l2_norm(&grad),
                    dsem: dsem_of(&e)?,
                });
            }
            let exit_grad_norm = trace.last().map(|p| p.grad_norm).unwrap_or(0.0);
            let dsem = trace.last().map(|p| p.dsem).unwrap_or(0.0);
            Ok(AttackResult {
                text_emb: None,
                image: None,
                image_emb: Some(Embedding::new(e)?),
                trace,
                final_objective: f,
                exit_grad_norm,
                dsem,
                accepted: None,
            })
        }
        VaMode::Pixel => {
            let (h, w) = (img_init.height(), img_init.width());
            let objective = |px: &[f64]| -> Result<f64> {
                let img = PixelGrid::new(h, w, px.to_vec())?;
                va_objective(&encoder.embed_image(&img)?, queries)
            };
            let gradient = |px: &[f64]| -> Result<Vec<f64>> {
                let img = PixelGrid::new(h, w, px.to_vec())?;
                let cot = va_embedding_cotangent(queries)?;
                Ok(encoder.pixel_grad(&img, &cot)?.as_slice().to_vec())
            };
            let dsem_of = |px: &[f64]| -> Result<f64> {
                let img = PixelGrid::new(h, w, px.to_vec())?;
                let e = encoder.embed_image(&img)?;
                Ok(0.5 * (1.0 - cosine(&e, &e_init)?))
            };
            let clamp =
                |px: &[f64]| -> Result<Vec<f64>> { Ok(px.iter().map(|v| v.clamp(0.0, 1.0)).collect()) };

            let mut px = img_init.as_slice().to_vec();
            let mut f = objective(&px)?;
            let mut grad = gradient(&px)?;
            let mut trace = vec![TracePoint {
                iter: 0,
                objective: f,
                grad_norm: l2_norm(&grad),
                dsem: dsem_of(&px)?,
            }];
            for iter in 1..=cfg.iters {
                let (next, fnext) = ascent_step(&px, f, &grad, cfg.alpha, cfg.line_search, clamp, objective)?;
                px = next;
                f = fnext;
                grad = gradient(&px)?;
                trace.push(TracePoint {
                    iter,
                    objective: f,
                    grad_norm: l2_norm(&grad),
                    dsem: dsem_of(&px)?,
                });
            }
            let img = PixelGrid::new(h, w, px)?;
            let e = encoder.embed_image(&img)?;
            let exit_grad_norm = trace.last().map(|p| p.grad_norm).unwrap_or(0.0);
            let dsem = trace.last().map(|p| p.dsem).unwrap_or(0.0);
            Ok(AttackResult {
                text_emb: None,
                image: Some(img),
                image_emb: Some(e),
                trace,
                final_objective: f,
                exit_grad_norm,
                dsem,
                accepted: None,
            })
        }
    }
}

/// The joint CMCI objective value for a candidate (image, text embedding)
/// pair: `lambda1 * cos(f_I(img), text) + lambda2 * log P(target | query,
/// pair)`.
pub fn cmci_objective(
    img: &PixelGrid,
    text_emb: &[f64],
    query: &Query,
    model: &ToyAnswerModel,
    encoder: &ImageEncoder,
    cfg: &CmciConfig,
) -> Result<f64> {
    let e = encoder.embed_image(img)?;
    let align = cosine(&e, text_emb)?;
    let entry = scratch_entry(e, Embedding::new(text_emb.to_vec())?);
    let misalign = model.log_prob(&cfg.target_answer, query, &[&entry])?;
    Ok(cfg.lambda1 * align + cfg.lambda2 * misalign)
}

fn cmci_image_gradient(
    img: &PixelGrid,
    text_emb: &[f64],
    query: &Query,
    model: &ToyAnswerModel,
    encoder: &ImageEncoder,
    cfg: &CmciConfig,
) -> Result<Vec<f64>> {
    let e = encoder.embed_image(img)?;
    let tn = l2_norm(text_emb);
    if tn == 0.0 {
        return Err(Error::DegenerateVector("text embedding"));
    }
    // cotangent on the normalized embedding; the encoder backprop projects
    // onto the tangent space, so passing t-hat alone is exact for the
    // alignment term
    let entry = scratch_entry(e, Embedding::new(text_emb.to_vec())?);
    let g_misalign = model.grad_logp(&cfg.target_answer, query, &[&entry], 0, GradBlock::ImageEmb)?;
    let cot: Vec<f64> = text_emb
        .iter()
        .zip(&g_misalign)
        .map(|(t, g)| cfg.lambda1 * t / tn + cfg.lambda2 * g)
        .collect();
    Ok(encoder.pixel_grad(img, &cot)?.as_slice().to_vec())
}

fn cmci_text_gradient(
    img: &PixelGrid,
    text_emb: &[f64],
    query: &Query,
    model: &ToyAnswerModel,
    encoder: &ImageEncoder,
    cfg: &CmciConfig,
) -> Result<Vec<f64>> {
    let e = encoder.embed_image(img)?;
    let tn = l2_norm(text_emb);
    if tn == 0.0 {
        return Err(Error::DegenerateVector("text embedding"));
    }
    let c = cosine(&e, text_emb)?;
    let entry = scratch_entry(e.clone(), Embedding::new(text_emb.to_vec())?);
    let g_misalign = model.grad_logp(&cfg.target_answer, query, &[&entry], 0, GradBlock::TextEmb)?;
    // d cos(e, t) / dt = (e_hat - cos * t_hat) / |t|, with e already unit
    Ok(text_emb
        .iter()
        .zip(e.iter())
        .zip(&g_misalign)
        .map(|((t, ev), g)| cfg.lambda1 * (ev - c * t / tn) / tn + cfg.lambda2 * g)
        .collect())
}

/// Cross-modal conflict injection: alternating projected ascent on the
/// image and free ascent on the text embedding.
///
/// Every image iterate is projected onto the `eps_ball` L-infinity ball
/// around `base_image` (then clamped to `[0, 1]`), so the ball invariant
/// holds for every recorded iterate exactly.
pub fn cmci(
    base_image: &PixelGrid,
    base_text_emb: &Embedding,
    query: &Query,
    model: &ToyAnswerModel,
    encoder: &ImageEncoder,
    cfg: &CmciConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    model
        .vocab()
        .index_of(&cfg.target_answer)
        .ok_or_else(|| Error::UnknownId(format!("answer label '{}'", cfg.target_answer)))?;
    if base_text_emb.is_zero() {
        return Err(Error::DegenerateVector("base text embedding"));
    }
    let base_image_emb = encoder.embed_image(base_image)?;
    let (h, w) = (base_image.height(), base_image.width());

    let mut img = base_image.clone();
    let mut t = base_text_emb.as_slice().to_vec();

    let dsem_of = |img: &PixelGrid, t: &[f64]| -> Result<f64> {
        let e = encoder.embed_image(img)?;
        let te = Embedding::new(t.to_vec())?;
        dsem_embeddings(&base_image_emb, base_text_emb, &e, &te)
    };

    let mut f = cmci_objective(&img, &t, query, model, encoder, cfg)?;
    let gi = cmci_image_gradient(&img, &t, query, model, encoder, cfg)?;
    let gt = cmci_text_gradient(&img, &t, query, model, encoder, cfg)?;
    let mut grad_norm = (vecmath::dot(&gi, &gi) + vecmath::dot(&gt, &gt)).sqrt();
    let mut trace = vec![TracePoint {
        iter: 0,
        objective: f,
        grad_norm,
        dsem: dsem_of(&img, &t)?,
    }];

    for iter in 1..=cfg.iters {
        let image_pass = |img: &mut PixelGrid, t: &[f64], f: f64| -> Result<f64> {
            let g = cmci_image_gradient(img, t, query, model, encoder, cfg)?;
            let project = |px: &[f64]| -> Result<Vec<f64>> {
                let grid = PixelGrid::new(h, w, px.to_vec())?;
                Ok(project_linf(&grid, base_image, cfg.eps_ball)?.as_slice().to_vec())
            };
            let objective = |px: &[f64]| -> Result<f64> {
                cmci_objective(&PixelGrid::new(h, w, px.to_vec())?, t, query, model, encoder, cfg)
            };
            let (next, fnext) =
                ascent_step(img.as_slice(), f, &g, cfg.alpha, cfg.line_search, project, objective)?;
            *img = PixelGrid::new(h, w, next)?;
            Ok(fnext)
        };
        let text_pass = |img: &PixelGrid, t: &mut Vec<f64>, f: f64| -> Result<f64> {
            let g = cmci_text_gradient(img, t, query, model, encoder, cfg)?;
            let objective =
                |tv: &[f64]| -> Result<f64> { cmci_objective(img, tv, query, model, encoder, cfg) };
            let (next, fnext) =
                ascent_step(t, f, &g, cfg.beta_step, cfg.line_search, |x| Ok(x.to_vec()), objective)?;
            *t = next;
            Ok(fnext)
        };

        if cfg.image_first {
            f = image_pass(&mut img, &t, f)?;
            f = text_pass(&img, &mut t, f)?;
        } else {
            f = text_pass(&img, &mut t, f)?;
            f = image_pass(&mut img, &t, f)?;
        }

        let gi = cmci_image_gradient(&img, &t, query, model, encoder, cfg)?;
        let gt = cmci_text_gradient(&img, &t, query, model, encoder, cfg)?;
        grad_norm = (vecmath::dot(&gi, &gi) + vecmath::dot(&gt, &gt)).sqrt();
        trace.push(TracePoint {
            iter,
            objective: f,
            grad_norm,
            dsem: dsem_of(&img, &t)?,
        });
    }

    let image_emb = encoder.embed_image(&img)?;
    let dsem = trace.last().map(|p| p.dsem).unwrap_or(0.0);
    Ok(AttackResult {
        text_emb: Some(Embedding::new(t)?),
        image: Some(img),
        image_emb: Some(image_emb),
        trace,
        final_objective: f,
        exit_grad_norm: grad_norm,
        dsem,
        accepted: None,
    })
}

/// Evaluate the stealth constraint for a raw candidate pair against a raw
/// base pair: returns `(within_eps, dsem)`.
pub fn check_stealth(
    pair: (&PixelGrid, &str),
    base: (&PixelGrid, &str),
    eps: f64,
    text_encoder: &crate::encoder::TextEncoder,
    image_encoder: &ImageEncoder,
) -> Result<(bool, f64)> {
    let pair_img = image_encoder.embed_image(pair.0)?;
    let pair_txt = text_encoder.embed_text(pair.1)?;
    let base_img = image_encoder.embed_image(base.0)?;
    let base_txt = text_encoder.embed_text(base.1)?;
    let d = dsem_embeddings(&base_img, &base_txt, &pair_img, &pair_txt)?;
    Ok((d <= eps, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::AnswerVocab;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    // -- negation flip ------------------------------------------------------

    #[test]
    fn flip_deletes_leading_negator() {
        let r = ta_blackbox("no acute cardiopulmonary abnormality").unwrap();
        assert_eq!(r.text, "acute cardiopulmonary abnormality");
        assert_eq!(r.flipped_sentences, 1);
    }

    #[test]
    fn flip_inserts_negator_before_finding() {
        let r = ta_blackbox("consolidation in the right lower lobe").unwrap();
        assert_eq!(r.text, "no consolidation in the right lower lobe");
        assert_eq!(r.flipped_sentences, 1);
    }

    #[test]
    fn flip_is_involution_on_rule_matching_sentences() {
        for s in [
            "no acute cardiopulmonary abnormality",
            "consolidation in the right lower lobe",
            "No focal consolidation.",
            "the lungs show patchy opacity",
            "without evidence of effusion",
            "negative for pneumothorax",
            "absence of pleural effusion",
            "free of nodule",
            "there is mild edema",
        ] {
            let once = ta_blackbox(s).unwrap();
            assert_eq!(once.flipped_sentences, 1, "no rule fired on {s:?}");
            let twice = ta_blackbox(&once.text).unwrap();
            assert_eq!(twice.text, s, "not an involution: {s:?} -> {:?}", once.text);
        }
    }

    #[test]
    fn flip_without_swaps_to_with() {
        let r = ta_blackbox("without evidence of effusion").unwrap();
        assert_eq!(r.text, "with evidence of effusion");
    }

    #[test]
    fn flip_no_rule_is_noop() {
        let r = ta_blackbox("the patient is comfortable").unwrap();
        assert!(r.is_noop());
        assert_eq!(r.text, "the patient is comfortable");
    }

    #[test]
    fn flip_handles_multiple_sentences_independently() {
        let r = ta_blackbox("No consolidation. Heart size is normal. There is effusion.").unwrap();
        assert_eq!(r.text, "Consolidation. Heart size is normal. There is no effusion.");
        assert_eq!(r.flipped_sentences, 2);
    }

    #[test]
    fn flip_preserves_sentence_capitalization() {
        let r = ta_blackbox("No acute abnormality.").unwrap();
        assert_eq!(r.text, "Acute abnormality.");
        let back = ta_blackbox(&r.text).unwrap();
        assert_eq!(back.text, "No acute abnormality.");
    }

    #[test]
    fn flip_empty_report_is_error() {
        assert!(ta_blackbox("   ").is_err());
    }

    // -- shared fixtures ----------------------------------------------------

    const DIM: usize = 8;

    fn random_unit(rng: &mut ChaCha8Rng) -> Embedding {
        loop {
            let v: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            if l2_norm(&v) > 1e-6 {
                return Embedding::new(v).unwrap().normalized().unwrap();
            }
        }
    }

    fn random_query(rng: &mut ChaCha8Rng) -> Query {
        Query::new(random_unit(rng), random_unit(rng), "q").unwrap()
    }

    fn test_encoder() -> ImageEncoder {
        ImageEncoder::new(41, DIM, 2, 8, 8).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng) -> PixelGrid {
        PixelGrid::from_fn(8, 8, |_, _| rng.random_range(0.15..0.85))
    }

    // -- ta_whitebox --------------------------------------------------------

    #[test]
    fn ta_zero_iters_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ToyAnswerModel::seeded(1, DIM, AnswerVocab::yes_no());
        let queries = vec![random_query(&mut rng)];
        let t0 = random_unit(&mut rng);
        let cfg = TaConfig {
            iters: 0,
            ..TaConfig::default()
        };
        let r = ta_whitebox(&queries, &random_unit(&mut rng), &t0, &model, &cfg).unwrap();
        assert_eq!(r.text_emb.unwrap(), t0);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn ta_objective_never_decreases_with_line_search() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = ToyAnswerModel::seeded(seed, DIM, AnswerVocab::yes_no());
            let queries: Vec<Query> = (0..3).map(|_| random_query(&mut rng)).collect();
            let cfg = TaConfig {
                iters: 60,
                ..TaConfig::default()
            };
            let r = ta_whitebox(&queries, &random_unit(&mut rng), &random_unit(&mut rng), &model, &cfg)
                .unwrap();
            let objs = r.objectives();
            assert!(objs.windows(2).all(|w| w[1] >= w[0]), "seed {seed}");
            assert!(r.final_objective >= objs[0], "seed {seed}");
        }
    }

    #[test]
    fn ta_converges_to_weight_difference_direction() {
        // two answers; only the context-text block distinguishes them, so the
        // ascent direction is exactly the weight-difference vector
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w_no = vec![0.0; 4 * DIM];
        let mut direction = vec![0.0; DIM];
        for i in 0..DIM {
            direction[i] = rng.random_range(-1.0..1.0);
            w_no[2 * DIM + i] = direction[i];
        }
        let model = ToyAnswerModel::with_weights(
            DIM,
            AnswerVocab::yes_no(),
            vec![vec![0.0; 4 * DIM], w_no],
            vec![0.0, 0.0],
        )
        .unwrap();
        let queries = vec![random_query(&mut rng)];
        let cfg = TaConfig {
            alpha: 0.5,
            iters: 300,
            target_answer: "No".into(),
            line_search: true,
        };
        let t0 = random_unit(&mut rng).scaled(0.01).unwrap();
        let r = ta_whitebox(&queries, &random_unit(&mut rng), &t0, &model, &cfg).unwrap();
        let t_final = r.text_emb.unwrap();
        let c = cosine(&t_final, &direction).unwrap();
        assert!(c >= 0.99, "cosine to optimum direction {c}");
    }

    #[test]
    fn ta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..25 {
            let model = ToyAnswerModel::seeded(trial, DIM, AnswerVocab::yes_no());
            let queries: Vec<Query> = (0..2).map(|_| random_query(&mut rng)).collect();
            let image_emb = random_unit(&mut rng);
            let t: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = ta_gradient(&t, &queries, &image_emb, &model, "No").unwrap();
            let numeric = vecmath::finite_diff_grad(
                |x| ta_objective(x, &queries, &image_emb, &model, "No").unwrap(),
                &t,
                1e-6,
            )
            .unwrap();
            assert!(
                vecmath::max_rel_error(&analytic, &numeric) <= 1e-6,
                "trial {trial}"
            );
        }
    }

    // -- va_global ----------------------------------------------------------

    #[test]
    fn va_single_query_embedding_mode_aligns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let queries = vec![random_query(&mut rng)];
        let cfg = VaConfig {
            iters: 400,
            alpha: 0.1,
            ..VaConfig::default()
        };
        let r = va_global(&queries, &random_image(&mut rng), &test_encoder(), &cfg).unwrap();
        let e = r.image_emb.unwrap();
        let c = cosine(&e, &queries[0].question_emb).unwrap();
        assert!(c >= 0.999, "final cosine {c}");
    }

    #[test]
    fn va_opposite_queries_objective_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_query(&mut rng);
        let neg = Embedding::new(q.question_emb.iter().map(|v| -v).collect()).unwrap();
        let q_neg = Query::new(q.image_emb.clone(), neg, "q-neg").unwrap();
        let queries = vec![q, q_neg];
        let cfg = VaConfig {
            iters: 50,
            ..VaConfig::default()
        };
        let r = va_global(&queries, &random_image(&mut rng), &test_encoder(), &cfg).unwrap();
        for p in &r.trace {
            assert!(p.objective.abs() <= 1e-9, "iter {} objective {}", p.iter, p.objective);
        }
    }

    #[test]
    fn va_three_queries_reach_analytic_optimum() {
        // the optimum of sum_i cos(e, q_i) over directions e is the norm of
        // the sum of normalized queries, attained at their mean direction
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let enc = ImageEncoder::new(41, 4, 2, 8, 8).unwrap();
        let queries: Vec<Query> = (0..3)
            .map(|_| {
                let mut mk = || {
                    let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Embedding::new(v).unwrap().normalized().unwrap()
                };
                Query::new(mk(), mk(), "q").unwrap()
            })
            .collect();
        let mut qsum = vec![0.0; 4];
        for q in &queries {
            for (s, v) in qsum.iter_mut().zip(q.question_emb.iter()) {
                *s += v;
            }
        }
        let optimum = l2_norm(&qsum);

        // no sampled direction beats the analytic optimum
        let mut best_sampled = f64::NEG_INFINITY;
        for _ in 0..100_000 {
            let v: Vec<f64> = (0..4)
                .map(|_| {
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    z
                })
                .collect();
            if l2_norm(&v) < 1e-9 {
                continue;
            }
            best_sampled = best_sampled.max(va_objective(&v, &queries).unwrap());
        }
        assert!(best_sampled <= optimum + 1e-9);

        let cfg = VaConfig {
            iters: 600,
            alpha: 0.1,
            mode: VaMode::Embedding,
            line_search: true,
        };
        let img = PixelGrid::from_fn(8, 8, |r, c| 0.2 + 0.07 * ((r * 8 + c) % 9) as f64);
        let r = va_global(&queries, &img, &enc, &cfg).unwrap();
        assert!(
            (r.final_objective - optimum).abs() <= 1e-3,
            "got {} vs optimum {optimum}",
            r.final_objective
        );
    }

    #[test]
    fn va_objective_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let queries: Vec<Query> = (0..4).map(|_| random_query(&mut rng)).collect();
        let e: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f1 = va_objective(&e, &queries).unwrap();
        for c in [0.2, 3.0, 400.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            let f2 = va_objective(&scaled, &queries).unwrap();
            assert!((f1 - f2).abs() <= 1e-12, "c={c}");
        }
    }

    #[test]
    fn va_pixel_mode_improves_and_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let queries: Vec<Query> = (0..3).map(|_| random_query(&mut rng)).collect();
        let cfg = VaConfig {
            iters: 120,
            alpha: 0.5,
            mode: VaMode::Pixel,
            line_search: true,
        };
        let r = va_global(&queries, &random_image(&mut rng), &test_encoder(), &cfg).unwrap();
        let objs = r.objectives();
        assert!(objs.last().unwrap() > &objs[0]);
        assert!(objs.windows(2).all(|w| w[1] >= w[0]));
        let img = r.image.unwrap();
        assert!(img.as_slice().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn va_pixel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let enc = test_encoder();
        for trial in 0..15 {
            let queries: Vec<Query> = (0..2).map(|_| random_query(&mut rng)).collect();
            let img = random_image(&mut rng);
            let cot = va_embedding_cotangent(&queries).unwrap();
            let analytic = enc.pixel_grad(&img, &cot).unwrap();
            let numeric = vecmath::finite_diff_grad(
                |px| {
                    let g = PixelGrid::new(8, 8, px.to_vec()).unwrap();
                    va_objective(enc.embed_image(&g).unwrap().as_slice(), &queries).unwrap()
                },
                img.as_slice(),
                1e-6,
            )
            .unwrap();
            assert!(
                vecmath::max_rel_error(&numeric, analytic.as_slice()) <= 1e-5,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn va_zero_image_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let queries = vec![random_query(&mut rng)];
        let img = PixelGrid::constant(8, 8, 0.0);
        assert!(va_global(&queries, &img, &test_encoder(), &VaConfig::default()).is_err());
    }

    // -- cmci ---------------------------------------------------------------

    fn cmci_fixture(seed: u64) -> (PixelGrid, Embedding, Query, ToyAnswerModel, ImageEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = test_encoder();
        let img = random_image(&mut rng);
        let t = random_unit(&mut rng);
        let q = random_query(&mut rng);
        let model = ToyAnswerModel::seeded(seed.wrapping_add(100), DIM, AnswerVocab::yes_no());
        (img, t, q, model, enc)
    }

    #[test]
    fn cmci_lambda2_zero_is_pure_alignment_ascent() {
        let (img, t, q, model, enc) = cmci_fixture(21);
        let cfg = CmciConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            iters: 100,
            ..CmciConfig::default()
        };
        let r = cmci(&img, &t, &q, &model, &enc, &cfg).unwrap();
        let initial_align = cosine(&enc.embed_image(&img).unwrap(), &t).unwrap();
        let final_align = cosine(r.image_emb.as_ref().unwrap(), r.text_emb.as_ref().unwrap()).unwrap();
        assert!(final_align >= initial_align);
        let objs = r.objectives();
        assert!(objs.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cmci_eps_zero_freezes_image() {
        let (img, t, q, model, enc) = cmci_fixture(22);
        let cfg = CmciConfig {
            eps_ball: 0.0,
            iters: 40,
            ..CmciConfig::default()
        };
        let r = cmci(&img, &t, &q, &model, &enc, &cfg).unwrap();
        assert_eq!(r.image.unwrap(), img);
        assert_ne!(r.text_emb.unwrap(), t);
    }

    #[test]
    fn cmci_ball_invariant_holds_exactly() {
        for seed in [23u64, 24, 25] {
            let (img, t, q, model, enc) = cmci_fixture(seed);
            let cfg = CmciConfig {
                eps_ball: 0.07,
                iters: 60,
                ..CmciConfig::default()
            };
            let r = cmci(&img, &t, &q, &model, &enc, &cfg).unwrap();
            let dist = r.image.unwrap().linf_distance(&img).unwrap();
            assert!(dist <= cfg.eps_ball, "seed {seed}: {dist}");
        }
    }

    #[test]
    fn cmci_reference_fixture_endpoints() {
        // seeded d_e=8 fixture: after 200 iterations the target probability
        // exceeds its initial value and the pair is cross-modally aligned
        let (img, t, q, model, enc) = cmci_fixture(26);
        let cfg = CmciConfig {
            iters: 200,
            ..CmciConfig::default()
        };
        let p_of = |img: &PixelGrid, t: &Embedding| -> f64 {
            let entry = scratch_entry(enc.embed_image(img).unwrap(), t.clone());
            model.log_prob("No", &q, &[&entry]).unwrap().exp()
        };
        let p0 = p_of(&img, &t);
        let r = cmci(&img, &t, &q, &model, &enc, &cfg).unwrap();
        let p1 = p_of(r.image.as_ref().unwrap(), r.text_emb.as_ref().unwrap());
        assert!(p1 > p0, "target prob {p0} -> {p1}");
        let align = cosine(r.image_emb.as_ref().unwrap(), r.text_emb.as_ref().unwrap()).unwrap();
        assert!(align >= 0.7, "alignment {align}");
    }

    #[test]
    fn cmci_gradients_match_finite_differences() {
        for seed in 0..15u64 {
            let (img, t, q, model, enc) = cmci_fixture(seed.wrapping_add(300));
            let cfg = CmciConfig::default();

            let gi = cmci_image_gradient(&img, &t, &q, &model, &enc, &cfg).unwrap();
            let ni = vecmath::finite_diff_grad(
                |px| {
                    cmci_objective(
                        &PixelGrid::new(8, 8, px.to_vec()).unwrap(),
                        &t,
                        &q,
                        &model,
                        &enc,
                        &cfg,
                    )
                    .unwrap()
                },
                img.as_slice(),
                1e-6,
            )
            .unwrap();
            assert!(vecmath::max_rel_error(&ni, &gi) <= 1e-5, "image seed {seed}");

            let gt = cmci_text_gradient(&img, &t, &q, &model, &enc, &cfg).unwrap();
            let nt = vecmath::finite_diff_grad(
                |tv| cmci_objective(&img, tv, &q, &model, &enc, &cfg).unwrap(),
                &t,
                1e-6,
            )
            .unwrap();
            assert!(vecmath::max_rel_error(&nt, &gt) <= 1e-5, "text seed {seed}");
        }
    }

    #[test]
    fn cmci_missing_target_label_is_error() {
        let (img, t, q, model, enc) = cmci_fixture(27);
        let cfg = CmciConfig {
            target_answer: "Normal Bone".into(),
            ..CmciConfig::default()
        };
        assert!(matches!(
            cmci(&img, &t, &q, &model, &enc, &cfg),
            Err(Error::UnknownId(_))
        ));
    }

    #[test]
    fn cmci_trace_is_monotone_with_line_search() {
        for seed in 0..8u64 {
            let (img, t, q, model, enc) = cmci_fixture(seed.wrapping_add(500));
            let cfg = CmciConfig {
                iters: 50,
                ..CmciConfig::default()
            };
            let r = cmci(&img, &t, &q, &model, &enc, &cfg).unwrap();
            let objs = r.objectives();
            assert!(objs.windows(2).all(|w| w[1] >= w[0]), "seed {seed}");
        }
    }

    // -- check_stealth ------------------------------------------------------

    #[test]
    fn stealth_identical_pair_is_zero() {
        let te = crate::encoder::TextEncoder::new(5, DIM).unwrap();
        let ie = test_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = random_image(&mut rng);
        let (ok, d) =
            check_stealth((&img, "clear lungs"), (&img, "clear lungs"), 0.0, &te, &ie).unwrap();
        assert!(ok);
        assert!(d.abs() <= 1e-12);
    }

    #[test]
    fn stealth_max_eps_accepts_everything() {
        let te = crate::encoder::TextEncoder::new(5, DIM).unwrap();
        let ie = test_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random_image(&mut rng);
        let b = random_image(&mut rng);
        let (ok, d) =
            check_stealth((&a, "severe effusion"), (&b, "clear lungs"), 2.0, &te, &ie).unwrap();
        assert!(ok);
        assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn stealth_hand_value_boundary() {
        // same image, text at cosine 0.9 -> dsem = 0.05: fails eps = 0.04
        let img = Embedding::new(vec![0.6, 0.8]).unwrap();
        let base_txt = Embedding::new(vec![1.0, 0.0]).unwrap();
        let cand_txt = Embedding::new(vec![0.9, (1.0f64 - 0.81).sqrt()]).unwrap();
        let d = dsem_embeddings(&img, &base_txt, &img, &cand_txt).unwrap();
        assert!((d - 0.05).abs() < 1e-12);
        assert!(d > 0.04);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let model = ToyAnswerModel::seeded(2, DIM, AnswerVocab::yes_no());
        let queries = vec![random_query(&mut rng)];
        let cfg = TaConfig {
            iters: 3,
            ..TaConfig::default()
        };
        let r = ta_whitebox(&queries, &random_unit(&mut rng), &random_unit(&mut rng), &model, &cfg)
            .unwrap();
        let csv = r.trace_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,objective,grad_norm,dsem");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,"));
    }
}

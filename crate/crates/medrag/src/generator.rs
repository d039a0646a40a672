//! A differentiable toy answer model: the generation stage of the pipeline.
//!
//! Answers come from a fixed vocabulary; logits are affine in a pooled
//! feature vector `[question_emb; image_emb; context_text_mean;
//! context_image_mean]`, followed by a softmax. Because the logit map is
//! affine in each context embedding block, the gradient of `log P(answer)`
//! with respect to any context text or image embedding is exact and cheap —
//! the hook every white-box attack in this crate uses.
//!
//! Context pooling is an unweighted mean, accumulated in ascending entry-id
//! order so that permuting the context list is a bit-exact no-op.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kb::KBEntry;
use crate::retrieval::Query;
use crate::vecmath::dot;

/// Ordered, unique answer labels (for closed VQA typically `["Yes", "No"]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocab {
    labels: Vec<String>,
}

impl AnswerVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Precondition("answer vocab must be non-empty".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Precondition("answer labels must be non-empty".into()));
            }
            if labels[..i].contains(l) {
                return Err(Error::DuplicateId(l.clone()));
            }
        }
        Ok(AnswerVocab { labels })
    }

    pub fn yes_no() -> Self {
        AnswerVocab {
            labels: vec!["Yes".into(), "No".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Which embedding block of a context entry a gradient is taken with
/// respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradBlock {
    TextEmb,
    ImageEmb,
}

/// Affine-softmax answer model over pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAnswerModel {
    vocab: AnswerVocab,
    dim: usize,
    /// One weight row per answer, each of length `4 * dim`.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl ToyAnswerModel {
    /// All-zero model: every answer is equally likely everywhere.
    pub fn zeros(dim: usize, vocab: AnswerVocab) -> Self {
        let n = vocab.len();
        ToyAnswerModel {
            vocab,
            dim,
            weights: vec![vec![0.0; 4 * dim]; n],
            bias: vec![0.0; n],
        }
    }

    /// Seeded random weights, standard normal scaled by `1/sqrt(4 dim)`.
    pub fn seeded(seed: u64, dim: usize, vocab: AnswerVocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((4 * dim) as f64).sqrt();
        let n = vocab.len();
        let weights = (0..n)
            .map(|_| {
                (0..4 * dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        let bias = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.1
            })
            .collect();
        ToyAnswerModel {
            vocab,
            dim,
            weights,
            bias,
        }
    }

    pub fn with_weights(
        dim: usize,
        vocab: AnswerVocab,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != vocab.len() || bias.len() != vocab.len() {
            return Err(Error::DimensionMismatch {
                context: "answer model rows",
                expected: vocab.len(),
                got: weights.len(),
            });
        }
        for w in &weights {
            if w.len() != 4 * dim {
                return Err(Error::DimensionMismatch {
                    context: "answer model weight row",
                    expected: 4 * dim,
                    got: w.len(),
                });
            }
        }
        Ok(ToyAnswerModel {
            vocab,
            dim,
            weights,
            bias,
        })
    }

    pub fn vocab(&self) -> &AnswerVocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pooled feature vector; see [`pool_features`].
    pub fn features(&self, query: &Query, context: &[&KBEntry]) -> Result<Vec<f64>> {
        pool_features(self.dim, query, context)
    }

    fn logits_from_features(&self, phi: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, phi) + b)
            .collect()
    }

    pub fn logits(&self, query: &Query, context: &[&KBEntry]) -> Result<Vec<f64>> {
        Ok(self.logits_from_features(&self.features(query, context)?))
    }

    /// Softmax distribution over the answer vocabulary. Sums to one within
    /// 1e-12; every probability is strictly positive.
    pub fn answer_distribution(&self, query: &Query, context: &[&KBEntry]) -> Result<Vec<f64>> {
        let logits = self.logits(query, context)?;
        Ok(softmax(&logits))
    }

    /// Argmax answer; ties go to the lowest vocabulary index.
    pub fn generate(&self, query: &Query, context: &[&KBEntry]) -> Result<&str> {
        let probs = self.answer_distribution(query, context)?;
        let mut best = 0;
        for (i, p) in probs.iter().enumerate().skip(1) {
            if *p > probs[best] {
                best = i;
            }
        }
        Ok(&self.vocab.labels[best])
    }

    /// `log P(answer | query, context)`.
    pub fn log_prob(&self, answer: &str, query: &Query, context: &[&KBEntry]) -> Result<f64> {
        let idx = self
            .vocab
            .index_of(answer)
            .ok_or_else(|| Error::UnknownId(format!("answer label '{answer}'")))?;
        let logits = self.logits(query, context)?;
        Ok(logits[idx] - log_sum_exp(&logits))
    }

    /// Exact gradient of `log P(answer)` with respect to one context
    /// entry's text or image embedding.
    ///
    /// The logit map is affine in the context means, so the gradient is
    /// `(w_answer - E_p[w])` restricted to the chosen block, scaled by
    /// `1 / |context|` from the mean pooling. It is the same for every
    /// entry in the context; the index only asserts the target is present.
    pub fn grad_logp(
        &self,
        answer: &str,
        query: &Query,
        context: &[&KBEntry],
        entry_index: usize,
        block: GradBlock,
    ) -> Result<Vec<f64>> {
        let idx = self
            .vocab
            .index_of(answer)
            .ok_or_else(|| Error::UnknownId(format!("answer label '{answer}'")))?;
        if entry_index >= context.len() {
            return Err(Error::Precondition(format!(
                "gradient target entry index {entry_index} not in context of size {}",
                context.len()
            )));
        }
        let phi = self.features(query, context)?;
        let probs = softmax(&self.logits_from_features(&phi));

        let d = self.dim;
        let offset = match block {
            GradBlock::TextEmb => 2 * d,
            GradBlock::ImageEmb => 3 * d,
        };
        let n = context.len() as f64;
        let mut grad = vec![0.0; d];
        for (a, w) in self.weights.iter().enumerate() {
            let coeff = if a == idx { 1.0 - probs[a] } else { -probs[a] };
            for (g, wv) in grad.iter_mut().zip(&w[offset..offset + d]) {
                *g += coeff * wv;
            }
        }
        for g in grad.iter_mut() {
            *g /= n;
        }
        Ok(grad)
    }

    /// Save as `RAGGEN v1 dim=<d> vocab=<n>`, a tab-separated label line,
    /// then one `<bias> <weights...>` row per answer.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "RAGGEN v1 dim={} vocab={}", self.dim, self.vocab.len())
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "labels\t{}", self.vocab.labels.join("\t")).map_err(|e| Error::io(path, e))?;
        for (w, b) in self.weights.iter().zip(&self.bias) {
            let row: Vec<String> = std::iter::once(format!("{b}"))
                .chain(w.iter().map(|v| format!("{v}")))
                .collect();
            writeln!(f, "{}", row.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, 1, "empty file"))?;
        let rest = header
            .strip_prefix("RAGGEN v1 dim=")
            .ok_or_else(|| Error::format(path, 1, format!("bad header {header:?}")))?;
        let (dim_s, vocab_s) = rest
            .split_once(" vocab=")
            .ok_or_else(|| Error::format(path, 1, "missing vocab field"))?;
        let dim: usize = dim_s
            .parse()
            .map_err(|_| Error::format(path, 1, "bad dim"))?;
        let n: usize = vocab_s
            .parse()
            .map_err(|_| Error::format(path, 1, "bad vocab size"))?;

        let label_line = lines
            .next()
            .ok_or_else(|| Error::format(path, 2, "missing label line"))?;
        let mut parts = label_line.split('\t');
        if parts.next() != Some("labels") {
            return Err(Error::format(path, 2, "label line must start with 'labels'"));
        }
        let labels: Vec<String> = parts.map(str::to_string).collect();
        if labels.len() != n {
            return Err(Error::format(
                path,
                2,
                format!("expected {n} labels, got {}", labels.len()),
            ));
        }
        let vocab = AnswerVocab::new(labels).map_err(|e| Error::format(path, 2, e.to_string()))?;

        let mut weights = Vec::with_capacity(n);
        let mut bias = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 3;
            let vals: Vec<f64> = line
                .split(' ')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::format(path, lineno, format!("bad float '{t}'")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 4 * dim + 1 {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("expected {} values, got {}", 4 * dim + 1, vals.len()),
                ));
            }
            bias.push(vals[0]);
            weights.push(vals[1..].to_vec());
        }
        if weights.len() != n {
            return Err(Error::format(
                path,
                1,
                format!("expected {n} weight rows, got {}", weights.len()),
            ));
        }
        ToyAnswerModel::with_weights(dim, vocab, weights, bias)
    }
}

/// Pooled feature vector `[question; image; ctx_text_mean; ctx_image_mean]`
/// of length `4 * dim`.
///
/// An empty context pools to zero blocks. Entries are accumulated in
/// ascending id order, so any permutation of `context` produces the
/// identical vector.
pub fn pool_features(dim: usize, query: &Query, context: &[&KBEntry]) -> Result<Vec<f64>> {
    if query.image_emb.dim() != dim || query.question_emb.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "query embedding",
            expected: dim,
            got: query.image_emb.dim(),
        });
    }
    let mut phi = Vec::with_capacity(4 * dim);
    phi.extend_from_slice(&query.question_emb);
    phi.extend_from_slice(&query.image_emb);

    let mut text_mean = vec![0.0; dim];
    let mut image_mean = vec![0.0; dim];
    if !context.is_empty() {
        let mut ordered: Vec<&KBEntry> = context.to_vec();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        for e in &ordered {
            if e.text_emb.dim() != dim || e.image_emb.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "context embedding",
                    expected: dim,
                    got: e.text_emb.dim(),
                });
            }
            for (acc, v) in text_mean.iter_mut().zip(e.text_emb.iter()) {
                *acc += v;
            }
            for (acc, v) in image_mean.iter_mut().zip(e.image_emb.iter()) {
                *acc += v;
            }
        }
        let n = context.len() as f64;
        for v in text_mean.iter_mut().chain(image_mean.iter_mut()) {
            *v /= n;
        }
    }
    phi.extend_from_slice(&text_mean);
    phi.extend_from_slice(&image_mean);
    Ok(phi)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// A labeled training example: pooled features plus gold answer index.
pub type TrainExample = (Vec<f64>, usize);

/// Full-batch gradient descent on softmax cross-entropy with L2 decay.
/// Deterministic: zero init, fixed iteration count and step size.
pub fn train_logistic(
    examples: &[TrainExample],
    dim: usize,
    vocab: AnswerVocab,
    iters: usize,
    lr: f64,
    l2: f64,
) -> Result<ToyAnswerModel> {
    if examples.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let n_feat = 4 * dim;
    for (phi, label) in examples {
        if phi.len() != n_feat {
            return Err(Error::DimensionMismatch {
                context: "training features",
                expected: n_feat,
                got: phi.len(),
            });
        }
        if *label >= vocab.len() {
            return Err(Error::Precondition(format!(
                "label index {label} out of vocab range {}",
                vocab.len()
            )));
        }
    }
    let n_ans = vocab.len();
    let mut weights = vec![vec![0.0; n_feat]; n_ans];
    let mut bias = vec![0.0; n_ans];
    let inv_n = 1.0 / examples.len() as f64;

    for _ in 0..iters {
        let mut gw = vec![vec![0.0; n_feat]; n_ans];
        let mut gb = vec![0.0; n_ans];
        for (phi, label) in examples {
            let logits: Vec<f64> = weights
                .iter()
                .zip(&bias)
                .map(|(w, b)| dot(w, phi) + b)
                .collect();
            let probs = softmax(&logits);
            for a in 0..n_ans {
                let err = probs[a] - if a == *label { 1.0 } else { 0.0 };
                gb[a] += err;
                for (g, x) in gw[a].iter_mut().zip(phi) {
                    *g += err * x;
                }
            }
        }
        for a in 0..n_ans {
            bias[a] -= lr * gb[a] * inv_n;
            for (w, g) in weights[a].iter_mut().zip(&gw[a]) {
                *w -= lr * (g * inv_n + l2 * *w);
            }
        }
    }
    ToyAnswerModel::with_weights(dim, vocab, weights, bias)
}

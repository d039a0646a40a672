//! Deterministic toy image/text encoders standing in for CLIP-style
//! `f_I` and `f_T`, plus import/export of precomputed embedding files.
//!
//! The text encoder is a seeded hashed bag-of-tokens; the image encoder is a
//! linear map of pooled patch means. Both L2-normalize their output and both
//! are exactly reproducible from their seed, which is what makes the attack
//! optimizers' analytic gradients and the test oracles possible. Users with
//! real encoder outputs can bypass both via [`load_embeddings`].

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::vecmath::{self, Embedding, PixelGrid};

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Seeded hashed bag-of-tokens text encoder (`f_T`).
///
/// Tokenizes on whitespace/punctuation, lowercases, hashes each token to an
/// index in `[0, dim)`, accumulates +1 per token, and L2-normalizes. Same
/// text and seed give the same vector bit-for-bit on every platform.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
}

impl TextEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("text encoder dim must be >= 1".into()));
        }
        Ok(TextEncoder { seed, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index the given token hashes to. Exposed so tests and callers can
    /// hand-construct expected vectors.
    pub fn token_index(&self, token: &str) -> usize {
        // seeded FNV-1a over the token bytes, then an avalanche finalizer so
        // the low bits are usable for small dims
        let mut h = FNV_OFFSET ^ self.seed.wrapping_mul(FNV_PRIME);
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51afd7ed558ccd);
        h ^= h >> 33;
        h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
        h ^= h >> 33;
        (h % self.dim as u64) as usize
    }

    fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect()
    }

    /// Raw token-count accumulator before normalization.
    pub fn raw_counts(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText("text to embed"));
        }
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText("text has no alphanumeric tokens"));
        }
        let mut counts = vec![0.0; self.dim];
        for t in &tokens {
            counts[self.token_index(t)] += 1.0;
        }
        Ok(counts)
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        let counts = self.raw_counts(text)?;
        Embedding::new(counts)?.normalized()
    }
}

/// Linear patch-pool image encoder (`f_I`).
///
/// Mean-pools non-overlapping `patch x patch` blocks into a feature vector,
/// multiplies by a fixed seeded projection matrix, and L2-normalizes. The
/// pre-normalization map is exactly linear in the pixels, so the attack
/// optimizers get exact analytic gradients through it.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    dim: usize,
    patch: usize,
    features: usize,
    /// Row-major `dim x features` projection.
    matrix: Vec<f64>,
}

impl ImageEncoder {
    /// Seeded encoder for `height x width` images (both divisible by
    /// `patch`). The projection matrix entries are standard normal draws
    /// from a ChaCha8 stream.
    pub fn new(seed: u64, dim: usize, patch: usize, height: usize, width: usize) -> Result<Self> {
        if dim == 0 || patch == 0 {
            return Err(Error::Precondition(
                "image encoder dim and patch must be >= 1".into(),
            ));
        }
        if height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Precondition(format!(
                "image shape {height}x{width} not divisible by patch {patch}"
            )));
        }
        let features = (height / patch) * (width / patch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..dim * features)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(ImageEncoder {
            dim,
            patch,
            features,
            matrix,
        })
    }

    /// Encoder with an explicit projection matrix (row-major
    /// `dim x features`). Used by fixtures that need hand-checkable output.
    pub fn with_matrix(dim: usize, patch: usize, features: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * features {
            return Err(Error::DimensionMismatch {
                context: "image encoder matrix",
                expected: dim * features,
                got: matrix.len(),
            });
        }
        Ok(ImageEncoder {
            dim,
            patch,
            features,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Mean of each non-overlapping patch, row-major over patches.
    pub fn pooled_features(&self, img: &PixelGrid) -> Result<Vec<f64>> {
        let (h, w) = (img.height(), img.width());
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Precondition(format!(
                "image shape {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        let (ph, pw) = (h / self.patch, w / self.patch);
        if ph * pw != self.features {
            return Err(Error::DimensionMismatch {
                context: "image patch count",
                expected: self.features,
                got: ph * pw,
            });
        }
        let area = (self.patch * self.patch) as f64;
        let mut feats = Vec::with_capacity(self.features);
        for pr in 0..ph {
            for pc in 0..pw {
                let mut sum = 0.0;
                for r in 0..self.patch {
                    for c in 0..self.patch {
                        sum += img.get(pr * self.patch + r, pc * self.patch + c);
                    }
                }
                feats.push(sum / area);
            }
        }
        Ok(feats)
    }

    /// Pre-normalization embedding `M * pool(img)`; linear in the pixels.
    pub fn pre_norm(&self, img: &PixelGrid) -> Result<Vec<f64>> {
        let feats = self.pooled_features(img)?;
        Ok(vecmath::matvec(&self.matrix, self.dim, self.features, &feats))
    }

    pub fn embed_image(&self, img: &PixelGrid) -> Result<Embedding> {
        let pre = self.pre_norm(img)?;
        let norm = vecmath::l2_norm(&pre);
        if norm == 0.0 {
            return Err(Error::DegenerateVector("image embedding"));
        }
        Embedding::new(pre.into_iter().map(|v| v / norm).collect())
    }

    /// Pull a gradient with respect to the *normalized* embedding back to a
    /// gradient with respect to the pixels.
    ///
    /// With `u = M * pool(x)` and `e = u / |u|`, the chain is
    /// `g_u = (g_e - (g_e . e) e) / |u|`, `g_feat = M^T g_u`, and each pixel
    /// in patch `k` receives `g_feat[k] / patch^2`.
    pub fn pixel_grad(&self, img: &PixelGrid, grad_embedding: &[f64]) -> Result<PixelGrid> {
        if grad_embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "embedding gradient",
                expected: self.dim,
                got: grad_embedding.len(),
            });
        }
        let pre = self.pre_norm(img)?;
        let norm = vecmath::l2_norm(&pre);
        if norm == 0.0 {
            return Err(Error::DegenerateVector("image embedding"));
        }
        let unit: Vec<f64> = pre.iter().map(|v| v / norm).collect();
        let ge_dot_e = vecmath::dot(grad_embedding, &unit);
        let g_u: Vec<f64> = grad_embedding
            .iter()
            .zip(&unit)
            .map(|(g, e)| (g - ge_dot_e * e) / norm)
            .collect();
        let g_feat = vecmath::matvec_transpose(&self.matrix, self.dim, self.features, &g_u);

        let (h, w) = (img.height(), img.width());
        let pw = w / self.patch;
        let area = (self.patch * self.patch) as f64;
        let grid = PixelGrid::from_fn(h, w, |r, c| {
            let k = (r / self.patch) * pw + (c / self.patch);
            g_feat[k] / area
        });
        Ok(grid)
    }
}

/// Parse an embedding file: one `<id><TAB><v_1> <v_2> ... <v_d>` record per
/// line, `#` starting a comment line, ASCII only.
///
/// All records must share one dimension (and match `expected_dim` when
/// given); ids must be unique. Errors name the offending line.
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<Vec<(String, Embedding)>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, Embedding)> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut dim = expected_dim;
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !line.is_ascii() {
            return Err(Error::format(path, lineno, "non-ASCII record"));
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno, "missing TAB after id"))?;
        if id.is_empty() {
            return Err(Error::format(path, lineno, "empty id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::format(path, lineno, format!("duplicate id '{id}'")));
        }
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::format(path, lineno, format!("bad float '{tok}'")))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::format(path, lineno, "record has no values"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("dimension mismatch: expected {d}, got {}", values.len()),
                ));
            }
            _ => {}
        }
        let emb = Embedding::new(values)
            .map_err(|e| Error::format(path, lineno, format!("invalid vector: {e}")))?;
        out.push((id.to_string(), emb));
    }
    Ok(out)
}

/// Write records in the format [`load_embeddings`] reads. Floats are printed
/// with the shortest representation that round-trips bit-exactly.
pub fn save_embeddings(path: &Path, records: &[(String, Embedding)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, emb) in records {
        let vals: Vec<String> = emb.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{id}\t{}", vals.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

//! The semi-open multimodal knowledge base.
//!
//! Stores image-report pairs with both embeddings, accepts benign inserts
//! and stealth-gated adversarial injections, keeps digest-based provenance
//! for tamper evidence, supports snapshots with instant rollback, and
//! persists to a line-oriented ASCII file.
//!
//! The stealth gate is the semantic-plausibility bound: an injection is
//! accepted only when its semantic distance to a named benign base pair is
//! at most `stealth_eps`. Setting `stealth_eps` to infinity models an
//! unscreened knowledge base; zero admits only exact clones.
//!
//! Concurrency: a `KnowledgeBase` follows the usual Rust borrow rules —
//! any number of concurrent readers, or one writer. Snapshot ids are plain
//! strings, immutable once issued.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use sha2::{Digest, Sha256};

use crate::encoder::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::vecmath::{cosine, Embedding, PixelGrid};

/// Whether an entry arrived through the benign path or the injection gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Benign,
    Injected,
}

impl Tag {
    fn as_str(self) -> &'static str {
        match self {
            Tag::Benign => "benign",
            Tag::Injected => "injected",
        }
    }
}

/// Origin record kept for every entry. The digest is recomputed over the
/// serialized entry on load; a mismatch is treated as tampering.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: String,
    /// Epoch seconds as supplied by the caller. The harness and CLI feed a
    /// logical counter here so outputs stay byte-identical across runs.
    pub timestamp: u64,
    pub digest: String,
    pub tag: Tag,
    /// For injected entries: the benign base entry and the semantic
    /// distance measured at the gate.
    pub injected_from: Option<(String, f64)>,
}

/// Raw image payload: an inline pixel grid, or an opaque external
/// reference for embedding-only entries.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    Inline(PixelGrid),
    Reference(String),
}

/// An image-report pair with both embeddings and provenance.
///
/// `report_text` may be empty for entries that exist only in embedding
/// space (white-box attacks never decode their optimized text embedding
/// back to words); embedding-consistency checks skip absent raw modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct KBEntry {
    pub id: String,
    pub report_text: String,
    pub image: ImageData,
    pub image_emb: Embedding,
    pub text_emb: Embedding,
    pub provenance: Provenance,
}

/// A candidate entry before the knowledge base assigns tag and digest.
#[derive(Debug, Clone)]
pub struct EntryDraft {
    pub id: String,
    pub report_text: String,
    pub image: ImageData,
    pub image_emb: Embedding,
    pub text_emb: Embedding,
    pub source: String,
    pub timestamp: u64,
}

/// Gate verdict for one injection attempt. A rejection is a normal
/// outcome, not an error.
#[derive(Debug, Clone, PartialEq)]
pub enum InjectionOutcome {
    Accepted { id: String, dsem: f64 },
    Rejected { dsem: f64 },
}

impl InjectionOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, InjectionOutcome::Accepted { .. })
    }

    pub fn dsem(&self) -> f64 {
        match self {
            InjectionOutcome::Accepted { dsem, .. } | InjectionOutcome::Rejected { dsem } => *dsem,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    id: String,
    digests: Vec<String>,
}

/// Semantic distance between two image-text pairs in embedding space:
/// `1 - (cos(image, image') + cos(text, text')) / 2`, in `[0, 2]`.
///
/// Zero iff both modalities align perfectly; symmetric in its arguments.
pub fn dsem_embeddings(
    image_a: &Embedding,
    text_a: &Embedding,
    image_b: &Embedding,
    text_b: &Embedding,
) -> Result<f64> {
    let ci = cosine(image_a, image_b)?;
    let ct = cosine(text_a, text_b)?;
    Ok(1.0 - 0.5 * (ci + ct))
}

/// The knowledge base proper. Owns the encoder pair so it can verify that
/// stored embeddings really are the encodings of the raw modalities.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    text_encoder: TextEncoder,
    image_encoder: ImageEncoder,
    stealth_eps: f64,
    entries: Vec<KBEntry>,
    index: HashMap<String, usize>,
    snapshots: Vec<Snapshot>,
    next_snapshot: u64,
}

const HEADER_PREFIX: &str = "RAGKB v1 dim=";
const SNAPSHOT_SENTINEL: &str = "---SNAPSHOTS---";

impl KnowledgeBase {
    pub fn new(text_encoder: TextEncoder, image_encoder: ImageEncoder, stealth_eps: f64) -> Result<Self> {
        if text_encoder.dim() != image_encoder.dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder joint space",
                expected: text_encoder.dim(),
                got: image_encoder.dim(),
            });
        }
        if !(stealth_eps >= 0.0) {
            return Err(Error::Precondition(format!(
                "stealth_eps must be >= 0, got {stealth_eps}"
            )));
        }
        Ok(KnowledgeBase {
            text_encoder,
            image_encoder,
            stealth_eps,
            entries: Vec::new(),
            index: HashMap::new(),
            snapshots: Vec::new(),
            next_snapshot: 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_encoder.dim()
    }

    pub fn stealth_eps(&self) -> f64 {
        self.stealth_eps
    }

    pub fn set_stealth_eps(&mut self, eps: f64) -> Result<()> {
        if !(eps >= 0.0) {
            return Err(Error::Precondition(format!(
                "stealth_eps must be >= 0, got {eps}"
            )));
        }
        self.stealth_eps = eps;
        Ok(())
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text_encoder
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image_encoder
    }

    /// Total entry count (benign plus injected).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KBEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&KBEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn benign_ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.provenance.tag == Tag::Benign)
            .map(|e| e.id.clone())
            .collect()
    }

    /// Digest list in entry order; a snapshot is exactly this list frozen.
    pub fn entry_digests(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.provenance.digest.clone()).collect()
    }

    /// Convenience: encode both modalities so the draft is consistent by
    /// construction.
    pub fn draft_from_raw(
        &self,
        id: &str,
        report_text: &str,
        image: PixelGrid,
        source: &str,
        timestamp: u64,
    ) -> Result<EntryDraft> {
        let text_emb = self.text_encoder.embed_text(report_text)?;
        let image_emb = self.image_encoder.embed_image(&image)?;
        Ok(EntryDraft {
            id: id.to_string(),
            report_text: report_text.to_string(),
            image: ImageData::Inline(image),
            image_emb,
            text_emb,
            source: source.to_string(),
            timestamp,
        })
    }

    fn validate_label(kind: &'static str, s: &str) -> Result<()> {
        if s.contains('\t') || s.contains('\n') || s.contains('|') {
            return Err(Error::Precondition(format!(
                "{kind} must not contain tabs, newlines, or '|': {s:?}"
            )));
        }
        Ok(())
    }

    fn validate_draft(&self, draft: &EntryDraft) -> Result<()> {
        if draft.id.is_empty() {
            return Err(Error::Precondition("entry id must be non-empty".into()));
        }
        Self::validate_label("entry id", &draft.id)?;
        Self::validate_label("source label", &draft.source)?;
        if let ImageData::Reference(r) = &draft.image {
            Self::validate_label("image reference", r)?;
        }
        let d = self.dim();
        for (name, emb) in [("image_emb", &draft.image_emb), ("text_emb", &draft.text_emb)] {
            if emb.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "entry embedding",
                    expected: d,
                    got: emb.dim(),
                });
            }
            if emb.is_zero() {
                return Err(Error::Precondition(format!(
                    "{name} of entry '{}' has zero norm",
                    draft.id
                )));
            }
        }
        // embedding consistency, checked for whichever raw modalities exist
        if !draft.report_text.is_empty() {
            let expect = self.text_encoder.embed_text(&draft.report_text)?;
            if expect != draft.text_emb {
                return Err(Error::Precondition(format!(
                    "text_emb of entry '{}' is not the encoding of its report text",
                    draft.id
                )));
            }
        }
        if let ImageData::Inline(grid) = &draft.image {
            let expect = self.image_encoder.embed_image(grid)?;
            if expect != draft.image_emb {
                return Err(Error::Precondition(format!(
                    "image_emb of entry '{}' is not the encoding of its image",
                    draft.id
                )));
            }
        }
        Ok(())
    }

    fn store(&mut self, draft: EntryDraft, tag: Tag, injected_from: Option<(String, f64)>) -> String {
        let mut entry = KBEntry {
            id: draft.id.clone(),
            report_text: draft.report_text,
            image: draft.image,
            image_emb: draft.image_emb,
            text_emb: draft.text_emb,
            provenance: Provenance {
                source: draft.source,
                timestamp: draft.timestamp,
                digest: String::new(),
                tag,
                injected_from,
            },
        };
        entry.provenance.digest = compute_digest(&entry);
        self.index.insert(entry.id.clone(), self.entries.len());
        self.entries.push(entry);
        draft.id
    }

    /// Insert a benign image-report pair. The draft's embeddings must be
    /// the encodings of its raw modalities.
    pub fn insert_benign(&mut self, draft: EntryDraft) -> Result<String> {
        if self.index.contains_key(&draft.id) {
            return Err(Error::DuplicateId(draft.id));
        }
        self.validate_draft(&draft)?;
        Ok(self.store(draft, Tag::Benign, None))
    }

    /// Submit an adversarial candidate through the stealth gate.
    ///
    /// The candidate is measured against the named benign base entry; it is
    /// stored (tagged `injected`, with the base id and measured distance in
    /// its provenance) only when the distance is within `stealth_eps`.
    pub fn submit_injection(&mut self, draft: EntryDraft, base_id: &str) -> Result<InjectionOutcome> {
        let base = self
            .get(base_id)
            .ok_or_else(|| Error::UnknownId(base_id.to_string()))?;
        if base.provenance.tag != Tag::Benign {
            return Err(Error::Precondition(format!(
                "injection base '{base_id}' is not a benign entry"
            )));
        }
        if self.index.contains_key(&draft.id) {
            return Err(Error::DuplicateId(draft.id));
        }
        let dsem = dsem_embeddings(&base.image_emb, &base.text_emb, &draft.image_emb, &draft.text_emb)?;
        self.validate_draft(&draft)?;
        if dsem <= self.stealth_eps {
            let base_id = base_id.to_string();
            let id = self.store(draft, Tag::Injected, Some((base_id, dsem)));
            Ok(InjectionOutcome::Accepted { id, dsem })
        } else {
            Ok(InjectionOutcome::Rejected { dsem })
        }
    }

    /// Freeze the current entry list under a fresh snapshot id.
    pub fn snapshot(&mut self) -> String {
        let id = format!("snap-{}", self.next_snapshot);
        self.next_snapshot += 1;
        self.snapshots.push(Snapshot {
            id: id.clone(),
            digests: self.entry_digests(),
        });
        id
    }

    pub fn snapshot_ids(&self) -> Vec<String> {
        self.snapshots.iter().map(|s| s.id.clone()).collect()
    }

    /// Restore the entry list to the named snapshot, bit-exactly, and
    /// discard every snapshot taken after it.
    ///
    /// Mutation between snapshots is append-only, so rollback is a verified
    /// truncation.
    pub fn rollback(&mut self, snapshot_id: &str) -> Result<()> {
        let pos = self
            .snapshots
            .iter()
            .position(|s| s.id == snapshot_id)
            .ok_or_else(|| Error::UnknownSnapshot(snapshot_id.to_string()))?;
        let n = self.snapshots[pos].digests.len();
        let current = self.entry_digests();
        if current.len() < n || current[..n] != self.snapshots[pos].digests[..] {
            return Err(Error::Precondition(format!(
                "snapshot '{snapshot_id}' does not prefix the current entry list"
            )));
        }
        for e in &self.entries[n..] {
            self.index.remove(&e.id);
        }
        self.entries.truncate(n);
        self.snapshots.truncate(pos + 1);
        Ok(())
    }

    /// Recompute and verify every entry's content digest.
    pub fn verify_digests(&self) -> Result<()> {
        for e in &self.entries {
            if compute_digest(e) != e.provenance.digest {
                return Err(Error::Tamper { id: e.id.clone() });
            }
        }
        Ok(())
    }

    /// Serialize to the persistent text format (ASCII, LF line endings).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER_PREFIX}{}", self.dim());
        for e in &self.entries {
            let _ = writeln!(out, "{}", entry_line(e));
        }
        let _ = writeln!(out, "{SNAPSHOT_SENTINEL}");
        let _ = writeln!(out, "next={}", self.next_snapshot);
        for s in &self.snapshots {
            let _ = writeln!(out, "{}\t{}", s.id, s.digests.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// Load a knowledge base saved by [`KnowledgeBase::save`].
    ///
    /// The encoder pair and gate threshold are construction parameters, not
    /// part of the file; entry digests are re-verified so single-byte
    /// corruption is detected and attributed to an entry id.
    pub fn load(
        path: &Path,
        text_encoder: TextEncoder,
        image_encoder: ImageEncoder,
        stealth_eps: f64,
    ) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&content, text_encoder, image_encoder, stealth_eps, path)
    }

    fn from_file_string(
        content: &str,
        text_encoder: TextEncoder,
        image_encoder: ImageEncoder,
        stealth_eps: f64,
        path: &Path,
    ) -> Result<Self> {
        let mut kb = KnowledgeBase::new(text_encoder, image_encoder, stealth_eps)?;
        let mut lines = content.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(path, 1, "empty file"))?;
        let dim: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::format(path, 1, format!("bad header {header:?}")))?;
        if dim != kb.dim() {
            return Err(Error::format(
                path,
                1,
                format!("file dim {dim} does not match encoder dim {}", kb.dim()),
            ));
        }

        let mut in_snapshots = false;
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            if line == SNAPSHOT_SENTINEL {
                in_snapshots = true;
                continue;
            }
            if !in_snapshots {
                let entry = parse_entry_line(line, dim, path, lineno)?;
                if compute_digest(&entry) != entry.provenance.digest {
                    return Err(Error::Tamper { id: entry.id });
                }
                if kb.index.contains_key(&entry.id) {
                    return Err(Error::format(path, lineno, format!("duplicate id '{}'", entry.id)));
                }
                kb.index.insert(entry.id.clone(), kb.entries.len());
                kb.entries.push(entry);
            } else if let Some(n) = line.strip_prefix("next=") {
                kb.next_snapshot = n
                    .parse()
                    .map_err(|_| Error::format(path, lineno, "bad snapshot counter"))?;
            } else {
                let (id, digests) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::format(path, lineno, "bad snapshot line"))?;
                let digests: Vec<String> = if digests.is_empty() {
                    Vec::new()
                } else {
                    digests.split(' ').map(str::to_string).collect()
                };
                kb.snapshots.push(Snapshot {
                    id: id.to_string(),
                    digests,
                });
            }
        }
        Ok(kb)
    }
}

/// Digest payload: every persisted field except the digest itself.
fn digest_payload(e: &KBEntry) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.id,
        e.provenance.tag.as_str(),
        source_column(e),
        e.provenance.timestamp,
        B64.encode(e.report_text.as_bytes()),
        image_column(e),
        emb_column(e),
    )
}

fn compute_digest(e: &KBEntry) -> String {
    let hash = Sha256::digest(digest_payload(e).as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn source_column(e: &KBEntry) -> String {
    match &e.provenance.injected_from {
        None => e.provenance.source.clone(),
        Some((base, dsem)) => format!("{}|{}|{}", e.provenance.source, base, dsem),
    }
}

fn image_column(e: &KBEntry) -> String {
    match &e.image {
        ImageData::Reference(r) => format!("ref:{r}"),
        ImageData::Inline(g) => {
            let mut bytes = Vec::with_capacity(g.as_slice().len() * 8);
            for v in g.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            format!("grid:{}:{}:{}", g.height(), g.width(), B64.encode(bytes))
        }
    }
}

fn emb_column(e: &KBEntry) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(e.image_emb.dim() + e.text_emb.dim());
    parts.extend(e.image_emb.iter().map(|v| format!("{v}")));
    parts.extend(e.text_emb.iter().map(|v| format!("{v}")));
    parts.join(" ")
}

fn entry_line(e: &KBEntry) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.id,
        e.provenance.tag.as_str(),
        source_column(e),
        e.provenance.timestamp,
        e.provenance.digest,
        B64.encode(e.report_text.as_bytes()),
        image_column(e),
        emb_column(e),
    )
}

fn parse_entry_line(line: &str, dim: usize, path: &Path, lineno: usize) -> Result<KBEntry> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return Err(Error::format(
            path,
            lineno,
            format!("expected 8 tab-separated fields, got {}", fields.len()),
        ));
    }
    let id = fields[0].to_string();
    let tag = match fields[1] {
        "benign" => Tag::Benign,
        "injected" => Tag::Injected,
        other => return Err(Error::format(path, lineno, format!("unknown tag '{other}'"))),
    };
    let (source, injected_from) = {
        let parts: Vec<&str> = fields[2].split('|').collect();
        match (tag, parts.as_slice()) {
            (Tag::Benign, [s]) => (s.to_string(), None),
            (Tag::Injected, [s, base, dsem]) => {
                let d: f64 = dsem
                    .parse()
                    .map_err(|_| Error::format(path, lineno, "bad dsem in source column"))?;
                (s.to_string(), Some((base.to_string(), d)))
            }
            _ => {
                return Err(Error::format(
                    path,
                    lineno,
                    "source column does not match entry tag",
                ))
            }
        }
    };
    let timestamp: u64 = fields[3]
        .parse()
        .map_err(|_| Error::format(path, lineno, "bad timestamp"))?;
    let digest = fields[4].to_string();
    let report = String::from_utf8(
        B64.decode(fields[5])
            .map_err(|_| Error::format(path, lineno, "bad report base64"))?,
    )
    .map_err(|_| Error::format(path, lineno, "report is not UTF-8"))?;

    let image = if let Some(r) = fields[6].strip_prefix("ref:") {
        ImageData::Reference(r.to_string())
    } else if let Some(rest) = fields[6].strip_prefix("grid:") {
        let mut it = rest.splitn(3, ':');
        let parse_dim = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, lineno, "bad grid header"))
        };
        let h = parse_dim(it.next())?;
        let w = parse_dim(it.next())?;
        let payload = it
            .next()
            .ok_or_else(|| Error::format(path, lineno, "missing grid payload"))?;
        let bytes = B64
            .decode(payload)
            .map_err(|_| Error::format(path, lineno, "bad grid base64"))?;
        if bytes.len() != h * w * 8 {
            return Err(Error::format(path, lineno, "grid payload length mismatch"));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ImageData::Inline(
            PixelGrid::new(h, w, data)
                .map_err(|e| Error::format(path, lineno, format!("bad grid: {e}")))?,
        )
    } else {
        return Err(Error::format(path, lineno, "image column must be ref: or grid:"));
    };

    let values: Vec<f64> = fields[7]
        .split(' ')
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::format(path, lineno, format!("bad embedding float '{tok}'")))
        })
        .collect::<Result<_>>()?;
    if values.len() != 2 * dim {
        return Err(Error::format(
            path,
            lineno,
            format!("expected {} embedding floats, got {}", 2 * dim, values.len()),
        ));
    }
    let image_emb = Embedding::new(values[..dim].to_vec())
        .map_err(|e| Error::format(path, lineno, format!("bad image embedding: {e}")))?;
    let text_emb = Embedding::new(values[dim..].to_vec())
        .map_err(|e| Error::format(path, lineno, format!("bad text embedding: {e}")))?;

    Ok(KBEntry {
        id,
        report_text: report,
        image,
        image_emb,
        text_emb,
        provenance: Provenance {
            source,
            timestamp,
            digest,
            tag,
            injected_from,
        },
    })
}

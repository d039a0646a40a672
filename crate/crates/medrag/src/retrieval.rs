//! Similarity scoring and Top-M candidate selection over the knowledge
//! base.
//!
//! Scoring is a weighted sum of the image-image and question-text cosines;
//! entries at or above the threshold are kept, sorted by score descending
//! with ties broken by ascending id, and cut to the top M. The scan is
//! exhaustive - at desk scale the exhaustive scan is both the
//! implementation and the reference behavior.

use crate::error::{Error, Result};
use crate::kb::{KBEntry, KnowledgeBase};
use crate::vecmath::{cosine, Embedding};

/// An input image-question pair, already embedded.
#[derive(Debug, Clone)]
pub struct Query {
    pub image_emb: Embedding,
    pub question_emb: Embedding,
    /// Raw question text, carried through for the generator and reports.
    pub question_text: String,
}

impl Query {
    pub fn new(image_emb: Embedding, question_emb: Embedding, question_text: &str) -> Result<Self> {
        if image_emb.dim() != question_emb.dim() {
            return Err(Error::DimensionMismatch {
                context: "query embeddings",
                expected: image_emb.dim(),
                got: question_emb.dim(),
            });
        }
        if image_emb.is_zero() || question_emb.is_zero() {
            return Err(Error::DegenerateVector("query embedding"));
        }
        Ok(Query {
            image_emb,
            question_emb,
            question_text: question_text.to_string(),
        })
    }
}

/// Threshold, candidate count, and the image-vs-text weight.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalConfig {
    /// Minimum similarity score for an entry to be considered at all.
    pub theta: f64,
    /// Maximum number of candidates returned.
    pub m: usize,
    /// Weight of the image-image cosine; the question-text cosine gets
    /// `1 - w_img`.
    pub w_img: f64,
}

impl RetrievalConfig {
    pub fn new(theta: f64, m: usize, w_img: f64) -> Result<Self> {
        let cfg = RetrievalConfig { theta, m, w_img };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Precondition("retrieval M must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.w_img) {
            return Err(Error::Precondition(format!(
                "w_img must be in [0,1], got {}",
                self.w_img
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::NonFinite("retrieval theta"));
        }
        Ok(())
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            theta: 0.2,
            m: 10,
            w_img: 0.5,
        }
    }
}

/// A retrieved entry with its similarity score.
#[derive(Debug, Clone)]
pub struct Scored<'a> {
    pub entry: &'a KBEntry,
    pub score: f64,
}

/// Similarity of a query to one entry:
/// `w_img * cos(image, image_j) + (1 - w_img) * cos(question, text_j)`.
pub fn score_pair(query: &Query, entry: &KBEntry, cfg: &RetrievalConfig) -> Result<f64> {
    let ci = cosine(&query.image_emb, &entry.image_emb)?;
    let ct = cosine(&query.question_emb, &entry.text_emb)?;
    Ok(cfg.w_img * ci + (1.0 - cfg.w_img) * ct)
}

/// Score every entry, keep those with score >= theta, sort by score
/// descending (ties by ascending id), and return at most M.
///
/// An empty knowledge base yields an empty list, not an error.
pub fn top_m<'a>(query: &Query, kb: &'a KnowledgeBase, cfg: &RetrievalConfig) -> Result<Vec<Scored<'a>>> {
    cfg.validate()?;
    let mut hits: Vec<Scored<'a>> = Vec::new();
    for entry in kb.entries() {
        let score = score_pair(query, entry, cfg)?;
        if score >= cfg.theta {
            hits.push(Scored { entry, score });
        }
    }
    sort_candidates(&mut hits);
    hits.truncate(cfg.m);
    Ok(hits)
}

pub(crate) fn sort_candidates(hits: &mut [Scored<'_>]) {
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.entry.id.cmp(&b.entry.id))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ImageEncoder, TextEncoder};
    use crate::kb::{EntryDraft, ImageData};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const DIM: usize = 8;

    fn kb_with(entries: Vec<(String, Embedding, Embedding)>) -> KnowledgeBase {
        let te = TextEncoder::new(5, DIM).unwrap();
        let ie = ImageEncoder::new(6, DIM, 2, 4, 4).unwrap();
        let mut kb = KnowledgeBase::new(te, ie, 2.0).unwrap();
        for (id, img, txt) in entries {
            kb.insert_benign(EntryDraft {
                id: id.clone(),
                report_text: String::new(),
                image: ImageData::Reference(format!("fixture:{id}")),
                image_emb: img,
                text_emb: txt,
                source: "fixture".into(),
                timestamp: 0,
            })
            .unwrap();
        }
        kb
    }

    fn unit_at(dir: usize) -> Embedding {
        let mut v = vec![0.0; DIM];
        v[dir] = 1.0;
        Embedding::new(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Embedding {
        loop {
            let v: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            if crate::vecmath::l2_norm(&v) > 1e-6 {
                return Embedding::new(v).unwrap().normalized().unwrap();
            }
        }
    }

    #[test]
    fn identical_embeddings_score_one() {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        let kb = kb_with(vec![("e".into(), unit_at(0), unit_at(1))]);
        for w in [0.0, 0.3, 1.0] {
            let cfg = RetrievalConfig::new(0.0, 5, w).unwrap();
            let s = score_pair(&q, kb.get("e").unwrap(), &cfg).unwrap();
            assert!((s - 1.0).abs() < 1e-12, "w={w}");
        }
    }

    #[test]
    fn w_img_one_ignores_text_channel() {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        // same image direction, text orthogonal vs aligned
        let kb = kb_with(vec![
            ("a".into(), unit_at(0), unit_at(2)),
            ("b".into(), unit_at(0), unit_at(1)),
        ]);
        let cfg = RetrievalConfig::new(0.0, 5, 1.0).unwrap();
        let sa = score_pair(&q, kb.get("a").unwrap(), &cfg).unwrap();
        let sb = score_pair(&q, kb.get("b").unwrap(), &cfg).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn weighted_sum_hand_value() {
        // image cosine 0.8, text cosine 0.4, w = 0.5 -> 0.6
        let img_q = Embedding::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let img_e = Embedding::new(vec![0.8, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let txt_q = unit_at(2);
        let txt_e =
            Embedding::new(vec![0.0, 0.0, 0.4, (1.0f64 - 0.16).sqrt(), 0.0, 0.0, 0.0, 0.0]).unwrap();
        let q = Query::new(img_q, txt_q, "q").unwrap();
        let kb = kb_with(vec![("e".into(), img_e, txt_e)]);
        let cfg = RetrievalConfig::new(0.0, 5, 0.5).unwrap();
        let s = score_pair(&q, kb.get("e").unwrap(), &cfg).unwrap();
        assert!((s - 0.6).abs() < 1e-12);
    }

    #[test]
    fn theta_above_one_returns_nothing() {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        let kb = kb_with(vec![("e".into(), unit_at(0), unit_at(1))]);
        let cfg = RetrievalConfig::new(1.5, 5, 0.5).unwrap();
        assert!(top_m(&q, &kb, &cfg).unwrap().is_empty());
    }

    #[test]
    fn single_identical_entry_retrieved_with_score_one() {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        let kb = kb_with(vec![("e".into(), unit_at(0), unit_at(1))]);
        let cfg = RetrievalConfig::new(0.5, 5, 0.5).unwrap();
        let hits = top_m(&q, &kb, &cfg).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry.id, "e");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    /// Fixture with controlled scores {0.9, 0.7, 0.2} via image cosines.
    fn three_score_fixture() -> (Query, KnowledgeBase) {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        let mk = |c: f64| {
            let mut v = vec![0.0; DIM];
            v[0] = c;
            v[2] = (1.0 - c * c).sqrt();
            Embedding::new(v).unwrap()
        };
        // text channel aligned for all, so score = 0.5*c + 0.5
        let kb = kb_with(vec![
            ("hi".into(), mk(0.8), unit_at(1)),
            ("mid".into(), mk(0.4), unit_at(1)),
            ("lo".into(), mk(-0.6), unit_at(1)),
        ]);
        (q, kb)
    }

    #[test]
    fn filter_then_cut_matches_scan() {
        let (q, kb) = three_score_fixture();
        let cfg = RetrievalConfig::new(0.5, 2, 0.5).unwrap();
        let hits = top_m(&q, &kb, &cfg).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].entry.id, "hi");
        assert!((hits[0].score - 0.9).abs() < 1e-12);
        assert_eq!(hits[1].entry.id, "mid");
        assert!((hits[1].score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_kb_returns_empty() {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        let kb = kb_with(vec![]);
        let cfg = RetrievalConfig::default();
        assert!(top_m(&q, &kb, &cfg).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let q = Query::new(unit_at(0), unit_at(1), "q").unwrap();
        let kb = kb_with(vec![
            ("zz".into(), unit_at(0), unit_at(1)),
            ("aa".into(), unit_at(0), unit_at(1)),
        ]);
        let cfg = RetrievalConfig::new(0.0, 5, 0.5).unwrap();
        let hits = top_m(&q, &kb, &cfg).unwrap();
        assert_eq!(hits[0].entry.id, "aa");
        assert_eq!(hits[1].entry.id, "zz");
    }

    /// Independent scan: score everything, filter, sort, cut.
    fn oracle<'a>(q: &Query, kb: &'a KnowledgeBase, cfg: &RetrievalConfig) -> Vec<(&'a str, f64)> {
        let mut scored: Vec<(&str, f64)> = kb
            .entries()
            .iter()
            .map(|e| {
                let ci = crate::vecmath::cosine(&q.image_emb, &e.image_emb).unwrap();
                let ct = crate::vecmath::cosine(&q.question_emb, &e.text_emb).unwrap();
                (e.id.as_str(), cfg.w_img * ci + (1.0 - cfg.w_img) * ct)
            })
            .filter(|(_, s)| *s >= cfg.theta)
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        scored.truncate(cfg.m);
        scored
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_kbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..30 {
            let n = rng.random_range(1..200usize);
            let entries: Vec<(String, Embedding, Embedding)> = (0..n)
                .map(|i| (format!("e{i:04}"), random_unit(&mut rng), random_unit(&mut rng)))
                .collect();
            let kb = kb_with(entries);
            let q = Query::new(random_unit(&mut rng), random_unit(&mut rng), "q").unwrap();
            let cfg = RetrievalConfig::new(
                rng.random_range(-0.5..0.7),
                rng.random_range(1..20usize),
                rng.random_range(0.0..1.0),
            )
            .unwrap();
            let got: Vec<(&str, f64)> = top_m(&q, &kb, &cfg)
                .unwrap()
                .iter()
                .map(|s| (s.entry.id.as_str(), s.score))
                .collect();
            let want = oracle(&q, &kb, &cfg);
            assert_eq!(got, want, "round {round}");
        }
    }

    #[test]
    fn monotone_in_theta_and_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let entries: Vec<(String, Embedding, Embedding)> = (0..60)
            .map(|i| (format!("e{i:03}"), random_unit(&mut rng), random_unit(&mut rng)))
            .collect();
        let kb = kb_with(entries);
        let q = Query::new(random_unit(&mut rng), random_unit(&mut rng), "q").unwrap();

        let ids = |cfg: &RetrievalConfig| -> Vec<String> {
            top_m(&q, &kb, cfg)
                .unwrap()
                .iter()
                .map(|s| s.entry.id.clone())
                .collect()
        };
        // raising theta never adds a result
        let lo = ids(&RetrievalConfig::new(0.0, 60, 0.5).unwrap());
        let hi = ids(&RetrievalConfig::new(0.3, 60, 0.5).unwrap());
        assert!(hi.iter().all(|id| lo.contains(id)));
        // raising M never removes one
        let small = ids(&RetrievalConfig::new(0.0, 5, 0.5).unwrap());
        let large = ids(&RetrievalConfig::new(0.0, 15, 0.5).unwrap());
        assert!(small.iter().all(|id| large.contains(id)));
        assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn injected_high_scorer_displaces_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let entries: Vec<(String, Embedding, Embedding)> = (0..20)
            .map(|i| (format!("e{i:03}"), random_unit(&mut rng), random_unit(&mut rng)))
            .collect();
        let mut kb = kb_with(entries);
        let q = Query::new(random_unit(&mut rng), random_unit(&mut rng), "q").unwrap();
        let cfg = RetrievalConfig::new(-1.0, 8, 0.5).unwrap();

        let before: Vec<String> = top_m(&q, &kb, &cfg)
            .unwrap()
            .iter()
            .map(|s| s.entry.id.clone())
            .collect();
        assert_eq!(before.len(), 8);

        // perfect-scoring adversarial entry
        kb.insert_benign(EntryDraft {
            id: "adv".into(),
            report_text: String::new(),
            image: ImageData::Reference("adv".into()),
            image_emb: q.image_emb.clone(),
            text_emb: q.question_emb.clone(),
            source: "fixture".into(),
            timestamp: 0,
        })
        .unwrap();

        let after: Vec<String> = top_m(&q, &kb, &cfg)
            .unwrap()
            .iter()
            .map(|s| s.entry.id.clone())
            .collect();
        assert_eq!(after.len(), 8);
        assert_eq!(after[0], "adv");
        // exactly one previous member displaced, the old last-ranked one
        let dropped: Vec<&String> = before.iter().filter(|id| !after.contains(id)).collect();
        assert_eq!(dropped, vec![&before[7]]);
    }
}

//! Portable file formats driven by the CLI: the image grid format and the
//! tagged embedding export.

use std::io::Write as _;
use std::path::Path;

use crate::encoder::save_embeddings;
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, Tag};
use crate::vecmath::PixelGrid;

/// Write a grid as `GRID v1 <H> <W>` followed by H lines of W
/// space-separated floats (shortest round-trip rendering).
pub fn write_grid(path: &Path, grid: &PixelGrid) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "GRID v1 {} {}", grid.height(), grid.width()).map_err(|e| Error::io(path, e))?;
    for r in 0..grid.height() {
        let row: Vec<String> = (0..grid.width()).map(|c| format!("{}", grid.get(r, c))).collect();
        writeln!(f, "{}", row.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Parse a file written by [`write_grid`].
pub fn read_grid(path: &Path) -> Result<PixelGrid> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, 1, "empty file"))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 4 || parts[0] != "GRID" || parts[1] != "v1" {
        return Err(Error::format(path, 1, format!("bad header {header:?}")));
    }
    let h: usize = parts[2]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad height"))?;
    let w: usize = parts[3]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad width"))?;
    let mut data = Vec::with_capacity(h * w);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format(path, lineno, format!("bad float '{t}'")))
            })
            .collect::<Result<_>>()?;
        if row.len() != w {
            return Err(Error::format(
                path,
                lineno,
                format!("expected {w} values, got {}", row.len()),
            ));
        }
        data.extend(row);
    }
    if data.len() != h * w {
        return Err(Error::format(path, 1, "row count does not match header"));
    }
    PixelGrid::new(h, w, data)
}

/// Export every entry's image and text embeddings in the embedding file
/// format read by `load_embeddings`, two rows per entry. The tag rides
/// in the id: `<entry-id>#<benign|injected>-<image|text>`.
pub fn export_embeddings(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    if kb.is_empty() {
        return Err(Error::Precondition("cannot export an empty knowledge base".into()));
    }
    let mut records = Vec::with_capacity(2 * kb.len());
    for e in kb.entries() {
        let tag = match e.provenance.tag {
            Tag::Benign => "benign",
            Tag::Injected => "injected",
        };
        records.push((format!("{}#{}-image", e.id, tag), e.image_emb.clone()));
        records.push((format!("{}#{}-text", e.id, tag), e.text_emb.clone()));
    }
    save_embeddings(path, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::load_embeddings;
    use crate::harness::bench::synth_benchmark;

    #[test]
    fn grid_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.grid");
        let grid = PixelGrid::from_fn(3, 5, |r, c| (r as f64 * 0.17 + c as f64 * 0.013).fract());
        write_grid(&p, &grid).unwrap();
        let back = read_grid(&p).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn grid_rejects_bad_headers_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.grid");
        std::fs::write(&p, "GRID v2 2 2\n0 0\n0 0\n").unwrap();
        assert!(read_grid(&p).is_err());
        std::fs::write(&p, "GRID v1 2 2\n0 0 0\n0 0\n").unwrap();
        assert!(read_grid(&p).is_err());
    }

    #[test]
    fn export_writes_two_rows_per_entry_and_roundtrips() {
        let (_, kb, _) = synth_benchmark(5, 20, 32, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        export_embeddings(&kb, &p).unwrap();
        let records = load_embeddings(&p, Some(32)).unwrap();
        assert_eq!(records.len(), 2 * kb.len());
        for (id, emb) in &records {
            let (entry_id, rest) = id.split_once('#').unwrap();
            let e = kb.get(entry_id).unwrap();
            if rest.ends_with("-image") {
                assert_eq!(emb, &e.image_emb);
            } else {
                assert_eq!(emb, &e.text_emb);
            }
            assert!(rest.starts_with("benign-"));
        }
    }

    #[test]
    fn export_empty_kb_is_error() {
        let te = crate::encoder::TextEncoder::new(1, 8).unwrap();
        let ie = crate::encoder::ImageEncoder::new(2, 8, 2, 4, 4).unwrap();
        let kb = KnowledgeBase::new(te, ie, 0.15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(export_embeddings(&kb, &dir.path().join("x.txt")).is_err());
    }
}

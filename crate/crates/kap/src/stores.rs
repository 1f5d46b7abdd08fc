//! On-disk formats for chunks, indexes and retrieval runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use kap_core::chunk::Chunk;
use kap_core::dense::{DenseIndex, VectorRecord};
use kap_core::fusion::{Hit, RankedList, Strategy};
use kap_core::sparse::{DocEntry, Posting};
use kap_core::{Bm25Params, ChunkParams, Lexicon, SparseIndex};
use serde::{Deserialize, Serialize};

use crate::error::{KapError, Result};
use crate::jsonl;

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> KapError {
    KapError::Malformed { path: path.to_path_buf(), line, message: message.into() }
}

fn split_header<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<(usize, serde_json::Value)>)> {
    let mut values = jsonl::read_values(path)?.into_iter();
    let (line, header) = values.next().ok_or_else(|| malformed(path, 1, "missing header"))?;
    Ok((jsonl::decode(path, line, header)?, values.collect()))
}

pub const CHUNK_FORMAT: &str = "kap-chunks/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkHeader {
    pub format: String,
    pub counter: String,
    pub params: ChunkParams,
    pub count: usize,
}

pub fn save_chunks(path: &Path, counter: &str, params: &ChunkParams, chunks: &[Chunk]) -> Result<()> {
    let header = ChunkHeader { format: CHUNK_FORMAT.into(), counter: counter.into(), params: *params, count: chunks.len() };
    let mut buf = jsonl::to_line(&header);
    buf.push('\n');
    for c in chunks {
        buf.push_str(&jsonl::to_line(c));
        buf.push('\n');
    }
    jsonl::write_atomic(path, buf.as_bytes())
}

pub fn load_chunks(path: &Path) -> Result<(ChunkHeader, Vec<Chunk>)> {
    let (header, rest): (ChunkHeader, _) = split_header(path)?;
    if header.format != CHUNK_FORMAT {
        return Err(malformed(path, 1, format!("unsupported format {:?}", header.format)));
    }
    let chunks: Vec<Chunk> = rest.into_iter().map(|(l, v)| jsonl::decode(path, l, v)).collect::<Result<_>>()?;
    if chunks.len() != header.count {
        return Err(malformed(path, 1, format!("header says {} chunks, found {}", header.count, chunks.len())));
    }
    Ok((header, chunks))
}

pub const SPARSE_FORMAT: &str = "kap-bm25/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseHeader {
    pub format: String,
    pub n: usize,
    pub avgdl: f64,
    pub k1: f64,
    pub b: f64,
    pub lexicon_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum SparseLine {
    Doc { chunk_id: String, pid: String, length: u32 },
    Term { term: String, postings: Vec<(String, u32)> },
}

pub fn save_sparse(path: &Path, index: &SparseIndex) -> Result<()> {
    let header = SparseHeader {
        format: SPARSE_FORMAT.into(),
        n: index.len(),
        avgdl: index.avgdl(),
        k1: index.params.k1,
        b: index.params.b,
        lexicon_hash: index.lexicon().fingerprint(),
    };
    let mut buf = jsonl::to_line(&header);
    buf.push('\n');
    for d in index.docs() {
        buf.push_str(&jsonl::to_line(&SparseLine::Doc { chunk_id: d.chunk_id, pid: d.pid, length: d.length }));
        buf.push('\n');
    }
    for (term, list) in index.postings() {
        let postings = list.iter().map(|p| (p.chunk_id.clone(), p.tf)).collect();
        buf.push_str(&jsonl::to_line(&SparseLine::Term { term: term.into(), postings }));
        buf.push('\n');
    }
    jsonl::write_atomic(path, buf.as_bytes())
}

/// Loads an index written by [`save_sparse`]. The lexicon it was built
/// with must be supplied again and must hash the same.
pub fn load_sparse(path: &Path, lexicon: &Lexicon) -> Result<SparseIndex> {
    let (header, rest): (SparseHeader, _) = split_header(path)?;
    if header.format != SPARSE_FORMAT {
        return Err(malformed(path, 1, format!("unsupported format {:?}", header.format)));
    }
    let supplied = lexicon.fingerprint();
    if supplied != header.lexicon_hash {
        return Err(KapError::LexiconMismatch { index: header.lexicon_hash, supplied });
    }
    let mut docs = Vec::new();
    let mut postings = BTreeMap::new();
    for (line, v) in rest {
        match jsonl::decode(path, line, v)? {
            SparseLine::Doc { chunk_id, pid, length } => docs.push(DocEntry { chunk_id, pid, length }),
            SparseLine::Term { term, postings: list } => {
                let list = list.into_iter().map(|(chunk_id, tf)| Posting { chunk_id, tf }).collect();
                if postings.insert(term.clone(), list).is_some() {
                    return Err(malformed(path, line, format!("duplicate term {term:?}")));
                }
            }
        }
    }
    let index = SparseIndex::from_parts(Bm25Params { k1: header.k1, b: header.b }, lexicon.clone(), docs, postings)?;
    if index.len() != header.n || index.avgdl() != header.avgdl {
        return Err(malformed(path, 1, "header N/avgdl disagree with the records"));
    }
    Ok(index)
}

pub const VECTOR_MAGIC: &[u8; 8] = b"KAPVEC1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorHeader {
    pub dim: usize,
    pub fingerprint: String,
    pub count: usize,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Binary layout: magic, u32 header length, JSON header, then per record
/// length-prefixed chunk id and pid followed by `dim` little-endian f32s.
pub fn save_vectors(path: &Path, index: &DenseIndex) -> Result<()> {
    let header = VectorHeader { dim: index.dim(), fingerprint: index.fingerprint().into(), count: index.len() };
    let mut buf = VECTOR_MAGIC.to_vec();
    let h = jsonl::to_line(&header);
    buf.extend_from_slice(&(h.len() as u32).to_le_bytes());
    buf.extend_from_slice(h.as_bytes());
    for r in index.records() {
        put_str(&mut buf, &r.chunk_id);
        put_str(&mut buf, &r.pid);
        for x in &r.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    jsonl::write_atomic(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Loads a vector store; norms are validated on the way in.
pub fn load_vectors(path: &Path) -> Result<DenseIndex> {
    let bytes = fs::read(path).map_err(|e| KapError::io(path, e))?;
    let bad = |m: &str| malformed(path, 0, m.to_string());
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8) != Some(VECTOR_MAGIC.as_slice()) {
        return Err(bad("not a vector store"));
    }
    let hlen = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let htext = r.take(hlen).ok_or_else(|| bad("truncated header"))?;
    let header: VectorHeader = serde_json::from_slice(htext).map_err(|e| bad(&e.to_string()))?;
    let mut records = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let chunk_id = r.string().ok_or_else(|| bad("truncated record"))?;
        let pid = r.string().ok_or_else(|| bad("truncated record"))?;
        let raw = r.take(header.dim * 4).ok_or_else(|| bad("truncated vector"))?;
        let vector = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        records.push(VectorRecord { chunk_id, pid, vector });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last record"));
    }
    Ok(DenseIndex::from_records(header.fingerprint, header.dim, records)?)
}

pub const RUN_FORMAT: &str = "kap-run/1";

/// Lists every (qid, strategy) pair the file holds a run for, so that empty
/// result lists survive the round trip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    pub format: String,
    pub strategies: Vec<Strategy>,
    pub qids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub qid: String,
    pub strategy: Strategy,
    pub rank: usize,
    pub pid: String,
    pub score: f64,
}

/// Runs grouped by strategy, then qid.
pub type Runs = BTreeMap<Strategy, BTreeMap<String, RankedList>>;

pub fn save_runs(path: &Path, runs: &Runs) -> Result<()> {
    let qids: BTreeSet<&String> = runs.values().flat_map(|m| m.keys()).collect();
    for (s, m) in runs {
        if m.len() != qids.len() {
            return Err(KapError::Invariant(format!("{s} runs do not cover every query")));
        }
    }
    let header =
        RunHeader { format: RUN_FORMAT.into(), strategies: runs.keys().copied().collect(), qids: qids.into_iter().cloned().collect() };
    let mut buf = jsonl::to_line(&header);
    buf.push('\n');
    for lists in runs.values() {
        for list in lists.values() {
            for (i, hit) in list.items.iter().enumerate() {
                let rec = RunRecord { qid: list.qid.clone(), strategy: list.strategy, rank: i + 1, pid: hit.id.clone(), score: hit.score };
                buf.push_str(&jsonl::to_line(&rec));
                buf.push('\n');
            }
        }
    }
    jsonl::write_atomic(path, buf.as_bytes())
}

pub fn load_runs(path: &Path) -> Result<Runs> {
    let (header, rest): (RunHeader, _) = split_header(path)?;
    if header.format != RUN_FORMAT {
        return Err(malformed(path, 1, format!("unsupported format {:?}", header.format)));
    }
    let mut runs: Runs = header
        .strategies
        .iter()
        .map(|&s| (s, header.qids.iter().map(|q| (q.clone(), RankedList::new(q.clone(), s, Vec::new()))).collect()))
        .collect();
    for (line, v) in rest {
        let rec: RunRecord = jsonl::decode(path, line, v)?;
        let list = runs
            .get_mut(&rec.strategy)
            .and_then(|m| m.get_mut(&rec.qid))
            .ok_or_else(|| malformed(path, line, format!("run for {} / {} not declared in header", rec.qid, rec.strategy)))?;
        if rec.rank != list.items.len() + 1 {
            return Err(malformed(path, line, format!("rank {} out of sequence", rec.rank)));
        }
        list.items.push(Hit::new(rec.pid, rec.score));
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kap_core::chunk::chunk_corpus;
    use kap_core::{CjkWordCounter, Embedder, HashedNgramEmbedder};

    fn chunks() -> Vec<Chunk> {
        let pages: BTreeMap<(String, u32), String> =
            [(("A".to_string(), 1), "港灣銀行 營業收入 成長".to_string()), (("B".to_string(), 1), "保險 理賠 條款 營業收入".to_string())]
                .into_iter()
                .collect();
        chunk_corpus(&pages, &ChunkParams::new(3, 1), &CjkWordCounter).unwrap()
    }

    #[test]
    fn chunk_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chunks.jsonl");
        let c = chunks();
        save_chunks(&p, "cjk-word@1", &ChunkParams::new(3, 1), &c).unwrap();
        let (h, back) = load_chunks(&p).unwrap();
        assert_eq!(h.counter, "cjk-word@1");
        assert_eq!(back, c);
    }

    #[test]
    fn sparse_round_trip_and_lexicon_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sparse.jsonl");
        let lex = Lexicon::new(["營業收入", "港灣銀行"]).unwrap();
        let idx = SparseIndex::build(&chunks(), &lex, Bm25Params::default()).unwrap();
        save_sparse(&p, &idx).unwrap();
        assert_eq!(load_sparse(&p, &lex).unwrap(), idx);
        let other = Lexicon::new(["營業"]).unwrap();
        assert!(matches!(load_sparse(&p, &other), Err(KapError::LexiconMismatch { .. })));
    }

    #[test]
    fn vector_round_trip_and_norm_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vectors.bin");
        let emb = HashedNgramEmbedder::default();
        let idx = DenseIndex::build(&chunks(), &emb).unwrap();
        save_vectors(&p, &idx).unwrap();
        assert_eq!(load_vectors(&p).unwrap(), idx);
        assert_eq!(load_vectors(&p).unwrap().fingerprint(), emb.fingerprint());

        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&7.0f32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(load_vectors(&p).is_err());
    }

    #[test]
    fn runs_keep_empty_lists() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.jsonl");
        let mut runs = Runs::new();
        for s in Strategy::ALL {
            let mut m = BTreeMap::new();
            m.insert("q1".to_string(), RankedList::new("q1", s, vec![Hit::new("A", 2.5), Hit::new("B", 0.125)]));
            m.insert("q2".to_string(), RankedList::new("q2", s, vec![]));
            runs.insert(s, m);
        }
        save_runs(&p, &runs).unwrap();
        assert_eq!(load_runs(&p).unwrap(), runs);
    }
}

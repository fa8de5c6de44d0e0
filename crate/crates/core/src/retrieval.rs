//! Bit-packed Hamming search and ranking metrics.
//!
//! Bit convention: `+1 ↦ 1`, `-1 ↦ 0`; bit `j` of a code lives in word `j / 64`
//! at position `j % 64`. Pad bits past `q` in the last word are always zero.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMatrix;
use crate::format::{write_atomic, ByteReader, ByteWriter, FormatError};

pub const CODES_MAGIC: &[u8; 4] = b"MLHB";

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("code value {value} at ({row}, {col}) is not -1 or +1")]
    NotBinary { row: usize, col: usize, value: i8 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("empty ranked list for query {0}")]
    EmptyRanking(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// `n` codes of `q` entries in `{-1,+1}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCodes {
    n: usize,
    q: usize,
    data: Vec<i8>,
}

impl BinaryCodes {
    pub fn new(n: usize, q: usize, data: Vec<i8>) -> Result<Self, RetrievalError> {
        if data.len() != n * q {
            return Err(RetrievalError::Shape(format!(
                "{} values for {n}x{q} codes",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|&v| v != 1 && v != -1) {
            return Err(RetrievalError::NotBinary {
                row: k / q,
                col: k % q,
                value: data[k],
            });
        }
        Ok(BinaryCodes { n, q, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }
}

/// Bit-packed codes for popcount distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    q: usize,
    words_per_code: usize,
    payload: Vec<u64>,
}

pub fn pack(codes: &BinaryCodes) -> PackedCodes {
    let (n, q) = (codes.n, codes.q);
    let wpc = q.div_ceil(64);
    let mut payload = vec![0u64; n * wpc];
    for i in 0..n {
        let words = &mut payload[i * wpc..(i + 1) * wpc];
        for (j, &v) in codes.row(i).iter().enumerate() {
            if v == 1 {
                words[j / 64] |= 1u64 << (j % 64);
            }
        }
    }
    PackedCodes {
        n,
        q,
        words_per_code: wpc,
        payload,
    }
}

/// Packs raw `±1` values, rejecting anything else.
pub fn pack_values(n: usize, q: usize, values: Vec<i8>) -> Result<PackedCodes, RetrievalError> {
    Ok(pack(&BinaryCodes::new(n, q, values)?))
}

#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

impl PackedCodes {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.q
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn code(&self, i: usize) -> &[u64] {
        &self.payload[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn payload(&self) -> &[u64] {
        &self.payload
    }

    pub fn distance(&self, i: usize, other: &PackedCodes, j: usize) -> u32 {
        hamming(self.code(i), other.code(j))
    }

    pub fn unpack(&self) -> BinaryCodes {
        let mut data = Vec::with_capacity(self.n * self.q);
        for i in 0..self.n {
            let w = self.code(i);
            for j in 0..self.q {
                data.push(if w[j / 64] >> (j % 64) & 1 == 1 {
                    1
                } else {
                    -1
                });
            }
        }
        BinaryCodes {
            n: self.n,
            q: self.q,
            data,
        }
    }

    fn pad_mask(&self) -> u64 {
        match self.q % 64 {
            0 => 0,
            r => !((1u64 << r) - 1),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut w = ByteWriter::new(CODES_MAGIC);
        w.dim(self.n)?;
        w.dim(self.q)?;
        for &word in &self.payload {
            w.u64(word);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::open(bytes, CODES_MAGIC, "codes")?;
        let n = r.u32()? as usize;
        let q_at = r.offset();
        let q = r.u32()? as usize;
        if q == 0 {
            return Err(FormatError::InvalidValue {
                offset: q_at,
                detail: "zero-length codes".into(),
            });
        }
        let wpc = q.div_ceil(64);
        r.checked_payload(&[n, wpc], 8)?;
        let mut payload = Vec::with_capacity(n * wpc);
        for _ in 0..n * wpc {
            payload.push(r.u64()?);
        }
        let out = PackedCodes {
            n,
            q,
            words_per_code: wpc,
            payload,
        };
        let mask = out.pad_mask();
        if let Some(i) = (0..n).find(|&i| out.code(i)[wpc - 1] & mask != 0) {
            return Err(FormatError::InvalidValue {
                offset: q_at + 4 + (i * wpc + wpc - 1) * 8,
                detail: "nonzero pad bits".into(),
            });
        }
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Database ids for one query, nearest first, ties broken by ascending id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: usize,
    pub ids: Vec<usize>,
    pub distances: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchResult {
    pub lists: Vec<RankedList>,
    /// `topk` exceeded the database size and was clamped to it.
    pub clamped: bool,
}

/// Exact top-`k` by linear scan. Distances are bucketed (counting sort over
/// `0..=q`), which yields the ascending-id tie order directly.
pub fn search_one(query: &[u64], db: &PackedCodes, topk: usize) -> (Vec<usize>, Vec<u32>) {
    let q = db.q;
    let mut dists = vec![0u32; db.n];
    fill_distances(query, db, &mut dists);
    let mut counts = vec![0usize; q + 2];
    for &d in &dists {
        counts[d as usize + 1] += 1;
    }
    for b in 1..counts.len() {
        counts[b] += counts[b - 1];
    }
    // counts[d] is now the next sorted position for distance d; only
    // positions below k are kept
    let k = topk.min(db.n);
    let mut order = vec![0usize; k];
    for (j, &d) in dists.iter().enumerate() {
        let slot = &mut counts[d as usize];
        if *slot < k {
            order[*slot] = j;
        }
        *slot += 1;
    }
    let d = order.iter().map(|&j| dists[j]).collect();
    (order, d)
}

fn fill_distances(query: &[u64], db: &PackedCodes, out: &mut [u32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: popcnt support was just checked
        return unsafe { fill_distances_popcnt(query, db, out) };
    }
    fill_distances_portable(query, db, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn fill_distances_popcnt(query: &[u64], db: &PackedCodes, out: &mut [u32]) {
    fill_distances_portable(query, db, out)
}

#[inline(always)]
fn fill_distances_portable(query: &[u64], db: &PackedCodes, out: &mut [u32]) {
    let w = db.words_per_code();
    if w == 1 {
        let qw = query[0];
        for (o, &x) in out.iter_mut().zip(db.payload()) {
            *o = (x ^ qw).count_ones();
        }
    } else {
        for (o, code) in out.iter_mut().zip(db.payload().chunks_exact(w)) {
            *o = hamming(query, code);
        }
    }
}

pub fn search(
    queries: &PackedCodes,
    db: &PackedCodes,
    topk: usize,
) -> Result<SearchResult, RetrievalError> {
    if queries.q != db.q {
        return Err(RetrievalError::Shape(format!(
            "query codes have {} bits, database {}",
            queries.q, db.q
        )));
    }
    let lists = (0..queries.n)
        .into_par_iter()
        .map(|i| {
            let (ids, distances) = search_one(queries.code(i), db, topk);
            RankedList {
                query: i,
                ids,
                distances,
            }
        })
        .collect();
    Ok(SearchResult {
        lists,
        clamped: topk > db.n,
    })
}

/// Ground-truth relevance between queries and database items.
pub trait Relevance: Sync {
    fn is_relevant(&self, query: usize, item: usize) -> bool;
    /// Number of relevant items in the whole database for `query`.
    fn relevant_count(&self, query: usize) -> usize;
}

/// Relevant iff the two label sets intersect.
pub struct LabelRelevance<'a> {
    queries: &'a LabelMatrix,
    db: &'a LabelMatrix,
    counts: Vec<usize>,
}

impl<'a> LabelRelevance<'a> {
    pub fn new(queries: &'a LabelMatrix, db: &'a LabelMatrix) -> Result<Self, RetrievalError> {
        if queries.classes() != db.classes() {
            return Err(RetrievalError::Shape(format!(
                "query labels have {} classes, database {}",
                queries.classes(),
                db.classes()
            )));
        }
        let counts = (0..queries.len())
            .into_par_iter()
            .map(|i| {
                (0..db.len())
                    .filter(|&j| queries.shares_label(i, db, j))
                    .count()
            })
            .collect();
        Ok(LabelRelevance {
            queries,
            db,
            counts,
        })
    }
}

impl Relevance for LabelRelevance<'_> {
    fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.queries.shares_label(query, self.db, item)
    }

    fn relevant_count(&self, query: usize) -> usize {
        self.counts[query]
    }
}

/// Explicit `queries × items` indicator.
#[derive(Debug, Clone)]
pub struct RelevanceMatrix {
    rows: Vec<Vec<bool>>,
}

impl RelevanceMatrix {
    pub fn new(rows: Vec<Vec<bool>>) -> Self {
        RelevanceMatrix { rows }
    }
}

impl Relevance for RelevanceMatrix {
    fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.rows[query][item]
    }

    fn relevant_count(&self, query: usize) -> usize {
        self.rows[query].iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub k: usize,
    /// `None` for queries with no relevant database item (excluded from `map`).
    pub per_query_ap: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr_curve: Option<Vec<PrPoint>>,
}

/// AP over the first `k` ranks, normalized by the relevant items retrieved there.
pub fn average_precision_at_k(relevant: impl Iterator<Item = bool>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in relevant.take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / hits.max(1) as f64
}

pub fn map_at_k(
    ranked: &[RankedList],
    relevance: &impl Relevance,
    k: usize,
) -> Result<EvalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut per_query_ap = Vec::with_capacity(ranked.len());
    for list in ranked {
        if list.ids.is_empty() {
            return Err(RetrievalError::EmptyRanking(list.query));
        }
        if relevance.relevant_count(list.query) == 0 {
            per_query_ap.push(None);
            continue;
        }
        let rels = list
            .ids
            .iter()
            .map(|&j| relevance.is_relevant(list.query, j));
        per_query_ap.push(Some(average_precision_at_k(rels, k)));
    }
    let scored: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalResult {
        map,
        k,
        per_query_ap,
        pr_curve: None,
    })
}

/// Precision and recall after every rank of one full ranking.
pub fn pr_curve_single(list: &RankedList, relevance: &impl Relevance) -> Vec<PrPoint> {
    let total = relevance.relevant_count(list.query);
    let mut hits = 0usize;
    list.ids
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            if relevance.is_relevant(list.query, j) {
                hits += 1;
            }
            PrPoint {
                rank: i + 1,
                recall: if total == 0 {
                    0.0
                } else {
                    hits as f64 / total as f64
                },
                precision: hits as f64 / (i + 1) as f64,
            }
        })
        .collect()
}

/// Mean PR curve across queries that have at least one relevant item.
pub fn pr_curve(ranked: &[RankedList], relevance: &impl Relevance) -> Vec<PrPoint> {
    let curves: Vec<Vec<PrPoint>> = ranked
        .iter()
        .filter(|l| relevance.relevant_count(l.query) > 0)
        .map(|l| pr_curve_single(l, relevance))
        .collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let count = curves.len() as f64;
    (0..len)
        .map(|r| PrPoint {
            rank: r + 1,
            recall: curves.iter().map(|c| c[r].recall).sum::<f64>() / count,
            precision: curves.iter().map(|c| c[r].precision).sum::<f64>() / count,
        })
        .collect()
}

/// Encodes a PR curve as `rank,recall,precision` CSV.
pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("rank,recall,precision\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.rank, p.recall, p.precision));
    }
    s
}

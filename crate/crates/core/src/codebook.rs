//! Hash-center codebooks: choosing the minimum inter-center Hamming distance and
//! drawing `c` centers in `{-1,+1}^q` that respect it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::format::{write_atomic, ByteReader, ByteWriter, FormatError};
use crate::rng::derive_seed;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"MLHC";
pub const MIN_BITS: usize = 8;
pub const MAX_BITS: usize = 512;
pub const DEFAULT_MAX_ATTEMPTS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CodebookError {
    #[error("invalid hash config: {0}")]
    InvalidConfig(String),
    #[error("infeasible: 2^{classes} exceeds 2^{bits}, no distance satisfies the paper-literal condition")]
    Infeasible { bits: usize, classes: usize },
    #[error("construction failed at distance {d} after {attempts} attempt(s)")]
    ConstructionFailed { d: usize, attempts: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Code length `q` and class count `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashConfig {
    pub bits: usize,
    pub classes: usize,
}

impl HashConfig {
    pub fn new(bits: usize, classes: usize) -> Result<Self, CodebookError> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(CodebookError::InvalidConfig(format!(
                "bits must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
            )));
        }
        if classes < 2 {
            return Err(CodebookError::InvalidConfig(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        Ok(HashConfig { bits, classes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMode {
    /// `Σ_{i≤d-2} C(q,i) < 2^c ≤ Σ_{i≤d-1} C(q,i)`
    PaperLiteral,
    /// Largest `d` with `c · Σ_{i≤d-2} C(q,i) < 2^q`.
    StandardGv,
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMode::PaperLiteral => "paper",
            DistanceMode::StandardGv => "gv",
        })
    }
}

impl FromStr for DistanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" | "paper-literal" => Ok(DistanceMode::PaperLiteral),
            "gv" | "standard-gv" => Ok(DistanceMode::StandardGv),
            other => Err(format!(
                "unknown distance mode {other:?} (expected paper|gv)"
            )),
        }
    }
}

/// `S(k) = Σ_{i=0}^{k} C(q, i)` for `k = 0..=q`, exact.
pub fn cumulative_binomials(q: usize) -> Vec<BigUint> {
    let mut out = Vec::with_capacity(q + 1);
    let mut binom = BigUint::one();
    let mut acc = BigUint::zero();
    for i in 0..=q {
        if i > 0 {
            binom = binom * BigUint::from(q - i + 1) / BigUint::from(i);
        }
        acc += &binom;
        out.push(acc.clone());
    }
    out
}

/// `S(k)` with the convention `S(-1) = 0`; `k` is passed as `d - 2` etc.
fn partial_sum(sums: &[BigUint], k: isize) -> BigUint {
    if k < 0 {
        BigUint::zero()
    } else {
        sums[(k as usize).min(sums.len() - 1)].clone()
    }
}

pub fn gv_min_distance(cfg: HashConfig, mode: DistanceMode) -> Result<usize, CodebookError> {
    let q = cfg.bits;
    let sums = cumulative_binomials(q);
    match mode {
        DistanceMode::PaperLiteral => {
            let target = BigUint::one() << cfg.classes;
            // S is increasing, so the first d with 2^c ≤ S(d-1) also has S(d-2) < 2^c.
            (1..=q + 1)
                .find(|&d| target <= partial_sum(&sums, d as isize - 1))
                .ok_or(CodebookError::Infeasible {
                    bits: q,
                    classes: cfg.classes,
                })
        }
        DistanceMode::StandardGv => {
            let space = BigUint::one() << q;
            let c = BigUint::from(cfg.classes);
            let d = (1..=q + 1)
                .take_while(|&d| &c * partial_sum(&sums, d as isize - 2) < space)
                .last()
                .unwrap_or(1);
            Ok(d)
        }
    }
}

/// Distance chosen for a configuration, and which rule produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceSelection {
    pub d: usize,
    pub mode: DistanceMode,
    /// The requested mode was infeasible and the other one was used.
    pub fell_back: bool,
}

/// Applies `preferred`, falling back to the standard rule when the literal
/// condition has no solution.
pub fn select_distance(
    cfg: HashConfig,
    preferred: DistanceMode,
) -> Result<DistanceSelection, CodebookError> {
    match gv_min_distance(cfg, preferred) {
        Ok(d) => Ok(DistanceSelection {
            d,
            mode: preferred,
            fell_back: false,
        }),
        Err(CodebookError::Infeasible { .. }) if preferred == DistanceMode::PaperLiteral => {
            Ok(DistanceSelection {
                d: gv_min_distance(cfg, DistanceMode::StandardGv)?,
                mode: DistanceMode::StandardGv,
                fell_back: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// How a codebook came to be; not persisted in the binary file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub requested_d: usize,
    pub selection: Option<DistanceSelection>,
    pub attempts: usize,
}

/// `c` centers of `q` entries in `{-1,+1}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    pub config: HashConfig,
    pub d: usize,
    pub seed: u64,
    centers: Vec<i8>,
    pub meta: CodebookMeta,
}

impl Codebook {
    /// Wraps explicit centers after checking entries and shape. `d` is
    /// recomputed from the rows.
    pub fn from_centers(
        config: HashConfig,
        centers: Vec<i8>,
        seed: u64,
    ) -> Result<Self, CodebookError> {
        if centers.len() != config.bits * config.classes {
            return Err(CodebookError::InvalidConfig(format!(
                "expected {} entries, got {}",
                config.bits * config.classes,
                centers.len()
            )));
        }
        if let Some(v) = centers.iter().find(|&&v| v != 1 && v != -1) {
            return Err(CodebookError::InvalidConfig(format!(
                "center entry {v} not in {{-1,+1}}"
            )));
        }
        let mut cb = Codebook {
            config,
            d: 0,
            seed,
            centers,
            meta: CodebookMeta {
                requested_d: 0,
                selection: None,
                attempts: 0,
            },
        };
        cb.d = verify_codebook(&cb);
        cb.meta.requested_d = cb.d;
        Ok(cb)
    }

    pub fn bits(&self) -> usize {
        self.config.bits
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn center(&self, i: usize) -> &[i8] {
        let q = self.config.bits;
        &self.centers[i * q..(i + 1) * q]
    }

    pub fn centers(&self) -> &[i8] {
        &self.centers
    }

    /// Centers as a `c×q` float matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(self.config.classes, self.config.bits, |r, c| {
            f64::from(self.center(r)[c])
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut w = ByteWriter::new(CODEBOOK_MAGIC);
        w.dim(self.config.bits)?;
        w.dim(self.config.classes)?;
        w.dim(self.d)?;
        w.u64(self.seed);
        for &v in &self.centers {
            w.i8(v);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodebookError> {
        let mut r = ByteReader::open(bytes, CODEBOOK_MAGIC, "codebook")?;
        let at = r.offset();
        let q = r.u32()? as usize;
        let c = r.u32()? as usize;
        let d = r.u32()? as usize;
        let seed = r.u64()?;
        let config = HashConfig::new(q, c).map_err(|e| FormatError::InvalidValue {
            offset: at,
            detail: e.to_string(),
        })?;
        let n = r.checked_payload(&[q, c], 1)?;
        let data_at = r.offset();
        let centers: Vec<i8> = r.bytes(n)?.iter().map(|&b| b as i8).collect();
        r.finish()?;
        let mut cb = Codebook::from_centers(config, centers, seed).map_err(|e| {
            FormatError::InvalidValue {
                offset: data_at,
                detail: e.to_string(),
            }
        })?;
        if cb.d < d {
            return Err(FormatError::InvalidValue {
                offset: at + 8,
                detail: format!("header claims distance {d} but centers reach only {}", cb.d),
            }
            .into());
        }
        cb.d = d;
        cb.meta.requested_d = d;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        write_atomic(path, &self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

fn pack_words(bits: impl Iterator<Item = bool>, words: usize) -> Vec<u64> {
    let mut out = vec![0u64; words];
    for (j, b) in bits.enumerate() {
        if b {
            out[j / 64] |= 1 << (j % 64);
        }
    }
    out
}

fn word_distance(a: &[u64], b: &[u64]) -> usize {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x ^ y).count_ones() as usize)
        .sum()
}

/// Greedy randomized construction. Each random draw is offered as a candidate
/// together with its complement; a candidate is kept when it is at least `d`
/// away from every kept code. A run stalls after `10·c` consecutive rejections
/// and restarts on a fresh stream, up to `max_attempts` runs.
pub fn generate_centers(
    cfg: HashConfig,
    d: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Codebook, CodebookError> {
    if d == 0 {
        return Err(CodebookError::InvalidConfig(
            "distance must be at least 1".into(),
        ));
    }
    let (q, c) = (cfg.bits, cfg.classes);
    let words = q.div_ceil(64);
    let stall_limit = 10 * c;
    let mask_last = if q % 64 == 0 {
        u64::MAX
    } else {
        (1u64 << (q % 64)) - 1
    };

    for attempt in 0..max_attempts {
        // no code of length q reaches distance > q
        if d > q {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "centers"));
        rng.set_stream(attempt as u64);
        let mut kept: Vec<Vec<u64>> = Vec::with_capacity(c);
        let mut rejected = 0usize;
        while kept.len() < c && rejected < stall_limit {
            let mut cand = pack_words((0..q).map(|_| rng.random::<bool>()), words);
            for pass in 0..2 {
                if kept.len() == c || rejected >= stall_limit {
                    break;
                }
                if pass == 1 {
                    cand.iter_mut().for_each(|w| *w = !*w);
                    *cand.last_mut().unwrap() &= mask_last;
                }
                if kept.iter().all(|k| word_distance(k, &cand) >= d) {
                    kept.push(cand.clone());
                    rejected = 0;
                } else {
                    rejected += 1;
                }
            }
        }
        if kept.len() == c {
            let mut centers = Vec::with_capacity(c * q);
            for code in &kept {
                for j in 0..q {
                    centers.push(if code[j / 64] >> (j % 64) & 1 == 1 {
                        1
                    } else {
                        -1
                    });
                }
            }
            return Ok(Codebook {
                config: cfg,
                d,
                seed,
                centers,
                meta: CodebookMeta {
                    requested_d: d,
                    selection: None,
                    attempts: attempt + 1,
                },
            });
        }
    }
    Err(CodebookError::ConstructionFailed {
        d,
        attempts: max_attempts,
    })
}

/// Selects `d` under `mode` and constructs centers, lowering `d` one step at a
/// time while construction fails. The outcome is recorded in `meta`.
pub fn build_codebook(
    cfg: HashConfig,
    mode: DistanceMode,
    seed: u64,
    max_attempts: usize,
) -> Result<Codebook, CodebookError> {
    let selection = select_distance(cfg, mode)?;
    let mut d = selection.d.min(cfg.bits);
    loop {
        match generate_centers(cfg, d, seed, max_attempts) {
            Ok(mut cb) => {
                cb.meta.requested_d = selection.d;
                cb.meta.selection = Some(selection);
                return Ok(cb);
            }
            Err(CodebookError::ConstructionFailed { .. }) if d > 1 => d -= 1,
            Err(e) => return Err(e),
        }
    }
}

/// Exact minimum pairwise Hamming distance; `q + 1` when there are no pairs.
pub fn verify_codebook(cb: &Codebook) -> usize {
    let (q, c) = (cb.config.bits, cb.config.classes);
    let mut best = q + 1;
    for i in 0..c {
        for j in i + 1..c {
            let dist = cb
                .center(i)
                .iter()
                .zip(cb.center(j))
                .filter(|(a, b)| a != b)
                .count();
            best = best.min(dist);
        }
    }
    best
}

//! Reference implementations and inputs shared by the benchmarks.

use std::time::Instant;

use mlh_core::pack;
use mlh_core::retrieval::{search, BinaryCodes, PackedCodes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` uniform codes of `q` bits in `{-1,+1}`.
pub fn random_codes(seed: u64, n: usize, q: usize) -> BinaryCodes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * q)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    BinaryCodes::new(n, q, data).expect("sizes match")
}

/// Compares one bit at a time on unpacked codes, then stable-sorts by distance.
pub fn naive_scan(query: &[i8], db: &BinaryCodes, topk: usize) -> Vec<usize> {
    let q = db.bits();
    let mut all: Vec<(u32, usize)> = (0..db.len())
        .map(|j| {
            let row = db.row(j);
            let mut d = 0u32;
            for b in 0..q {
                d += (query[b] != row[b]) as u32;
            }
            (d, j)
        })
        .collect();
    all.sort_by_key(|p| p.0);
    all.truncate(topk);
    all.into_iter().map(|p| p.1).collect()
}

pub struct Workload {
    pub queries: BinaryCodes,
    pub db: BinaryCodes,
    pub packed_queries: PackedCodes,
    pub packed_db: PackedCodes,
    pub topk: usize,
}

impl Workload {
    pub fn new(n: usize, q: usize, n_queries: usize, topk: usize, seed: u64) -> Self {
        let db = random_codes(seed, n, q);
        let queries = random_codes(seed + 1, n_queries, q);
        Workload {
            packed_queries: pack(&queries),
            packed_db: pack(&db),
            queries,
            db,
            topk,
        }
    }

    pub fn packed(&self) -> Vec<Vec<usize>> {
        search(&self.packed_queries, &self.packed_db, self.topk)
            .expect("non-empty database")
            .lists
            .into_iter()
            .map(|l| l.ids)
            .collect()
    }

    pub fn naive(&self) -> Vec<Vec<usize>> {
        (0..self.queries.len())
            .map(|i| naive_scan(self.queries.row(i), &self.db, self.topk))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Speedup {
    pub packed_secs: f64,
    pub naive_secs: f64,
}

impl Speedup {
    pub fn ratio(&self) -> f64 {
        self.naive_secs / self.packed_secs
    }
}

fn best_of(runs: usize, mut f: impl FnMut()) -> f64 {
    (0..runs)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Best-of-`runs` wall time of both scans over the same workload.
pub fn measure(w: &Workload, runs: usize) -> Speedup {
    Speedup {
        packed_secs: best_of(runs, || {
            std::hint::black_box(w.packed());
        }),
        naive_secs: best_of(runs, || {
            std::hint::black_box(w.naive());
        }),
    }
}

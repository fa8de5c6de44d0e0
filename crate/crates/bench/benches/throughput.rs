//! Packed scan against the per-bit reference at n = 1e5, q = 64. Fails unless
//! the packed scan is at least 5x faster.

use mlh_bench::{measure, Workload};

fn main() {
    let (n, q, queries) = (100_000, 64, 20);
    let w = Workload::new(n, q, queries, 100, 11);
    assert_eq!(w.packed(), w.naive(), "scans disagree");
    let s = measure(&w, 5);
    println!(
        "n={n} q={q} queries={queries}: packed {:.2} ms, naive {:.2} ms, speedup {:.1}x",
        s.packed_secs * 1e3,
        s.naive_secs * 1e3,
        s.ratio()
    );
    assert!(s.ratio() >= 5.0, "speedup {:.2}x below 5x", s.ratio());
}

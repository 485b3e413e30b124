//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks independent of the thread count and
//! the partial results are combined in chunk order, so sums are bitwise
//! reproducible across pool sizes.

use rayon::prelude::*;

const CHUNK: usize = 8192;

/// `Σ_{i<n} f(i)` with a fixed summation tree.
pub fn ordered_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    ordered_sum_n::<1, _>(n, |i| [f(i)])[0]
}

/// Vector-valued variant of [`ordered_sum`].
pub fn ordered_sum_n<const N: usize, F>(n: usize, f: F) -> [f64; N]
where
    F: Fn(usize) -> [f64; N] + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<[f64; N]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = [0.0; N];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let v = f(i);
                for k in 0..N {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; N];
    for p in partials {
        for k in 0..N {
            total[k] += p[k];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_result_for_any_pool_size() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e3 + 1e-7;
        let n = 100_003;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| ordered_sum(n, f));
        let many = rayon::ThreadPoolBuilder::new().num_threads(7).build().unwrap().install(|| ordered_sum(n, f));
        assert_eq!(one.to_bits(), many.to_bits());
    }
}

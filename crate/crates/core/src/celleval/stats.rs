//! Rank statistics, the rank-sum test and multiple-testing correction.

use crate::error::{Error, Result};

/// Exact enumeration is used up to this many pooled observations.
pub const EXACT_LIMIT: usize = 12;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman correlation on average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Number of `n1`-subsets of ranks `1..=n` with each possible rank sum.
fn rank_sum_counts(n1: usize, n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    // dp[k][s]: ways to choose k ranks with sum s.
    let mut dp = vec![vec![0.0f64; max + 1]; n1 + 1];
    dp[0][0] = 1.0;
    for r in 1..=n {
        for k in (1..=n1.min(r)).rev() {
            for s in (r..=max).rev() {
                dp[k][s] += dp[k - 1][s - r];
            }
        }
    }
    dp.swap_remove(n1)
}

/// Two-sided rank-sum p-value for one gene.
pub fn rank_sum_pvalue(x: &[f64], y: &[f64]) -> Result<f64> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Argument("rank-sum test needs both samples".into()));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = pooled.len();
    let ranks = average_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    if tie_term == nf * nf * nf - nf {
        return Ok(1.0);
    }

    if n <= EXACT_LIMIT && tie_term == 0.0 {
        let counts = rank_sum_counts(n1, n);
        let total: f64 = counts.iter().sum();
        let w = r1.round() as usize;
        let lower: f64 = counts[..=w].iter().sum();
        let upper: f64 = counts[w..].iter().sum();
        return Ok((2.0 * lower.min(upper) / total).min(1.0));
    }

    let (a, b) = (n1 as f64, n2 as f64);
    let u = r1 - a * (a + 1.0) / 2.0;
    let mu = a * b / 2.0;
    let var = a * b / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(libm::erfc(z / std::f64::consts::SQRT_2).min(1.0))
}

/// Per-gene p-values for `x` (n1 × G) against `y` (n2 × G), both row-major.
pub fn rank_sum_pvalues(x: &[f64], n1: usize, y: &[f64], n2: usize, genes: usize) -> Result<Vec<f64>> {
    if x.len() != n1 * genes || y.len() != n2 * genes {
        return Err(Error::Dimension("rank-sum inputs do not match their shapes".into()));
    }
    (0..genes)
        .map(|g| {
            let a: Vec<f64> = (0..n1).map(|i| x[i * genes + g]).collect();
            let b: Vec<f64> = (0..n2).map(|i| y[i * genes + g]).collect();
            rank_sum_pvalue(&a, &b)
        })
        .collect()
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("p-value {v} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        // Dividing by rank/m keeps q >= p exactly under rounding.
        let q = (p[i] / ((pos + 1) as f64 / m as f64)).min(1.0);
        running = running.min(q);
        out[i] = running;
    }
    Ok(out)
}

/// `log2((a + eps) / (b + eps))` per gene.
pub fn log_fold_changes(a: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x + eps) / (y + eps)).log2())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All index subsets of size k from 0..n.
    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                go(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        go(0, n, k, &mut Vec::new(), &mut out);
        out
    }

    /// Two-sided p by enumerating every relabeling of the pooled sample.
    fn enumeration_oracle(x: &[f64], y: &[f64]) -> f64 {
        let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        let n = pooled.len();
        let rank = |v: f64| pooled.iter().filter(|w| **w < v).count() + 1;
        let observed: usize = x.iter().map(|v| rank(*v)).sum();
        let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
        for s in subsets(n, x.len()) {
            let w: usize = s.iter().map(|&i| rank(pooled[i])).sum();
            total += 1;
            le += (w <= observed) as u64;
            ge += (w >= observed) as u64;
        }
        (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn correlation_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
        // Hand case: a = (1, 2, 4), b = (1, 3, 2).
        let (ma, mb) = (7.0 / 3.0, 2.0);
        let da = [1.0 - ma, 2.0 - ma, 4.0 - ma];
        let db = [1.0 - mb, 3.0 - mb, 2.0 - mb];
        let num: f64 = da.iter().zip(&db).map(|(a, b)| a * b).sum();
        let den = (da.iter().map(|a| a * a).sum::<f64>() * db.iter().map(|b| b * b).sum::<f64>()).sqrt();
        assert!((pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 2.0]) - num / den).abs() < 1e-12);
        assert!((spearman(&[1.0, 5.0, 9.0], &[0.1, 0.2, 100.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_sum_fixed_cases() {
        assert_eq!(rank_sum_pvalue(&[2.0, 2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        let p = rank_sum_pvalue(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p - 0.1).abs() < 1e-15);
        assert!(rank_sum_pvalue(&[], &[1.0]).is_err());
    }

    #[test]
    fn exact_path_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..=10 {
            for n1 in 1..n {
                for _ in 0..3 {
                    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 + 0.1).collect();
                    vals.shuffle(&mut rng);
                    let (x, y) = vals.split_at(n1);
                    assert_eq!(rank_sum_pvalue(x, y).unwrap(), enumeration_oracle(x, y), "{x:?} {y:?}");
                }
            }
        }
    }

    #[test]
    fn approximation_tracks_exact_distribution() {
        // Exact null distribution for 20 vs 20 via an independent recursion on
        // the Mann-Whitney count: f(u; m, n) = f(u - n; m - 1, n) + f(u; m, n - 1).
        fn mw_counts(m: usize, n: usize) -> Vec<f64> {
            let mut table = vec![vec![Vec::<f64>::new(); n + 1]; m + 1];
            for i in 0..=m {
                for j in 0..=n {
                    let mut f = vec![0.0; i * j + 1];
                    if i == 0 || j == 0 {
                        f[0] = 1.0;
                    } else {
                        for (u, slot) in f.iter_mut().enumerate() {
                            let a = if u >= j { table[i - 1][j].get(u - j).copied().unwrap_or(0.0) } else { 0.0 };
                            let b = table[i][j - 1].get(u).copied().unwrap_or(0.0);
                            *slot = a + b;
                        }
                    }
                    table[i][j] = f;
                }
            }
            table[m][n].clone()
        }
        let counts = mw_counts(20, 20);
        let total: f64 = counts.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let shift = rng.random_range(0.0..1.5);
            let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>() + shift).collect();
            let y: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let u = x.iter().map(|a| y.iter().filter(|b| *b < a).count()).sum::<usize>();
            let lower: f64 = counts[..=u].iter().sum();
            let upper: f64 = counts[u..].iter().sum();
            let exact = (2.0 * lower.min(upper) / total).min(1.0);
            let approx = rank_sum_pvalue(&x, &y).unwrap();
            assert!((approx - exact).abs() < 0.01, "u={u}: {approx} vs {exact}");
        }
    }

    #[test]
    fn bh_cases() {
        assert_eq!(bh_adjust(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(bh_adjust(&[0.2, 0.2, 0.2]).unwrap(), vec![0.2, 0.2, 0.2]);
        let q = bh_adjust(&[0.01, 0.04, 0.03]).unwrap();
        for (a, b) in q.iter().zip([0.03, 0.04, 0.04]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(bh_adjust(&[0.5, 1.2]), Err(Error::Argument(_))));
    }

    #[test]
    fn fold_change_cases() {
        assert_eq!(log_fold_changes(&[2.5], &[2.5], 1e-6), vec![0.0]);
        assert!((log_fold_changes(&[200.0], &[100.0], 1e-6)[0] - 1.0).abs() < 1e-8);
        assert!((log_fold_changes(&[3.0], &[1.0], 0.0)[0] - 1.584962500721156).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bh_is_monotone_and_equivariant(p in prop::collection::vec(0.0f64..=1.0, 1..40), seed in 0u64..1000) {
            let q = bh_adjust(&p).unwrap();
            for i in 0..p.len() {
                prop_assert!(q[i] >= p[i]);
                prop_assert!(q[i] <= 1.0);
                for j in 0..p.len() {
                    if p[i] <= p[j] {
                        prop_assert!(q[i] <= q[j]);
                    }
                }
            }
            let mut perm: Vec<usize> = (0..p.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let qp = bh_adjust(&pp).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(qp[k], q[i]);
            }
        }

        #[test]
        fn rank_sum_is_a_probability(
            x in prop::collection::vec(0.0f64..5.0, 1..15),
            y in prop::collection::vec(0.0f64..5.0, 1..15),
        ) {
            let p = rank_sum_pvalue(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let q = rank_sum_pvalue(&y, &x).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

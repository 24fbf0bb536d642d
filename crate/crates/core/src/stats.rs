//! Sign test, multiple-comparison correction and rank correlations.

use crate::error::{Error, Result};

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0f64;
    table.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        table.push(acc);
    }
    table
}

/// One-sided exact sign test: `P[X >= wins]` for `X ~ Binomial(wins + losses, 1/2)`,
/// summed in log space so it stays finite and nonzero for large `n`.
pub fn sign_test(wins: u64, losses: u64) -> Result<f64> {
    let n = wins + losses;
    if n == 0 {
        return Err(Error::InvalidArgument("sign test needs at least one non-tied pair".into()));
    }
    if wins == 0 {
        return Ok(1.0);
    }
    let lf = ln_factorials(n);
    let nf = n as usize;
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    let terms: Vec<f64> = (wins as usize..=nf)
        .map(|k| lf[nf] - lf[k] - lf[nf - k] - ln_half_n)
        .collect();
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - peak).exp()).sum();
    Ok((peak + sum.ln()).exp().min(1.0))
}

/// `log10` of the sign-test p-value, for tails too small to print as `f64`.
pub fn sign_test_log10(wins: u64, losses: u64) -> Result<f64> {
    Ok(sign_test(wins, losses)?.log10())
}

/// Bonferroni adjustment: `min(1, m * p)`.
pub fn bonferroni(p: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("bonferroni needs m >= 1".into()));
    }
    Ok((p * m as f64).min(1.0))
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// 1-based ranks with tied values sharing their average rank.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs two equal-length samples of size >= 2".into()));
    }
    check_finite(xs)?;
    check_finite(ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant sample".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average-tie ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument("spearman needs two equal-length samples of size >= 3".into()));
    }
    check_finite(xs)?;
    check_finite(ys)?;
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

/// Pairs among runs of equal values in an already sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Counts strict inversions while merge-sorting `v` ascending.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("kendall_tau needs two equal-length samples of size >= 2".into()));
    }
    check_finite(xs)?;
    check_finite(ys)?;
    let n = xs.len() as u64;
    let n0 = n * (n - 1) / 2;

    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let tx = tied_pairs(pairs.iter().map(|p| p.0));
    let txy = tied_pairs(pairs.iter().copied());

    let mut y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(y.len());
    let discordant = merge_count(&mut y, &mut buf);
    let ty = tied_pairs(y.iter().copied());

    if tx == n0 || ty == n0 {
        return Err(Error::Undefined("kendall tau of an all-tied sample".into()));
    }
    let numerator = n0 as i64 - tx as i64 - ty as i64 + txy as i64 - 2 * discordant as i64;
    let denominator = ((n0 - tx) * (n0 - ty)) as f64;
    Ok(numerator as f64 / denominator.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive, Zero};
    use proptest::prelude::*;

    fn exact_tail(w: u64, l: u64) -> f64 {
        let n = w + l;
        let mut binom = BigUint::one();
        let mut tail = BigUint::zero();
        for k in 0..=n {
            if k >= w {
                tail += &binom;
            }
            binom = binom * BigUint::from(n - k) / BigUint::from(k + 1);
        }
        BigRational::new(tail.into(), (BigUint::one() << n as usize).into())
            .to_f64()
            .unwrap()
    }

    #[test]
    fn sign_test_examples() {
        assert!((sign_test(3, 0).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(sign_test(0, 5).unwrap(), 1.0);
        assert!(sign_test(0, 0).is_err());
        let p = sign_test(537, 0).unwrap();
        assert!(p > 0.0 && p < 1e-100);
        assert!((p.log2() + 537.0).abs() < 1e-9);
    }

    #[test]
    fn sign_test_matches_exact_rational_up_to_fifty() {
        for n in 1..=50u64 {
            for w in 0..=n {
                let exact = exact_tail(w, n - w);
                let got = sign_test(w, n - w).unwrap();
                assert!((got - exact).abs() <= 1e-12 * exact, "w={w} l={} {got} vs {exact}", n - w);
            }
        }
    }

    #[test]
    fn sign_test_is_finite_up_to_a_thousand() {
        for w in [500u64, 700, 900, 1000] {
            let p = sign_test(w, 1000 - w).unwrap();
            assert!(p.is_finite() && p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni(0.01, 4).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(bonferroni(0.5, 4).unwrap(), 1.0);
        assert_eq!(bonferroni(0.2, 1).unwrap(), 0.2);
        assert!(bonferroni(0.2, 0).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(fractional_ranks(&[10.0, 20.0, 20.0, 5.0]), [2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(spearman(&x, &[1.0; 4]), Err(Error::Undefined(_))));
        assert!(spearman(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn kendall_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(kendall_tau(&x, &rev).unwrap(), -1.0);
        assert!(matches!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
    }

    /// O(n^2) pair enumeration with the same final arithmetic.
    fn kendall_pairs(xs: &[f64], ys: &[f64]) -> Option<f64> {
        let n = xs.len() as i64;
        let n0 = n * (n - 1) / 2;
        let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                let sx = (xs[i] - xs[j]).signum() * f64::from(xs[i] != xs[j]);
                let sy = (ys[i] - ys[j]).signum() * f64::from(ys[i] != ys[j]);
                tx += i64::from(sx == 0.0);
                ty += i64::from(sy == 0.0);
                if sx * sy > 0.0 {
                    c += 1;
                } else if sx * sy < 0.0 {
                    d += 1;
                }
            }
        }
        if tx == n0 || ty == n0 {
            return None;
        }
        Some((c - d) as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt())
    }

    proptest! {
        #[test]
        fn kendall_matches_pair_oracle(v in prop::collection::vec((0u8..4, 0u8..4), 2..12)) {
            let xs: Vec<f64> = v.iter().map(|p| f64::from(p.0)).collect();
            let ys: Vec<f64> = v.iter().map(|p| f64::from(p.1)).collect();
            prop_assert_eq!(kendall_tau(&xs, &ys).ok(), kendall_pairs(&xs, &ys));
        }

        #[test]
        fn sign_test_decreases_in_wins(w in 0u64..200, l in 0u64..200) {
            prop_assume!(w + l > 0);
            prop_assert!(sign_test(w + 1, l).unwrap() <= sign_test(w, l).unwrap() * (1.0 + 1e-12));
        }
    }
}

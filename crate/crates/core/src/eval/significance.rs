use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Two-sided exact sign test on the discordant pairs of two paired
/// correctness vectors. Returns 1 when no pair is discordant.
pub fn sign_test(correct_a: &[bool], correct_b: &[bool]) -> Result<f64> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::input(format!(
            "paired vectors differ in length ({} vs {})",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let a_only = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count();
    let b_only = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count();
    Ok(binomial_two_sided(a_only, b_only))
}

/// `min(1, 2 · P[Bin(n, ½) ≤ min(a, b)])` with `n = a + b`.
fn binomial_two_sided(a: usize, b: usize) -> f64 {
    let n = a + b;
    if n == 0 {
        return 1.0;
    }
    let k = a.min(b);
    let tail = if n <= 120 { lower_tail_exact(n, k) } else { lower_tail_log(n, k) };
    (2.0 * tail).min(1.0)
}

/// `P[Bin(n, ½) ≤ k]` in integer arithmetic; the quotient is a dyadic rational.
fn lower_tail_exact(n: usize, k: usize) -> f64 {
    let mut c: u128 = 1;
    let mut sum: u128 = 0;
    for i in 0..=k {
        sum += c;
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    sum as f64 / 2f64.powi(n as i32)
}

fn lower_tail_log(n: usize, k: usize) -> f64 {
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut sum = 0.0;
    for i in 0..=k {
        sum += (ln_c + ln_half_n).exp();
        ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationMode {
    /// All `2^n` sign flips; `n ≤ 20`.
    Exact,
    /// Seeded random flips; the identity flip is counted in addition.
    Sampled { resamples: usize, seed: u64 },
}

/// Two-sided paired permutation test of the mean difference under sign flips.
pub fn paired_permutation_test(scores_a: &[f64], scores_b: &[f64], mode: PermutationMode) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::input("paired score vectors differ in length"));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let observed: f64 = diffs.iter().sum::<f64>().abs();
    let scale: f64 = diffs.iter().map(|d| d.abs()).sum::<f64>();
    let tol = 1e-12 * scale.max(1e-300);
    let at_least = |flip: &dyn Fn(usize) -> bool| {
        let s: f64 = diffs.iter().enumerate().map(|(i, d)| if flip(i) { -d } else { *d }).sum();
        s.abs() >= observed - tol
    };
    match mode {
        PermutationMode::Exact => {
            if n > 20 {
                return Err(Error::input(format!("exact permutation test supports n ≤ 20, got {n}")));
            }
            let total = 1u64 << n;
            let count = (0..total).filter(|mask| at_least(&|i| mask >> i & 1 == 1)).count();
            Ok(count as f64 / total as f64)
        }
        PermutationMode::Sampled { resamples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut count = 1usize;
            for _ in 0..resamples {
                let flips: Vec<bool> = (0..n).map(|_| rng.random()).collect();
                if at_least(&|i| flips[i]) {
                    count += 1;
                }
            }
            Ok(count as f64 / (resamples + 1) as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn discordant(a_only: usize, b_only: usize, both: usize) -> (Vec<bool>, Vec<bool>) {
        let mut a = vec![true; a_only];
        let mut b = vec![false; a_only];
        a.extend(vec![false; b_only]);
        b.extend(vec![true; b_only]);
        a.extend(vec![true; both]);
        b.extend(vec![true; both]);
        (a, b)
    }

    /// Enumerates every assignment of the discordant pairs to a side.
    fn exhaustive_sign(a_only: usize, b_only: usize) -> f64 {
        let n = a_only + b_only;
        let k = a_only.min(b_only);
        let total = 1u64 << n;
        let extreme = (0..total)
            .filter(|m| {
                let c = m.count_ones() as usize;
                c.min(n - c) <= k
            })
            .count();
        extreme as f64 / total as f64
    }

    #[test]
    fn sign_test_cases() {
        let (a, _) = discordant(3, 2, 5);
        assert_eq!(sign_test(&a, &a).unwrap(), 1.0);
        let (a, b) = discordant(8, 0, 4);
        let p = sign_test(&a, &b).unwrap();
        assert_eq!(p, 2.0 * 0.5f64.powi(8));
        assert!((p - 0.0078).abs() < 1e-4);
        let (a, b) = discordant(7, 3, 2);
        assert_eq!(sign_test(&a, &b).unwrap(), exhaustive_sign(7, 3));
        assert_eq!(sign_test(&a, &b).unwrap(), 352.0 / 1024.0);
        assert!(sign_test(&a, &b[1..]).is_err());
    }

    #[test]
    fn sign_test_exhaustive_grid_and_symmetry() {
        for x in 0..9 {
            for y in 0..9 {
                let (a, b) = discordant(x, y, 1);
                let p = sign_test(&a, &b).unwrap();
                let want = if x + y == 0 { 1.0 } else { exhaustive_sign(x, y).min(1.0) };
                assert_eq!(p, want, "{x} {y}");
                assert_eq!(p, sign_test(&b, &a).unwrap());
            }
        }
    }

    #[test]
    fn log_tail_agrees_with_exact_tail() {
        for (n, k) in [(100, 30), (120, 55), (80, 0)] {
            let e = lower_tail_exact(n, k);
            let l = lower_tail_log(n, k);
            assert!((e - l).abs() <= 1e-10 * e, "{n} {k}: {e} vs {l}");
        }
        assert_eq!(binomial_two_sided(200, 200), 1.0);
    }

    fn brute(diffs: &[f64]) -> f64 {
        let n = diffs.len();
        let obs = diffs.iter().sum::<f64>().abs();
        let mut count = 0;
        for m in 0..(1u32 << n) {
            let s: f64 = diffs.iter().enumerate().map(|(i, d)| if m >> i & 1 == 1 { -d } else { *d }).sum();
            if s.abs() >= obs - 1e-9 {
                count += 1;
            }
        }
        count as f64 / (1u32 << n) as f64
    }

    #[test]
    fn permutation_exact_matches_brute_force() {
        let a = [0.9, 0.4, 0.7, 0.1, 0.8, 0.65, 0.3, 0.95, 0.5, 0.45];
        let b = [0.5, 0.5, 0.2, 0.3, 0.1, 0.6, 0.35, 0.4, 0.1, 0.5];
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let p = paired_permutation_test(&a, &b, PermutationMode::Exact).unwrap();
        assert_eq!(p, brute(&diffs));
        assert_eq!(p, paired_permutation_test(&b, &a, PermutationMode::Exact).unwrap());
    }

    #[test]
    fn permutation_zero_differences() {
        let a = [0.3, 0.2, 0.9];
        assert_eq!(paired_permutation_test(&a, &a, PermutationMode::Exact).unwrap(), 1.0);
        let s = PermutationMode::Sampled { resamples: 100, seed: 1 };
        assert_eq!(paired_permutation_test(&a, &a, s).unwrap(), 1.0);
    }

    #[test]
    fn sampled_converges_to_exact() {
        let a = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let exact = paired_permutation_test(&a, &b, PermutationMode::Exact).unwrap();
        let sampled = paired_permutation_test(&a, &b, PermutationMode::Sampled { resamples: 10_000, seed: 7 }).unwrap();
        assert!((exact - sampled).abs() < 0.02, "{exact} vs {sampled}");
        let too_big = vec![1.0; 21];
        assert!(paired_permutation_test(&too_big, &vec![0.0; 21], PermutationMode::Exact).is_err());
    }
}

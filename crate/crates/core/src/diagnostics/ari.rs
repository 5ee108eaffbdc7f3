use std::collections::HashMap;
use std::hash::Hash;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AriError {
    #[error("label length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 2 labels, got {0}")]
    TooFewItems(usize),
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Pair counts are accumulated in 128-bit integers and the index is formed
/// as a single ratio of exact integers, so it stays exact for `n` up to
/// about 10^9. When the expected and maximum index coincide (both
/// labelings trivial), returns 1.0 if the partitions are identical and 0.0
/// otherwise.
pub fn adjusted_rand_index<A, B>(labels_a: &[A], labels_b: &[B]) -> Result<f64, AriError>
where
    A: Hash + Eq + Copy,
    B: Hash + Eq + Copy,
{
    if labels_a.len() != labels_b.len() {
        return Err(AriError::LengthMismatch {
            a: labels_a.len(),
            b: labels_b.len(),
        });
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(AriError::TooFewItems(n));
    }
    let mut joint: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *joint.entry((a, b)).or_insert(0) += 1;
        *rows.entry(a).or_insert(0) += 1;
        *cols.entry(b).or_insert(0) += 1;
    }
    let index: u128 = joint.values().map(|&c| pairs(c)).sum();
    let sa: u128 = rows.values().map(|&c| pairs(c)).sum();
    let sb: u128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);

    // ARI = (index - sa*sb/total) / ((sa+sb)/2 - sa*sb/total), scaled by 2*total
    let num = 2 * (index * total) as i128 - 2 * (sa * sb) as i128;
    let den = ((sa + sb) * total) as i128 - 2 * (sa * sb) as i128;
    if den == 0 {
        return Ok(if index == sa && index == sb { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook floating-point formula.
    fn ari_reference(a: &[u32], b: &[u32]) -> f64 {
        let ka = *a.iter().max().unwrap() as usize + 1;
        let kb = *b.iter().max().unwrap() as usize + 1;
        let mut m = vec![vec![0f64; kb]; ka];
        for (&x, &y) in a.iter().zip(b) {
            m[x as usize][y as usize] += 1.0;
        }
        let c2 = |x: f64| x * (x - 1.0) / 2.0;
        let idx: f64 = m.iter().flatten().map(|&x| c2(x)).sum();
        let ra: f64 = m.iter().map(|r| c2(r.iter().sum())).sum();
        let cb: f64 = (0..kb).map(|j| c2(m.iter().map(|r| r[j]).sum())).sum();
        let e = ra * cb / c2(a.len() as f64);
        let mx = 0.5 * (ra + cb);
        (idx - e) / (mx - e)
    }

    #[test]
    fn identities() {
        let a = [0u32, 0, 1, 1, 2, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        let relabeled: Vec<u32> = a.iter().map(|&x| [7, 3, 11][x as usize]).collect();
        assert_eq!(adjusted_rand_index(&a, &relabeled).unwrap(), 1.0);
        assert_eq!(
            adjusted_rand_index(&a, &a[..3]),
            Err(AriError::LengthMismatch { a: 7, b: 3 })
        );
        assert_eq!(adjusted_rand_index(&[1u8], &[1u8]), Err(AriError::TooFewItems(1)));
    }

    #[test]
    fn degenerate_cases() {
        let one = [0u8; 5];
        assert_eq!(adjusted_rand_index(&one, &one).unwrap(), 1.0);
        let singles = [0u8, 1, 2, 3, 4];
        assert_eq!(adjusted_rand_index(&singles, &singles).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&one, &singles).unwrap(), 0.0);
    }

    #[test]
    fn matches_reference_and_is_symmetric() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = r.random_range(5..200);
            let a: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
            let b: Vec<u32> = a
                .iter()
                .map(|&x| if r.random_bool(0.7) { x } else { r.random_range(0..5) })
                .collect();
            let got = adjusted_rand_index(&a, &b).unwrap();
            let reference = ari_reference(&a, &b);
            if reference.is_finite() {
                assert!((got - reference).abs() < 1e-9, "{got} vs {reference}");
            }
            assert_eq!(got, adjusted_rand_index(&b, &a).unwrap());
        }
    }

    #[test]
    fn large_counts_do_not_overflow() {
        // two clusters of 5e8 each: pair sums near 2.5e17
        let big = 500_000_000u64;
        let p = pairs(big);
        let total = pairs(2 * big);
        let num = 2 * (2 * p * total) as i128 - 2 * (2 * p * 2 * p) as i128;
        let den = ((4 * p) * total) as i128 - 2 * (2 * p * 2 * p) as i128;
        assert_eq!(num, den);
    }
}

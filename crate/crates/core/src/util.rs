use nalgebra::Vector3;

use crate::csfd::Scalar;

/// Pairwise summation with a fixed split, so the result depends only on the
/// order of `values`.
pub fn pairwise_sum<S: Scalar>(values: &[S]) -> S {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        let mut acc = S::zero();
        for v in values {
            acc += *v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[inline]
pub fn norm<S: Scalar>(v: &Vector3<S>) -> S {
    v.dot(v).sqrt()
}

/// Unit vector, or `None` when the real norm is below `eps`.
#[inline]
pub fn normalize<S: Scalar>(v: &Vector3<S>, eps: f64) -> Option<Vector3<S>> {
    let n = norm(v);
    if n.re() < eps {
        None
    } else {
        Some(v / n)
    }
}

#[inline]
pub fn real3<S: Scalar>(v: &Vector3<S>) -> Vector3<f64> {
    v.map(|x| x.re())
}

#[inline]
pub fn lift3<S: Scalar>(v: &Vector3<f64>) -> Vector3<S> {
    v.map(S::from)
}

/// Median of a slice (sorted copy); `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}

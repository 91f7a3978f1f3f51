//! Scalar-generic vector kernels shared by taxonomy similarity and few-shot
//! retrieval. Generic over [`num_traits::Float`] so callers pick f32 or f64.

use num_traits::Float;

/// Dot product. Panics in debug builds if lengths differ; callers validate
/// dimensions at their own boundaries.
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Euclidean norm.
pub fn norm<F: Float>(v: &[F]) -> F {
    dot(v, v).sqrt()
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine<F: Float>(a: &[F], b: &[F]) -> Option<F> {
    let (na, nb) = (norm(a), norm(b));
    if na == F::zero() || nb == F::zero() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Scales `v` to unit norm in place. Returns false (leaving `v` untouched)
/// when the norm is zero.
pub fn normalize<F: Float>(v: &mut [F]) -> bool {
    let n = norm(v);
    if n == F::zero() {
        return false;
    }
    for x in v.iter_mut() {
        *x = *x / n;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_norm_basics() {
        assert_eq!(dot(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 32.0);
        assert_eq!(norm(&[3.0f64, 4.0]), 5.0);
        assert_eq!(norm(&[3.0f32, 4.0]), 5.0);
    }

    #[test]
    fn cosine_zero_norm_is_none() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), None);
    }

    #[test]
    fn cosine_orthogonal_and_parallel() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), Some(0.0));
        assert_eq!(cosine(&[2.0, 0.0], &[5.0, 0.0]), Some(1.0));
        let v = cosine(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn normalize_unit_result() {
        let mut v = vec![3.0f64, 4.0];
        assert!(normalize(&mut v));
        assert_eq!(v, vec![0.6, 0.8]);
        let mut z = vec![0.0f64, 0.0];
        assert!(!normalize(&mut z));
        assert_eq!(z, vec![0.0, 0.0]);
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Orthogonal matrix of shape `[rows, cols]`, deterministic per seed.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs positive dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Orthonormalize the shorter side: `k` vectors of length `n`.
    let (k, n) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while vecs.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Two Gram-Schmidt passes keep the result orthogonal to ~1e-15.
        for _ in 0..2 {
            for u in &vecs {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        vecs.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                data[i * cols + j] = x;
            } else {
                data[j * cols + i] = x;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(w: &Tensor, rows_side: bool) -> Tensor {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        let n = if rows_side { r } else { c };
        let mut g = Tensor::zeros(&[n, n]);
        for a in 0..n {
            for b in 0..n {
                let s: f64 = if rows_side {
                    (0..c).map(|j| w.data()[a * c + j] * w.data()[b * c + j]).sum()
                } else {
                    (0..r).map(|i| w.data()[i * c + a] * w.data()[i * c + b]).sum()
                };
                g.data_mut()[a * n + b] = s;
            }
        }
        g
    }

    #[test]
    fn square_is_orthogonal() {
        let w = orthogonal_init(4, 4, 7);
        assert!(gram(&w, false).max_abs_diff(&Tensor::eye(4)) < 1e-6);
    }

    #[test]
    fn wide_has_orthonormal_rows() {
        let w = orthogonal_init(2, 6, 3);
        assert!(gram(&w, true).max_abs_diff(&Tensor::eye(2)) < 1e-6);
    }

    #[test]
    fn tall_has_orthonormal_columns() {
        let w = orthogonal_init(9, 3, 3);
        assert!(gram(&w, false).max_abs_diff(&Tensor::eye(3)) < 1e-6);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(orthogonal_init(5, 3, 11), orthogonal_init(5, 3, 11));
        assert_ne!(orthogonal_init(5, 3, 11), orthogonal_init(5, 3, 12));
    }
}

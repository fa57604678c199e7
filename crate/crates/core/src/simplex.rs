//! Geometry of the price simplex `{p ≥ 0 : Σp = ‖B‖₁}` and its tangent plane.

use rand::Rng;
use rand_distr::StandardNormal;

/// Orthonormal basis of `{v : Σv = 0}` from Gram-Schmidt on `e_j − e_{j+1}`.
pub fn h0_basis(m: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m.saturating_sub(1));
    for j in 0..m.saturating_sub(1) {
        let mut v = vec![0.0; m];
        v[j] = 1.0;
        v[j + 1] = -1.0;
        for u in &basis {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        basis.push(v);
    }
    basis
}

/// Unit vector in the sum-zero plane, uniform on its sphere.
pub fn random_h0_direction<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    for u in h0_basis(m) {
        let c: f64 = rng.sample(StandardNormal);
        v.iter_mut().zip(&u).for_each(|(a, b)| *a += c * b);
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);
    v
}

/// Barycentric grid points `total · (i_1, …, i_m)/N` with `Σ i = N`, in
/// lexicographic order of `(i_1, …, i_{m−1})`.
pub fn barycentric_grid(m: usize, n: usize, total: f64) -> Vec<Vec<f64>> {
    fn rec(m: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == m - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for i in 0..=left {
            prefix.push(i);
            rec(m, left - i, prefix, out);
            prefix.pop();
        }
    }
    let mut idx = Vec::new();
    rec(m, n, &mut Vec::with_capacity(m), &mut idx);
    idx.into_iter().map(|c| c.into_iter().map(|i| total * i as f64 / n as f64).collect()).collect()
}

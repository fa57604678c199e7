//! Wolfe's minimum-norm-point algorithm over a polytope given by a linear
//! minimisation oracle.
//!
//! The polytope never has to be enumerated: each major cycle asks the oracle
//! for the vertex minimising `⟨x, v⟩` and each minor cycle re-solves the
//! affine least-norm problem on the current corral.

use nalgebra::{DMatrix, DVector};

/// Result of [`min_norm_point`]: the point and its convex decomposition.
#[derive(Clone, Debug)]
pub struct MinNormPoint<T> {
    pub point: Vec<f64>,
    pub atoms: Vec<(T, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn combine(points: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; points[0].len()];
    for (p, w) in points.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    out
}

/// Weights `α` with `Σα = 1` minimising `‖Σ α_i s_i‖`.
fn affine_minimizer(points: &[Vec<f64>]) -> Vec<f64> {
    let k = points.len();
    if k == 1 {
        return vec![1.0];
    }
    let mut a = DMatrix::<f64>::zeros(k + 1, k + 1);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = dot(&points[i], &points[j]);
        }
        a[(i, k)] = 1.0;
        a[(k, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(k + 1);
    b[k] = 1.0;
    let sol = match a.clone().lu().solve(&b) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => a.svd(true, true).solve(&b, 1e-13).expect("svd solve"),
    };
    sol.iter().take(k).copied().collect()
}

/// Minimum-norm point of the polytope whose vertices are exposed by `oracle`.
///
/// `oracle(x)` must return a vertex minimising `⟨x, v⟩` with a label that
/// identifies it. Terminates when the Wolfe gap `‖x‖² − ⟨x, v⟩` drops below
/// `tol` times the squared scale of the vertices seen.
pub fn min_norm_point<T, F>(start: (Vec<f64>, T), oracle: F, tol: f64) -> MinNormPoint<T>
where
    T: Clone + PartialEq,
    F: Fn(&[f64]) -> (Vec<f64>, T),
{
    const WEIGHT_EPS: f64 = 1e-14;
    let mut points = vec![start.0];
    let mut labels = vec![start.1];
    let mut lambda = vec![1.0];
    let mut x = points[0].clone();
    let mut scale = dot(&x, &x).max(f64::MIN_POSITIVE);
    let max_major = 1000;
    for _ in 0..max_major {
        let (v, label) = oracle(&x);
        scale = scale.max(dot(&v, &v));
        let xx = dot(&x, &x);
        if xx - dot(&x, &v) <= tol * scale || labels.contains(&label) {
            break;
        }
        points.push(v);
        labels.push(label);
        lambda.push(0.0);
        loop {
            let alpha = affine_minimizer(&points);
            if alpha.iter().all(|&a| a > WEIGHT_EPS) {
                lambda = alpha;
                x = combine(&points, &lambda);
                break;
            }
            let theta = lambda
                .iter()
                .zip(&alpha)
                .filter(|(_, &a)| a <= WEIGHT_EPS)
                .map(|(&l, &a)| if l - a > 0.0 { l / (l - a) } else { 0.0 })
                .fold(1.0, f64::min);
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l = theta * a + (1.0 - theta) * *l;
            }
            // drop at least the atom that reached zero
            let drop_idx = lambda
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let mut keep: Vec<bool> = lambda.iter().map(|&l| l > WEIGHT_EPS).collect();
            keep[drop_idx] = false;
            let mut idx = 0;
            points.retain(|_| {
                idx += 1;
                keep[idx - 1]
            });
            idx = 0;
            labels.retain(|_| {
                idx += 1;
                keep[idx - 1]
            });
            idx = 0;
            lambda.retain(|_| {
                idx += 1;
                keep[idx - 1]
            });
            let total: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= total);
            x = combine(&points, &lambda);
            if points.len() == 1 {
                break;
            }
        }
    }
    MinNormPoint { point: x, atoms: labels.into_iter().zip(lambda).collect() }
}

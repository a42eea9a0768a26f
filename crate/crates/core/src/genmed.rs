//! The convex GenMED benchmark: objective `k` is the squared distance to the
//! unit vector `e_k`. Its Pareto set is the simplex spanned by the unit
//! vectors, which makes convergence and spread directly measurable.

use crate::error::{Error, Result};

/// `f_k(x) = ||x - e_k||^2` for `k = 0..n`.
pub fn genmed_eval(x: &[f64]) -> Vec<f64> {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    x.iter().map(|&xk| sq - 2.0 * xk + 1.0).collect()
}

/// Row `k` is the gradient of `f_k`: `2 (x - e_k)`.
pub fn genmed_grad(x: &[f64]) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| 2.0 * (v - if j == k { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(x: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    x.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// Distance from `x` to the Pareto set (the unit-vector simplex).
pub fn front_distance(x: &[f64]) -> Result<f64> {
    if !(2..=3).contains(&x.len()) {
        return Err(Error::Config(format!(
            "GenMED supports 2 or 3 objectives, got {}",
            x.len()
        )));
    }
    let p = project_to_simplex(x);
    Ok(x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Objective-space distance from `f` to the image of the simplex boundary
/// (the edges of the Pareto front). Small values mean the point sits on an
/// edge of the front.
pub fn edge_distance(f: &[f64]) -> f64 {
    let n = f.len();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            let dist = |t: f64| {
                let mut x = vec![0.0; n];
                x[a] = t;
                x[b] = 1.0 - t;
                genmed_eval(&x)
                    .iter()
                    .zip(f)
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            // Coarse scan, then golden-section refinement around the best sample.
            const STEPS: usize = 400;
            let (mut arg, mut val) = (0, f64::INFINITY);
            for s in 0..=STEPS {
                let d = dist(s as f64 / STEPS as f64);
                if d < val {
                    (arg, val) = (s, d);
                }
            }
            let mut lo = arg.saturating_sub(1) as f64 / STEPS as f64;
            let mut hi = (arg + 1).min(STEPS) as f64 / STEPS as f64;
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..60 {
                let m1 = hi - phi * (hi - lo);
                let m2 = lo + phi * (hi - lo);
                if dist(m1) < dist(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            best = best.min(val.min(dist(0.5 * (lo + hi))));
        }
    }
    best
}

//! Exact hypervolume, its gradient, and the per-solution loss weights
//! derived from it.
//!
//! All objectives are minimized. A point set is any slice of coordinate
//! vectors; a point's position in the slice is its solution id, which is
//! also the tie-breaking order wherever coordinates coincide.
//!
//! Only points strictly inside the reference box contribute volume. The
//! gradient of the hypervolume with respect to coordinate `k` of a
//! non-dominated point is minus the `(n-1)`-dimensional measure of the part
//! of that point's box face orthogonal to axis `k` which no other point
//! already covers.

/// Pareto dominance for minimization: `a <= b` everywhere and `a < b` somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strict |= x < y;
    }
    strict
}

/// Points grouped into successive non-dominated fronts. Ids within a front
/// are ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontPartition {
    pub fronts: Vec<Vec<usize>>,
}

impl FrontPartition {
    /// Front index of every point.
    pub fn ranks(&self) -> Vec<usize> {
        let n = self.fronts.iter().map(Vec::len).sum();
        let mut rank = vec![0; n];
        for (r, front) in self.fronts.iter().enumerate() {
            for &i in front {
                rank[i] = r;
            }
        }
        rank
    }

    pub fn first(&self) -> &[usize] {
        self.fronts.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Fast non-dominated sorting, `O(p^2 n)`.
pub fn nondominated_sort<P: AsRef<[f64]>>(points: &[P]) -> FrontPartition {
    let p = points.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); p];
    let mut count = vec![0usize; p];
    for i in 0..p {
        for j in i + 1..p {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates(a, b) {
                dominated_by_me[i].push(j);
                count[j] += 1;
            } else if dominates(b, a) {
                dominated_by_me[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..p).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    FrontPartition { fronts }
}

/// Exact hypervolume dominated by `points` and bounded by `reference`.
pub fn hypervolume<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> f64 {
    let inside: Vec<&[f64]> = points
        .iter()
        .map(AsRef::as_ref)
        .filter(|q| q.iter().zip(reference).all(|(a, r)| a < r))
        .collect();
    hv_inside(inside, reference)
}

/// Hypervolume of points already known to be strictly inside the box.
fn hv_inside(mut pts: Vec<&[f64]>, reference: &[f64]) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let n = reference.len();
    match n {
        0 => 0.0,
        1 => reference[0] - pts.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min),
        2 => {
            pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
            let mut area = 0.0;
            let mut floor = reference[1];
            for q in pts {
                if q[1] < floor {
                    area += (reference[0] - q[0]) * (floor - q[1]);
                    floor = q[1];
                }
            }
            area
        }
        _ => {
            // Sweep the last axis; each slab is the (n-1)-volume of the
            // points below it times its thickness.
            let last = n - 1;
            pts.sort_by(|a, b| a[last].total_cmp(&b[last]));
            let mut volume = 0.0;
            for i in 0..pts.len() {
                let top = pts.get(i + 1).map_or(reference[last], |q| q[last]);
                let thickness = top - pts[i][last];
                if thickness > 0.0 {
                    let slab: Vec<&[f64]> = pts[..=i].iter().map(|q| &q[..last]).collect();
                    volume += thickness * hv_inside(slab, &reference[..last]);
                }
            }
            volume
        }
    }
}

/// Partial derivatives of the hypervolume with respect to every coordinate
/// of every point. Dominated points and points outside the reference box
/// get zero vectors. Points lying on the reference boundary get the
/// one-sided (inward) derivative.
pub fn hv_gradient<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> Vec<Vec<f64>> {
    let n = reference.len();
    let mut grad = vec![vec![0.0; n]; points.len()];
    let partition = nondominated_sort(points);
    for &i in partition.first() {
        let q = points[i].as_ref();
        if q.iter().zip(reference).any(|(a, r)| a > r) {
            continue;
        }
        for k in 0..n {
            let q_rest = drop_axis(q, k);
            let ref_rest = drop_axis(reference, k);
            let full: f64 = q_rest.iter().zip(&ref_rest).map(|(a, r)| r - a).product();
            if full <= 0.0 {
                continue;
            }
            // Points below q along axis k shadow part of q's face.
            let shadows: Vec<Vec<f64>> = points
                .iter()
                .enumerate()
                .filter(|&(j, r)| {
                    let r = r.as_ref();
                    j != i && (r[k] < q[k] || (r[k] == q[k] && j < i))
                })
                .map(|(_, r)| {
                    drop_axis(r.as_ref(), k)
                        .iter()
                        .zip(&q_rest)
                        .map(|(a, b)| a.max(*b))
                        .collect()
                })
                .collect();
            let covered = hypervolume(&shadows, &ref_rest);
            grad[i][k] = -(full - covered).max(0.0);
        }
    }
    grad
}

fn drop_axis(v: &[f64], k: usize) -> Vec<f64> {
    v.iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &x)| x)
        .collect()
}

/// Nonnegative per-solution objective weights, each row summing to one.
///
/// Points are first clipped onto the reference box. Each non-dominated
/// front then gets hypervolume gradients computed against the same
/// reference as if it were alone, so dominated solutions also receive a
/// descent direction. A row whose gradient is still zero (for example a
/// duplicate point) falls back to the gradient of its own single-point box,
/// and finally to uniform weights.
pub fn dynamic_weights<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> Vec<Vec<f64>> {
    let n = reference.len();
    let clipped: Vec<Vec<f64>> = points
        .iter()
        .map(|q| q.as_ref().iter().zip(reference).map(|(a, r)| a.min(*r)).collect())
        .collect();
    let partition = nondominated_sort(&clipped);
    let mut weights = vec![vec![0.0; n]; points.len()];
    for front in &partition.fronts {
        let members: Vec<&[f64]> = front.iter().map(|&i| clipped[i].as_slice()).collect();
        let grad = hv_gradient(&members, reference);
        for (slot, &i) in front.iter().enumerate() {
            let raw: Vec<f64> = grad[slot].iter().map(|g| -g).collect();
            weights[i] = normalize(raw)
                .or_else(|| normalize(single_point_gradient(&clipped[i], reference)))
                .unwrap_or_else(|| vec![1.0 / n as f64; n]);
        }
    }
    weights
}

/// Negated gradient of the box volume `prod_k (ref_k - q_k)`.
fn single_point_gradient(q: &[f64], reference: &[f64]) -> Vec<f64> {
    (0..q.len())
        .map(|k| {
            (0..q.len())
                .filter(|&j| j != k)
                .map(|j| (reference[j] - q[j]).max(0.0))
                .product()
        })
        .collect()
}

fn normalize(raw: Vec<f64>) -> Option<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| raw.iter().map(|w| w / total).collect())
}

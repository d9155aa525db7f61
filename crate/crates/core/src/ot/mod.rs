//! Gromov-Wasserstein machinery on Euclidean point sets.
//!
//! * [`gw_objective`] evaluates the quadratic GW energy of a coupling.
//! * [`gw_bruteforce`] minimizes it over permutation couplings (tiny `n`).
//! * [`sliced_gw`] averages closed-form 1D GW costs over random directions.
//! * [`sliced_wasserstein`] is the plain sliced W2² used for evaluation.
//!
//! Point coordinates are `f64` here; the training graph converts its `f32`
//! features on the way in.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

/// Marginal tolerance for couplings.
pub const MARGINAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Condition,
    Image,
    Other,
}

/// `n` points in `d` dimensions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<f64>,
    n: usize,
    d: usize,
    domain: Domain,
}

impl PointSet {
    pub fn new(points: Vec<f64>, n: usize, d: usize, domain: Domain) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("point set needs n >= 1 and d >= 1, got {n} x {d}")));
        }
        if points.len() != n * d {
            return Err(Error::invalid(format!(
                "point set {n} x {d} needs {} values, got {}",
                n * d,
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point set contains non-finite values"));
        }
        Ok(PointSet { points, n, d, domain })
    }

    pub fn from_rows(rows: &[Vec<f64>], domain: Domain) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows of a point set must share one dimension"));
        }
        PointSet::new(rows.concat(), rows.len(), d, domain)
    }

    pub fn from_f32(points: &[f32], n: usize, d: usize, domain: Domain) -> Result<Self> {
        PointSet::new(points.iter().map(|&v| v as f64).collect(), n, d, domain)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    /// Points reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut points = Vec::with_capacity(self.points.len());
        for &p in perm {
            points.extend_from_slice(self.point(p));
        }
        PointSet { points, ..*self }
    }

    /// Every point shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Self {
        assert_eq!(t.len(), self.d);
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, v)| v + t[i % self.d])
            .collect();
        PointSet { points, ..*self }
    }

    /// `x -> R x` for a row-major `d x d` matrix `r`.
    pub fn transformed(&self, r: &[f64]) -> Self {
        assert_eq!(r.len(), self.d * self.d);
        let mut points = vec![0.0; self.points.len()];
        for i in 0..self.n {
            let p = self.point(i);
            for a in 0..self.d {
                points[i * self.d + a] = (0..self.d).map(|b| r[a * self.d + b] * p[b]).sum();
            }
        }
        PointSet { points, ..*self }
    }
}

/// Symmetric matrix of intra-set Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn pairwise_dist(ps: &PointSet) -> DistanceMatrix {
    let n = ps.n();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for k in i + 1..n {
            let d = ps
                .point(i)
                .iter()
                .zip(ps.point(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            values[i * n + k] = d;
            values[k * n + i] = d;
        }
    }
    DistanceMatrix { n, values }
}

/// Transport plan with row marginal `alpha` and column marginal `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    n: usize,
    m: usize,
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Coupling {
    pub fn new(gamma: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let (n, m) = (alpha.len(), beta.len());
        if gamma.len() != n * m {
            return Err(Error::invalid(format!(
                "coupling has {} entries, marginals imply {n} x {m}",
                gamma.len()
            )));
        }
        if gamma.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::invalid("coupling entries must be finite and nonnegative"));
        }
        for (name, w) in [("alpha", &alpha), ("beta", &beta)] {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > MARGINAL_TOL {
                return Err(Error::invalid(format!("{name} sums to {s}, expected 1")));
            }
        }
        for i in 0..n {
            let r: f64 = gamma[i * m..(i + 1) * m].iter().sum();
            if (r - alpha[i]).abs() > MARGINAL_TOL {
                return Err(Error::invalid(format!(
                    "row {i} of coupling sums to {r}, marginal is {}",
                    alpha[i]
                )));
            }
        }
        for j in 0..m {
            let c: f64 = (0..n).map(|i| gamma[i * m + j]).sum();
            if (c - beta[j]).abs() > MARGINAL_TOL {
                return Err(Error::invalid(format!(
                    "column {j} of coupling sums to {c}, marginal is {}",
                    beta[j]
                )));
            }
        }
        Ok(Coupling {
            n,
            m,
            gamma,
            alpha,
            beta,
        })
    }

    /// `Γ[i][perm[i]] = 1/n` with uniform marginals.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        let w = 1.0 / n as f64;
        let mut gamma = vec![0.0; n * n];
        for (i, &j) in perm.iter().enumerate() {
            if j >= n {
                return Err(Error::invalid(format!("permutation entry {j} >= {n}")));
            }
            gamma[i * n + j] = w;
        }
        Coupling::new(gamma, vec![w; n], vec![w; n])
    }

    /// Independent coupling of two uniform marginals.
    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        let w = 1.0 / (n * m) as f64;
        Coupling::new(vec![w; n * m], vec![1.0 / n as f64; n], vec![1.0 / m as f64; m])
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.m + j]
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// For a permutation coupling, the column matched to each row.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        (0..self.n)
            .map(|i| (0..self.m).find(|&j| self.get(i, j) > 0.0))
            .collect()
    }
}

/// `Σ_{i,j,k,l} |Mc(i,k) − Mx(j,l)|² Γ_ij Γ_kl`.
pub fn gw_objective(mc: &DistanceMatrix, mx: &DistanceMatrix, coupling: &Coupling) -> Result<f64> {
    if coupling.rows() != mc.n() || coupling.cols() != mx.n() {
        return Err(Error::invalid(format!(
            "coupling is {} x {}, distance matrices are {} and {}",
            coupling.rows(),
            coupling.cols(),
            mc.n(),
            mx.n()
        )));
    }
    let (n, m) = (mc.n(), mx.n());
    let mut cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            let gij = coupling.get(i, j);
            if gij == 0.0 {
                continue;
            }
            for k in 0..n {
                for l in 0..m {
                    let gkl = coupling.get(k, l);
                    if gkl == 0.0 {
                        continue;
                    }
                    let diff = mc.get(i, k) - mx.get(j, l);
                    cost += diff * diff * gij * gkl;
                }
            }
        }
    }
    Ok(cost)
}

pub const BRUTEFORCE_MAX_N: usize = 6;

/// Minimum of [`gw_objective`] over the `n!` permutation couplings.
///
/// Exact whenever a permutation attains the GW optimum (e.g. isometric
/// clouds); an upper bound on the full minimum otherwise. Ties keep the
/// lexicographically first permutation.
pub fn gw_bruteforce(c: &PointSet, x: &PointSet) -> Result<(f64, Coupling)> {
    let n = c.n();
    if x.n() != n {
        return Err(Error::invalid(format!(
            "brute force needs equal sizes, got {n} and {}",
            x.n()
        )));
    }
    if n > BRUTEFORCE_MAX_N {
        return Err(Error::invalid(format!(
            "brute force limited to n <= {BRUTEFORCE_MAX_N}, got {n}"
        )));
    }
    let mc = pairwise_dist(c);
    let mx = pairwise_dist(x);
    let w2 = 1.0 / (n * n) as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let mut cost = 0.0;
        for i in 0..n {
            for k in 0..n {
                let diff = mc.get(i, k) - mx.get(perm[i], perm[k]);
                cost += diff * diff;
            }
        }
        cost *= w2;
        if best.as_ref().map_or(true, |(b, _)| cost < *b) {
            best = Some((cost, perm));
        }
    }
    let (cost, perm) = best.expect("at least one permutation");
    Ok((cost, Coupling::permutation(&perm)?))
}

/// Unit directions `γ_1..γ_L` in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    directions: Vec<f64>,
    d: usize,
    seed: Option<u64>,
}

impl ProjectionSet {
    /// Directions given explicitly; each must have unit norm within 1e-6.
    pub fn from_directions(dirs: &[Vec<f64>]) -> Result<Self> {
        let d = dirs.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::invalid("projection set needs at least one direction"));
        }
        for (m, dir) in dirs.iter().enumerate() {
            if dir.len() != d {
                return Err(Error::invalid("directions must share one dimension"));
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("direction {m} has norm {norm}")));
            }
        }
        Ok(ProjectionSet {
            directions: dirs.concat(),
            d,
            seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.directions.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn direction(&self, m: usize) -> &[f64] {
        &self.directions[m * self.d..(m + 1) * self.d]
    }
}

/// `L` directions drawn uniformly on the unit sphere (normalized Gaussians).
pub fn sample_directions(d: usize, l: usize, seed: u64) -> Result<ProjectionSet> {
    if d == 0 || l == 0 {
        return Err(Error::invalid(format!("need d >= 1 and L >= 1, got d={d}, L={l}")));
    }
    let mut rng = Rng::new(seed);
    let mut directions = Vec::with_capacity(d * l);
    for _ in 0..l {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                directions.extend(v.iter().map(|x| x / norm));
                break;
            }
        }
    }
    Ok(ProjectionSet {
        directions,
        d,
        seed: Some(seed),
    })
}

/// Projection of a point set onto one direction, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub values: Vec<f64>,
    /// `values[i]` is the projection of original point `perm[i]`.
    pub perm: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_raw(points: &[f64], n: usize, d: usize, dir: &[f64]) -> Projection {
    let raw: Vec<f64> = (0..n).map(|i| dot(&points[i * d..(i + 1) * d], dir)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    // Stable: equal values keep their original order.
    perm.sort_by(|&i, &k| raw[i].total_cmp(&raw[k]));
    Projection {
        values: perm.iter().map(|&i| raw[i]).collect(),
        perm,
    }
}

pub fn project(ps: &PointSet, dir: &[f64]) -> Result<Projection> {
    if dir.len() != ps.dim() {
        return Err(Error::invalid(format!(
            "direction has dim {}, points have {}",
            dir.len(),
            ps.dim()
        )));
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("direction norm {norm} is not 1")));
    }
    Ok(project_raw(ps.as_slice(), ps.n(), ps.dim(), dir))
}

/// GW cost of the permutation coupling that pairs sorted `a` with sorted `b`
/// ascending (or with `b` reversed). With both sequences sorted,
/// `|a_i − a_k| − |b_i − b_k| = ±(u_i − u_k)` for `u = a − b` (or `a + rev(b)`),
/// so the `n²` sum collapses to `2·Var(u)`.
fn matched_cost(a: &[f64], b: &[f64], descending: bool) -> (f64, Vec<f64>) {
    let n = a.len();
    let u: Vec<f64> = if descending {
        (0..n).map(|i| a[i] + b[n - 1 - i]).collect()
    } else {
        (0..n).map(|i| a[i] - b[i]).collect()
    };
    let mean = u.iter().sum::<f64>() / n as f64;
    let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (2.0 * var, u.into_iter().map(|v| v - mean).collect())
}

fn is_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// 1D GW between two sorted samples: the cheaper of the ascending-ascending
/// and ascending-descending matchings.
pub fn gw_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "gw_1d needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("gw_1d needs at least one value"));
    }
    if !is_ascending(a) || !is_ascending(b) {
        return Err(Error::invalid("gw_1d inputs must be sorted ascending"));
    }
    let (asc, _) = matched_cost(a, b, false);
    let (desc, _) = matched_cost(a, b, true);
    Ok(asc.min(desc))
}

struct DirectionTerm {
    cost: f64,
    /// d cost / d projection, indexed by original point.
    dc: Vec<f64>,
    dx: Vec<f64>,
}

fn direction_term(c: &[f64], x: &[f64], n: usize, d: usize, dir: &[f64]) -> DirectionTerm {
    let pc = project_raw(c, n, d, dir);
    let px = project_raw(x, n, d, dir);
    let (asc, ua) = matched_cost(&pc.values, &px.values, false);
    let (desc, ud) = matched_cost(&pc.values, &px.values, true);
    let descending = desc < asc;
    let (cost, centered) = if descending { (desc, ud) } else { (asc, ua) };
    let k = 4.0 / n as f64;
    let mut dc = vec![0.0; n];
    let mut dx = vec![0.0; n];
    for i in 0..n {
        let g = k * centered[i];
        dc[pc.perm[i]] += g;
        if descending {
            dx[px.perm[n - 1 - i]] += g;
        } else {
            dx[px.perm[i]] -= g;
        }
    }
    DirectionTerm { cost, dc, dx }
}

/// Sliced GW over row-major `[n, d]` buffers plus its gradient with respect
/// to both, holding every sort order fixed.
pub(crate) fn sliced_gw_with_grad(
    c: &[f64],
    x: &[f64],
    n: usize,
    d: usize,
    proj: &ProjectionSet,
) -> (f64, Vec<f64>, Vec<f64>) {
    let l = proj.len();
    let terms = par::map_indexed(l, |m| direction_term(c, x, n, d, proj.direction(m)));
    let inv_l = 1.0 / l as f64;
    let mut cost = 0.0;
    let mut gc = vec![0.0; n * d];
    let mut gx = vec![0.0; n * d];
    for (m, t) in terms.iter().enumerate() {
        cost += t.cost;
        let dir = proj.direction(m);
        for i in 0..n {
            let (a, b) = (t.dc[i] * inv_l, t.dx[i] * inv_l);
            for j in 0..d {
                gc[i * d + j] += a * dir[j];
                gx[i * d + j] += b * dir[j];
            }
        }
    }
    (cost * inv_l, gc, gx)
}

fn check_pair(op: &str, a: &PointSet, b: &PointSet, proj: &ProjectionSet) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::invalid(format!(
            "{op} needs equal sample counts, got {} and {}",
            a.n(),
            b.n()
        )));
    }
    if a.dim() != proj.dim() || b.dim() != proj.dim() {
        return Err(Error::invalid(format!(
            "{op}: point dims {} and {} vs direction dim {}",
            a.dim(),
            b.dim(),
            proj.dim()
        )));
    }
    Ok(())
}

/// Mean over directions of the 1D GW cost of the projected sets.
pub fn sliced_gw(c: &PointSet, x: &PointSet, proj: &ProjectionSet) -> Result<f64> {
    check_pair("sliced_gw", c, x, proj)?;
    let costs = par::map_indexed(proj.len(), |m| {
        direction_term(c.as_slice(), x.as_slice(), c.n(), c.dim(), proj.direction(m)).cost
    });
    Ok(costs.iter().sum::<f64>() / proj.len() as f64)
}

/// Mean over directions of the mean squared gap between sorted projections.
pub fn sliced_wasserstein(a: &PointSet, b: &PointSet, proj: &ProjectionSet) -> Result<f64> {
    check_pair("sliced_wasserstein", a, b, proj)?;
    let n = a.n();
    let costs = par::map_indexed(proj.len(), |m| {
        let dir = proj.direction(m);
        let pa = project_raw(a.as_slice(), n, a.dim(), dir);
        let pb = project_raw(b.as_slice(), n, b.dim(), dir);
        pa.values
            .iter()
            .zip(&pb.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64
    });
    Ok(costs.iter().sum::<f64>() / proj.len() as f64)
}

#[cfg(test)]
mod tests;

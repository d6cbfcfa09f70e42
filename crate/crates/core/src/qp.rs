//! Convex QP solver: `min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u`.
//!
//! Alternating-direction (operator-splitting) iterations on the variable and
//! the constraint image, with a sparse Cholesky of the reduced KKT matrix
//! (reverse Cuthill-McKee ordered),
//! over-relaxation, periodic penalty self-scaling and a primal
//! infeasibility certificate.

use std::path::Path;

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse matrix as `(row, col, value)` triplets; duplicates are summed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            triplets: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols, "({row}, {col}) outside {}x{}", self.nrows, self.ncols);
        if value != 0.0 {
            self.triplets.push((row, col, value));
        }
    }

    /// Adds `value` at `(i, j)` and `(j, i)` (once on the diagonal).
    pub fn push_symmetric(&mut self, i: usize, j: usize, value: f64) {
        self.push(i, j, value);
        if i != j {
            self.push(j, i, value);
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = Self::new(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                s.push(r, c, m[(r, c)]);
            }
        }
        s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }

    fn to_csr(&self) -> Csr {
        let mut t = self.triplets.clone();
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(t.len());
        let mut data: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *data.last_mut().expect("duplicate follows an entry") += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            indptr[r + 1] += indptr[r];
        }
        Csr {
            ncols: self.ncols,
            indptr,
            indices,
            data,
        }
    }
}

struct Csr {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.data[span].iter().copied())
    }

    fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in self.indptr[r]..self.indptr[r + 1] {
                acc += self.data[s] * x[self.indices[s]];
            }
            *o = acc;
        }
    }

    fn tmul_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for s in self.indptr[r]..self.indptr[r + 1] {
                    out[self.indices[s]] += self.data[s] * yr;
                }
            }
        }
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows());
        self.mul_into(x.as_slice(), out.as_mut_slice());
        out
    }

    fn tmul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        self.tmul_into(y.as_slice(), out.as_mut_slice());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub n: usize,
    /// Full symmetric matrix (both triangles).
    pub p: SparseMatrix,
    pub q: Vec<f64>,
    pub a: SparseMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

impl QpProblem {
    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m());
        if self.p.nrows != n || self.p.ncols != n {
            return Err(Error::InvalidArgument(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows, self.p.ncols
            )));
        }
        if self.q.len() != n {
            return Err(Error::InvalidArgument(format!("q has {} entries, expected {n}", self.q.len())));
        }
        if self.a.ncols != n || self.a.nrows != m || self.u.len() != m {
            return Err(Error::InvalidArgument(format!(
                "A is {}x{}, l has {}, u has {}; expected {m}x{n}",
                self.a.nrows,
                self.a.ncols,
                m,
                self.u.len()
            )));
        }
        if self.p.triplets.iter().chain(&self.a.triplets).any(|t| !t.2.is_finite()) || self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite entry in P, A or q".into()));
        }
        for i in 0..m {
            if self.l[i].is_nan() || self.u[i].is_nan() || self.l[i] > self.u[i] {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: bounds l = {} > u = {}",
                    self.l[i], self.u[i]
                )));
            }
        }
        let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(r, c, v) in &self.p.triplets {
            *entries.entry((r, c)).or_default() += v;
        }
        let scale = entries.values().fold(1.0_f64, |m, v| m.max(v.abs()));
        let asym = entries
            .iter()
            .map(|(&(r, c), v)| (v - entries.get(&(c, r)).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!("P is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let px = self.p.to_csr().mul(&xv);
        0.5 * xv.dot(&px) + self.q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Row products `Ax`.
    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.a.to_csr().mul(&DVector::from_column_slice(x)).iter().copied().collect()
    }

    pub fn to_json(&self) -> String {
        let bound = |v: &[f64]| v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>();
        let dump = QpDump {
            n: self.n,
            m: self.m(),
            p: self.p.triplets.clone(),
            q: self.q.clone(),
            a: self.a.triplets.clone(),
            l: bound(&self.l),
            u: bound(&self.u),
        };
        serde_json::to_string(&dump).expect("qp serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: QpDump = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("qp dump line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let mut p = SparseMatrix::new(d.n, d.n);
        let mut a = SparseMatrix::new(d.m, d.n);
        for (mat, trip) in [(&mut p, d.p), (&mut a, d.a)] {
            for (r, c, v) in trip {
                if r >= mat.nrows || c >= mat.ncols {
                    return Err(Error::Parse {
                        context: "qp dump".into(),
                        message: format!("triplet ({r}, {c}) outside {}x{}", mat.nrows, mat.ncols),
                    });
                }
                mat.push(r, c, v);
            }
        }
        let prob = Self {
            n: d.n,
            p,
            q: d.q,
            a,
            l: d.l.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect(),
            u: d.u.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect(),
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Infinite bounds are written as `null`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QpDump {
    n: usize,
    m: usize,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    a: Vec<(usize, usize, f64)>,
    l: Vec<Option<f64>>,
    u: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub relaxation: f64,
    pub adapt_interval: usize,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    pub infeasibility_after: usize,
    pub tol_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_abs: 1e-6,
            tol_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            adapt_interval: 50,
            check_interval: 5,
            infeasibility_after: 500,
            tol_infeasible: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Dual estimate; `Px + q + Aᵀy ≈ 0` at a solution.
    pub y: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn row_rho(rho: f64, l: f64, u: f64) -> f64 {
    if l == f64::NEG_INFINITY && u == f64::INFINITY {
        RHO_MIN
    } else if u - l < 1e-4 * (1.0 + l.abs()) {
        RHO_EQ_SCALE * rho
    } else {
        rho
    }
}

/// Reverse Cuthill-McKee order of the graph with adjacency lists `adj`:
/// `order[new] = old`. Keeps the stage-banded KKT structure banded whatever
/// the variable layout.
fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (adj[i].len(), i));
    for &root in &by_degree {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !seen[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Symbolic part of the KKT matrix `P + σI + Aᵀ diag(ρ) A`, fixed per solve.
struct KktPattern {
    /// `perm[old] = new`.
    perm: Vec<usize>,
    order: Vec<usize>,
}

impl KktPattern {
    fn new(n: usize, p: &Csr, a: &Csr) -> Self {
        let mut adj = vec![Vec::new(); n];
        let mut link = |i: usize, j: usize| {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        };
        for r in 0..p.nrows() {
            for (c, _) in p.row(r) {
                link(r, c);
            }
        }
        for r in 0..a.nrows() {
            let cols: Vec<usize> = a.row(r).map(|(c, _)| c).collect();
            for (k, &i) in cols.iter().enumerate() {
                for &j in &cols[k + 1..] {
                    link(i, j);
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        let order = rcm_order(&adj);
        let mut perm = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            perm[old] = new;
        }
        Self { perm, order }
    }
}

struct Factor {
    chol: CscCholesky<f64>,
    rho_vec: DVector<f64>,
}

fn factor(pattern: &KktPattern, p: &Csr, a: &Csr, prob: &QpProblem, rho: f64, sigma: f64) -> Result<Factor> {
    let n = prob.n;
    let rho_vec = DVector::from_iterator(prob.m(), (0..prob.m()).map(|i| row_rho(rho, prob.l[i], prob.u[i])));
    let perm = &pattern.perm;
    let mut k = CooMatrix::new(n, n);
    for i in 0..n {
        k.push(perm[i], perm[i], sigma);
    }
    for r in 0..p.nrows() {
        for (c, v) in p.row(r) {
            k.push(perm[r], perm[c], v);
        }
    }
    for r in 0..a.nrows() {
        let w = rho_vec[r];
        for (i, vi) in a.row(r) {
            for (j, vj) in a.row(r) {
                k.push(perm[i], perm[j], w * vi * vj);
            }
        }
    }
    let chol = CscCholesky::factor(&CscMatrix::from(&k))
        .map_err(|_| Error::InvalidArgument("KKT matrix not positive definite; is P PSD?".into()))?;
    Ok(Factor { chol, rho_vec })
}

impl Factor {
    /// Solves `K out = rhs`; `work` is scratch of the same length.
    fn solve_into(&self, pattern: &KktPattern, rhs: &[f64], work: &mut [f64], out: &mut [f64]) {
        for (w, &old) in work.iter_mut().zip(&pattern.order) {
            *w = rhs[old];
        }
        let l = self.chol.l();
        let (offsets, rows, vals) = (l.col_offsets(), l.row_indices(), l.values());
        // columns store the diagonal first, then rows below it
        for j in 0..work.len() {
            let span = offsets[j]..offsets[j + 1];
            let xj = work[j] / vals[span.start];
            work[j] = xj;
            for s in span.start + 1..span.end {
                work[rows[s]] -= vals[s] * xj;
            }
        }
        for j in (0..work.len()).rev() {
            let span = offsets[j]..offsets[j + 1];
            let mut acc = work[j];
            for s in span.start + 1..span.end {
                acc -= vals[s] * work[rows[s]];
            }
            work[j] = acc / vals[span.start];
        }
        for (&w, &old) in work.iter().zip(&pattern.order) {
            out[old] = w;
        }
    }
}

pub fn solve_qp(prob: &QpProblem, settings: &QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    prob.validate()?;
    let (n, m) = (prob.n, prob.m());
    let pc = prob.p.to_csr();
    let a = prob.a.to_csr();
    let pattern = KktPattern::new(n, &pc, &a);
    let q = DVector::from_column_slice(&prob.q);
    let l = DVector::from_column_slice(&prob.l);
    let u = DVector::from_column_slice(&prob.u);
    let project = |v: DVector<f64>| v.zip_zip_map(&l, &u, |x, lo, hi| x.max(lo).min(hi));
    let (mut rhs, mut work, mut x_tilde) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut w_m, mut z_tilde, mut dy) = (vec![0.0; m], vec![0.0; m], DVector::zeros(m));

    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if w.x.len() == n {
            x = DVector::from_column_slice(&w.x);
        }
        if w.y.len() == m {
            y = DVector::from_column_slice(&w.y);
        }
    }
    let mut z = project(a.mul(&x));

    let mut rho = settings.rho;
    let sigma = settings.sigma;
    let alpha = settings.relaxation;
    let mut fac = factor(&pattern, &pc, &a, prob, rho, sigma)?;

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let (mut r_prim, mut r_dual) = (f64::INFINITY, f64::INFINITY);
    for it in 1..=settings.max_iter {
        iterations = it;
        for i in 0..m {
            w_m[i] = fac.rho_vec[i] * z[i] - y[i];
        }
        a.tmul_into(&w_m, &mut rhs);
        for i in 0..n {
            rhs[i] += sigma * x[i] - q[i];
        }
        fac.solve_into(&pattern, &rhs, &mut work, &mut x_tilde);
        a.mul_into(&x_tilde, &mut z_tilde);
        for i in 0..n {
            x[i] = alpha * x_tilde[i] + (1.0 - alpha) * x[i];
        }
        for i in 0..m {
            let rho_i = fac.rho_vec[i];
            let z_relaxed = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_next = (z_relaxed + y[i] / rho_i).max(l[i]).min(u[i]);
            dy[i] = rho_i * (z_relaxed - z_next);
            y[i] += dy[i];
            z[i] = z_next;
        }
        let check = settings.check_interval.max(1);
        if it % check != 0 && it != settings.max_iter {
            continue;
        }

        let ax = a.mul(&x);
        let px = pc.mul(&x);
        let aty = a.tmul(&y);
        r_prim = if m > 0 { inf_norm(&(&ax - &z)) } else { 0.0 };
        r_dual = inf_norm(&(&px + &q + &aty));
        let prim_scale = inf_norm(&ax).max(inf_norm(&z));
        let dual_scale = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&q));
        let eps_prim = settings.tol_abs + settings.tol_rel * prim_scale;
        let eps_dual = settings.tol_abs + settings.tol_rel * dual_scale;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = QpStatus::Solved;
            break;
        }

        if it >= settings.infeasibility_after && m > 0 {
            let dy_norm = inf_norm(&dy);
            if dy_norm > 0.0 {
                let eps = settings.tol_infeasible * dy_norm;
                let support: f64 = (0..m)
                    .map(|i| {
                        if dy[i] > 0.0 {
                            if prob.u[i].is_finite() { prob.u[i] * dy[i] } else if dy[i] > eps { f64::INFINITY } else { 0.0 }
                        } else if dy[i] < 0.0 {
                            if prob.l[i].is_finite() { prob.l[i] * dy[i] } else if -dy[i] > eps { f64::INFINITY } else { 0.0 }
                        } else {
                            0.0
                        }
                    })
                    .sum();
                if inf_norm(&a.tmul(&dy)) <= eps && support < -eps {
                    status = QpStatus::PrimalInfeasible;
                    break;
                }
            }
        }

        // adaptation needs fresh residuals, so it runs on checked iterations
        if settings.adapt_interval > 0 && it % (settings.adapt_interval.div_ceil(check) * check) == 0 {
            let num = r_prim / prim_scale.max(1e-10);
            let den = r_dual / dual_scale.max(1e-10);
            let new_rho = (rho * (num / den.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                fac = factor(&pattern, &pc, &a, prob, rho, sigma)?;
            }
        }
    }
    log::trace!("qp: n={n} m={m} status={status:?} iters={iterations} r_prim={r_prim:e} r_dual={r_dual:e}");
    Ok(QpSolution {
        x: x.iter().copied().collect(),
        y: y.iter().copied().collect(),
        status,
        iterations,
        primal_residual: r_prim,
        dual_residual: r_dual,
    })
}

//! A small dense nonlinear-programming solver.
//!
//! Problems are box-bounded, smooth, with equality constraints `c(z) = 0`
//! and inequality constraints `g(z) >= 0`, supplying gradients and
//! Jacobians but no Hessians. The solver is a slack-based primal-dual
//! interior-point method: a log barrier on the slacks, damped-BFGS
//! curvature for the Lagrangian, Newton steps on the perturbed KKT system
//! with a fraction-to-boundary rule and an l1 merit line search, and a
//! geometrically decreasing barrier parameter.
//!
//! Plain dense factorization handles generic problems; a problem may
//! declare a block-arrow structure (a dense "head" of variables plus
//! independent equally-sized tail blocks, with every constraint touching
//! the head and at most one block), in which case the KKT solve eliminates
//! the blocks first and factorizes only head-sized systems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;

type ObjFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type VecFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type JacFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Dense "head" plus equal-length tail blocks. Every constraint row may
/// involve head variables and variables of at most one block; rows
/// violating that make the solver fall back to the dense path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockStructure {
    /// Number of leading head variables.
    pub head: usize,
    /// Length of each tail block (`n - head` must divide evenly).
    pub block_len: usize,
}

/// A box-bounded NLP: minimize `f(z)` subject to `c(z) = 0`,
/// `g(z) >= 0`, `lower <= z <= upper`.
pub struct NlpProblem {
    n: usize,
    z0: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    obj: Box<ObjFn>,
    grad: Box<GradFn>,
    m_eq: usize,
    eq: Box<VecFn>,
    eq_jac: Box<JacFn>,
    m_ineq: usize,
    ineq: Box<VecFn>,
    ineq_jac: Box<JacFn>,
    structure: Option<BlockStructure>,
}

impl fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlpProblem")
            .field("n", &self.n)
            .field("m_eq", &self.m_eq)
            .field("m_ineq", &self.m_ineq)
            .field("structure", &self.structure)
            .finish_non_exhaustive()
    }
}

impl NlpProblem {
    /// Unconstrained, unbounded problem from an initial guess, objective,
    /// and analytic gradient. Constraints and bounds are added with the
    /// `with_*` builders.
    pub fn new(
        z0: Vec<f64>,
        obj: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        let n = z0.len();
        assert!(n > 0, "problem needs at least one variable");
        Self {
            n,
            z0,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            obj: Box::new(obj),
            grad: Box::new(grad),
            m_eq: 0,
            eq: Box::new(|_| Vec::new()),
            eq_jac: Box::new(move |_| DMatrix::zeros(0, n)),
            m_ineq: 0,
            ineq: Box::new(|_| Vec::new()),
            ineq_jac: Box::new(move |_| DMatrix::zeros(0, n)),
            structure: None,
        }
    }

    /// Box bounds; entries may be infinite.
    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.n);
        assert_eq!(upper.len(), self.n);
        for i in 0..self.n {
            assert!(lower[i] <= upper[i], "empty bound [{}, {}] at {i}", lower[i], upper[i]);
        }
        self.lower = lower;
        self.upper = upper;
        self
    }

    /// Replace the starting point, e.g. with a shifted previous solution.
    pub fn with_initial_guess(mut self, z0: Vec<f64>) -> Self {
        assert_eq!(z0.len(), self.n, "initial guess length");
        assert!(z0.iter().all(|v| v.is_finite()), "initial guess must be finite");
        self.z0 = z0;
        self
    }

    /// Equality constraints `c(z) = 0` with their analytic Jacobian
    /// (row r = constraint r).
    pub fn with_equalities(
        mut self,
        m: usize,
        c: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.m_eq = m;
        self.eq = Box::new(c);
        self.eq_jac = Box::new(jac);
        self
    }

    /// Inequality constraints `g(z) >= 0` with their analytic Jacobian.
    pub fn with_inequalities(
        mut self,
        m: usize,
        g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.m_ineq = m;
        self.ineq = Box::new(g);
        self.ineq_jac = Box::new(jac);
        self
    }

    /// Declare block-arrow structure (see [`BlockStructure`]).
    pub fn with_block_structure(mut self, head: usize, block_len: usize) -> Self {
        assert!(block_len > 0 && head < self.n);
        assert_eq!((self.n - head) % block_len, 0, "tail must split into equal blocks");
        self.structure = Some(BlockStructure { head, block_len });
        self
    }

    pub fn num_variables(&self) -> usize {
        self.n
    }

    pub fn num_equalities(&self) -> usize {
        self.m_eq
    }

    pub fn num_inequalities(&self) -> usize {
        self.m_ineq
    }

    pub fn initial_guess(&self) -> &[f64] {
        &self.z0
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn eval_objective(&self, z: &[f64]) -> f64 {
        (self.obj)(z)
    }

    pub fn eval_gradient(&self, z: &[f64]) -> Vec<f64> {
        let g = (self.grad)(z);
        assert_eq!(g.len(), self.n, "gradient length");
        g
    }

    pub fn eval_equalities(&self, z: &[f64]) -> Vec<f64> {
        let c = (self.eq)(z);
        assert_eq!(c.len(), self.m_eq, "equality length");
        c
    }

    pub fn eval_eq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let j = (self.eq_jac)(z);
        assert_eq!((j.nrows(), j.ncols()), (self.m_eq, self.n), "equality Jacobian shape");
        j
    }

    pub fn eval_inequalities(&self, z: &[f64]) -> Vec<f64> {
        let g = (self.ineq)(z);
        assert_eq!(g.len(), self.m_ineq, "inequality length");
        g
    }

    pub fn eval_ineq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let j = (self.ineq_jac)(z);
        assert_eq!((j.nrows(), j.ncols()), (self.m_ineq, self.n), "inequality Jacobian shape");
        j
    }
}

/// Solver options. The barrier parameter starts at `barrier_init` and is
/// multiplied by `barrier_shrink` whenever the perturbed KKT system is
/// solved to the current barrier's accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NlpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub barrier_init: f64,
    pub barrier_shrink: f64,
    /// Write per-iteration objective/residual rows to this CSV file.
    pub iteration_csv: Option<PathBuf>,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            barrier_init: 0.1,
            barrier_shrink: 0.2,
            iteration_csv: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    OptimalLocal,
    MaxIter,
    InfeasibleDetected,
    NumericFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::OptimalLocal => "OPTIMAL_LOCAL",
            Self::MaxIter => "MAX_ITER",
            Self::InfeasibleDetected => "INFEASIBLE_DETECTED",
            Self::NumericFailure => "NUMERIC_FAILURE",
        };
        f.write_str(s)
    }
}

/// Infinity norms of the first-order optimality conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `|| grad f + Jc' y - Jg' lambda - lam_lo + lam_up ||_inf`.
    pub stationarity: f64,
    /// Worst violation of equalities, inequalities, bounds, and of the
    /// sign condition on inequality/bound multipliers.
    pub feasibility: f64,
    /// `max |multiplier * constraint value|` over inequalities and bounds.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// Lagrange multipliers: equalities, inequalities, and per-variable bound
/// multipliers (zero where a bound is infinite).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub residuals: KktResiduals,
    pub multipliers: Multipliers,
    pub iterations: usize,
}

/// First-order residuals at `(z, multipliers)`, evaluated with plain
/// loops directly from the problem callbacks. This is intentionally a
/// separate code path from the solver's internal bookkeeping so it can
/// certify the solver's answers.
pub fn kkt_residuals(p: &NlpProblem, z: &[f64], m: &Multipliers) -> KktResiduals {
    assert_eq!(z.len(), p.n);
    assert_eq!(m.eq.len(), p.m_eq);
    assert_eq!(m.ineq.len(), p.m_ineq);
    assert_eq!(m.lower.len(), p.n);
    assert_eq!(m.upper.len(), p.n);

    let grad = p.eval_gradient(z);
    let c = p.eval_equalities(z);
    let jc = p.eval_eq_jacobian(z);
    let g = p.eval_inequalities(z);
    let jg = p.eval_ineq_jacobian(z);

    let mut stationarity: f64 = 0.0;
    for j in 0..p.n {
        let mut r = grad[j];
        for (i, &yi) in m.eq.iter().enumerate() {
            r += yi * jc[(i, j)];
        }
        for (i, &li) in m.ineq.iter().enumerate() {
            r -= li * jg[(i, j)];
        }
        r -= m.lower[j];
        r += m.upper[j];
        stationarity = stationarity.max(r.abs());
    }

    let mut feasibility: f64 = 0.0;
    for &ci in &c {
        feasibility = feasibility.max(ci.abs());
    }
    for &gi in &g {
        feasibility = feasibility.max(-gi.min(0.0));
    }
    for j in 0..p.n {
        feasibility = feasibility.max(p.lower[j] - z[j]).max(z[j] - p.upper[j]);
    }
    for &l in m.ineq.iter().chain(&m.lower).chain(&m.upper) {
        feasibility = feasibility.max(-l.min(0.0));
    }

    let mut complementarity: f64 = 0.0;
    for (i, &gi) in g.iter().enumerate() {
        complementarity = complementarity.max((m.ineq[i] * gi).abs());
    }
    for j in 0..p.n {
        if p.lower[j].is_finite() {
            complementarity = complementarity.max((m.lower[j] * (z[j] - p.lower[j])).abs());
        }
        if p.upper[j].is_finite() {
            complementarity = complementarity.max((m.upper[j] * (p.upper[j] - z[j])).abs());
        }
    }

    KktResiduals { stationarity, feasibility, complementarity }
}

/// Worst relative mismatch between analytic derivatives and central finite
/// differences, over a sample of points.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DerivativeReport {
    pub gradient: f64,
    pub eq_jacobian: f64,
    pub ineq_jacobian: f64,
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        self.gradient.max(self.eq_jacobian).max(self.ineq_jacobian)
    }
}

/// Compare the problem's analytic gradient and Jacobians against central
/// finite differences at `points` random points inside the box around the
/// initial guess. Deterministic for a given seed.
pub fn check_derivatives(p: &NlpProblem, points: usize, seed: u64) -> DerivativeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DerivativeReport::default();
    let mut z = vec![0.0; p.n];
    for _ in 0..points {
        for j in 0..p.n {
            let base = p.z0[j];
            let spread = 0.5 * base.abs().max(1.0);
            z[j] = base + rng.gen_range(-spread..=spread);
            // Keep a strict margin inside finite bounds so one-sided
            // perturbations stay evaluable.
            if p.lower[j].is_finite() {
                z[j] = z[j].max(p.lower[j] + 1e-3);
            }
            if p.upper[j].is_finite() {
                z[j] = z[j].min(p.upper[j] - 1e-3);
            }
        }

        let grad = p.eval_gradient(&z);
        let jc = p.eval_eq_jacobian(&z);
        let jg = p.eval_ineq_jacobian(&z);
        let gscale = grad.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let cscale = jc.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let iscale = jg.iter().fold(1.0_f64, |m, v| m.max(v.abs()));

        for j in 0..p.n {
            let h = 1e-6 * z[j].abs().max(1.0);
            let saved = z[j];
            z[j] = saved + h;
            let f_hi = p.eval_objective(&z);
            let c_hi = p.eval_equalities(&z);
            let g_hi = p.eval_inequalities(&z);
            z[j] = saved - h;
            let f_lo = p.eval_objective(&z);
            let c_lo = p.eval_equalities(&z);
            let g_lo = p.eval_inequalities(&z);
            z[j] = saved;

            let fd = (f_hi - f_lo) / (2.0 * h);
            report.gradient = report.gradient.max((fd - grad[j]).abs() / gscale);
            for i in 0..p.m_eq {
                let fd = (c_hi[i] - c_lo[i]) / (2.0 * h);
                report.eq_jacobian = report.eq_jacobian.max((fd - jc[(i, j)]).abs() / cscale);
            }
            for i in 0..p.m_ineq {
                let fd = (g_hi[i] - g_lo[i]) / (2.0 * h);
                report.ineq_jacobian = report.ineq_jacobian.max((fd - jg[(i, j)]).abs() / iscale);
            }
        }
    }
    report
}

/// Solve from the problem's initial guess with cold multiplier
/// initialization (plus a least-squares multiplier estimate on small
/// problems, which also lets an already-optimal guess return immediately).
pub fn solve(p: &NlpProblem, opts: &NlpOptions) -> NlpSolution {
    Solver::new(p, opts, None).run()
}

/// Solve with initial multipliers, e.g. shifted from a previous solution.
pub fn solve_from(p: &NlpProblem, opts: &NlpOptions, warm: &Multipliers) -> NlpSolution {
    Solver::new(p, opts, Some(warm)).run()
}

// --- internals -----------------------------------------------------------

const FRACTION_TO_BOUNDARY: f64 = 0.995;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// Width of the complementarity corridor: each product lam*s is projected
/// into [mu/KAPPA_SIGMA, KAPPA_SIGMA*mu] after the dual update. Wide enough
/// to never touch an ordinary active-set transition, tight enough to stop a
/// single crashing slack from blowing up the condensed diagonal.
const KAPPA_SIGMA: f64 = 1e3;
const EQ_SHIFT: f64 = 1e-10;
/// Fixed curvature model for tail-block variables on the structured path.
const TAIL_CURVATURE: f64 = 1.0;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn all_finite(it: impl IntoIterator<Item = f64>) -> bool {
    it.into_iter().all(f64::is_finite)
}

/// Where a constraint row's variables live: head only, or head plus one
/// tail block.
#[derive(Clone, Copy, PartialEq, Eq)]
enum RowHome {
    Head,
    Block(usize),
}

struct Stacked {
    /// Indices of variables with a finite lower / upper bound.
    lb: Vec<usize>,
    ub: Vec<usize>,
}

impl Stacked {
    fn total(&self, m_ineq: usize) -> usize {
        m_ineq + self.lb.len() + self.ub.len()
    }
}

/// Per-iterate evaluation of the problem callbacks.
struct Eval {
    f: f64,
    grad: DVector<f64>,
    c: DVector<f64>,
    jc: DMatrix<f64>,
    g: DVector<f64>,
    jg: DMatrix<f64>,
}

impl Eval {
    fn at(p: &NlpProblem, z: &[f64]) -> Option<Eval> {
        let e = Eval {
            f: p.eval_objective(z),
            grad: DVector::from_vec(p.eval_gradient(z)),
            c: DVector::from_vec(p.eval_equalities(z)),
            jc: p.eval_eq_jacobian(z),
            g: DVector::from_vec(p.eval_inequalities(z)),
            jg: p.eval_ineq_jacobian(z),
        };
        let finite = e.f.is_finite()
            && all_finite(e.grad.iter().copied())
            && all_finite(e.c.iter().copied())
            && all_finite(e.jc.iter().copied())
            && all_finite(e.g.iter().copied())
            && all_finite(e.jg.iter().copied());
        finite.then_some(e)
    }
}

enum Curvature {
    Dense(DMatrix<f64>),
    /// BFGS on the head block; fixed scaled identity on tail blocks.
    Head(DMatrix<f64>),
}

struct Solver<'a> {
    p: &'a NlpProblem,
    opts: &'a NlpOptions,
    stacked: Stacked,
    z: DVector<f64>,
    s: DVector<f64>,
    lam: DVector<f64>,
    y: DVector<f64>,
    mu: f64,
    mu_min: f64,
    nu: f64,
    curv: Curvature,
    curv_fresh: bool,
    /// Arrow layout when structure is declared and row homes verify.
    arrow: Option<ArrowLayout>,
    best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)>,
    log: Vec<String>,
}

struct ArrowLayout {
    head: usize,
    block_len: usize,
    blocks: usize,
    ineq_home: Vec<RowHome>,
    eq_home: Vec<RowHome>,
}

impl<'a> Solver<'a> {
    fn new(p: &'a NlpProblem, opts: &'a NlpOptions, warm: Option<&Multipliers>) -> Self {
        let stacked = Stacked {
            lb: (0..p.n).filter(|&j| p.lower[j].is_finite()).collect(),
            ub: (0..p.n).filter(|&j| p.upper[j].is_finite()).collect(),
        };
        let mut z = DVector::from_vec(p.z0.clone());
        for j in 0..p.n {
            z[j] = z[j].clamp(p.lower[j], p.upper[j]);
        }
        let m_t = stacked.total(p.m_ineq);
        let mut solver = Self {
            p,
            opts,
            stacked,
            z,
            s: DVector::zeros(m_t),
            lam: DVector::zeros(m_t),
            y: DVector::zeros(p.m_eq),
            mu: opts.barrier_init,
            mu_min: opts.tol / 10.0,
            nu: 1.0,
            curv: Curvature::Dense(DMatrix::identity(p.n, p.n)),
            curv_fresh: true,
            arrow: None,
            best: None,
            log: Vec::new(),
        };
        if let Some(w) = warm {
            solver.seed_multipliers(w);
        }
        solver
    }

    fn seed_multipliers(&mut self, w: &Multipliers) {
        if w.eq.len() == self.p.m_eq {
            self.y = DVector::from_vec(w.eq.clone());
        }
        let m_u = self.p.m_ineq;
        if w.ineq.len() == m_u && w.lower.len() == self.p.n && w.upper.len() == self.p.n {
            for r in 0..m_u {
                self.lam[r] = w.ineq[r].max(1e-10);
            }
            for (k, &j) in self.stacked.lb.iter().enumerate() {
                self.lam[m_u + k] = w.lower[j].max(1e-10);
            }
            let off = m_u + self.stacked.lb.len();
            for (k, &j) in self.stacked.ub.iter().enumerate() {
                self.lam[off + k] = w.upper[j].max(1e-10);
            }
        }
    }

    /// Stacked inequality values: user rows, then finite lower bounds,
    /// then finite upper bounds.
    fn stacked_g(&self, g_user: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let m_u = self.p.m_ineq;
        let mut out = DVector::zeros(self.stacked.total(m_u));
        out.rows_mut(0, m_u).copy_from(g_user);
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            out[m_u + k] = z[j] - self.p.lower[j];
        }
        let off = m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            out[off + k] = self.p.upper[j] - z[j];
        }
        out
    }

    /// `out += scale * (stacked Jacobian)' * w`.
    fn add_jac_t_mul(&self, jg: &DMatrix<f64>, w: &DVector<f64>, scale: f64, out: &mut DVector<f64>) {
        let m_u = self.p.m_ineq;
        for r in 0..m_u {
            let c = scale * w[r];
            if c != 0.0 {
                for j in 0..self.p.n {
                    out[j] += c * jg[(r, j)];
                }
            }
        }
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            out[j] += scale * w[m_u + k];
        }
        let off = m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            out[j] -= scale * w[off + k];
        }
    }

    /// `(stacked Jacobian) * dz`.
    fn jac_mul(&self, jg: &DMatrix<f64>, dz: &DVector<f64>) -> DVector<f64> {
        let m_u = self.p.m_ineq;
        let mut out = DVector::zeros(self.stacked.total(m_u));
        for r in 0..m_u {
            let mut acc = 0.0;
            for j in 0..self.p.n {
                acc += jg[(r, j)] * dz[j];
            }
            out[r] = acc;
        }
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            out[m_u + k] = dz[j];
        }
        let off = m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            out[off + k] = -dz[j];
        }
        out
    }

    /// Lagrangian gradient `grad f + Jc' y - Jg' lam` (bound rows folded in).
    fn lagrangian_grad(&self, e: &Eval) -> DVector<f64> {
        let mut r = e.grad.clone();
        r.gemv_tr(1.0, &e.jc, &self.y, 1.0);
        self.add_jac_t_mul(&e.jg, &self.lam, -1.0, &mut r);
        r
    }

    fn split_multipliers(&self) -> Multipliers {
        let m_u = self.p.m_ineq;
        let mut m = Multipliers {
            eq: self.y.iter().copied().collect(),
            ineq: self.lam.rows(0, m_u).iter().copied().collect(),
            lower: vec![0.0; self.p.n],
            upper: vec![0.0; self.p.n],
        };
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            m.lower[j] = self.lam[m_u + k];
        }
        let off = m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            m.upper[j] = self.lam[off + k];
        }
        m
    }

    fn finish(&mut self, status: SolveStatus, iterations: usize, e: Option<&Eval>) -> NlpSolution {
        self.flush_log();
        let z: Vec<f64> = self.z.iter().copied().collect();
        let multipliers = self.split_multipliers();
        let objective = match e {
            Some(e) => e.f,
            None => self.p.eval_objective(&z),
        };
        let residuals = kkt_residuals(self.p, &z, &multipliers);
        NlpSolution { z, objective, status, residuals, multipliers, iterations }
    }

    fn restore_best(&mut self) {
        if let Some((_, z, s, lam, y)) = self.best.take() {
            self.z = z;
            self.s = s;
            self.lam = lam;
            self.y = y;
        }
    }

    fn flush_log(&mut self) {
        let Some(path) = &self.opts.iteration_csv else { return };
        let mut body = String::from("iter,mu,objective,stationarity,eq_violation,ineq_violation,complementarity,alpha,regularization,max_dual,arg_dual,min_slack,arg_slack,ftb_row,ftb_s,ftb_ds\n");
        for line in &self.log {
            body.push_str(line);
            body.push('\n');
        }
        if let Ok(mut f) = std::fs::File::create(path) {
            let _ = f.write_all(body.as_bytes());
        }
        self.log.clear();
    }

    /// Least-squares multiplier estimate at the current point; cheap
    /// enough only for small problems. Lets warm starts at an optimal
    /// point certify immediately.
    fn estimate_multipliers(&mut self, e: &Eval) {
        let m_t = self.stacked.total(self.p.m_ineq);
        let cols = self.p.m_eq + m_t;
        if cols == 0 || self.p.n + cols > 600 {
            return;
        }
        // Columns: equality Jacobian rows (for y), then the negated
        // stacked inequality rows (for lam >= 0).
        let mut nmat = DMatrix::zeros(self.p.n, cols);
        for i in 0..self.p.m_eq {
            for j in 0..self.p.n {
                nmat[(j, i)] = e.jc[(i, j)];
            }
        }
        let m_u = self.p.m_ineq;
        for r in 0..m_u {
            for j in 0..self.p.n {
                nmat[(j, self.p.m_eq + r)] = -e.jg[(r, j)];
            }
        }
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            nmat[(j, self.p.m_eq + m_u + k)] = -1.0;
        }
        let off = self.p.m_eq + m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            nmat[(j, off + k)] = 1.0;
        }

        let gs = self.stacked_g(&e.g, &self.z);
        let mut normal = nmat.transpose() * &nmat;
        for i in 0..self.p.m_eq {
            normal[(i, i)] += 1e-10;
        }
        for r in 0..m_t {
            // Ridge weight ~ slack^2: inactive constraints push their
            // multiplier to zero, active ones are barely damped.
            normal[(self.p.m_eq + r, self.p.m_eq + r)] += gs[r] * gs[r] + 1e-12;
        }
        let rhs = -(nmat.transpose() * &e.grad);
        let Some(w) = normal.lu().solve(&rhs) else { return };
        if !all_finite(w.iter().copied()) {
            return;
        }
        for i in 0..self.p.m_eq {
            self.y[i] = w[i];
        }
        for r in 0..m_t {
            self.lam[r] = w[self.p.m_eq + r].max(0.0);
        }
    }

    fn run(mut self) -> NlpSolution {
        let z_vec: Vec<f64> = self.z.iter().copied().collect();
        let Some(mut e) = Eval::at(self.p, &z_vec) else {
            return self.finish(SolveStatus::NumericFailure, 0, None);
        };

        let had_warm = self.lam.iter().any(|&l| l > 0.0) || self.y.iter().any(|&y| y != 0.0);
        if !had_warm {
            self.estimate_multipliers(&e);
        }

        // An initial point that already certifies needs no iterations.
        let first = kkt_residuals(self.p, &z_vec, &self.split_multipliers());
        let nearly_optimal = first.max() <= 1e3 * self.opts.tol;
        if first.max() <= self.opts.tol {
            return self.finish(SolveStatus::OptimalLocal, 0, Some(&e));
        }

        // Slack and dual initialization. Near-optimal starts trust the
        // constraint values so the first steps stay in the solved regime.
        // Elsewhere a violated row gets a slack proportional to its violation
        // rather than a hard floor: pairing a tiny slack with the implied dual
        // mu/s would start the run with an enormous condensed diagonal on
        // exactly the rows the step must repair.
        let m_t = self.stacked.total(self.p.m_ineq);
        let gs = self.stacked_g(&e.g, &self.z);
        for r in 0..m_t {
            let floor = if nearly_optimal {
                1e-12
            } else if gs[r] <= 0.0 {
                1e-2 * (1.0 + gs[r].abs())
            } else {
                1e-4
            };
            self.s[r] = gs[r].max(floor);
            if self.lam[r] <= 0.0 {
                self.lam[r] = (self.opts.barrier_init / self.s[r]).clamp(1e-6, 1e6);
            }
        }
        if m_t > 0 {
            let comp = self.s.dot(&self.lam) / m_t as f64;
            self.mu = comp.clamp(self.mu_min, self.opts.barrier_init);
        } else {
            self.mu = self.mu_min;
        }

        self.arrow = self.detect_arrow(&e);
        if let Some(head) = self.arrow.as_ref().map(|ar| ar.head) {
            let seeded = self.seed_curvature(&e, head);
            let fresh = seeded.is_none();
            self.curv =
                Curvature::Head(seeded.unwrap_or_else(|| DMatrix::identity(head, head)));
            self.curv_fresh = fresh;
        } else if self.p.n <= 100 {
            if let Some(b0) = self.seed_curvature(&e, self.p.n) {
                self.curv = Curvature::Dense(b0);
                self.curv_fresh = false;
            }
        }

        let mut delta = 0.0_f64;
        let mut stalls = 0usize;
        let mut best_viol = f64::INFINITY;
        let mut viol_stuck = 0usize;
        for it in 0..self.opts.max_iter {
            let gs = self.stacked_g(&e.g, &self.z);
            let r_d = self.lagrangian_grad(&e);
            let r_g = &gs - &self.s;
            let comp_vec = self.s.component_mul(&self.lam);
            let stat = inf_norm(&r_d);
            let eq_viol = inf_norm(&e.c);
            let ineq_viol = r_g.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            let comp = inf_norm(&comp_vec);
            let e0 = stat.max(eq_viol).max(ineq_viol).max(comp);

            if self.best.as_ref().map_or(true, |(b, ..)| e0 < *b) {
                self.best =
                    Some((e0, self.z.clone(), self.s.clone(), self.lam.clone(), self.y.clone()));
            }

            if e0 <= self.opts.tol {
                let z_now: Vec<f64> = self.z.iter().copied().collect();
                let certified = kkt_residuals(self.p, &z_now, &self.split_multipliers());
                if certified.max() <= self.opts.tol {
                    return self.finish(SolveStatus::OptimalLocal, it, Some(&e));
                }
            }

            // Local infeasibility evidence: a persistent violation that has
            // stopped improving while the iterations keep going, or duals
            // diverging against it.
            let viol_true =
                eq_viol.max(gs.iter().fold(0.0_f64, |m, g| m.max(-g.min(0.0))));
            if viol_true < 0.999 * best_viol {
                best_viol = viol_true;
                viol_stuck = 0;
            } else {
                viol_stuck += 1;
            }
            let violated = viol_true > (100.0 * self.opts.tol).max(1e-5);
            if violated && (inf_norm(&self.lam) > 1e8 || viol_stuck >= 15) {
                self.restore_best();
                return self.finish(SolveStatus::InfeasibleDetected, it, None);
            }

            // Barrier update: once the perturbed system is solved to the
            // barrier's own scale, shrink it.
            let perturbed = stat
                .max(eq_viol)
                .max(ineq_viol)
                .max(comp_vec.iter().fold(0.0_f64, |m, x| m.max((x - self.mu).abs())));
            if perturbed <= 10.0 * self.mu && self.mu > self.mu_min {
                self.mu = (self.mu * self.opts.barrier_shrink).max(self.mu_min);
            }

            // Newton direction on the perturbed KKT system, with slack and
            // dual blocks eliminated.
            let mut q = DVector::zeros(m_t);
            let mut d = DVector::zeros(m_t);
            for r in 0..m_t {
                d[r] = self.lam[r] / self.s[r];
                q[r] = self.mu / self.s[r] - self.lam[r] - d[r] * r_g[r];
            }
            let mut rhs_z = -r_d.clone();
            self.add_jac_t_mul(&e.jg, &q, 1.0, &mut rhs_z);

            let step = loop {
                let sol = if self.arrow.is_some() {
                    self.solve_kkt_arrow(&e, &d, &rhs_z, delta)
                } else {
                    self.solve_kkt_dense(&e, &d, &rhs_z, delta)
                };
                match sol {
                    Some(s) if all_finite(s.0.iter().copied()) && all_finite(s.1.iter().copied()) => {
                        break Some(s)
                    }
                    _ => {
                        delta = if delta == 0.0 { 1e-8 } else { delta * 100.0 };
                        if delta > 1e10 {
                            break None;
                        }
                    }
                }
            };
            let Some((dz, dy)) = step else {
                self.restore_best();
                return self.finish(SolveStatus::NumericFailure, it, None);
            };

            let ds = self.jac_mul(&e.jg, &dz) + &r_g;
            let mut dlam = DVector::zeros(m_t);
            for r in 0..m_t {
                dlam[r] = self.mu / self.s[r] - self.lam[r] - d[r] * ds[r];
            }

            // Fraction-to-boundary limits keep slacks and duals positive.
            let mut alpha_max = 1.0_f64;
            let mut arg_ftb = usize::MAX;
            for r in 0..m_t {
                if ds[r] < 0.0 {
                    let a = -FRACTION_TO_BOUNDARY * self.s[r] / ds[r];
                    if a < alpha_max {
                        alpha_max = a;
                        arg_ftb = r;
                    }
                }
            }
            let mut alpha_lam = 1.0_f64;
            for r in 0..m_t {
                if dlam[r] < 0.0 {
                    alpha_lam = alpha_lam.min(-FRACTION_TO_BOUNDARY * self.lam[r] / dlam[r]);
                }
            }

            // l1 merit line search on the barrier problem.
            let theta0 = e.c.iter().map(|v| v.abs()).sum::<f64>()
                + r_g.iter().map(|v| v.abs()).sum::<f64>();
            let barrier_slope = e.grad.dot(&dz)
                - self.mu * (0..m_t).map(|r| ds[r] / self.s[r]).sum::<f64>();
            if theta0 > 1e-12 {
                let needed = barrier_slope / (0.5 * theta0);
                if needed > self.nu {
                    self.nu = (1.5 * needed).min(1e10);
                }
            }
            let dphi = barrier_slope - self.nu * theta0;

            let phi0 = self.merit(&e, e.f, &gs);
            let mut alpha = alpha_max;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let z_try = &self.z + alpha * &dz;
                let s_try = &self.s + alpha * &ds;
                let zt: Vec<f64> = z_try.iter().copied().collect();
                let f_try = self.p.eval_objective(&zt);
                let c_try = DVector::from_vec(self.p.eval_equalities(&zt));
                let g_try = DVector::from_vec(self.p.eval_inequalities(&zt));
                if f_try.is_finite()
                    && all_finite(c_try.iter().copied())
                    && all_finite(g_try.iter().copied())
                    && s_try.iter().all(|&v| v > 0.0)
                {
                    let gs_try = self.stacked_g(&g_try, &z_try);
                    let mut phi_try = f_try + self.nu * c_try.iter().map(|v| v.abs()).sum::<f64>();
                    for r in 0..m_t {
                        phi_try += -self.mu * s_try[r].ln() + self.nu * (gs_try[r] - s_try[r]).abs();
                    }
                    let target = phi0 + ARMIJO_C1 * alpha * dphi.min(0.0);
                    if phi_try <= target + 1e-14 * phi0.abs().max(1.0) {
                        accepted = Some((z_try, s_try, alpha));
                        break;
                    }
                }
                alpha *= 0.5;
            }

            let (arg_lam, max_lam) = self
                .lam
                .iter()
                .enumerate()
                .fold((0usize, 0.0_f64), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
            let (arg_s, min_s) = self
                .s
                .iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            let ftb_detail = if arg_ftb == usize::MAX {
                String::from("-,-,-")
            } else {
                format!("{arg_ftb},{:.3e},{:.3e}", self.s[arg_ftb], ds[arg_ftb])
            };
            self.log.push(format!(
                "{it},{:.3e},{:.9e},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e},{max_lam:.3e},{arg_lam},{min_s:.3e},{arg_s},{ftb_detail}",
                self.mu,
                e.f,
                stat,
                eq_viol,
                ineq_viol,
                comp,
                accepted.as_ref().map_or(0.0, |a| a.2),
                delta
            ));

            let Some((z_new, s_new, alpha)) = accepted else {
                stalls += 1;
                if stalls >= 2 {
                    self.restore_best();
                    let feas = eq_viol.max(
                        gs.iter().fold(0.0_f64, |m, g| m.max(-g.min(0.0))),
                    );
                    let status = if feas > (100.0 * self.opts.tol).max(1e-5) {
                        SolveStatus::InfeasibleDetected
                    } else {
                        SolveStatus::NumericFailure
                    };
                    return self.finish(status, it + 1, None);
                }
                // Retry from a stiffer model before giving up.
                delta = if delta == 0.0 { 1e-4 } else { delta * 100.0 };
                continue;
            };
            stalls = 0;
            delta = (delta / 10.0) * f64::from(u8::from(delta > 1e-8));

            let prev_lgrad_at_new_mult = {
                // Old point, new multipliers: the BFGS secant pairs the
                // Lagrangian gradient at fixed multipliers.
                // The dual direction is exact only alongside the full primal
                // step, so scale it by the accepted alpha; afterwards project
                // each product lam*s back into a corridor around mu so one
                // crashing slack cannot blow up the condensed diagonal.
                let step = alpha_lam.min(alpha / alpha_max.max(1e-16)).min(1.0);
                let mut lam_new = self.lam.clone();
                for r in 0..m_t {
                    let l = (self.lam[r] + step * dlam[r]).clamp(1e-12, 1e16);
                    let hi = KAPPA_SIGMA * self.mu / s_new[r];
                    let lo = self.mu / (KAPPA_SIGMA * s_new[r]);
                    lam_new[r] = l.clamp(lo, hi);
                }
                let y_new = &self.y + alpha * &dy;
                let mut r = e.grad.clone();
                r.gemv_tr(1.0, &e.jc, &y_new, 1.0);
                self.add_jac_t_mul(&e.jg, &lam_new, -1.0, &mut r);
                self.lam = lam_new;
                self.y = y_new;
                r
            };

            let dz_actual = &z_new - &self.z;
            self.z = z_new;
            self.s = s_new;

            let z_vec: Vec<f64> = self.z.iter().copied().collect();
            let Some(e_new) = Eval::at(self.p, &z_vec) else {
                return self.finish(SolveStatus::NumericFailure, it + 1, None);
            };
            let lgrad_new = self.lagrangian_grad(&e_new);
            self.update_curvature(&dz_actual, &(lgrad_new - prev_lgrad_at_new_mult));
            e = e_new;
        }

        self.restore_best();
        let its = self.opts.max_iter;
        self.finish(SolveStatus::MaxIter, its, None)
    }

    fn merit(&self, e: &Eval, f: f64, gs: &DVector<f64>) -> f64 {
        let m_t = self.stacked.total(self.p.m_ineq);
        let mut phi = f + self.nu * e.c.iter().map(|v| v.abs()).sum::<f64>();
        for r in 0..m_t {
            phi += -self.mu * self.s[r].ln() + self.nu * (gs[r] - self.s[r]).abs();
        }
        phi
    }

    /// Damped BFGS on the Lagrangian; the structured path models only the
    /// head block and keeps fixed curvature on the tails.
    /// Curvature model seed: one-sided finite differences of the user
    /// gradient over the first `cols` variables, symmetrized and ridged
    /// to positive definiteness. Quasi-Newton updates refine this; trying
    /// to learn a badly conditioned objective (least-squares composites
    /// spread eigenvalues over many decades) one secant at a time costs
    /// dozens of iterations per barrier level instead.
    fn seed_curvature(&self, e: &Eval, cols: usize) -> Option<DMatrix<f64>> {
        let mut b = DMatrix::zeros(cols, cols);
        let mut z: Vec<f64> = self.z.iter().copied().collect();
        for j in 0..cols {
            let mut h = 1e-6 * z[j].abs().max(1.0);
            // Step toward the roomier side of the box.
            if self.p.upper[j] - z[j] < z[j] - self.p.lower[j] {
                h = -h;
            }
            let saved = z[j];
            z[j] = saved + h;
            let g = self.p.eval_gradient(&z);
            z[j] = saved;
            if !all_finite(g.iter().copied()) {
                return None;
            }
            for i in 0..cols {
                b[(i, j)] = (g[i] - e.grad[i]) / h;
            }
        }
        let mut sym = DMatrix::zeros(cols, cols);
        for i in 0..cols {
            for j in 0..cols {
                sym[(i, j)] = 0.5 * (b[(i, j)] + b[(j, i)]);
            }
        }
        if !all_finite(sym.iter().copied()) {
            return None;
        }
        // The quasi-Newton update assumes a positive definite model.
        let scale = sym.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut ridge = 0.0;
        loop {
            let mut trial = sym.clone();
            for i in 0..cols {
                trial[(i, i)] += ridge;
            }
            if trial.clone().cholesky().is_some() {
                return Some(trial);
            }
            ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 100.0 };
            if ridge > 1e2 * scale {
                return None;
            }
        }
    }

    fn update_curvature(&mut self, dz: &DVector<f64>, yvec: &DVector<f64>) {
        let (b, s, y) = match &mut self.curv {
            Curvature::Dense(b) => (b, dz.clone(), yvec.clone()),
            Curvature::Head(b) => {
                let h = b.nrows();
                (b, dz.rows(0, h).into_owned(), yvec.rows(0, h).into_owned())
            }
        };
        let sn = s.norm();
        if sn < 1e-14 * (1.0 + self.z.norm()) {
            return;
        }
        let sy = s.dot(&y);
        if self.curv_fresh && sy > 0.0 {
            let scale = (y.dot(&y) / sy).clamp(1e-6, 1e8);
            let n = b.nrows();
            b.fill(0.0);
            for i in 0..n {
                b[(i, i)] = scale;
            }
            self.curv_fresh = false;
        }
        let bs = &*b * &s;
        let sbs = s.dot(&bs);
        if sbs <= 0.0 {
            return;
        }
        let y_used = if sy < 0.2 * sbs {
            let theta = 0.8 * sbs / (sbs - sy);
            theta * &y + (1.0 - theta) * &bs
        } else {
            y
        };
        let sy_used = s.dot(&y_used);
        if sy_used <= 1e-16 {
            return;
        }
        *b -= (&bs * bs.transpose()) / sbs;
        *b += (&y_used * y_used.transpose()) / sy_used;
    }

    /// Dense KKT saddle solve: `[[W, Jc'], [Jc, -shift]] [dz; dy]`.
    fn solve_kkt_dense(
        &self,
        e: &Eval,
        d: &DVector<f64>,
        rhs_z: &DVector<f64>,
        delta: f64,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.p.n;
        let m_u = self.p.m_ineq;
        let m_e = self.p.m_eq;
        let mut w = match &self.curv {
            Curvature::Dense(b) => b.clone(),
            Curvature::Head(_) => unreachable!("dense path uses dense curvature"),
        };
        // W = B + Jg' D Jg + bound diagonals + delta I.
        if m_u > 0 {
            let mut jd = e.jg.clone();
            for r in 0..m_u {
                let dr = d[r];
                for j in 0..n {
                    jd[(r, j)] *= dr;
                }
            }
            w.gemm_tr(1.0, &e.jg, &jd, 1.0);
        }
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            w[(j, j)] += d[m_u + k];
        }
        let off = m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            w[(j, j)] += d[off + k];
        }
        for j in 0..n {
            w[(j, j)] += delta;
        }

        let dim = n + m_e;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&w);
        for i in 0..m_e {
            for j in 0..n {
                kkt[(n + i, j)] = e.jc[(i, j)];
                kkt[(j, n + i)] = e.jc[(i, j)];
            }
            kkt[(n + i, n + i)] = -EQ_SHIFT;
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(rhs_z);
        for i in 0..m_e {
            rhs[n + i] = -e.c[i];
        }
        let sol = kkt.lu().solve(&rhs)?;
        Some((sol.rows(0, n).into_owned(), sol.rows(n, m_e).into_owned()))
    }

    /// Verify the declared structure against the Jacobian sparsity and
    /// record each row's home. The pattern is the union of the entries at
    /// the starting point and at a jittered nearby point, so a coupling
    /// that merely vanishes at the start (e.g. a dual initialized to zero)
    /// still pins its row to the right block.
    fn detect_arrow(&self, e: &Eval) -> Option<ArrowLayout> {
        let st = self.p.structure?;
        let blocks = (self.p.n - st.head) / st.block_len;
        if blocks < 2 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x0a44);
        let mut zj: Vec<f64> = self.z.iter().copied().collect();
        for j in 0..self.p.n {
            let step = rng.gen_range(0.01..=0.02) * zj[j].abs().max(1.0);
            let up = (zj[j] + step).min(self.p.upper[j]);
            zj[j] = if up > zj[j] { up } else { (zj[j] - step).max(self.p.lower[j]) };
        }
        let jit = Eval::at(self.p, &zj);
        let home_of = |row: usize, a: &DMatrix<f64>, b: Option<&DMatrix<f64>>| -> Option<RowHome> {
            let mut home = RowHome::Head;
            for j in st.head..self.p.n {
                if a[(row, j)] != 0.0 || b.is_some_and(|m| m[(row, j)] != 0.0) {
                    let blk = (j - st.head) / st.block_len;
                    match home {
                        RowHome::Head => home = RowHome::Block(blk),
                        RowHome::Block(prev) if prev != blk => return None,
                        RowHome::Block(_) => {}
                    }
                }
            }
            Some(home)
        };
        let mut ineq_home = Vec::with_capacity(self.p.m_ineq);
        for r in 0..self.p.m_ineq {
            ineq_home.push(home_of(r, &e.jg, jit.as_ref().map(|j| &j.jg))?);
        }
        let mut eq_home = Vec::with_capacity(self.p.m_eq);
        for r in 0..self.p.m_eq {
            eq_home.push(home_of(r, &e.jc, jit.as_ref().map(|j| &j.jc))?);
        }
        Some(ArrowLayout { head: st.head, block_len: st.block_len, blocks, ineq_home, eq_home })
    }

    /// Block-arrow KKT solve: eliminate each (block, block-equality)
    /// saddle into the head, factor the head system, back-substitute.
    fn solve_kkt_arrow(
        &self,
        e: &Eval,
        d: &DVector<f64>,
        rhs_z: &DVector<f64>,
        delta: f64,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let ar = self.arrow.as_ref().unwrap();
        let (nh, bl, nb) = (ar.head, ar.block_len, ar.blocks);
        let n = self.p.n;
        let m_u = self.p.m_ineq;

        let bh = match &self.curv {
            Curvature::Head(b) => b,
            Curvature::Dense(_) => unreachable!("arrow path uses head curvature"),
        };
        let mut hh = bh.clone();
        let mut hb = vec![DMatrix::zeros(nh, bl); nb];
        let mut bb = vec![DMatrix::<f64>::zeros(bl, bl); nb];
        for m in &mut bb {
            for i in 0..bl {
                m[(i, i)] = TAIL_CURVATURE + delta;
            }
        }
        for j in 0..nh {
            hh[(j, j)] += delta;
        }

        // Rank-one D-weighted contributions of the user inequality rows.
        for r in 0..m_u {
            let dr = d[r];
            if dr == 0.0 {
                continue;
            }
            match ar.ineq_home[r] {
                RowHome::Head => {
                    for a in 0..nh {
                        let va = e.jg[(r, a)];
                        if va == 0.0 {
                            continue;
                        }
                        for b2 in 0..nh {
                            hh[(a, b2)] += dr * va * e.jg[(r, b2)];
                        }
                    }
                }
                RowHome::Block(b) => {
                    let base = nh + b * bl;
                    for a in 0..nh {
                        let va = e.jg[(r, a)];
                        if va != 0.0 {
                            for b2 in 0..nh {
                                hh[(a, b2)] += dr * va * e.jg[(r, b2)];
                            }
                            for t in 0..bl {
                                hb[b][(a, t)] += dr * va * e.jg[(r, base + t)];
                            }
                        }
                    }
                    for t in 0..bl {
                        let vt = e.jg[(r, base + t)];
                        if vt != 0.0 {
                            for t2 in 0..bl {
                                bb[b][(t, t2)] += dr * vt * e.jg[(r, base + t2)];
                            }
                        }
                    }
                }
            }
        }
        // Bound rows are diagonal.
        let mut add_diag = |j: usize, v: f64| {
            if j < nh {
                hh[(j, j)] += v;
            } else {
                let b = (j - nh) / bl;
                let t = (j - nh) % bl;
                bb[b][(t, t)] += v;
            }
        };
        for (k, &j) in self.stacked.lb.iter().enumerate() {
            add_diag(j, d[m_u + k]);
        }
        let off = m_u + self.stacked.lb.len();
        for (k, &j) in self.stacked.ub.iter().enumerate() {
            add_diag(j, d[off + k]);
        }

        let head_eqs: Vec<usize> =
            (0..self.p.m_eq).filter(|&r| ar.eq_home[r] == RowHome::Head).collect();
        let mut block_eqs: Vec<Vec<usize>> = vec![Vec::new(); nb];
        for r in 0..self.p.m_eq {
            if let RowHome::Block(b) = ar.eq_home[r] {
                block_eqs[b].push(r);
            }
        }

        // Per-block saddle elimination onto the head.
        let mut s_hh = hh;
        let mut rhs_h = rhs_z.rows(0, nh).into_owned();
        let mut block_factors = Vec::with_capacity(nb);
        for b in 0..nb {
            let me = block_eqs[b].len();
            let dim = bl + me;
            let base = nh + b * bl;
            let mut kb = DMatrix::zeros(dim, dim);
            kb.view_mut((0, 0), (bl, bl)).copy_from(&bb[b]);
            for (i, &r) in block_eqs[b].iter().enumerate() {
                for t in 0..bl {
                    kb[(bl + i, t)] = e.jc[(r, base + t)];
                    kb[(t, bl + i)] = e.jc[(r, base + t)];
                }
                kb[(bl + i, bl + i)] = -EQ_SHIFT;
            }
            // Coupling: rows = block unknowns, cols = head variables.
            let mut cb = DMatrix::zeros(dim, nh);
            cb.view_mut((0, 0), (bl, nh)).copy_from(&hb[b].transpose());
            for (i, &r) in block_eqs[b].iter().enumerate() {
                for j in 0..nh {
                    cb[(bl + i, j)] = e.jc[(r, j)];
                }
            }
            let mut rb = DVector::zeros(dim);
            for t in 0..bl {
                rb[t] = rhs_z[base + t];
            }
            for (i, &r) in block_eqs[b].iter().enumerate() {
                rb[bl + i] = -e.c[r];
            }

            let lu = kb.lu();
            let x_c = lu.solve(&cb)?;
            let x_r = lu.solve(&rb)?;
            s_hh.gemm_tr(-1.0, &cb, &x_c, 1.0);
            rhs_h.gemv_tr(-1.0, &cb, &x_r, 1.0);
            block_factors.push((lu, cb, rb));
        }

        // Head saddle with head-only equality rows.
        let me_h = head_eqs.len();
        let dim = nh + me_h;
        let mut kh = DMatrix::zeros(dim, dim);
        kh.view_mut((0, 0), (nh, nh)).copy_from(&s_hh);
        for (i, &r) in head_eqs.iter().enumerate() {
            for j in 0..nh {
                kh[(nh + i, j)] = e.jc[(r, j)];
                kh[(j, nh + i)] = e.jc[(r, j)];
            }
            kh[(nh + i, nh + i)] = -EQ_SHIFT;
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, nh).copy_from(&rhs_h);
        for (i, &r) in head_eqs.iter().enumerate() {
            rhs[nh + i] = -e.c[r];
        }
        let sol_h = kh.lu().solve(&rhs)?;
        let dh = sol_h.rows(0, nh).into_owned();

        let mut dz = DVector::zeros(n);
        dz.rows_mut(0, nh).copy_from(&dh);
        let mut dy = DVector::zeros(self.p.m_eq);
        for (i, &r) in head_eqs.iter().enumerate() {
            dy[r] = sol_h[nh + i];
        }
        for (b, (lu, cb, rb)) in block_factors.iter().enumerate() {
            let rhs_b = rb - cb * &dh;
            let sol_b = lu.solve(&rhs_b)?;
            let base = nh + b * bl;
            for t in 0..bl {
                dz[base + t] = sol_b[t];
            }
            for (i, &r) in block_eqs[b].iter().enumerate() {
                dy[r] = sol_b[bl + i];
            }
        }
        Some((dz, dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bound_qp() -> NlpProblem {
        NlpProblem::new(
            vec![7.0],
            |z| (z[0] - 3.0).powi(2),
            |z| vec![2.0 * (z[0] - 3.0)],
        )
        .with_bounds(vec![5.0], vec![f64::INFINITY])
    }

    fn equality_qp() -> NlpProblem {
        NlpProblem::new(
            vec![3.0, -2.0],
            |z| z[0] * z[0] + z[1] * z[1],
            |z| vec![2.0 * z[0], 2.0 * z[1]],
        )
        .with_equalities(
            1,
            |z| vec![z[0] + z[1] - 1.0],
            |_| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        )
    }

    fn rosenbrock() -> NlpProblem {
        NlpProblem::new(
            vec![-1.2, 1.0],
            |z| (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2),
            |z| {
                vec![
                    -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]),
                    200.0 * (z[1] - z[0] * z[0]),
                ]
            },
        )
    }

    #[test]
    fn active_bound_quadratic() {
        let p = bound_qp();
        let sol = solve(&p, &NlpOptions::default());
        assert_eq!(sol.status, SolveStatus::OptimalLocal, "{:?}", sol.residuals);
        assert_abs_diff_eq!(sol.z[0], 5.0, epsilon = 1e-6);
        // Stationarity at the bound: 2(z-3) = lambda = 4.
        assert_abs_diff_eq!(sol.multipliers.lower[0], 4.0, epsilon = 1e-3);
        assert!(sol.residuals.max() <= 1e-6);
    }

    #[test]
    fn equality_constrained_quadratic() {
        let p = equality_qp();
        let sol = solve(&p, &NlpOptions::default());
        assert_eq!(sol.status, SolveStatus::OptimalLocal, "{:?}", sol.residuals);
        assert_abs_diff_eq!(sol.z[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.z[1], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.multipliers.eq[0], -1.0, epsilon = 1e-4);
    }

    #[test]
    fn rosenbrock_converges() {
        let p = rosenbrock();
        let opts = NlpOptions { tol: 1e-8, ..NlpOptions::default() };
        let sol = solve(&p, &opts);
        assert_eq!(sol.status, SolveStatus::OptimalLocal, "{:?}", sol.residuals);
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.z[1], 1.0, epsilon = 1e-6);
        // Gradient-norm certificate of the minimizer.
        let g = p.eval_gradient(&sol.z);
        assert!(g.iter().all(|v| v.abs() <= 1e-6), "gradient {g:?}");
    }

    #[test]
    fn warm_restart_is_immediate() {
        for (p, opts) in [
            (bound_qp(), NlpOptions::default()),
            (equality_qp(), NlpOptions::default()),
            (rosenbrock(), NlpOptions { tol: 1e-8, ..NlpOptions::default() }),
        ] {
            let first = solve(&p, &opts);
            assert_eq!(first.status, SolveStatus::OptimalLocal);
            let rebuilt = NlpProblem {
                z0: first.z.clone(),
                ..p
            };
            let again = solve(&rebuilt, &opts);
            assert_eq!(again.status, SolveStatus::OptimalLocal);
            assert!(again.iterations <= 3, "{} iterations on re-solve", again.iterations);
        }
    }

    #[test]
    fn contradictory_constraints_flagged_infeasible() {
        // z >= 1 (bound) fights g(z) = -z - 1 >= 0 (z <= -1).
        let p = NlpProblem::new(vec![2.0], |z| z[0] * z[0], |z| vec![2.0 * z[0]])
            .with_bounds(vec![1.0], vec![f64::INFINITY])
            .with_inequalities(1, |z| vec![-z[0] - 1.0], |_| DMatrix::from_row_slice(1, 1, &[-1.0]));
        let sol = solve(&p, &NlpOptions::default());
        assert_eq!(sol.status, SolveStatus::InfeasibleDetected);
        assert!(sol.residuals.feasibility > 1.0);
    }

    #[test]
    fn non_finite_objective_reports_numeric_failure() {
        let p = NlpProblem::new(
            vec![11.0],
            |z| if z[0] > 10.0 { f64::NAN } else { (z[0] - 20.0).powi(2) },
            |z| vec![2.0 * (z[0] - 20.0)],
        );
        let sol = solve(&p, &NlpOptions::default());
        assert_eq!(sol.status, SolveStatus::NumericFailure);
        // The offending iterate is attached.
        assert_eq!(sol.z, vec![11.0]);
    }

    #[test]
    fn derivative_check_accepts_correct_and_flags_wrong() {
        let good = equality_qp().with_inequalities(
            1,
            |z| vec![4.0 - z[0] * z[0] - z[1] * z[1]],
            |z| DMatrix::from_row_slice(1, 2, &[-2.0 * z[0], -2.0 * z[1]]),
        );
        let report = check_derivatives(&good, 20, 7);
        assert!(report.max() < 1e-5, "{report:?}");

        let bad = NlpProblem::new(
            vec![1.0, 1.0],
            |z| z[0] * z[0] + z[1] * z[1],
            // 3% error on the first component.
            |z| vec![2.06 * z[0], 2.0 * z[1]],
        );
        let report = check_derivatives(&bad, 20, 7);
        assert!(report.gradient > 1e-3, "{report:?}");
    }

    #[test]
    fn independent_residuals_vanish_at_hand_solution() {
        let p = equality_qp();
        let m = Multipliers {
            eq: vec![-1.0],
            ineq: vec![],
            lower: vec![0.0, 0.0],
            upper: vec![0.0, 0.0],
        };
        let r = kkt_residuals(&p, &[0.5, 0.5], &m);
        assert!(r.max() < 1e-12, "{r:?}");
    }

    #[test]
    fn deterministic_solves() {
        let a = solve(&rosenbrock(), &NlpOptions::default());
        let b = solve(&rosenbrock(), &NlpOptions::default());
        assert_eq!(a.z, b.z);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn iteration_log_written() {
        let path = std::env::temp_dir().join("nlp_iter_log_test.csv");
        let _ = std::fs::remove_file(&path);
        let opts = NlpOptions { iteration_csv: Some(path.clone()), ..NlpOptions::default() };
        let sol = solve(&rosenbrock(), &opts);
        assert_eq!(sol.status, SolveStatus::OptimalLocal);
        let body = std::fs::read_to_string(&path).unwrap();
        let mut lines = body.lines();
        assert!(lines.next().unwrap().starts_with("iter,mu,objective"));
        assert!(lines.count() >= 1);
        let _ = std::fs::remove_file(&path);
    }

    /// Head variables h (2) plus two tail blocks t (3 each); constraints
    /// couple the head with one block at a time, matching the declared
    /// structure.
    fn arrow_problem(structured: bool) -> NlpProblem {
        let obj = |z: &[f64]| {
            let mut f = (z[0] - 1.0).powi(2) + (z[1] + 2.0).powi(2);
            for &t in &z[2..] {
                f += 0.5 * t * t;
            }
            f
        };
        let grad = |z: &[f64]| {
            let mut g = vec![2.0 * (z[0] - 1.0), 2.0 * (z[1] + 2.0)];
            g.extend(z[2..].iter().map(|t| *t));
            g
        };
        // One equality per block: h0 + sum(t_b) = 1.5.
        let eq = |z: &[f64]| {
            vec![
                z[0] + z[2] + z[3] + z[4] - 1.5,
                z[0] + z[5] + z[6] + z[7] - 1.5,
            ]
        };
        let eq_jac = |_z: &[f64]| {
            DMatrix::from_row_slice(
                2,
                8,
                &[
                    1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, //
                    1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0,
                ],
            )
        };
        // Per block: a ball constraint and a bilinear head-block row.
        let ineq = |z: &[f64]| {
            vec![
                4.0 - (z[2] * z[2] + z[3] * z[3] + z[4] * z[4]),
                4.0 - (z[5] * z[5] + z[6] * z[6] + z[7] * z[7]),
                z[1] * z[4] + z[0] - 0.3,
                z[1] * z[7] + z[0] - 0.3,
            ]
        };
        let ineq_jac = |z: &[f64]| {
            let mut j = DMatrix::zeros(4, 8);
            for t in 0..3 {
                j[(0, 2 + t)] = -2.0 * z[2 + t];
                j[(1, 5 + t)] = -2.0 * z[5 + t];
            }
            j[(2, 0)] = 1.0;
            j[(2, 1)] = z[4];
            j[(2, 4)] = z[1];
            j[(3, 0)] = 1.0;
            j[(3, 1)] = z[7];
            j[(3, 7)] = z[1];
            j
        };
        let mut lower = vec![-5.0; 8];
        let mut upper = vec![5.0; 8];
        lower[2] = 0.0;
        lower[5] = 0.0;
        upper[4] = 1.0;
        upper[7] = 1.0;
        let p = NlpProblem::new(vec![0.0, 0.0, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3], obj, grad)
            .with_bounds(lower, upper)
            .with_equalities(2, eq, eq_jac)
            .with_inequalities(4, ineq, ineq_jac);
        if structured {
            p.with_block_structure(2, 3)
        } else {
            p
        }
    }

    #[test]
    fn structured_path_matches_dense_path() {
        let report = check_derivatives(&arrow_problem(false), 20, 11);
        assert!(report.max() < 1e-5, "{report:?}");

        let dense = solve(&arrow_problem(false), &NlpOptions::default());
        let arrow = solve(&arrow_problem(true), &NlpOptions::default());
        assert_eq!(dense.status, SolveStatus::OptimalLocal, "{:?}", dense.residuals);
        assert_eq!(arrow.status, SolveStatus::OptimalLocal, "{:?}", arrow.residuals);
        for j in 0..8 {
            assert_abs_diff_eq!(dense.z[j], arrow.z[j], epsilon = 1e-5);
        }
        assert!(arrow.residuals.max() <= 1e-6);
    }

    #[test]
    fn optimal_status_certified_by_independent_residuals() {
        for p in [bound_qp(), equality_qp(), arrow_problem(true)] {
            let sol = solve(&p, &NlpOptions::default());
            assert_eq!(sol.status, SolveStatus::OptimalLocal);
            let r = kkt_residuals(&p, &sol.z, &sol.multipliers);
            assert!(r.max() <= 1e-6, "{r:?}");
        }
    }
}

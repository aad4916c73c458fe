//! Infinite-horizon stochastic shortest path solver for the time-to-stop
//! problem: policy iteration, with value iteration as an independent
//! cross-check.
//!
//! The supervisor picks `v_u` from the state alone; the driver's demand is
//! drawn afterwards and the total request is clamped to the velocity limits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::DriverModel;
use crate::dynamics::{ControlGrid, DynamicsParams, State, StateGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BETA: f64 = 1000.0;
pub const DEFAULT_EVAL_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
pub const DEFAULT_MEAN_REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Every stage costs `dt`.
    Plain,
    /// Stages pushing against either end of the line cost `beta * dt`.
    Penalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec<T> {
    pub mode: CostMode,
    pub beta: T,
}

impl<T: Scalar> CostSpec<T> {
    pub fn plain() -> Self {
        Self { mode: CostMode::Plain, beta: T::one() }
    }

    pub fn penalized(beta: T) -> Self {
        Self { mode: CostMode::Penalized, beta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == CostMode::Penalized && !(self.beta > T::one()) {
            return Err(Error::InvalidParam(format!("beta must exceed 1, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Absorbing set: stopped (|v| <= v_tol) within `x_tol` of the obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalSpec<T> {
    pub x_tol: T,
    pub v_tol: T,
}

impl<T: Scalar> TerminalSpec<T> {
    /// One cell in each direction.
    pub fn one_cell(grid: &StateGrid<T>) -> Self {
        Self { x_tol: grid.dx(), v_tol: grid.dv() }
    }

    pub fn validate(&self, grid: &StateGrid<T>) -> Result<()> {
        let slack = T::one() - T::lit(1e-9);
        if self.x_tol < grid.dx() * slack || self.v_tol < grid.dv() * slack {
            return Err(Error::InvalidParam(format!(
                "terminal tolerances ({}, {}) must be at least one cell ({}, {})",
                self.x_tol,
                self.v_tol,
                grid.dx(),
                grid.dv()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, params: &DynamicsParams<T>, s: State<T>) -> bool {
        let slack = T::one() + T::lit(1e-9);
        params.d_max - s.x <= self.x_tol * slack && s.v.abs() <= self.v_tol * slack
    }
}

/// Everything that defines one map computation.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a, T> {
    pub grid: &'a StateGrid<T>,
    pub controls: &'a ControlGrid<T>,
    pub model: &'a DriverModel<T>,
    pub params: &'a DynamicsParams<T>,
    pub cost: CostSpec<T>,
    pub terminal: TerminalSpec<T>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.check_params(self.params)?;
        self.controls.check_params(self.params)?;
        self.cost.validate()?;
        self.terminal.validate(self.grid)?;
        if self.model.n_nodes() != self.grid.len() {
            return Err(Error::InvalidParam(format!(
                "driver model covers {} nodes, grid has {}",
                self.model.n_nodes(),
                self.grid.len()
            )));
        }
        Ok(())
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.terminal.contains(self.params, self.grid.state(node))
    }

    /// Cost of one stage spent at `node`.
    pub fn stage_cost(&self, node: usize) -> T {
        if self.is_terminal(node) {
            return T::zero();
        }
        let dt = self.params.dt;
        match self.cost.mode {
            CostMode::Plain => dt,
            CostMode::Penalized => {
                if is_penalty_node(self.grid, node) {
                    self.cost.beta * dt
                } else {
                    dt
                }
            }
        }
    }

    /// Enumerates demand outcomes for every `(node, control)` pair and snaps
    /// each successor to its nearest node.
    pub fn build_kernel(&self) -> Result<TransitionKernel<T>> {
        self.validate()?;
        let nu = self.controls.len();
        let rows: Vec<Vec<(u32, T)>> = (0..self.grid.len())
            .into_par_iter()
            .flat_map_iter(|node| {
                let terminal = self.is_terminal(node);
                let s = self.grid.state(node);
                let pmf = self.model.pmf(node);
                (0..nu).map(move |iu| {
                    if terminal {
                        return vec![(node as u32, T::one())];
                    }
                    let u = self.controls.u_values[iu];
                    let mut out: Vec<(u32, T)> = Vec::with_capacity(pmf.len());
                    for (&v_d, &p) in self.model.demand_values.iter().zip(pmf) {
                        if p == T::zero() {
                            continue;
                        }
                        let next = self.params.step(s, self.params.clamp_demand(v_d, u));
                        let succ = self
                            .grid
                            .nearest_node(next)
                            .expect("step output lies inside the grid")
                            as u32;
                        match out.iter_mut().find(|(n, _)| *n == succ) {
                            Some(e) => e.1 = e.1 + p,
                            None => out.push((succ, p)),
                        }
                    }
                    out.sort_by_key(|e| e.0);
                    out
                })
            })
            .collect();

        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut succ = Vec::new();
        let mut prob = Vec::new();
        offsets.push(0);
        for row in rows {
            for (n, p) in row {
                succ.push(n);
                prob.push(p);
            }
            offsets.push(succ.len());
        }
        let n = self.grid.len();
        Ok(TransitionKernel {
            n_nodes: n,
            u_values: self.controls.u_values.clone(),
            offsets,
            succ,
            prob,
            cost: (0..n).map(|i| self.stage_cost(i)).collect(),
            terminal: (0..n).map(|i| self.is_terminal(i)).collect(),
        })
    }
}

/// `x = 0` while reversing, or `x = d_max` while advancing.
pub fn is_penalty_node<T: Scalar>(grid: &StateGrid<T>, node: usize) -> bool {
    let (ix, iv) = grid.indices(node);
    let v = grid.v_values[iv];
    (ix == 0 && v < T::zero()) || (ix == grid.nx() - 1 && v > T::zero())
}

/// Sparse transition law: for each `(node, control)` a list of
/// `(successor, probability)` pairs, plus per-node stage cost and terminal flag.
#[derive(Clone, Debug)]
pub struct TransitionKernel<T> {
    n_nodes: usize,
    u_values: Vec<T>,
    offsets: Vec<usize>,
    succ: Vec<u32>,
    prob: Vec<T>,
    cost: Vec<T>,
    terminal: Vec<bool>,
}

impl<T: Scalar> TransitionKernel<T> {
    /// Hand-built kernel; `rows[node][control]` lists `(successor, prob)`.
    pub fn from_rows(
        u_values: Vec<T>,
        rows: Vec<Vec<Vec<(usize, T)>>>,
        cost: Vec<T>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let n = rows.len();
        if cost.len() != n || terminal.len() != n {
            return Err(Error::InvalidParam("cost/terminal length mismatch".into()));
        }
        let mut offsets = vec![0];
        let mut succ = Vec::new();
        let mut prob = Vec::new();
        for (node, per_u) in rows.into_iter().enumerate() {
            if per_u.len() != u_values.len() {
                return Err(Error::InvalidParam(format!("node {node}: wrong control count")));
            }
            for (iu, list) in per_u.into_iter().enumerate() {
                let list = if terminal[node] { vec![(node, T::one())] } else { list };
                let total: T = list.iter().map(|e| e.1).sum();
                if (total - T::one()).abs() > T::lit(1e-9) {
                    return Err(Error::InvalidParam(format!(
                        "node {node} control {iu}: probabilities sum to {total}"
                    )));
                }
                for (s, p) in list {
                    if s >= n {
                        return Err(Error::InvalidParam(format!("successor {s} out of range")));
                    }
                    succ.push(s as u32);
                    prob.push(p);
                }
                offsets.push(succ.len());
            }
        }
        let cost = cost
            .into_iter()
            .zip(&terminal)
            .map(|(c, &t)| if t { T::zero() } else { c })
            .collect();
        Ok(Self { n_nodes: n, u_values, offsets, succ, prob, cost, terminal })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_controls(&self) -> usize {
        self.u_values.len()
    }

    pub fn u_values(&self) -> &[T] {
        &self.u_values
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.terminal[node]
    }

    pub fn stage_cost(&self, node: usize) -> T {
        self.cost[node]
    }

    pub fn successors(&self, node: usize, iu: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let k = node * self.u_values.len() + iu;
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        self.succ[a..b].iter().zip(&self.prob[a..b]).map(|(&s, &p)| (s as usize, p))
    }

    /// `g(n) + E[J(next)]` under control `iu`.
    pub fn q_value(&self, j: &[T], node: usize, iu: usize) -> T {
        if self.terminal[node] {
            return T::zero();
        }
        self.cost[node] + self.successors(node, iu).map(|(s, p)| p * j[s]).sum::<T>()
    }

    /// Controls in tie-break order: smallest |u| first, negative before positive.
    fn control_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.u_values.len()).collect();
        order.sort_by(|&a, &b| {
            let (ua, ub) = (self.u_values[a], self.u_values[b]);
            ua.abs()
                .partial_cmp(&ub.abs())
                .unwrap()
                .then(ua.partial_cmp(&ub).unwrap())
        });
        order
    }

    fn mean_non_terminal(&self, j: &[T]) -> T {
        let (sum, n) = j
            .iter()
            .zip(&self.terminal)
            .filter(|(_, &t)| !t)
            .fold((T::zero(), 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        if n == 0 {
            T::zero()
        } else {
            sum / T::from_usize_lossy(n)
        }
    }
}

/// Control index per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub u_index: Vec<usize>,
}

impl Policy {
    pub fn constant(n_nodes: usize, iu: usize) -> Self {
        Self { u_index: vec![iu; n_nodes] }
    }

    pub fn changes_from(&self, other: &Policy) -> usize {
        self.u_index.iter().zip(&other.u_index).filter(|(a, b)| a != b).count()
    }
}

/// Per-iteration record of a policy iteration run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace<T> {
    /// Mean of J over all non-terminal nodes after each evaluation.
    #[serde(rename = "mean_J")]
    pub mean_j: Vec<T>,
    /// Nodes whose control changed in the improvement preceding each evaluation.
    pub policy_changes: Vec<usize>,
    pub residual: Vec<T>,
    pub sweeps: Vec<usize>,
    pub averaging: String,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions<T> {
    pub tol: T,
    pub max_sweeps: usize,
}

impl<T: Scalar> Default for EvalOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(DEFAULT_EVAL_TOL), max_sweeps: DEFAULT_MAX_SWEEPS }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyIterationOptions<T> {
    pub eval: EvalOptions<T>,
    /// Stop once the relative change of mean J drops below this.
    /// Zero disables the test, leaving only the unchanged-policy stop.
    pub mean_rel_tol: T,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for PolicyIterationOptions<T> {
    fn default() -> Self {
        Self {
            eval: EvalOptions::default(),
            mean_rel_tol: T::lit(DEFAULT_MEAN_REL_TOL),
            max_iterations: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub j: Vec<T>,
    pub residual: T,
    pub sweeps: usize,
}

/// Iterates `J <- g + P_pi J` from `start` (zeros when `None`) until the
/// largest update falls below `tol`.
pub fn policy_evaluation<T: Scalar>(
    kernel: &TransitionKernel<T>,
    policy: &Policy,
    opts: EvalOptions<T>,
    start: Option<&[T]>,
) -> Result<Evaluation<T>> {
    let n = kernel.n_nodes();
    let mut j: Vec<T> = match start {
        Some(s) => s.to_vec(),
        None => vec![T::zero(); n],
    };
    let mut next = vec![T::zero(); n];
    let mut worst = (T::zero(), 0usize);
    for sweep in 1..=opts.max_sweeps {
        next.par_iter_mut().enumerate().for_each(|(node, out)| {
            *out = kernel.q_value(&j, node, policy.u_index[node]);
        });
        worst = max_change(&j, &next);
        std::mem::swap(&mut j, &mut next);
        if !worst.0.is_finite() {
            break;
        }
        if worst.0 < opts.tol {
            return Ok(Evaluation { j, residual: worst.0, sweeps: sweep });
        }
    }
    Err(Error::EvaluationDiverged {
        sweeps: opts.max_sweeps,
        residual: worst.0.as_f64(),
        node: worst.1,
    })
}

/// Largest absolute difference and the lowest node index attaining it.
fn max_change<T: Scalar>(a: &[T], b: &[T]) -> (T, usize) {
    a.par_iter()
        .zip(b.par_iter())
        .enumerate()
        .map(|(i, (&x, &y))| ((x - y).abs(), i))
        .reduce(
            || (T::zero(), usize::MAX),
            |l, r| {
                if l.1 == usize::MAX {
                    return r;
                }
                if r.1 == usize::MAX {
                    return l;
                }
                if r.0 > l.0 || (r.0 == l.0 && r.1 < l.1) {
                    r
                } else {
                    l
                }
            },
        )
}

/// Greedy policy with respect to `j`. Near-ties go to the smallest `|u|`,
/// then to the negative control.
pub fn policy_improvement<T: Scalar>(kernel: &TransitionKernel<T>, j: &[T]) -> Policy {
    let order = kernel.control_order();
    let u_index = (0..kernel.n_nodes())
        .into_par_iter()
        .map(|node| greedy(kernel, j, node, &order).0)
        .collect();
    Policy { u_index }
}

fn greedy<T: Scalar>(kernel: &TransitionKernel<T>, j: &[T], node: usize, order: &[usize]) -> (usize, T) {
    let mut best = order[0];
    let mut best_q = kernel.q_value(j, node, best);
    if kernel.is_terminal(node) {
        return (best, best_q);
    }
    for &iu in &order[1..] {
        let q = kernel.q_value(j, node, iu);
        let tie = T::lit(1e-12) * T::one().max(best_q.abs());
        if q < best_q - tie {
            best = iu;
            best_q = q;
        }
    }
    (best, best_q)
}

/// A proper starting policy. Each node takes the control on its most
/// probable path to the terminal set (shortest path under `-ln p` edge
/// weights plus a small per-stage charge). Saturating controls make most
/// transitions deterministic, so these paths are usually certain; every node
/// keeps a positive-probability route to absorption either way.
pub fn initial_policy<T: Scalar>(kernel: &TransitionKernel<T>) -> Result<Policy> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    struct Key(f64);
    impl PartialEq for Key {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other).is_eq()
        }
    }
    impl Eq for Key {}
    impl PartialOrd for Key {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Key {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }

    const STAGE: f64 = 1e-6;
    let n = kernel.n_nodes();
    let nu = kernel.n_controls();
    let order = kernel.control_order();
    let rank: Vec<usize> = {
        let mut r = vec![0; nu];
        for (i, &iu) in order.iter().enumerate() {
            r[iu] = i;
        }
        r
    };

    // reverse edges: successor -> (predecessor, control, weight)
    let mut reverse: Vec<Vec<(u32, u32, f64)>> = vec![Vec::new(); n];
    for node in (0..n).filter(|&i| !kernel.is_terminal(i)) {
        for iu in 0..nu {
            for (s, p) in kernel.successors(node, iu) {
                if p > T::zero() && s != node {
                    reverse[s].push((node as u32, iu as u32, -p.as_f64().ln() + STAGE));
                }
            }
        }
    }

    let mut dist = vec![f64::INFINITY; n];
    let mut u_index = vec![order[0]; n];
    let mut heap = BinaryHeap::new();
    for node in (0..n).filter(|&i| kernel.is_terminal(i)) {
        dist[node] = 0.0;
        heap.push(Reverse((Key(0.0), node)));
    }
    let mut done = vec![false; n];
    while let Some(Reverse((Key(d), s))) = heap.pop() {
        if done[s] {
            continue;
        }
        done[s] = true;
        for &(pred, iu, w) in &reverse[s] {
            let (pred, iu) = (pred as usize, iu as usize);
            if done[pred] {
                continue;
            }
            let cand = d + w;
            let better = cand < dist[pred]
                || (cand == dist[pred] && rank[iu] < rank[u_index[pred]]);
            if better {
                dist[pred] = cand;
                u_index[pred] = iu;
                heap.push(Reverse((Key(cand), pred)));
            }
        }
    }
    if let Some(node) = dist.iter().position(|d| !d.is_finite()) {
        return Err(Error::NoProperPolicy { node });
    }
    Ok(Policy { u_index })
}

#[derive(Clone, Debug)]
pub struct Solution<T> {
    pub j: Vec<T>,
    pub policy: Policy,
    pub trace: SolveTrace<T>,
    /// False when `max_iterations` ran out before either stopping rule fired.
    pub converged: bool,
}

/// Alternates exact-to-tolerance evaluation with greedy improvement until the
/// policy is stable or mean J stops moving.
pub fn policy_iteration<T: Scalar>(
    kernel: &TransitionKernel<T>,
    opts: PolicyIterationOptions<T>,
) -> Result<Solution<T>> {
    let mut policy = initial_policy(kernel)?;
    let first = policy_evaluation(kernel, &policy, opts.eval, None)?;
    let mut trace = SolveTrace { averaging: "non_terminal".into(), ..Default::default() };
    let mut mean = kernel.mean_non_terminal(&first.j);
    trace.mean_j.push(mean);
    trace.policy_changes.push(0);
    trace.residual.push(first.residual);
    trace.sweeps.push(first.sweeps);
    let mut j = first.j;

    let mut converged = false;
    for _ in 1..opts.max_iterations.max(1) {
        let improved = policy_improvement(kernel, &j);
        let changes = improved.changes_from(&policy);
        if changes == 0 {
            converged = true;
            break;
        }
        // Starting from the previous J keeps the iterates monotonically
        // decreasing toward the new policy's cost.
        let eval = policy_evaluation(kernel, &improved, opts.eval, Some(&j))?;
        let new_mean = kernel.mean_non_terminal(&eval.j);
        trace.mean_j.push(new_mean);
        trace.policy_changes.push(changes);
        trace.residual.push(eval.residual);
        trace.sweeps.push(eval.sweeps);
        let rel = (mean - new_mean).abs() / mean.abs().max(T::min_positive_value());
        policy = improved;
        j = eval.j;
        mean = new_mean;
        if rel < opts.mean_rel_tol {
            converged = true;
            break;
        }
    }
    Ok(Solution { j, policy, trace, converged })
}

#[derive(Clone, Copy, Debug)]
pub struct ValueIterationOptions<T> {
    pub tol: T,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for ValueIterationOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-9), max_iterations: 1_000_000 }
    }
}

/// Bellman backups `J <- min_u [g + P_u J]` from `J = 0`.
pub fn value_iteration<T: Scalar>(
    kernel: &TransitionKernel<T>,
    opts: ValueIterationOptions<T>,
) -> Result<Vec<T>> {
    let n = kernel.n_nodes();
    let nu = kernel.n_controls();
    let mut j = vec![T::zero(); n];
    let mut next = vec![T::zero(); n];
    let mut delta = T::zero();
    for _ in 0..opts.max_iterations {
        next.par_iter_mut().enumerate().for_each(|(node, out)| {
            *out = (0..nu)
                .map(|iu| kernel.q_value(&j, node, iu))
                .fold(T::infinity(), T::min);
        });
        delta = max_change(&j, &next).0;
        std::mem::swap(&mut j, &mut next);
        if delta < opts.tol {
            return Ok(j);
        }
    }
    Err(Error::ValueIterationDiverged { iterations: opts.max_iterations, delta: delta.as_f64() })
}

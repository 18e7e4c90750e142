//! Levenberg-Marquardt over the block-sparse normal equations.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::factor::{Factor, RawLinearization};
use super::sparse::{factorize, Symbolic};
use super::{GraphError, Values, Variable, VariableKey};
use crate::geometry::{wrap, Point2, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmParams {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Stop once the cost itself is below this.
    pub absolute_tolerance: f64,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    pub lambda_factor: f64,
    /// Added to the Hessian diagonal before scaling by λ.
    pub diagonal_floor: f64,
    /// Steps that move any variable's position further than this (m) are
    /// treated as rejected and retried with more damping.
    pub max_step: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-9,
            absolute_tolerance: 1e-24,
            initial_lambda: 1.0,
            max_lambda: 1e10,
            lambda_factor: 10.0,
            diagonal_floor: 1e-9,
            max_step: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub estimates: Values,
}

/// Diagonal blocks, edge blocks and gradient of the normal equations.
type NormalBlocks = (Vec<Matrix3<f64>>, Vec<Matrix3<f64>>, Vec<Vector3<f64>>);

struct Problem<'a> {
    factors: &'a [Factor],
    slot_keys: Vec<VariableKey>,
    /// Per factor: slots of its keys and, for binary factors, the edge index.
    layout: Vec<([usize; 2], Option<usize>)>,
    edges: Vec<(usize, usize)>,
    sym: Symbolic,
    /// Per eliminated column: (row, edge, transpose the stored block).
    lower_map: Vec<Vec<(usize, usize, bool)>>,
    huber: Option<f64>,
}

fn robust(huber: Option<f64>, s: f64) -> (f64, f64) {
    match huber {
        Some(k) if s > k * k => {
            let e = s.sqrt();
            (2.0 * k * e - k * k, k / e)
        }
        _ => (s, 1.0),
    }
}

impl<'a> Problem<'a> {
    fn new(factors: &'a [Factor], start: &Values, huber: Option<f64>) -> Result<Self, GraphError> {
        let slot_keys: Vec<VariableKey> = start.keys().collect();
        let slot_of: HashMap<VariableKey, usize> = slot_keys.iter().enumerate().map(|(s, &k)| (k, s)).collect();
        let mut edge_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut layout = Vec::with_capacity(factors.len());
        for f in factors {
            let mut slots = [usize::MAX; 2];
            for (n, k) in f.keys.iter().enumerate() {
                slots[n] = *slot_of.get(k).ok_or(GraphError::MissingKey(*k))?;
            }
            let edge = if f.keys.len() == 2 {
                let key = (slots[0].min(slots[1]), slots[0].max(slots[1]));
                Some(*edge_of.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                }))
            } else {
                None
            };
            layout.push((slots, edge));
        }
        let sym = Symbolic::new(slot_keys.len(), &edges);
        let mut lower_map = vec![Vec::new(); slot_keys.len()];
        for (e, &(u, v)) in edges.iter().enumerate() {
            // stored block is H[u][v]
            let (nu, nv) = (sym.inv[u], sym.inv[v]);
            if nu > nv {
                lower_map[nv].push((nu, e, false));
            } else {
                lower_map[nu].push((nv, e, true));
            }
        }
        Ok(Self {
            factors,
            slot_keys,
            layout,
            edges,
            sym,
            lower_map,
            huber,
        })
    }

    fn eval(&self, n: usize, v: &[Variable]) -> Result<RawLinearization, GraphError> {
        let [a, b] = self.layout[n].0;
        let va = v[a];
        let vb = if b == usize::MAX { va } else { v[b] };
        self.factors[n].whitened_at(va, vb)
    }

    fn cost(&self, v: &[Variable]) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for n in 0..self.factors.len() {
            match self.eval(n, v) {
                Ok(l) => total += robust(self.huber, l.residual.norm_squared()).0,
                Err(GraphError::Degenerate(_)) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(total)
    }

    /// Gauss-Newton blocks: diagonal, edge blocks and gradient `Jᵀr`.
    fn linearize(&self, v: &[Variable]) -> Result<NormalBlocks, GraphError> {
        let n = self.slot_keys.len();
        let mut diag = vec![Matrix3::zeros(); n];
        let mut off = vec![Matrix3::zeros(); self.edges.len()];
        let mut grad = vec![Vector3::zeros(); n];
        for (n, (f, &(slots, edge))) in self.factors.iter().zip(&self.layout).enumerate() {
            let l = self.eval(n, v)?;
            let (_, w) = robust(self.huber, l.residual.norm_squared());
            let arity = f.keys.len();
            for a in 0..arity {
                let ja_t = l.jac[a].transpose();
                diag[slots[a]] += w * ja_t * l.jac[a];
                grad[slots[a]] += w * ja_t * l.residual;
            }
            if let Some(e) = edge {
                let (u, _) = self.edges[e];
                let (first, second) = if slots[0] == u { (0, 1) } else { (1, 0) };
                off[e] += w * l.jac[first].transpose() * l.jac[second];
            }
        }
        Ok((diag, off, grad))
    }

    fn step(
        &self,
        diag: &[Matrix3<f64>],
        off: &[Matrix3<f64>],
        grad: &[Vector3<f64>],
        lambda: f64,
        floor: f64,
    ) -> Option<Vec<Vector3<f64>>> {
        let n = self.slot_keys.len();
        let mut d = Vec::with_capacity(n);
        let mut rhs = Vec::with_capacity(n);
        for j in 0..n {
            let s = self.sym.perm[j];
            let mut h = diag[s];
            let dof = self.slot_keys[s].dof();
            for i in 0..dof {
                h[(i, i)] += lambda * (diag[s][(i, i)] + floor);
            }
            if dof == 2 {
                h[(2, 2)] = 1.0;
            }
            d.push(h);
            rhs.push(-grad[s]);
        }
        let lower: Vec<Vec<(usize, Matrix3<f64>)>> = self
            .lower_map
            .iter()
            .map(|col| {
                col.iter()
                    .map(|&(row, e, t)| (row, if t { off[e].transpose() } else { off[e] }))
                    .collect()
            })
            .collect();
        let fac = factorize(&self.sym, &d, &lower)?;
        let x = fac.solve(&self.sym, &rhs);
        let mut delta = vec![Vector3::zeros(); n];
        for j in 0..n {
            delta[self.sym.perm[j]] = x[j];
        }
        if delta.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            Some(delta)
        } else {
            None
        }
    }

    fn retract(&self, v: &[Variable], delta: &[Vector3<f64>]) -> Vec<Variable> {
        v.iter()
            .zip(delta)
            .map(|(x, d)| match *x {
                Variable::Pose(p) => Variable::Pose(Pose2 {
                    x: p.x + d.x,
                    y: p.y + d.y,
                    theta: wrap(p.theta + d.z),
                }),
                Variable::Landmark(l) => Variable::Landmark(Point2::new(l.x + d.x, l.y + d.y)),
            })
            .collect()
    }

    fn values(&self, v: &[Variable]) -> Values {
        let mut out = Values::default();
        for (k, x) in self.slot_keys.iter().zip(v) {
            match *x {
                Variable::Pose(p) => out.insert_pose(k.index, p),
                Variable::Landmark(l) => out.insert_landmark(k.index, l),
            }
        }
        out
    }
}

pub(crate) fn levenberg_marquardt(
    factors: &[Factor],
    start: &Values,
    params: &LmParams,
    huber: Option<f64>,
) -> Result<SolveReport, GraphError> {
    let problem = Problem::new(factors, start, huber)?;
    let mut values: Vec<Variable> = problem
        .slot_keys
        .iter()
        .map(|&k| start.get(k).expect("key from start"))
        .collect();
    let mut cost = problem.cost(&values)?;
    if !cost.is_finite() {
        return Err(GraphError::NumericalFailure);
    }
    let initial_cost = cost;
    let mut cost_history = vec![cost];
    let mut lambda = params.initial_lambda;
    let mut iterations = 0;
    let mut converged = cost <= params.absolute_tolerance;

    while !converged && iterations < params.max_iterations {
        iterations += 1;
        let (diag, off, grad) = problem.linearize(&values)?;
        let mut accepted = false;
        let mut factor_failed = false;
        while lambda <= params.max_lambda {
            match problem.step(&diag, &off, &grad, lambda, params.diagonal_floor) {
                None => {
                    factor_failed = true;
                    lambda *= params.lambda_factor;
                }
                Some(delta) if delta.iter().any(|d| d.x.hypot(d.y) > params.max_step) => {
                    factor_failed = false;
                    lambda *= params.lambda_factor;
                }
                Some(delta) => {
                    factor_failed = false;
                    let candidate = problem.retract(&values, &delta);
                    let new_cost = problem.cost(&candidate)?;
                    if new_cost < cost {
                        let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                        values = candidate;
                        cost = new_cost;
                        cost_history.push(cost);
                        lambda = (lambda / params.lambda_factor).max(1e-12);
                        accepted = true;
                        converged = decrease < params.relative_tolerance || cost <= params.absolute_tolerance;
                        break;
                    }
                    if new_cost - cost <= params.relative_tolerance * cost {
                        // the step no longer moves the cost beyond round-off
                        break;
                    }
                    lambda *= params.lambda_factor;
                }
            }
        }
        if !accepted {
            if factor_failed {
                return Err(GraphError::NumericalFailure);
            }
            // No damping level lowers the cost: we are at a minimum up to
            // round-off.
            converged = true;
            lambda = params.initial_lambda;
        }
    }

    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        converged,
        cost_history,
        estimates: problem.values(&values),
    })
}

//! Augmented-Lagrangian outer loop around a Levenberg–Marquardt inner
//! minimization.
//!
//! The augmented Lagrangian of the collocation NLP is a sum of squares, so
//! the inner problem is solved as nonlinear least squares. Residuals are
//! grouped per node (local constraints plus the defect to the next node),
//! which makes `JᵀJ` block tridiagonal with `NODE_DIM × NODE_DIM` blocks.

use nalgebra::{DMatrix, SMatrix, SVector};

use super::{BlockValues, NlpProblem, NlpSolution, NodeEval, SolverConfig, NODE_DIM};

type Block = SMatrix<f64, NODE_DIM, NODE_DIM>;
type BlockVec = SVector<f64, NODE_DIM>;

const MULTIPLIER_LIMIT: f64 = 1e8;
const MIN_DAMPING: f64 = 1e-10;
const MAX_DAMPING: f64 = 1e12;
const POLISH_THRESHOLD: f64 = 1e-2;
const POLISH_PENALTY: f64 = 1e10;
const POLISH_ITERATIONS: usize = 40;

struct Multipliers {
    eq: Vec<f64>,
    ineq: Vec<f64>,
    rho: f64,
}

/// Jacobians of block `i` with respect to node `i` (`a`) and node `i + 1`
/// (`b`), already scaled to augmented-Lagrangian residual rows.
struct BlockJacobian {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

struct Linearization {
    residuals: Vec<Vec<f64>>,
    jacobians: Vec<BlockJacobian>,
}

fn node_slice(y: &[f64], i: usize) -> &[f64] {
    &y[i * NODE_DIM..(i + 1) * NODE_DIM]
}

fn block_raw(problem: &NlpProblem, y: &[f64], evals: &[NodeEval], i: usize, out: &mut BlockValues) {
    let n = problem.node_count();
    let next = (i + 1 < n).then(|| (node_slice(y, i + 1), &evals[i + 1]));
    problem.block_values(i, node_slice(y, i), &evals[i], next, out);
}

/// Augmented-Lagrangian residual rows of one block and the per-row scale
/// mapping raw constraint derivatives onto them.
fn al_rows(problem: &NlpProblem, i: usize, raw: &BlockValues, m: &Multipliers, out: &mut Vec<f64>, scale: &mut Vec<f64>) {
    let layout = problem.blocks()[i];
    let sr = m.rho.sqrt();
    out.clear();
    scale.clear();
    out.extend_from_slice(&raw.obj);
    scale.extend_from_slice(&[1.0, 1.0]);
    for (k, c) in raw.eq.iter().enumerate() {
        out.push(sr * (c + m.eq[layout.eq_offset + k] / m.rho));
        scale.push(sr);
    }
    for (k, h) in raw.ineq.iter().enumerate() {
        let shifted = h + m.ineq[layout.ineq_offset + k] / m.rho;
        if shifted > 0.0 {
            out.push(sr * shifted);
            scale.push(sr);
        } else {
            out.push(0.0);
            scale.push(0.0);
        }
    }
}

fn al_cost(problem: &NlpProblem, y: &[f64], m: &Multipliers) -> f64 {
    let evals = problem.eval_all(y);
    let mut raw = BlockValues::default();
    let (mut rows, mut scale) = (Vec::new(), Vec::new());
    let mut cost = 0.0;
    for i in 0..problem.node_count() {
        block_raw(problem, y, &evals, i, &mut raw);
        al_rows(problem, i, &raw, m, &mut rows, &mut scale);
        cost += 0.5 * rows.iter().map(|r| r * r).sum::<f64>();
    }
    if cost.is_finite() {
        cost
    } else {
        f64::INFINITY
    }
}

fn raw_vector(raw: &BlockValues) -> impl Iterator<Item = f64> + '_ {
    raw.obj.iter().chain(&raw.eq).chain(&raw.ineq).copied()
}

fn linearize(problem: &NlpProblem, y: &[f64], m: &Multipliers, fd_step: f64) -> Linearization {
    let n = problem.node_count();
    let evals = problem.eval_all(y);
    let mut raw = BlockValues::default();
    let mut residuals = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut jacobians = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    for i in 0..n {
        block_raw(problem, y, &evals, i, &mut raw);
        base.push(raw.clone());
        let (mut rows, mut scale) = (Vec::new(), Vec::new());
        al_rows(problem, i, &raw, m, &mut rows, &mut scale);
        let len = rows.len();
        residuals.push(rows);
        scales.push(scale);
        jacobians.push(BlockJacobian { a: DMatrix::zeros(len, NODE_DIM), b: DMatrix::zeros(len, NODE_DIM) });
    }

    let mut yi = [0.0; NODE_DIM];
    let (mut plus, mut prev_plus) = (BlockValues::default(), BlockValues::default());
    for i in 0..n {
        yi.copy_from_slice(node_slice(y, i));
        for j in 0..NODE_DIM {
            let h = fd_step * yi[j].abs().max(1.0);
            let orig = yi[j];
            yi[j] = orig + h;
            let h = yi[j] - orig;
            let ev_p = problem.eval_node(i, &yi);
            let next = (i + 1 < n).then(|| (node_slice(y, i + 1), &evals[i + 1]));
            problem.block_values(i, &yi, &ev_p, next, &mut plus);
            if i > 0 {
                problem.block_values(i - 1, node_slice(y, i - 1), &evals[i - 1], Some((&yi, &ev_p)), &mut prev_plus);
            }
            yi[j] = orig;

            let inv = 1.0 / h;
            let col = &mut jacobians[i].a;
            for (r, (p, q)) in raw_vector(&plus).zip(raw_vector(&base[i])).enumerate() {
                col[(r, j)] = scales[i][r] * (p - q) * inv;
            }
            if i > 0 {
                let col = &mut jacobians[i - 1].b;
                for (r, (p, q)) in raw_vector(&prev_plus).zip(raw_vector(&base[i - 1])).enumerate() {
                    col[(r, j)] = scales[i - 1][r] * (p - q) * inv;
                }
            }
        }
    }
    Linearization { residuals, jacobians }
}

/// Normal equations `H = JᵀJ` (block tridiagonal) and gradient `Jᵀr`.
struct NormalEquations {
    diag: Vec<Block>,
    upper: Vec<Block>,
    grad: Vec<BlockVec>,
}

fn to_block(m: &DMatrix<f64>) -> Block {
    Block::from_fn(|r, c| m[(r, c)])
}

fn normal_equations(lin: &Linearization) -> NormalEquations {
    let n = lin.jacobians.len();
    let mut diag = vec![Block::zeros(); n];
    let mut upper = vec![Block::zeros(); n.saturating_sub(1)];
    let mut grad = vec![BlockVec::zeros(); n];
    for i in 0..n {
        let jac = &lin.jacobians[i];
        let r = nalgebra::DVector::from_column_slice(&lin.residuals[i]);
        diag[i] += to_block(&(jac.a.transpose() * &jac.a));
        grad[i] += BlockVec::from_iterator((jac.a.transpose() * &r).iter().copied());
        if i + 1 < n {
            diag[i + 1] += to_block(&(jac.b.transpose() * &jac.b));
            upper[i] += to_block(&(jac.a.transpose() * &jac.b));
            grad[i + 1] += BlockVec::from_iterator((jac.b.transpose() * &r).iter().copied());
        }
    }
    NormalEquations { diag, upper, grad }
}

/// Solves `(H + damping·diag(H)) δ = -g` by block Cholesky.
fn damped_step(ne: &NormalEquations, damping: f64) -> Option<Vec<BlockVec>> {
    let n = ne.diag.len();
    let mut lower: Vec<Block> = Vec::with_capacity(n);
    let mut coupling: Vec<Block> = Vec::with_capacity(n);
    let mut z: Vec<BlockVec> = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = ne.diag[i];
        for k in 0..NODE_DIM {
            d[(k, k)] += damping * d[(k, k)].max(1e-6);
        }
        let mut b = -ne.grad[i];
        if i > 0 {
            let x: &Block = &coupling[i - 1];
            d -= x.transpose() * x;
            b -= x.transpose() * z[i - 1];
        }
        let l = d.cholesky()?.l();
        let zi = l.solve_lower_triangular(&b)?;
        if i + 1 < n {
            coupling.push(l.solve_lower_triangular(&ne.upper[i])?);
        }
        lower.push(l);
        z.push(zi);
    }
    let mut step = vec![BlockVec::zeros(); n];
    for i in (0..n).rev() {
        let mut rhs = z[i];
        if i + 1 < n {
            rhs -= coupling[i] * step[i + 1];
        }
        step[i] = lower[i].tr_solve_lower_triangular(&rhs)?;
    }
    if step.iter().all(|s| s.iter().all(|v| v.is_finite())) {
        Some(step)
    } else {
        None
    }
}

/// Levenberg–Marquardt on the augmented Lagrangian. Returns the number of
/// linearizations performed.
fn minimize_inner(
    problem: &NlpProblem,
    y: &mut [f64],
    m: &Multipliers,
    config: &SolverConfig,
    max_iterations: usize,
) -> usize {
    let mut cost = al_cost(problem, y, m);
    if !cost.is_finite() {
        return 0;
    }
    let mut damping = 1e-3;
    let mut stalls = 0;
    let mut trial = y.to_vec();
    for it in 0..max_iterations {
        let lin = linearize(problem, y, m, config.fd_step);
        let ne = normal_equations(&lin);
        let gmax = ne.grad.iter().map(|g| g.amax()).fold(0.0, f64::max);
        if gmax <= 1e-10 * (1.0 + cost) {
            return it + 1;
        }
        let mut accepted = false;
        while damping < MAX_DAMPING {
            let Some(step) = damped_step(&ne, damping) else {
                damping *= 10.0;
                continue;
            };
            for (i, s) in step.iter().enumerate() {
                for k in 0..NODE_DIM {
                    trial[i * NODE_DIM + k] = y[i * NODE_DIM + k] + s[k];
                }
            }
            let new_cost = al_cost(problem, &trial, m);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                y.copy_from_slice(&trial);
                cost = new_cost;
                damping = (damping / 3.0).max(MIN_DAMPING);
                accepted = true;
                stalls = if rel < 1e-12 { stalls + 1 } else { 0 };
                break;
            }
            damping *= 4.0;
        }
        if !accepted || stalls >= 3 {
            return it + 1;
        }
    }
    max_iterations
}

fn violation(eq: &[f64], ineq: &[f64]) -> f64 {
    let e = eq.iter().fold(0.0_f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY });
    ineq.iter().fold(e, |a, v| if v.is_finite() { a.max(*v) } else { f64::INFINITY })
}

/// Solves the collocation NLP from `y0`. Never fails: breakdowns are
/// reported as a non-converged solution evaluated at the last iterate.
pub fn solve_nlp(problem: &NlpProblem, y0: &[f64], config: &SolverConfig) -> NlpSolution {
    assert_eq!(y0.len(), problem.dim(), "initial guess does not match problem layout");
    let mut y = y0.to_vec();
    let mut m = Multipliers {
        eq: vec![0.0; problem.equalities().len()],
        ineq: vec![0.0; problem.inequalities().len()],
        rho: config.initial_penalty,
    };
    // near-feasible iterates are projected with a dominant quadratic penalty
    let polish = Multipliers { eq: m.eq.clone(), ineq: m.ineq.clone(), rho: POLISH_PENALTY };
    let mut iterations = 0;
    let mut converged = false;
    let mut prev_violation = f64::INFINITY;
    let (mut f, mut eq, mut ineq) = problem.evaluate(&y);
    for _ in 0..config.max_outer_iterations {
        iterations += minimize_inner(problem, &mut y, &m, config, config.max_inner_iterations);
        (f, eq, ineq) = problem.evaluate(&y);
        let viol = violation(&eq, &ineq);
        if viol <= config.feas_tol && f.is_finite() {
            converged = true;
            break;
        }
        if !viol.is_finite() {
            break;
        }
        if viol <= POLISH_THRESHOLD {
            let mut polished = y.clone();
            iterations += minimize_inner(problem, &mut polished, &polish, config, POLISH_ITERATIONS);
            let (pf, peq, pineq) = problem.evaluate(&polished);
            let pviol = violation(&peq, &pineq);
            if pviol <= config.feas_tol && pf.is_finite() {
                (y, f, eq, ineq) = (polished, pf, peq, pineq);
                converged = true;
                break;
            }
        }
        for (l, c) in m.eq.iter_mut().zip(&eq) {
            *l = (*l + m.rho * c).clamp(-MULTIPLIER_LIMIT, MULTIPLIER_LIMIT);
        }
        for (mu, h) in m.ineq.iter_mut().zip(&ineq) {
            *mu = (*mu + m.rho * h).clamp(0.0, MULTIPLIER_LIMIT);
        }
        if viol > 0.25 * prev_violation {
            m.rho = (m.rho * config.penalty_growth).min(config.max_penalty);
        }
        prev_violation = viol;
    }
    NlpSolution {
        y_opt: y,
        objective_value: f,
        equality_residuals: eq,
        inequality_values: ineq,
        converged,
        iterations,
    }
}


#[cfg(test)]
mod gradient_check {
    use super::*;
    use crate::collocation::{build_nlp, Action, Context};
    use crate::hopper::HopperParams;
    use crate::terrain::TerrainModel;

    #[test]
    fn linearization_gradient_matches_cost() {
        let cfg = SolverConfig::default();
        let p = build_nlp(
            &Context::flat(0.3).unwrap(),
            &Action::new([4, 3, 5, 0, 0]).unwrap(),
            &HopperParams::default(),
            &TerrainModel::flat_default(),
            &cfg,
        )
        .unwrap();
        let mut y = p.initial_guess();
        for (k, v) in y.iter_mut().enumerate() {
            *v += 0.01 * ((k as f64 * 0.618).fract() - 0.5);
        }
        let m = Multipliers {
            eq: (0..p.equalities().len()).map(|k| (k as f64 * 0.3).sin()).collect(),
            ineq: vec![0.5; p.inequalities().len()],
            rho: 100.0,
        };
        let lin = linearize(&p, &y, &m, 1e-6);
        let ne = normal_equations(&lin);
        let mut worst: f64 = 0.0;
        for idx in 0..y.len() {
            let h = 1e-6;
            let mut yp = y.clone();
            yp[idx] += h;
            let mut ym = y.clone();
            ym[idx] -= h;
            let fd = (al_cost(&p, &yp, &m) - al_cost(&p, &ym, &m)) / (2.0 * h);
            let g = ne.grad[idx / NODE_DIM][idx % NODE_DIM];
            worst = worst.max((fd - g).abs() / (1.0 + g.abs()));
        }
        assert!(worst < 1e-4, "worst gradient mismatch {worst}");
    }
}

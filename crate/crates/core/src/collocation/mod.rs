//! Lower-level trajectory optimization: a trapezoidal direct-collocation NLP
//! over phase-structured nodes, its solver, and the merit score used by the
//! upper level.

mod solver;

use std::fmt;
use std::io::Write;

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hopper::{self, GenState, HopperParams};
use crate::terrain::{SurfaceGradient, TerrainFeatures, TerrainModel};

pub use solver::solve_nlp;

/// Decision variables per node: `q` (4), `q̇` (4), `u` (2).
pub const NODE_DIM: usize = 10;
/// Maximum goal distance (m).
pub const MAX_GOAL_DISTANCE: f64 = 1.0;
/// Raw merit substituted for non-finite solver output.
pub const MERIT_CAP: f64 = 10.0;

pub const PHASE_SLOTS: usize = 5;

/// Contact mode of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Stance,
    Flight,
}

impl Phase {
    fn of_slot(slot: usize) -> Self {
        if slot.is_multiple_of(2) {
            Phase::Stance
        } else {
            Phase::Flight
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Phase::Stance => 'S',
            Phase::Flight => 'F',
        }
    }
}

/// Canonical contact schedule: node counts of alternating
/// stance/flight/stance/flight/stance phases, zero-padded at the end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u8; 5]", into = "[u8; 5]")]
pub struct Action([u8; PHASE_SLOTS]);

pub const FIRST_SLOT_VALUES: [u8; 4] = [3, 4, 5, 6];
pub const LATER_SLOT_VALUES: [u8; 5] = [0, 3, 4, 5, 6];

impl Action {
    /// Validates that `raw` is already in canonical trailing-zero form.
    pub fn new(raw: [u8; PHASE_SLOTS]) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidAction { raw, reason: reason.into() };
        if !FIRST_SLOT_VALUES.contains(&raw[0]) {
            return Err(bad("first phase must be a stance of 3..=6 nodes"));
        }
        if raw[1..].iter().any(|v| !LATER_SLOT_VALUES.contains(v)) {
            return Err(bad("phase node counts must be 0 or 3..=6"));
        }
        let nonzero = raw.iter().take_while(|&&v| v != 0).count();
        if raw[nonzero..].iter().any(|&v| v != 0) {
            return Err(bad("zeros must be trailing"));
        }
        if nonzero % 2 == 0 {
            return Err(bad("schedule must end in stance (1, 3 or 5 phases)"));
        }
        Ok(Self(raw))
    }

    pub fn slots(&self) -> [u8; PHASE_SLOTS] {
        self.0
    }

    pub fn phase_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn node_count(&self) -> usize {
        self.0.iter().map(|&v| v as usize).sum()
    }

    /// Nonzero phases in order.
    pub fn phases(&self) -> impl Iterator<Item = (Phase, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &n)| n != 0)
            .map(|(i, &n)| (Phase::of_slot(i), n as usize))
    }

    /// Slot values as kernel coordinates.
    pub fn features(&self) -> [f64; PHASE_SLOTS] {
        self.0.map(f64::from)
    }

    /// Stance/flight rendering such as `SSSS.FFF.SSSSS`.
    pub fn schedule_string(&self) -> String {
        self.phases()
            .map(|(p, n)| std::iter::repeat_n(p.symbol(), n).collect::<String>())
            .collect::<Vec<_>>()
            .join(".")
    }
}

impl TryFrom<[u8; 5]> for Action {
    type Error = Error;

    fn try_from(raw: [u8; 5]) -> Result<Self> {
        Action::new(raw)
    }
}

impl From<Action> for [u8; 5] {
    fn from(a: Action) -> Self {
        a.0
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        write!(f, "[{},{},{},{},{}]", s[0], s[1], s[2], s[3], s[4])
    }
}

/// Task descriptor: goal distance plus variable terrain heights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub goal_distance: f64,
    pub terrain_features: TerrainFeatures,
}

impl Context {
    pub fn new(goal_distance: f64, terrain_features: TerrainFeatures) -> Result<Self> {
        let c = Self { goal_distance, terrain_features };
        c.validate()?;
        Ok(c)
    }

    pub fn flat(goal_distance: f64) -> Result<Self> {
        Self::new(goal_distance, TerrainFeatures::default())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_GOAL_DISTANCE).contains(&self.goal_distance) {
            return Err(Error::InvalidContext(format!(
                "goal distance {} outside [0, {MAX_GOAL_DISTANCE}] m",
                self.goal_distance
            )));
        }
        self.terrain_features.validate(self.terrain_features.len())
    }

    /// `[goal, features...]`.
    pub fn features(&self) -> Vec<f64> {
        std::iter::once(self.goal_distance)
            .chain(self.terrain_features.node_heights.iter().copied())
            .collect()
    }
}

/// Settings of the collocation transcription and its solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Node duration (s).
    pub dt: f64,
    /// Node-count multiplier per phase; `dt` is divided by the same factor so
    /// phase durations stay fixed.
    pub refinement: usize,
    pub feas_tol: f64,
    pub max_inner_iterations: usize,
    pub max_outer_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Relative forward-difference step for Jacobians.
    pub fd_step: f64,
    /// Base lift added to the initial guess during flight (m).
    pub apex_height: f64,
    /// Scale applied to the torque-squared objective.
    pub objective_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            refinement: 1,
            feas_tol: 1e-6,
            max_inner_iterations: 30,
            max_outer_iterations: 10,
            initial_penalty: 100.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            fd_step: 1e-7,
            apex_height: 0.1,
            objective_scale: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("dt", self.dt),
            ("feas_tol", self.feas_tol),
            ("initial_penalty", self.initial_penalty),
            ("max_penalty", self.max_penalty),
            ("fd_step", self.fd_step),
            ("objective_scale", self.objective_scale),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("solver.{name} must be positive")));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::Config("solver.penalty_growth must exceed 1".into()));
        }
        if self.refinement == 0 || self.max_inner_iterations == 0 || self.max_outer_iterations == 0 {
            return Err(Error::Config("solver iteration counts and refinement must be >= 1".into()));
        }
        if !(self.apex_height.is_finite() && self.apex_height >= 0.0) {
            return Err(Error::Config("solver.apex_height must be non-negative".into()));
        }
        Ok(())
    }

    pub fn node_dt(&self) -> f64 {
        self.dt / self.refinement as f64
    }
}

/// Weights of the merit score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeritWeights {
    pub cost: f64,
    pub equality: f64,
    pub inequality: f64,
}

impl Default for MeritWeights {
    fn default() -> Self {
        Self { cost: 0.01, equality: 10.0, inequality: 10.0 }
    }
}

impl MeritWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cost, self.equality, self.inequality].iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("merit weights must be positive".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    Equality,
    Inequality,
}

/// Registry entry for one scalar constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintInfo {
    pub kind: ConstraintKind,
    pub label: &'static str,
    pub node: usize,
}

/// Trajectory cost: trapezoidal integral of `scale · ‖u‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub torque_weight: f64,
}

/// Per-node quantities derived from the decision variables.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NodeEval {
    pub qddot: Vector4<f64>,
    pub lambda: Vector2<f64>,
    pub foot: Vector2<f64>,
    pub foot_vel: Vector2<f64>,
    pub ground: f64,
    pub grad: SurfaceGradient,
}

/// Constraint layout of one node's block: local constraints of node `i`
/// followed by the collocation defect linking node `i` to `i + 1`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockLayout {
    pub eq_offset: usize,
    pub ineq_offset: usize,
}

/// Raw constraint values of one block.
#[derive(Clone, Debug, Default)]
pub(crate) struct BlockValues {
    pub obj: [f64; 2],
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

/// Transcribed lower-level problem for one (context, action) pair.
#[derive(Clone, Debug)]
pub struct NlpProblem {
    params: HopperParams,
    terrain: TerrainModel,
    action: Action,
    goal_distance: f64,
    phases: Vec<Phase>,
    phase_index: Vec<usize>,
    touchdown: Vec<bool>,
    dt: f64,
    start: Vector4<f64>,
    objective: Objective,
    equalities: Vec<ConstraintInfo>,
    inequalities: Vec<ConstraintInfo>,
    blocks: Vec<BlockLayout>,
    apex_height: f64,
}

pub fn build_nlp(
    context: &Context,
    action: &Action,
    params: &HopperParams,
    terrain: &TerrainModel,
    config: &SolverConfig,
) -> Result<NlpProblem> {
    context.validate()?;
    let action = Action::new(action.slots())?;
    let (x_min, x_max) = terrain.x_range();
    if context.goal_distance < x_min || context.goal_distance > x_max || x_min > 0.0 {
        return Err(Error::InvalidContext(format!(
            "start 0 m and goal {} m must lie inside terrain range [{x_min}, {x_max}]",
            context.goal_distance
        )));
    }
    let r = config.refinement;
    let mut phases = Vec::new();
    let mut phase_index = Vec::new();
    for (k, (phase, n)) in action.phases().enumerate() {
        for _ in 0..n * r {
            phases.push(phase);
            phase_index.push(k);
        }
    }
    let n_nodes = phases.len();
    let touchdown: Vec<bool> = (0..n_nodes)
        .map(|i| phases[i] == Phase::Stance && (i == 0 || phase_index[i - 1] != phase_index[i]))
        .collect();
    let (joints, leg) = params.nominal_posture();
    let ground0 = terrain.height_at(0.0)?;
    let start = Vector4::new(0.0, ground0 + leg, joints[0], joints[1]);

    let mut equalities = Vec::new();
    let mut inequalities = Vec::new();
    let mut blocks = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let eq_offset = equalities.len();
        let ineq_offset = inequalities.len();
        let mut eq = |label| equalities.push(ConstraintInfo { kind: ConstraintKind::Equality, label, node: i });
        if i == 0 {
            for label in ["start_x", "start_z", "start_hip", "start_knee"] {
                eq(label);
            }
            for label in ["start_vx", "start_vz", "start_hip_rate", "start_knee_rate"] {
                eq(label);
            }
        }
        if i == n_nodes - 1 {
            eq("goal_x");
            eq("final_vx");
            eq("final_vz");
        }
        if phases[i] == Phase::Stance
            && touchdown[i] {
                eq("contact_height");
                eq("touchdown_vx");
                eq("touchdown_vz");
            }
        if i + 1 < n_nodes {
            for label in [
                "defect_x",
                "defect_z",
                "defect_hip",
                "defect_knee",
                "defect_vx",
                "defect_vz",
                "defect_hip_rate",
                "defect_knee_rate",
            ] {
                eq(label);
            }
        }
        let mut ineq =
            |label| inequalities.push(ConstraintInfo { kind: ConstraintKind::Inequality, label, node: i });
        match phases[i] {
            Phase::Stance => {
                ineq("normal_force");
                ineq("friction_forward");
                ineq("friction_backward");
            }
            Phase::Flight => ineq("foot_clearance"),
        }
        for label in [
            "hip_upper",
            "hip_lower",
            "knee_upper",
            "knee_lower",
            "hip_torque_upper",
            "hip_torque_lower",
            "knee_torque_upper",
            "knee_torque_lower",
        ] {
            ineq(label);
        }
        blocks.push(BlockLayout { eq_offset, ineq_offset });
    }

    Ok(NlpProblem {
        params: params.clone(),
        terrain: terrain.clone(),
        action,
        goal_distance: context.goal_distance,
        phases,
        phase_index,
        touchdown,
        dt: config.node_dt(),
        start,
        objective: Objective { torque_weight: config.objective_scale },
        equalities,
        inequalities,
        blocks,
        apex_height: config.apex_height,
    })
}

impl NlpProblem {
    pub fn node_count(&self) -> usize {
        self.phases.len()
    }

    pub fn dim(&self) -> usize {
        self.phases.len() * NODE_DIM
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn action(&self) -> &Action {
        &self.action
    }

    pub fn goal_distance(&self) -> f64 {
        self.goal_distance
    }

    pub fn params(&self) -> &HopperParams {
        &self.params
    }

    pub fn terrain(&self) -> &TerrainModel {
        &self.terrain
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn equalities(&self) -> &[ConstraintInfo] {
        &self.equalities
    }

    pub fn inequalities(&self) -> &[ConstraintInfo] {
        &self.inequalities
    }

    /// Nominal standing configuration at the start.
    pub fn start_configuration(&self) -> Vector4<f64> {
        self.start
    }

    pub(crate) fn blocks(&self) -> &[BlockLayout] {
        &self.blocks
    }

    /// Node state and torque.
    pub fn node(&self, y: &[f64], i: usize) -> (GenState, Vector2<f64>) {
        unpack(&y[i * NODE_DIM..(i + 1) * NODE_DIM])
    }

    pub(crate) fn eval_node(&self, i: usize, yi: &[f64]) -> NodeEval {
        let (state, u) = unpack(yi);
        let p = &self.params;
        let (qddot, lambda) = match self.phases[i] {
            Phase::Flight => (
                hopper::flight_dynamics(p, &state, &u).unwrap_or_else(|_| Vector4::repeat(f64::NAN)),
                Vector2::zeros(),
            ),
            Phase::Stance => hopper::stance_dynamics(p, &state, &u)
                .unwrap_or_else(|_| (Vector4::repeat(f64::NAN), Vector2::repeat(f64::NAN))),
        };
        let foot = hopper::foot_position(p, &state.q);
        let foot_vel = hopper::foot_velocity(p, &state);
        let (ground, grad) = self.terrain.query_clamped(foot.x);
        NodeEval { qddot, lambda, foot, foot_vel, ground, grad }
    }

    pub(crate) fn eval_all(&self, y: &[f64]) -> Vec<NodeEval> {
        (0..self.node_count())
            .map(|i| self.eval_node(i, &y[i * NODE_DIM..(i + 1) * NODE_DIM]))
            .collect()
    }

    /// Trapezoid weight of node `i` in the cost integral.
    fn quadrature_weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.node_count() {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    /// Values of block `i` given node `i` and, if present, node `i + 1`.
    pub(crate) fn block_values(
        &self,
        i: usize,
        yi: &[f64],
        ev: &NodeEval,
        next: Option<(&[f64], &NodeEval)>,
        out: &mut BlockValues,
    ) {
        out.eq.clear();
        out.ineq.clear();
        let p = &self.params;
        let n = self.node_count();
        let w = (2.0 * self.objective.torque_weight * self.quadrature_weight(i)).sqrt();
        out.obj = [w * yi[8], w * yi[9]];

        if i == 0 {
            for k in 0..4 {
                out.eq.push(yi[k] - self.start[k]);
            }
            out.eq.extend_from_slice(&yi[4..8]);
        }
        if i + 1 == n {
            out.eq.push(yi[0] - self.goal_distance);
            out.eq.extend_from_slice(&yi[4..6]);
        }
        if self.phases[i] == Phase::Stance
            && self.touchdown[i] {
                out.eq.push(ev.foot.y - ev.ground);
                out.eq.push(ev.foot_vel.x);
                out.eq.push(ev.foot_vel.y);
            }
        if let Some((yj, evj)) = next {
            let h = 0.5 * self.dt;
            for k in 0..4 {
                out.eq.push(yj[k] - yi[k] - h * (yi[4 + k] + yj[4 + k]));
            }
            for k in 0..4 {
                out.eq.push(yj[4 + k] - yi[4 + k] - h * (ev.qddot[k] + evj.qddot[k]));
            }
        }

        match self.phases[i] {
            Phase::Stance => {
                let nrm = Vector2::new(ev.grad.normal[0], ev.grad.normal[1]);
                let tan = Vector2::new(nrm.y, -nrm.x);
                let ln = ev.lambda.dot(&nrm);
                let lt = ev.lambda.dot(&tan);
                let mu = p.friction_coefficient;
                out.ineq.push(-ln);
                out.ineq.push(lt - mu * ln);
                out.ineq.push(-lt - mu * ln);
            }
            Phase::Flight => out.ineq.push(ev.ground - ev.foot.y),
        }
        let [hip_lo, hip_hi] = p.hip_limits;
        let [knee_lo, knee_hi] = p.knee_limits;
        out.ineq.push(yi[2] - hip_hi);
        out.ineq.push(hip_lo - yi[2]);
        out.ineq.push(yi[3] - knee_hi);
        out.ineq.push(knee_lo - yi[3]);
        for k in 8..10 {
            out.ineq.push(yi[k] - p.torque_limit);
            out.ineq.push(-p.torque_limit - yi[k]);
        }
    }

    /// Objective, equality residuals and inequality values at `y`.
    pub fn evaluate(&self, y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let evals = self.eval_all(y);
        let n = self.node_count();
        let mut f = 0.0;
        let mut eq = Vec::with_capacity(self.equalities.len());
        let mut ineq = Vec::with_capacity(self.inequalities.len());
        let mut vals = BlockValues::default();
        for i in 0..n {
            let next = (i + 1 < n).then(|| (&y[(i + 1) * NODE_DIM..(i + 2) * NODE_DIM], &evals[i + 1]));
            self.block_values(i, &y[i * NODE_DIM..(i + 1) * NODE_DIM], &evals[i], next, &mut vals);
            f += 0.5 * (vals.obj[0] * vals.obj[0] + vals.obj[1] * vals.obj[1]);
            eq.extend_from_slice(&vals.eq);
            ineq.extend_from_slice(&vals.ineq);
        }
        (f, eq, ineq)
    }

    /// Contact forces at every node (zero in flight).
    pub fn contact_forces(&self, y: &[f64]) -> Vec<Vector2<f64>> {
        self.eval_all(y).iter().map(|e| e.lambda).collect()
    }

    /// Deterministic seed trajectory.
    pub fn initial_guess(&self) -> Vec<f64> {
        initial_guess(self)
    }
}

fn unpack(yi: &[f64]) -> (GenState, Vector2<f64>) {
    (
        GenState::new(
            Vector4::new(yi[0], yi[1], yi[2], yi[3]),
            Vector4::new(yi[4], yi[5], yi[6], yi[7]),
        ),
        Vector2::new(yi[8], yi[9]),
    )
}

/// Seed trajectory: base x interpolated start to goal, base z at nominal
/// height plus a sine bump in flight, joints from inverse kinematics of an
/// interpolated foot path, velocities by finite differences, zero torques.
pub fn initial_guess(problem: &NlpProblem) -> Vec<f64> {
    let n = problem.node_count();
    let p = &problem.params;
    let terrain = &problem.terrain;
    let goal = problem.goal_distance;
    let (nominal_joints, leg) = p.nominal_posture();
    let ground = |x: f64| terrain.query_clamped(x).0;

    let stance_phases: Vec<usize> = {
        let mut ids: Vec<usize> = problem
            .phase_index
            .iter()
            .zip(&problem.phases)
            .filter(|(_, ph)| **ph == Phase::Stance)
            .map(|(k, _)| *k)
            .collect();
        ids.dedup();
        ids
    };
    let n_stance = stance_phases.len();
    let stance_foot_x = |phase: usize| -> f64 {
        let rank = stance_phases.iter().position(|&k| k == phase).unwrap_or(0);
        if n_stance > 1 {
            goal * rank as f64 / (n_stance - 1) as f64
        } else {
            0.0
        }
    };

    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let base_x = goal * s;
        let phase = problem.phase_index[i];
        let (foot_x, lift, bump) = match problem.phases[i] {
            Phase::Stance => (stance_foot_x(phase), 0.0, 0.0),
            Phase::Flight => {
                let first = problem.phase_index.iter().position(|&k| k == phase).unwrap();
                let len = problem.phase_index.iter().filter(|&&k| k == phase).count();
                let frac = (i - first + 1) as f64 / (len + 1) as f64;
                let from = stance_foot_x(phase - 1);
                let to = stance_foot_x(phase + 1);
                let arc = (std::f64::consts::PI * frac).sin();
                (from + (to - from) * frac, 0.5 * problem.apex_height * arc, problem.apex_height * arc)
            }
        };
        let foot_z = ground(foot_x) + lift;
        let base_z = ground(base_x).max(ground(foot_x)) + leg + bump;
        let joints = p
            .inverse_kinematics(Vector2::new(foot_x - base_x, foot_z - base_z))
            .filter(|[h, k]| {
                (p.hip_limits[0]..=p.hip_limits[1]).contains(h)
                    && (p.knee_limits[0]..=p.knee_limits[1]).contains(k)
            })
            .unwrap_or(nominal_joints);
        q.push(Vector4::new(base_x, base_z, joints[0], joints[1]));
    }
    q[0] = problem.start;

    let dt = problem.dt;
    let mut y = vec![0.0; n * NODE_DIM];
    for i in 0..n {
        let qdot = if i == 0 || i + 1 == n {
            Vector4::zeros()
        } else {
            (q[i + 1] - q[i - 1]) / (2.0 * dt)
        };
        let yi = &mut y[i * NODE_DIM..(i + 1) * NODE_DIM];
        yi[..4].copy_from_slice(q[i].as_slice());
        yi[4..8].copy_from_slice(qdot.as_slice());
    }
    y
}

/// Output of one lower-level solve.
#[derive(Clone, Debug)]
pub struct NlpSolution {
    pub y_opt: Vec<f64>,
    pub objective_value: f64,
    pub equality_residuals: Vec<f64>,
    pub inequality_values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl NlpSolution {
    pub fn max_equality_violation(&self) -> f64 {
        self.equality_residuals.iter().fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) })
    }

    pub fn max_inequality_violation(&self) -> f64 {
        self.inequality_values.iter().fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(*v) })
    }

    pub fn max_violation(&self) -> f64 {
        self.max_equality_violation().max(self.max_inequality_violation())
    }

    /// Writes one CSV row per node: time, q, q̇, u, contact force, phase.
    pub fn write_csv<W: Write>(&self, problem: &NlpProblem, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "x_b", "z_b", "phi_h", "phi_k", "vx_b", "vz_b", "dphi_h", "dphi_k", "u_h", "u_k",
            "lambda_x", "lambda_z", "phase",
        ])?;
        let forces = problem.contact_forces(&self.y_opt);
        for i in 0..problem.node_count() {
            let yi = &self.y_opt[i * NODE_DIM..(i + 1) * NODE_DIM];
            let mut row: Vec<String> = vec![format!("{}", i as f64 * problem.dt)];
            row.extend(yi.iter().map(|v| format!("{v}")));
            row.push(format!("{}", forces[i].x));
            row.push(format!("{}", forces[i].y));
            row.push(problem.phases[i].symbol().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Raw merit: weighted cost plus squared constraint violations. Non-finite
/// inputs map to [`MERIT_CAP`].
pub fn merit(solution: &NlpSolution, weights: &MeritWeights) -> f64 {
    let eq: f64 = solution.equality_residuals.iter().map(|g| g * g).sum();
    let ineq: f64 = solution.inequality_values.iter().map(|h| h.max(0.0).powi(2)).sum();
    let m = weights.cost * solution.objective_value + weights.equality * eq + weights.inequality * ineq;
    if m.is_finite() {
        m
    } else {
        MERIT_CAP
    }
}

/// Merit scored for learning and duels: the raw merit of a converged solve,
/// capped at [`MERIT_CAP`]; a solve that missed the feasibility tolerance
/// scores the cap.
pub fn solve_merit(solution: &NlpSolution, weights: &MeritWeights) -> f64 {
    if solution.converged {
        merit(solution, weights).min(MERIT_CAP)
    } else {
        MERIT_CAP
    }
}

/// Bounded, order-preserving merit used as the learning target.
pub fn refine_merit(m: f64) -> f64 {
    m.tanh()
}

/// Largest state mismatch when each in-phase collocation interval is
/// re-integrated with RK4 under linearly interpolated torques. Intervals
/// spanning a contact switch are skipped.
pub fn resimulation_gap(problem: &NlpProblem, y: &[f64], substeps: usize) -> f64 {
    let n = problem.node_count();
    let dt = problem.dt;
    let p = &problem.params;
    let mut gap: f64 = 0.0;
    for i in 0..n.saturating_sub(1) {
        if problem.phase_index[i] != problem.phase_index[i + 1] {
            continue;
        }
        let (s0, u0) = problem.node(y, i);
        let (s1, u1) = problem.node(y, i + 1);
        let phase = problem.phases[i];
        let accel = |s: &GenState, u: &Vector2<f64>| -> Vector4<f64> {
            match phase {
                Phase::Flight => hopper::flight_dynamics(p, s, u).unwrap_or_else(|_| Vector4::repeat(f64::NAN)),
                Phase::Stance => hopper::stance_dynamics(p, s, u)
                    .map(|r| r.0)
                    .unwrap_or_else(|_| Vector4::repeat(f64::NAN)),
            }
        };
        let h = dt / substeps as f64;
        let mut s = s0;
        for k in 0..substeps {
            let t0 = k as f64 / substeps as f64;
            let t_mid = (k as f64 + 0.5) / substeps as f64;
            let t1 = (k + 1) as f64 / substeps as f64;
            let u = |t: f64| u0 + (u1 - u0) * t;
            let f = |st: &GenState, t: f64| (st.qdot, accel(st, &u(t)));
            let step = |st: &GenState, dq: &Vector4<f64>, dv: &Vector4<f64>, c: f64| {
                GenState::new(st.q + dq * c, st.qdot + dv * c)
            };
            let (k1q, k1v) = f(&s, t0);
            let (k2q, k2v) = f(&step(&s, &k1q, &k1v, 0.5 * h), t_mid);
            let (k3q, k3v) = f(&step(&s, &k2q, &k2v, 0.5 * h), t_mid);
            let (k4q, k4v) = f(&step(&s, &k3q, &k3v, h), t1);
            s = GenState::new(
                s.q + (k1q + 2.0 * k2q + 2.0 * k3q + k4q) * (h / 6.0),
                s.qdot + (k1v + 2.0 * k2v + 2.0 * k3v + k4v) * (h / 6.0),
            );
        }
        let d = (s.q - s1.q).amax().max((s.qdot - s1.qdot).amax());
        gap = gap.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    gap
}

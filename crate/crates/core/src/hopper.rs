//! Planar single-legged hopper: base, thigh and shank with actuated hip and
//! knee.
//!
//! Generalized coordinates are `q = [x_B, z_B, φ_H, φ_K]`. The hip angle is
//! measured from the downward base vertical, the knee angle relative to the
//! thigh, so the foot sits at `base + l_t u(φ_H) + l_s u(φ_H + φ_K)` with
//! `u(θ) = (sin θ, -cos θ)`. The base translates but does not rotate.
//!
//! Equations of motion: `M(q) q̈ + b(q, q̇) + g(q) = Sᵀu + J_cᵀ λ_c`.

use nalgebra::{Matrix2, Matrix4, SMatrix, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Jacobian = SMatrix<f64, 2, 4>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopperParams {
    pub base_mass: f64,
    pub thigh_mass: f64,
    pub shank_mass: f64,
    pub thigh_length: f64,
    pub shank_length: f64,
    pub thigh_inertia: f64,
    pub shank_inertia: f64,
    pub gravity: f64,
    pub torque_limit: f64,
    pub hip_limits: [f64; 2],
    pub knee_limits: [f64; 2],
    pub friction_coefficient: f64,
    /// Knee angle of the nominal standing posture (foot below the base).
    pub nominal_knee: f64,
}

impl Default for HopperParams {
    fn default() -> Self {
        let (m_t, m_s, l_t, l_s) = (0.5, 0.5, 0.35, 0.35);
        Self {
            base_mass: 5.0,
            thigh_mass: m_t,
            shank_mass: m_s,
            thigh_length: l_t,
            shank_length: l_s,
            thigh_inertia: m_t * l_t * l_t / 12.0,
            shank_inertia: m_s * l_s * l_s / 12.0,
            gravity: 9.81,
            torque_limit: 60.0,
            hip_limits: [-2.5, 2.5],
            knee_limits: [0.2, 2.8],
            friction_coefficient: 0.8,
            nominal_knee: 1.0,
        }
    }
}

impl HopperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_mass", self.base_mass),
            ("thigh_mass", self.thigh_mass),
            ("shank_mass", self.shank_mass),
            ("thigh_length", self.thigh_length),
            ("shank_length", self.shank_length),
            ("thigh_inertia", self.thigh_inertia),
            ("shank_inertia", self.shank_inertia),
            ("gravity", self.gravity),
            ("torque_limit", self.torque_limit),
            ("friction_coefficient", self.friction_coefficient),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("hopper.{name} must be positive and finite")));
            }
        }
        for (name, [lo, hi]) in [("hip_limits", self.hip_limits), ("knee_limits", self.knee_limits)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("hopper.{name} must be a finite [lo, hi] pair")));
            }
        }
        if !(self.nominal_knee > self.knee_limits[0] && self.nominal_knee < self.knee_limits[1]) {
            return Err(Error::Config("hopper.nominal_knee must lie inside knee_limits".into()));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.base_mass + self.thigh_mass + self.shank_mass
    }

    /// Joint angles placing the foot at `rel = foot - base`, knee bent
    /// positively. `None` if out of reach.
    pub fn inverse_kinematics(&self, rel: Vector2<f64>) -> Option<[f64; 2]> {
        let (l1, l2) = (self.thigh_length, self.shank_length);
        let r2 = rel.norm_squared();
        let cos_k = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0..=1.0).contains(&cos_k) {
            return None;
        }
        let knee = cos_k.acos();
        let alpha = rel.x.atan2(-rel.y);
        let beta = (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
        Some([alpha - beta, knee])
    }

    /// Nominal standing joint angles and base height above the foot.
    pub fn nominal_posture(&self) -> ([f64; 2], f64) {
        let (l1, l2, k) = (self.thigh_length, self.shank_length, self.nominal_knee);
        let leg = (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * k.cos()).sqrt();
        let joints = self
            .inverse_kinematics(Vector2::new(0.0, -leg))
            .expect("nominal posture is reachable");
        (joints, leg)
    }

    fn bodies(&self) -> [Body; 3] {
        let (l1, l2) = (self.thigh_length, self.shank_length);
        [
            Body { mass: self.base_mass, inertia: 0.0, angle: [0.0, 0.0], com: Chain::default() },
            Body {
                mass: self.thigh_mass,
                inertia: self.thigh_inertia,
                angle: [1.0, 0.0],
                com: Chain::new(&[(0.5 * l1, [1.0, 0.0])]),
            },
            Body {
                mass: self.shank_mass,
                inertia: self.shank_inertia,
                angle: [1.0, 1.0],
                com: Chain::new(&[(l1, [1.0, 0.0]), (0.5 * l2, [1.0, 1.0])]),
            },
        ]
    }

    fn foot_chain(&self) -> Chain {
        Chain::new(&[(self.thigh_length, [1.0, 0.0]), (self.shank_length, [1.0, 1.0])])
    }
}

/// A point attached to the base through a sum of rotated offsets,
/// `p = base + Σ a u(c·φ)`.
#[derive(Clone, Copy, Debug, Default)]
struct Chain {
    terms: [(f64, [f64; 2]); 2],
    len: usize,
}

impl Chain {
    fn new(terms: &[(f64, [f64; 2])]) -> Self {
        let mut c = Chain::default();
        for (i, t) in terms.iter().enumerate() {
            c.terms[i] = *t;
        }
        c.len = terms.len();
        c
    }

    fn iter(&self) -> impl Iterator<Item = &(f64, [f64; 2])> {
        self.terms[..self.len].iter()
    }

    fn position(&self, q: &Vector4<f64>) -> Vector2<f64> {
        let mut p = Vector2::new(q[0], q[1]);
        for &(a, c) in self.iter() {
            let th = c[0] * q[2] + c[1] * q[3];
            p += a * Vector2::new(th.sin(), -th.cos());
        }
        p
    }

    fn jacobian(&self, q: &Vector4<f64>) -> Jacobian {
        let mut j = Jacobian::zeros();
        j[(0, 0)] = 1.0;
        j[(1, 1)] = 1.0;
        for &(a, c) in self.iter() {
            let th = c[0] * q[2] + c[1] * q[3];
            let (s, co) = th.sin_cos();
            for k in 0..2 {
                j[(0, 2 + k)] += a * c[k] * co;
                j[(1, 2 + k)] += a * c[k] * s;
            }
        }
        j
    }

    /// `∂J/∂φ_k`.
    fn jacobian_derivative(&self, q: &Vector4<f64>, k: usize) -> Jacobian {
        let mut j = Jacobian::zeros();
        for &(a, c) in self.iter() {
            let th = c[0] * q[2] + c[1] * q[3];
            let (s, co) = th.sin_cos();
            for m in 0..2 {
                j[(0, 2 + m)] += -a * c[m] * c[k] * s;
                j[(1, 2 + m)] += a * c[m] * c[k] * co;
            }
        }
        j
    }

    /// `J̇ q̇`.
    fn jdot_qdot(&self, q: &Vector4<f64>, qd: &Vector4<f64>) -> Vector2<f64> {
        let mut v = Vector2::zeros();
        for &(a, c) in self.iter() {
            let th = c[0] * q[2] + c[1] * q[3];
            let w = c[0] * qd[2] + c[1] * qd[3];
            v += a * w * w * Vector2::new(-th.sin(), th.cos());
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
struct Body {
    mass: f64,
    inertia: f64,
    angle: [f64; 2],
    com: Chain,
}

impl Body {
    fn angular_row(&self) -> Vector4<f64> {
        Vector4::new(0.0, 0.0, self.angle[0], self.angle[1])
    }
}

/// Generalized positions and velocities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenState {
    pub q: Vector4<f64>,
    pub qdot: Vector4<f64>,
}

impl GenState {
    pub fn new(q: Vector4<f64>, qdot: Vector4<f64>) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: Vector4<f64>) -> Self {
        Self { q, qdot: Vector4::zeros() }
    }
}

pub type JointTorque = Vector2<f64>;
pub type ContactForce = Vector2<f64>;

/// `M`, `b` and the gravity vector at one state.
#[derive(Clone, Copy, Debug)]
pub struct DynamicTerms {
    pub mass_matrix: Matrix4<f64>,
    pub bias: Vector4<f64>,
    pub gravity: Vector4<f64>,
}

pub fn foot_position(params: &HopperParams, q: &Vector4<f64>) -> Vector2<f64> {
    params.foot_chain().position(q)
}

/// Foot Jacobian `J_c` and the contraction `J̇_c q̇`.
pub fn contact_jacobian(params: &HopperParams, state: &GenState) -> (Jacobian, Vector2<f64>) {
    let chain = params.foot_chain();
    (chain.jacobian(&state.q), chain.jdot_qdot(&state.q, &state.qdot))
}

pub fn foot_velocity(params: &HopperParams, state: &GenState) -> Vector2<f64> {
    params.foot_chain().jacobian(&state.q) * state.qdot
}

pub fn mass_matrix(params: &HopperParams, q: &Vector4<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for body in params.bodies() {
        let j = body.com.jacobian(q);
        let w = body.angular_row();
        m += body.mass * j.transpose() * j + body.inertia * w * w.transpose();
    }
    m
}

pub fn dynamic_terms(params: &HopperParams, state: &GenState) -> DynamicTerms {
    let (q, qd) = (&state.q, &state.qdot);
    let mut mass_matrix = Matrix4::zeros();
    let mut bias = Vector4::zeros();
    let mut gravity = Vector4::zeros();
    for body in params.bodies() {
        let j = body.com.jacobian(q);
        let w = body.angular_row();
        let jt = j.transpose();
        mass_matrix += body.mass * jt * j + body.inertia * w * w.transpose();
        bias += body.mass * jt * body.com.jdot_qdot(q, qd);
        gravity += body.mass * params.gravity * jt * Vector2::new(0.0, 1.0);
    }
    DynamicTerms { mass_matrix, bias, gravity }
}

/// `∂M/∂q_k` for every coordinate.
pub fn mass_matrix_derivatives(params: &HopperParams, q: &Vector4<f64>) -> [Matrix4<f64>; 4] {
    let mut out = [Matrix4::zeros(); 4];
    for body in params.bodies() {
        let j = body.com.jacobian(q);
        for (k, dm) in out.iter_mut().enumerate().skip(2) {
            let dj = body.com.jacobian_derivative(q, k - 2);
            let t = dj.transpose() * j;
            *dm += body.mass * (t + t.transpose());
        }
    }
    out
}

/// Christoffel-symbol Coriolis matrix `C` with `b = C q̇` and `Ṁ - 2C`
/// skew-symmetric.
pub fn coriolis_matrix(params: &HopperParams, state: &GenState) -> Matrix4<f64> {
    let dm = mass_matrix_derivatives(params, &state.q);
    let qd = &state.qdot;
    let mut c = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            c[(i, j)] = (0..4)
                .map(|k| 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * qd[k])
                .sum();
        }
    }
    c
}

fn selection_transpose(u: &JointTorque) -> Vector4<f64> {
    Vector4::new(0.0, 0.0, u[0], u[1])
}

/// Unconstrained accelerations: `M q̈ = Sᵀu - b - g`.
pub fn flight_dynamics(
    params: &HopperParams,
    state: &GenState,
    u: &JointTorque,
) -> Result<Vector4<f64>> {
    let t = dynamic_terms(params, state);
    let rhs = selection_transpose(u) - t.bias - t.gravity;
    t.mass_matrix
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or(Error::Singular("flight mass matrix"))
}

/// Accelerations and contact force with the foot held in place,
/// `J_c q̈ + J̇_c q̇ = 0`.
pub fn stance_dynamics(
    params: &HopperParams,
    state: &GenState,
    u: &JointTorque,
) -> Result<(Vector4<f64>, ContactForce)> {
    let t = dynamic_terms(params, state);
    let (jc, jdqd) = contact_jacobian(params, state);
    let tau = selection_transpose(u) - t.bias - t.gravity;
    let chol = t.mass_matrix.cholesky().ok_or(Error::Singular("stance mass matrix"))?;
    let minv_jt = chol.solve(&jc.transpose());
    let minv_tau = chol.solve(&tau);
    // Schur complement of the KKT block system
    let schur: Matrix2<f64> = jc * minv_jt;
    let scale = schur.trace().abs().max(f64::MIN_POSITIVE);
    if schur.determinant().abs() <= 1e-12 * scale * scale {
        return Err(Error::Singular("stance KKT system"));
    }
    let inv = schur.try_inverse().ok_or(Error::Singular("stance KKT system"))?;
    let lambda = inv * (-jdqd - jc * minv_tau);
    let qddot = minv_tau + minv_jt * lambda;
    Ok((qddot, lambda))
}

/// Total kinetic plus potential energy.
pub fn energy(params: &HopperParams, state: &GenState) -> f64 {
    let m = mass_matrix(params, &state.q);
    let kinetic = 0.5 * state.qdot.dot(&(m * state.qdot));
    let potential: f64 = params
        .bodies()
        .iter()
        .map(|b| b.mass * params.gravity * b.com.position(&state.q).y)
        .sum();
    kinetic + potential
}

pub fn center_of_mass(params: &HopperParams, q: &Vector4<f64>) -> Vector2<f64> {
    let bodies = params.bodies();
    let total: f64 = bodies.iter().map(|b| b.mass).sum();
    bodies.iter().map(|b| b.mass * b.com.position(q)).sum::<Vector2<f64>>() / total
}

/// Center-of-mass acceleration implied by `q̈`.
pub fn com_acceleration(params: &HopperParams, state: &GenState, qddot: &Vector4<f64>) -> Vector2<f64> {
    let bodies = params.bodies();
    let total: f64 = bodies.iter().map(|b| b.mass).sum();
    bodies
        .iter()
        .map(|b| b.mass * (b.com.jacobian(&state.q) * qddot + b.com.jdot_qdot(&state.q, &state.qdot)))
        .sum::<Vector2<f64>>()
        / total
}

//! Furuta pendulum dynamics.
//!
//! Two views of the same mechanism live here. The analytic prior is the
//! frictionless Euler-Lagrange model `M(β) q̈ = (τ(a), 0)ᵀ − N(β, α̇, β̇) − G(β)`
//! integrated with RK4; it is what the learned models wrap. The plant adds the
//! effects the prior leaves out (viscous joint friction, an actuator dead-zone
//! and Gaussian torque noise) and stands in for the physical robot.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Rotor travel limit before the episode terminates (encoder cable), rad.
pub const ALPHA_LIMIT: f64 = PI;
/// Weight of the rotor-centering penalty in the reward.
pub const ROTOR_PENALTY: f64 = 0.1;
/// Weight of the voltage penalty in the reward.
pub const ACTION_PENALTY: f64 = 0.01;

/// Base pendulum state. Angles are unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    /// Rotor arm angle, rad.
    pub alpha: f64,
    /// Pendulum angle, rad. 0 hangs down, ±π is upright.
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
}

impl State {
    pub const DIM: usize = 4;

    pub fn new(alpha: f64, beta: f64, alpha_dot: f64, beta_dot: f64) -> Self {
        Self {
            alpha,
            beta,
            alpha_dot,
            beta_dot,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.alpha, self.beta, self.alpha_dot, self.beta_dot]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Componentwise sum with a state delta.
    pub fn offset(self, delta: [f64; 4]) -> Self {
        Self::new(
            self.alpha + delta[0],
            self.beta + delta[1],
            self.alpha_dot + delta[2],
            self.beta_dot + delta[3],
        )
    }

    /// Distance of the pendulum from upright, in [0, π].
    pub fn upright_error(&self) -> f64 {
        (PI - wrap_angle(self.beta).abs()).abs()
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

/// Physical constants of the rotary pendulum.
///
/// `j1` is the total rotor-axis inertia with the pendulum hanging (rotor arm
/// plus the pendulum mass at the arm tip); `j2` is the pendulum inertia about
/// its pivot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub m_p: f64,
    pub l_p: f64,
    pub l_r: f64,
    pub j1: f64,
    pub j2: f64,
    pub k_t: f64,
    pub k_m: f64,
    pub r_m: f64,
    pub g: f64,
    pub a_max: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        // Desktop rotary pendulum: 95 g / 85 mm rotor arm, 24 g / 129 mm pendulum.
        let m_p = 0.024;
        let l_p = 0.129;
        let l_r = 0.085;
        let m_r = 0.095;
        let j_r = m_r * l_r * l_r / 12.0;
        Self {
            m_p,
            l_p,
            l_r,
            j1: j_r + m_p * l_r * l_r,
            j2: 1.33e-4,
            k_t: 0.042,
            k_m: 0.042,
            r_m: 8.4,
            g: 9.81,
            a_max: 6.0,
        }
    }
}

impl PhysicalParams {
    /// Off-diagonal coupling magnitude ½ m_p L_r L_p.
    fn coupling(&self) -> f64 {
        0.5 * self.m_p * self.l_r * self.l_p
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m_p", self.m_p),
            ("l_p", self.l_p),
            ("l_r", self.l_r),
            ("j1", self.j1),
            ("j2", self.j2),
            ("k_t", self.k_t),
            ("k_m", self.k_m),
            ("r_m", self.r_m),
            ("g", self.g),
            ("a_max", self.a_max),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        let c = self.coupling();
        if self.j1 * self.j2 <= c * c {
            return Err(Error::InvalidParams(format!(
                "j1*j2 = {:e} must exceed (m_p l_r l_p / 2)^2 = {:e}",
                self.j1 * self.j2,
                c * c
            )));
        }
        Ok(())
    }
}

/// Mass matrix M(β), symmetric positive definite for valid params.
pub fn mass_matrix(beta: f64, p: &PhysicalParams) -> [[f64; 2]; 2] {
    let (s, c) = beta.sin_cos();
    let m11 = p.j1 + 0.25 * p.m_p * p.l_p * p.l_p * s * s;
    let m12 = p.coupling() * c;
    [[m11, m12], [m12, p.j2]]
}

/// Coriolis and centrifugal terms N(β, α̇, β̇).
pub fn coriolis_vector(beta: f64, alpha_dot: f64, beta_dot: f64, p: &PhysicalParams) -> [f64; 2] {
    let (s, c) = beta.sin_cos();
    let k = 0.5 * p.m_p * p.l_p * s;
    [
        k * (p.l_p * alpha_dot * beta_dot * c - p.l_r * beta_dot * beta_dot),
        k * (-0.5 * p.l_p * alpha_dot * alpha_dot * c),
    ]
}

/// Gravity terms G(β); the rotor component is always zero.
pub fn gravity_vector(beta: f64, p: &PhysicalParams) -> [f64; 2] {
    [0.0, 0.5 * p.m_p * p.g * p.l_p * beta.sin()]
}

/// DC motor torque for voltage `a` at rotor speed `alpha_dot`.
pub fn motor_torque(a: f64, alpha_dot: f64, p: &PhysicalParams) -> Result<f64> {
    if !(a.abs() <= p.a_max) {
        return Err(Error::ActionOutOfRange {
            action: a,
            limit: p.a_max,
        });
    }
    Ok(torque_unchecked(a, alpha_dot, p))
}

#[inline]
fn torque_unchecked(a: f64, alpha_dot: f64, p: &PhysicalParams) -> f64 {
    p.k_t * (-a - p.k_m * alpha_dot) / p.r_m
}

/// Solves M(β) q̈ = f − N − G with a 2×2 Cholesky factorization.
#[inline]
fn solve_accelerations(
    beta: f64,
    alpha_dot: f64,
    beta_dot: f64,
    force: [f64; 2],
    p: &PhysicalParams,
) -> Option<[f64; 2]> {
    let m = mass_matrix(beta, p);
    let n = coriolis_vector(beta, alpha_dot, beta_dot, p);
    let g = gravity_vector(beta, p);
    let r0 = force[0] - n[0] - g[0];
    let r1 = force[1] - n[1] - g[1];

    if !(m[0][0] > 0.0) {
        return None;
    }
    let l11 = m[0][0].sqrt();
    let l21 = m[1][0] / l11;
    let d = m[1][1] - l21 * l21;
    if !(d > 0.0) {
        return None;
    }
    let l22 = d.sqrt();
    let y0 = r0 / l11;
    let y1 = (r1 - l21 * y0) / l22;
    let x1 = y1 / l22;
    let x0 = (y0 - l21 * x1) / l11;
    Some([x0, x1])
}

/// Angular accelerations (α̈, β̈) of the frictionless prior.
///
/// When `torque_override` is set it replaces the motor torque τ(a) and `a`
/// is ignored.
pub fn accelerations(
    state: &State,
    a: f64,
    params: &PhysicalParams,
    torque_override: Option<f64>,
) -> Result<(f64, f64)> {
    let tau = match torque_override {
        Some(t) => t,
        None => motor_torque(a, state.alpha_dot, params)?,
    };
    let acc = solve_accelerations(state.beta, state.alpha_dot, state.beta_dot, [tau, 0.0], params)
        .ok_or_else(|| {
            let m = mass_matrix(state.beta, params);
            Error::SingularMassMatrix(m[0][0] * m[1][1] - m[0][1] * m[1][0])
        })?;
    Ok((acc[0], acc[1]))
}

/// Classic fourth-order Runge-Kutta step for a state-space field.
#[inline]
pub fn rk4_step<F>(x: [f64; 4], h: f64, f: F) -> [f64; 4]
where
    F: Fn(&[f64; 4]) -> [f64; 4],
{
    let add = |x: &[f64; 4], k: &[f64; 4], s: f64| {
        [x[0] + s * k[0], x[1] + s * k[1], x[2] + s * k[2], x[3] + s * k[3]]
    };
    let k1 = f(&x);
    let k2 = f(&add(&x, &k1, 0.5 * h));
    let k3 = f(&add(&x, &k2, 0.5 * h));
    let k4 = f(&add(&x, &k3, h));
    let mut out = x;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Generalized-force model shared by the prior and the plant.
#[derive(Debug, Clone, Copy)]
struct Forcing {
    /// Effective motor voltage; ignored when `torque` is set.
    voltage: f64,
    torque: Option<f64>,
    extra_torque: f64,
    b_r: f64,
    b_p: f64,
}

impl Forcing {
    fn prior(voltage: f64) -> Self {
        Self {
            voltage,
            torque: None,
            extra_torque: 0.0,
            b_r: 0.0,
            b_p: 0.0,
        }
    }
}

#[inline]
fn field(x: &[f64; 4], fc: &Forcing, p: &PhysicalParams) -> [f64; 4] {
    let tau = fc
        .torque
        .unwrap_or_else(|| torque_unchecked(fc.voltage, x[2], p))
        + fc.extra_torque;
    let force = [tau - fc.b_r * x[2], -fc.b_p * x[3]];
    let acc = solve_accelerations(x[1], x[2], x[3], force, p).unwrap_or([f64::NAN; 2]);
    [x[2], x[3], acc[0], acc[1]]
}

fn integrate(state: State, fc: Forcing, dt: f64, substeps: usize, p: &PhysicalParams) -> State {
    let h = dt / substeps as f64;
    let mut x = state.to_array();
    for _ in 0..substeps {
        x = rk4_step(x, h, |y| field(y, &fc, p));
    }
    State::from_array(x)
}

/// One RK4 step of the frictionless, noiseless prior with `a` held over `dt`.
pub fn step_prior(state: &State, a: f64, dt: f64, params: &PhysicalParams) -> State {
    integrate(*state, Forcing::prior(a), dt, 1, params)
}

/// The prior integrated over `dt` with `substeps` equal RK4 steps.
pub fn step_prior_substeps(
    state: &State,
    a: f64,
    dt: f64,
    substeps: usize,
    params: &PhysicalParams,
) -> State {
    integrate(*state, Forcing::prior(a), dt, substeps.max(1), params)
}

/// The prior with the motor torque replaced by a fixed value (conservation tests).
pub fn step_prior_with_torque(
    state: &State,
    torque: f64,
    dt: f64,
    params: &PhysicalParams,
) -> State {
    let fc = Forcing {
        torque: Some(torque),
        ..Forcing::prior(0.0)
    };
    integrate(*state, fc, dt, 1, params)
}

/// Mechanical energy ½ q̇ᵀ M(β) q̇ − ½ m_p g L_p cos β.
pub fn total_energy(state: &State, p: &PhysicalParams) -> f64 {
    let m = mass_matrix(state.beta, p);
    let (u, v) = (state.alpha_dot, state.beta_dot);
    let kinetic = 0.5 * (m[0][0] * u * u + 2.0 * m[0][1] * u * v + m[1][1] * v * v);
    kinetic - 0.5 * p.m_p * p.g * p.l_p * state.beta.cos()
}

/// Shaped swing-up reward, in [−1, 1].
pub fn reward(state: &State, a: f64, a_max: f64) -> f64 {
    let upright = 0.5 * (1.0 + (state.beta - PI).cos());
    let rotor = state.alpha / ALPHA_LIMIT;
    let effort = a / a_max;
    (upright - ROTOR_PENALTY * rotor * rotor - ACTION_PENALTY * effort * effort).max(-1.0)
}

/// Early-termination condition: rotor past its cable limit or a non-finite state.
pub fn is_terminal(state: &State) -> bool {
    !state.is_finite() || state.alpha.abs() > ALPHA_LIMIT
}

/// Simulated plant: the prior plus the effects it leaves out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    pub params: PhysicalParams,
    /// Control period, s.
    pub dt: f64,
    /// Viscous rotor friction, N·m·s/rad.
    pub b_r: f64,
    /// Viscous pendulum friction, N·m·s/rad.
    pub b_p: f64,
    /// Voltages with magnitude below this produce no torque, V.
    pub dead_zone: f64,
    /// Standard deviation of the additive torque disturbance, N·m.
    pub torque_noise_std: f64,
    pub integrator_substeps: usize,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            params: PhysicalParams::default(),
            dt: 0.02,
            b_r: 1e-4,
            b_p: 5e-5,
            dead_zone: 0.1,
            torque_noise_std: 1e-4,
            integrator_substeps: 4,
            seed: 0,
        }
    }
}

impl PlantConfig {
    /// Same timing and parameters, with every unmodeled effect removed.
    pub fn ideal(&self) -> Self {
        Self {
            b_r: 0.0,
            b_p: 0.0,
            dead_zone: 0.0,
            torque_noise_std: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {}", self.dt)));
        }
        if self.integrator_substeps == 0 {
            return Err(Error::InvalidParams("integrator_substeps must be >= 1".into()));
        }
        for (name, v) in [
            ("b_r", self.b_r),
            ("b_p", self.b_p),
            ("dead_zone", self.dead_zone),
            ("torque_noise_std", self.torque_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Outcome of one plant tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

/// Advances the plant by one control period.
///
/// The reward is scored on the pre-step state and the commanded voltage. The
/// torque disturbance is drawn once per tick and held across substeps.
pub fn plant_step<R: Rng + ?Sized>(
    state: &State,
    a: f64,
    cfg: &PlantConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    plant_step_inner(state, a, None, cfg, rng)
}

/// Plant tick with the motor torque forced to `torque` (dissipation tests).
pub fn plant_step_with_torque<R: Rng + ?Sized>(
    state: &State,
    torque: f64,
    cfg: &PlantConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    plant_step_inner(state, 0.0, Some(torque), cfg, rng)
}

fn plant_step_inner<R: Rng + ?Sized>(
    state: &State,
    a: f64,
    torque: Option<f64>,
    cfg: &PlantConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if !state.is_finite() {
        return Err(Error::NonFinite(format!("plant state {state:?}")));
    }
    if !(a.abs() <= cfg.params.a_max) {
        return Err(Error::ActionOutOfRange {
            action: a,
            limit: cfg.params.a_max,
        });
    }
    let voltage = if a.abs() < cfg.dead_zone { 0.0 } else { a };
    let extra_torque = if cfg.torque_noise_std > 0.0 {
        Normal::new(0.0, cfg.torque_noise_std)
            .expect("std validated non-negative")
            .sample(rng)
    } else {
        0.0
    };
    let fc = Forcing {
        voltage,
        torque,
        extra_torque,
        b_r: cfg.b_r,
        b_p: cfg.b_p,
    };
    let next = integrate(*state, fc, cfg.dt, cfg.integrator_substeps, &cfg.params);
    Ok(StepOutcome {
        next,
        reward: reward(state, a, cfg.params.a_max),
        done: is_terminal(&next),
    })
}

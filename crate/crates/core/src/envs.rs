//! Built-in environments: a sparse-reward cart-pole that starts balanced, and
//! a point mass that has to find a small goal region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn is_last(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    CartpoleSparse,
    Pointmass,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::CartpoleSparse => "cartpole_sparse",
            EnvKind::Pointmass => "pointmass",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole_sparse" => Ok(EnvKind::CartpoleSparse),
            "pointmass" => Ok(EnvKind::Pointmass),
            other => Err(Error::Config(format!("unknown env {other:?}"))),
        }
    }
}

/// Physical constants, recorded alongside run outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    pub gravity: f64,
    pub force_scale: f64,
    pub dt: f64,
    pub x_limit: f64,
    pub upright_cos: f64,
    pub max_steps: usize,
}

pub const CARTPOLE: CartPoleParams = CartPoleParams {
    cart_mass: 1.0,
    pole_mass: 0.1,
    half_length: 0.5,
    gravity: 9.81,
    force_scale: 10.0,
    dt: 0.02,
    x_limit: 1.8,
    upright_cos: 0.995,
    max_steps: 1000,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointMassParams {
    pub drag: f64,
    pub dt: f64,
    pub goal_radius: f64,
    pub init_range: f64,
    pub max_steps: usize,
}

pub const POINTMASS: PointMassParams = PointMassParams {
    drag: 0.1,
    dt: 0.02,
    goal_radius: 0.1,
    init_range: 0.25,
    max_steps: 500,
};

/// Frictionless cart-pole; `theta = 0` is upright.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPole {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    steps: usize,
}

impl CartPole {
    pub fn new() -> Self {
        Self {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
        }
    }

    pub fn set_state(&mut self, x: f64, x_dot: f64, theta: f64, theta_dot: f64) {
        self.x = x;
        self.x_dot = x_dot;
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.steps = 0;
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.x,
            self.theta.cos(),
            self.theta.sin(),
            self.x_dot,
            self.theta_dot,
        ]
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rng.random_range(-0.05..=0.05);
        let theta = rng.random_range(-0.05..=0.05);
        self.set_state(x, 0.0, theta, 0.0);
        self.observation()
    }

    /// Angular and linear accelerations under horizontal force `force`.
    fn accelerations(&self, force: f64) -> (f64, f64) {
        let p = CARTPOLE;
        let total = p.cart_mass + p.pole_mass;
        let ml = p.pole_mass * p.half_length;
        let (sin, cos) = self.theta.sin_cos();
        let temp = (force + ml * self.theta_dot * self.theta_dot * sin) / total;
        let theta_acc = (p.gravity * sin - cos * temp)
            / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
        let x_acc = temp - ml * theta_acc * cos / total;
        (x_acc, theta_acc)
    }

    /// Kinetic plus potential energy, with the pole as a uniform rod.
    pub fn energy(&self) -> f64 {
        let p = CARTPOLE;
        let l = p.half_length;
        let m = p.pole_mass;
        let cos = self.theta.cos();
        let cart = 0.5 * p.cart_mass * self.x_dot * self.x_dot;
        let pole = 0.5
            * m
            * (self.x_dot * self.x_dot
                + 2.0 * l * cos * self.x_dot * self.theta_dot
                + l * l * self.theta_dot * self.theta_dot);
        let spin = 0.5 * (m * l * l / 3.0) * self.theta_dot * self.theta_dot;
        cart + pole + spin + m * p.gravity * l * cos
    }

    /// Semi-implicit Euler: velocities first, then positions with the new velocities.
    fn integrate(&mut self, force: f64, dt: f64) {
        let (x_acc, theta_acc) = self.accelerations(force);
        self.x_dot += dt * x_acc;
        self.x += dt * self.x_dot;
        self.theta_dot += dt * theta_acc;
        self.theta += dt * self.theta_dot;
    }

    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let p = CARTPOLE;
        self.integrate(p.force_scale * action[0].clamp(-1.0, 1.0), p.dt);
        self.steps += 1;
        let terminated = self.x.abs() >= p.x_limit;
        let reward = if self.theta.cos() > p.upright_cos && self.x.abs() < p.x_limit {
            1.0
        } else {
            0.0
        };
        StepResult {
            state: self.observation(),
            reward,
            terminated,
            truncated: !terminated && self.steps >= p.max_steps,
        }
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

/// Planar point mass with viscous drag; the goal is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    steps: usize,
}

impl PointMass {
    pub fn new() -> Self {
        Self {
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
        }
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.steps = 0;
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = POINTMASS.init_range;
        let pos = [rng.random_range(-r..=r), rng.random_range(-r..=r)];
        self.set_state(pos, [0.0; 2]);
        self.observation()
    }

    pub fn in_goal(&self) -> bool {
        self.pos[0].hypot(self.pos[1]) < POINTMASS.goal_radius
    }

    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let p = POINTMASS;
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            self.vel[i] += p.dt * (a - p.drag * self.vel[i]);
            self.pos[i] += p.dt * self.vel[i];
        }
        self.steps += 1;
        StepResult {
            state: self.observation(),
            reward: if self.in_goal() { 1.0 } else { 0.0 },
            terminated: false,
            truncated: self.steps >= p.max_steps,
        }
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

/// Either built-in environment.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    CartPole(CartPole),
    PointMass(PointMass),
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::CartpoleSparse => Env::CartPole(CartPole::new()),
            EnvKind::Pointmass => Env::PointMass(PointMass::new()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::CartPole(_) => EnvKind::CartpoleSparse,
            Env::PointMass(_) => EnvKind::Pointmass,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::CartPole(_) => 5,
            Env::PointMass(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::CartPole(_) => 1,
            Env::PointMass(_) => 2,
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            Env::CartPole(_) => CARTPOLE.max_steps,
            Env::PointMass(_) => POINTMASS.max_steps,
        }
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            Env::CartPole(e) => e.reset(seed),
            Env::PointMass(e) => e.reset(seed),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.action_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let r = match self {
            Env::CartPole(e) => e.step(action),
            Env::PointMass(e) => e.step(action),
        };
        if r.state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} state {:?}",
                self.kind().name(),
                r.state
            )));
        }
        Ok(r)
    }
}

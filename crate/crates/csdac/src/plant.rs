//! Cart-pole plant: nonlinear simulation, zero-order hold, terminal and
//! constraint predicates, and the discrete linear model used by the
//! model-based baseline.
//!
//! The continuous plant is the classic cart-pole. Control decisions arrive
//! every `control_period` seconds; between decisions the applied force is held
//! constant and the dynamics are integrated with explicit Euler substeps.

use crate::error::{Error, Result};
use nalgebra::{Matrix2x4, Matrix4, Vector4};

/// Full plant state: cart position/velocity and pole angle/velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    /// Cart position in meters (x_d).
    pub x_d: f64,
    /// Cart velocity in m/s.
    pub x_d_dot: f64,
    /// Pole angle from vertical in radians (x_r).
    pub x_r: f64,
    /// Pole angular velocity in rad/s.
    pub x_r_dot: f64,
}

impl PlantState {
    pub const ZERO: PlantState = PlantState {
        x_d: 0.0,
        x_d_dot: 0.0,
        x_r: 0.0,
        x_r_dot: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_d, self.x_d_dot, self.x_r, self.x_r_dot]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        PlantState {
            x_d: a[0],
            x_d_dot: a[1],
            x_r: a[2],
            x_r_dot: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Physical and integration parameters of the cart-pole.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Cart mass in kg.
    pub cart_mass: f64,
    /// Pole mass in kg.
    pub pole_mass: f64,
    /// Half of the pole length in meters.
    pub pole_half_length: f64,
    /// Gravitational acceleration in m/s^2.
    pub gravity: f64,
    /// Actuator force bound in newtons; commands satisfy |u| <= u_max.
    pub u_max: f64,
    /// Control period tau_s in seconds.
    pub control_period: f64,
    /// Number of explicit Euler substeps per control period.
    pub substeps: u32,
    /// Standard deviation of the additive force disturbance in newtons.
    pub disturbance_std: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.8,
            u_max: 10.0,
            control_period: 1.0 / 12.0,
            substeps: 4,
            disturbance_std: 0.05,
        }
    }
}

/// Pole-angle bound in radians beyond which the episode terminates.
pub const ANGLE_LIMIT: f64 = 0.261;
/// Cart-position bound in meters beyond which the episode terminates.
pub const POSITION_LIMIT: f64 = 2.4;
/// Cart-position threshold for the safety constraint C(s) = max(|x_d| - 1.1, 0).
pub const CONSTRAINT_POSITION: f64 = 1.1;

/// A control command as it leaves the controller: a force and an update flag.
/// When `beta` is false the network transmits nothing and the actuator keeps
/// its previous force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorCommand {
    pub u: f64,
    pub beta: bool,
}

/// Zero-order hold: the actuator input actually applied given the candidate
/// force, the previously applied force, and whether an update was delivered.
pub fn apply_zoh(u_candidate: f64, u_prev: f64, beta: bool) -> f64 {
    if beta {
        u_candidate
    } else {
        u_prev
    }
}

/// True if the state violates the pole-angle or cart-position bounds.
pub fn is_terminal(state: &PlantState) -> bool {
    state.x_r.abs() > ANGLE_LIMIT || state.x_d.abs() > POSITION_LIMIT
}

/// Safety constraint value C(s) = max(|x_d| - 1.1, 0); nonnegative, zero inside
/// the safe region.
pub fn constraint_value(state: &PlantState) -> f64 {
    (state.x_d.abs() - CONSTRAINT_POSITION).max(0.0)
}

/// Advance the plant by one control period under a constant applied force.
///
/// The total force on the cart is `command_force + disturbance`, held for the
/// whole period, integrated with `params.substeps` explicit Euler substeps.
/// Deterministic given its inputs. Rejects non-finite inputs.
pub fn step_plant(
    state: &PlantState,
    command_force: f64,
    disturbance: f64,
    params: &PlantParams,
) -> Result<PlantState> {
    if !state.is_finite() {
        return Err(Error::NonFinite {
            context: "step_plant state",
        });
    }
    if !command_force.is_finite() || !disturbance.is_finite() {
        return Err(Error::NonFinite {
            context: "step_plant force",
        });
    }
    let force = command_force + disturbance;
    let dt = params.control_period / params.substeps as f64;
    let total_mass = params.cart_mass + params.pole_mass;
    let pole_mass_length = params.pole_mass * params.pole_half_length;

    let mut x = state.x_d;
    let mut x_dot = state.x_d_dot;
    let mut theta = state.x_r;
    let mut theta_dot = state.x_r_dot;
    for _ in 0..params.substeps {
        let sin_t = theta.sin();
        let cos_t = theta.cos();
        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin_t) / total_mass;
        let theta_acc = (params.gravity * sin_t - cos_t * temp)
            / (params.pole_half_length
                * (4.0 / 3.0 - params.pole_mass * cos_t * cos_t / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;
        x += dt * x_dot;
        x_dot += dt * x_acc;
        theta += dt * theta_dot;
        theta_dot += dt * theta_acc;
    }
    Ok(PlantState {
        x_d: x,
        x_d_dot: x_dot,
        x_r: theta,
        x_r_dot: theta_dot,
    })
}

/// Discrete-time linear model x[k+1] = A x[k] + B u[k], y = C x, used by the
/// model-based baseline controller.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a_mat: Matrix4<f64>,
    pub b_mat: Vector4<f64>,
    pub c_mat: Matrix2x4<f64>,
}

impl Default for LinearModel {
    fn default() -> Self {
        LinearModel {
            a_mat: Matrix4::new(
                1.0, 0.1, -0.0166, -0.0005, //
                0.0, 1.0, -0.3374, -0.0166, //
                0.0, 0.0, 1.0996, 0.1033, //
                0.0, 0.0, 2.0247, 1.0996,
            ),
            b_mat: Vector4::new(0.0045, 0.0896, -0.0068, -0.1377),
            c_mat: Matrix2x4::new(
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ),
        }
    }
}

/// One step of the discrete linear model: A x + B u.
pub fn linear_model_step(model: &LinearModel, x: &[f64; 4], u: f64) -> [f64; 4] {
    let xv = Vector4::new(x[0], x[1], x[2], x[3]);
    let next = model.a_mat * xv + model.b_mat * u;
    [next[0], next[1], next[2], next[3]]
}

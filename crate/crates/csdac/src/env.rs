//! Joint control/network environment: composes the cart-pole plant with the
//! OFDMA downlink into the two coupled decision processes used for training.
//!
//! Per control step k the base module picks (beta[k], u[k]) from the plant
//! observation, the first module picks a subcarrier/power allocation, and the
//! environment then scores QoS, applies the zero-order hold (honoring
//! delivery in coupled mode), advances the plant under a random force
//! disturbance, and moves the broadband users.
//!
//! Timing convention: the first-module state returned by a step is the QoS
//! outcome of the allocation decided at that step; it is what the allocator
//! observes at step k+1.

use crate::error::Result;
use crate::network::{
    move_embb_users, qos_status, total_power, Allocation, ChannelState, NetworkConfig, QosStatus,
};
use crate::plant::{
    apply_zoh, constraint_value, is_terminal, step_plant, PlantParams, PlantState,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;

/// Plant observation fed to the base module (full state).
pub type BaseState = [f64; 4];

/// Network observation fed to the first module: per-user QoS flags as 0/1.
pub type FirstState = Vec<f64>;

/// Reward weights of the two modules.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RewardParams {
    /// Transmission penalty on beta in the base reward.
    pub mu1: f64,
    /// Flat penalty when the allocation exceeds the power budget.
    pub mu2: f64,
    /// Weight per satisfied user in the first reward.
    pub mu3: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            mu1: 0.3,
            mu2: 10.0,
            mu3: 0.5,
        }
    }
}

/// Whether control updates are delivered unconditionally (decoupled training)
/// or only when the URLLC link actually sustains the packet (coupled).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryMode {
    Decoupled,
    Coupled,
}

impl std::str::FromStr for DeliveryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "decoupled" => Ok(DeliveryMode::Decoupled),
            "coupled" => Ok(DeliveryMode::Coupled),
            other => Err(format!("unknown mode '{other}' (expected decoupled|coupled)")),
        }
    }
}

/// Base reward: r_ctrl - mu1 * beta. r_ctrl is +1 per non-terminal step.
pub fn base_reward(r_ctrl: f64, beta: bool, mu1: f64) -> f64 {
    r_ctrl - mu1 * (beta as u8 as f64)
}

/// First-module reward: a flat -mu2 when the radiated power exceeds the
/// budget, otherwise mu3 per satisfied user minus the total power draw.
pub fn first_reward(
    alloc: &Allocation,
    qos: &QosStatus,
    config: &NetworkConfig,
    rewards: &RewardParams,
) -> f64 {
    if alloc.radiated_power_w() > config.p_bs_max_w {
        -rewards.mu2
    } else {
        -total_power(alloc, config) + rewards.mu3 * qos.count() as f64
    }
}

// ---------------------------------------------------------------------------
// Augmented states
// ---------------------------------------------------------------------------

/// The four augmented views of the joint process used by the double
/// actor-critic: each module's decision is exposed either as the action of a
/// high MDP (conditioning on the previous decision) or as part of the state
/// of a low MDP.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentedState {
    /// High base view: (beta[k-1], s_c[k]).
    H0 { beta_prev: bool, s_c: BaseState },
    /// Low base view: (s_c[k], beta[k]).
    L0 { s_c: BaseState, beta: bool },
    /// High first view: (A[k-1], s_N[k]).
    H1 {
        a_prev: Array2<bool>,
        s_n: FirstState,
    },
    /// Low first view: (s_N[k], A[k]).
    L1 { s_n: FirstState, a: Array2<bool> },
}

impl AugmentedState {
    /// Flatten to an f64 feature vector. Boolean entries become 0/1; the
    /// assignment matrix is packed row-major (user-major).
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            AugmentedState::H0 { beta_prev, s_c } => {
                let mut v = Vec::with_capacity(5);
                v.push(*beta_prev as u8 as f64);
                v.extend_from_slice(s_c);
                v
            }
            AugmentedState::L0 { s_c, beta } => {
                let mut v = Vec::with_capacity(5);
                v.extend_from_slice(s_c);
                v.push(*beta as u8 as f64);
                v
            }
            AugmentedState::H1 { a_prev, s_n } => {
                let mut v = Vec::with_capacity(a_prev.len() + s_n.len());
                v.extend(a_prev.iter().map(|&b| b as u8 as f64));
                v.extend_from_slice(s_n);
                v
            }
            AugmentedState::L1 { s_n, a } => {
                let mut v = Vec::with_capacity(a.len() + s_n.len());
                v.extend_from_slice(s_n);
                v.extend(a.iter().map(|&b| b as u8 as f64));
                v
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

/// Everything the environment reports about one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Plant state after the step (the base state at k+1).
    pub base_state: BaseState,
    /// QoS outcome of this step's allocation (the first state at k+1).
    pub first_state: FirstState,
    pub r0: f64,
    pub r1: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Diagnostic detail of one step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    /// The update flag after delivery gating.
    pub effective_beta: bool,
    /// QoS flags of every user under this step's allocation.
    pub qos: QosStatus,
    /// Per-user achieved rates in bit/s (finite-blocklength for URLLC rows).
    pub rates: Vec<f64>,
    /// Radiated power sum(A . P) in watts.
    pub radiated_w: f64,
    /// Total downlink power including circuit draw, in watts.
    pub total_power_w: f64,
    /// Constraint value of the successor plant state.
    pub constraint_next: f64,
    /// Force actually applied to the plant this step.
    pub u_applied: f64,
}

/// The joint environment. Single-writer: one instance is owned by one rollout
/// at a time; parallel collection uses independent instances with their own
/// seeds.
#[derive(Debug, Clone)]
pub struct JointEnv {
    pub plant_params: PlantParams,
    pub net_config: NetworkConfig,
    pub rewards: RewardParams,
    pub mode: DeliveryMode,
    rng: ChaCha20Rng,
    plant: PlantState,
    channel: ChannelState,
    u_prev: f64,
    beta_prev: bool,
    a_prev: Array2<bool>,
    s_n: FirstState,
    step_index: u64,
}

impl JointEnv {
    /// Build and reset an environment from its parameter blocks.
    pub fn new(
        plant_params: PlantParams,
        net_config: NetworkConfig,
        rewards: RewardParams,
        mode: DeliveryMode,
        seed: u64,
    ) -> Result<Self> {
        net_config.validate()?;
        let n = net_config.n_users();
        let j = net_config.subcarriers;
        let mut env = JointEnv {
            plant_params,
            net_config,
            rewards,
            mode,
            rng: ChaCha20Rng::seed_from_u64(seed),
            plant: PlantState::ZERO,
            channel: ChannelState::new(vec![25.0; n], &NetworkConfig::default())?,
            u_prev: 0.0,
            beta_prev: false,
            a_prev: Array2::from_elem((n, j), false),
            s_n: vec![0.0; n],
            step_index: 0,
        };
        env.reset(seed)?;
        Ok(env)
    }

    /// Reset to the initial distribution: plant state uniform in
    /// [-0.05, 0.05]^4, user distances uniform in [d_min, d_max], no prior
    /// update, force, or allocation. Deterministic for a fixed seed.
    pub fn reset(&mut self, seed: u64) -> Result<(BaseState, FirstState, ChannelState)> {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        self.plant = PlantState::from_array([
            self.rng.gen_range(-0.05..0.05),
            self.rng.gen_range(-0.05..0.05),
            self.rng.gen_range(-0.05..0.05),
            self.rng.gen_range(-0.05..0.05),
        ]);
        let n = self.net_config.n_users();
        let distances: Vec<f64> = (0..n)
            .map(|_| {
                self.rng
                    .gen_range(self.net_config.d_min_m..self.net_config.d_max_m)
            })
            .collect();
        self.channel = ChannelState::new(distances, &self.net_config)?;
        self.u_prev = 0.0;
        self.beta_prev = false;
        self.a_prev = Array2::from_elem((n, self.net_config.subcarriers), false);
        let empty = Allocation::empty(n, self.net_config.subcarriers);
        self.s_n = qos_status(&empty, &self.channel, false, &self.net_config)?.as_f64();
        self.step_index = 0;
        Ok((self.plant.as_array(), self.s_n.clone(), self.channel.clone()))
    }

    pub fn base_state(&self) -> BaseState {
        self.plant.as_array()
    }

    pub fn first_state(&self) -> &FirstState {
        &self.s_n
    }

    pub fn plant_state(&self) -> &PlantState {
        &self.plant
    }

    pub fn channel(&self) -> &ChannelState {
        &self.channel
    }

    pub fn beta_prev(&self) -> bool {
        self.beta_prev
    }

    pub fn u_prev(&self) -> f64 {
        self.u_prev
    }

    pub fn prev_assignment(&self) -> &Array2<bool> {
        &self.a_prev
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Constraint value of the current plant state.
    pub fn constraint(&self) -> f64 {
        constraint_value(&self.plant)
    }

    /// Advance one control period under the given joint action.
    ///
    /// `u_candidate` saturates at the actuator bound. In coupled mode a
    /// requested update is dropped when any URLLC user misses its rate, and
    /// the hold keeps the previous force.
    pub fn step(&mut self, beta: bool, u_candidate: f64, alloc: &Allocation) -> Result<StepOutcome> {
        alloc.validate(&self.net_config)?;
        let cfg = &self.net_config;
        let qos = qos_status(alloc, &self.channel, beta, cfg)?;

        let mut rates = Vec::with_capacity(cfg.n_users());
        for n in 0..cfg.n_users() {
            let assigned: Vec<bool> = alloc.assignment.row(n).iter().copied().collect();
            let powers: Vec<f64> = alloc.power.row(n).iter().copied().collect();
            let gains: Vec<f64> = self.channel.gains.row(n).iter().copied().collect();
            let r = if n < cfg.n_urllc {
                crate::network::urllc_rate(&assigned, &powers, &gains, cfg)
            } else {
                crate::network::embb_rate(&assigned, &powers, &gains, cfg)
            };
            rates.push(r);
        }

        let delivered = qos.satisfied[..cfg.n_urllc].iter().all(|&s| s);
        let effective_beta = match self.mode {
            DeliveryMode::Decoupled => beta,
            DeliveryMode::Coupled => beta && delivered,
        };

        let u_cmd = u_candidate.clamp(-self.plant_params.u_max, self.plant_params.u_max);
        let u_applied = apply_zoh(u_cmd, self.u_prev, effective_beta);
        let disturbance = if self.plant_params.disturbance_std > 0.0 {
            let normal = rand_distr::Normal::new(0.0, self.plant_params.disturbance_std)
                .expect("valid disturbance std");
            normal.sample(&mut self.rng)
        } else {
            0.0
        };
        let next = step_plant(&self.plant, u_applied, disturbance, &self.plant_params)?;
        let done = is_terminal(&next);

        let r_ctrl = if done { 0.0 } else { 1.0 };
        let r0 = base_reward(r_ctrl, beta, self.rewards.mu1);
        let r1 = first_reward(alloc, &qos, cfg, &self.rewards);

        let radiated = alloc.radiated_power_w();
        let info = StepInfo {
            effective_beta,
            qos: qos.clone(),
            rates,
            radiated_w: radiated,
            total_power_w: total_power(alloc, cfg),
            constraint_next: constraint_value(&next),
            u_applied,
        };

        // Commit state for step k+1: users move, the hold and histories roll.
        move_embb_users(&mut self.channel.distances, cfg, &mut self.rng);
        self.channel.refresh(cfg)?;
        self.plant = next;
        self.u_prev = u_applied;
        self.beta_prev = beta;
        self.a_prev.assign(&alloc.assignment);
        self.s_n = qos.as_f64();
        self.step_index += 1;

        Ok(StepOutcome {
            base_state: next.as_array(),
            first_state: self.s_n.clone(),
            r0,
            r1,
            done,
            info,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_env(mode: DeliveryMode, seed: u64) -> JointEnv {
        JointEnv::new(
            PlantParams::default(),
            NetworkConfig::default(),
            RewardParams::default(),
            mode,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_in_range() {
        let mut env = small_env(DeliveryMode::Decoupled, 42);
        let (s0, f0, c0) = env.reset(42).unwrap();
        let (s1, f1, c1) = env.reset(42).unwrap();
        assert_eq!(s0, s1);
        assert_eq!(f0, f1);
        assert_eq!(c0.distances, c1.distances);
        assert!(!crate::plant::is_terminal(env.plant_state()));
        for v in s0 {
            assert!((-0.05..0.05).contains(&v));
        }
        for d in &env.channel().distances {
            assert!((10.0..50.0).contains(d));
        }
        // Empty initial allocation: eMBB users start unsatisfied, URLLC users
        // vacuously satisfied because no update is pending.
        assert_eq!(f0[0], 1.0);
        assert!(f0[1..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn trajectories_are_bit_reproducible() {
        let mut a = small_env(DeliveryMode::Decoupled, 7);
        let mut b = small_env(DeliveryMode::Decoupled, 7);
        let alloc = Allocation::empty(9, 8);
        for k in 0..50 {
            let beta = k % 3 == 0;
            let u = (k as f64 * 0.37).sin() * 5.0;
            let oa = a.step(beta, u, &alloc).unwrap();
            let ob = b.step(beta, u, &alloc).unwrap();
            assert_eq!(oa.base_state, ob.base_state);
            assert_eq!(oa.r0.to_bits(), ob.r0.to_bits());
            assert_eq!(oa.r1.to_bits(), ob.r1.to_bits());
            if oa.done {
                a.reset(k).unwrap();
                b.reset(k).unwrap();
            }
        }
    }

    #[test]
    fn base_reward_examples() {
        assert_eq!(base_reward(1.0, false, 0.5), 1.0);
        assert_eq!(base_reward(1.0, true, 0.5), 0.5);
        assert_eq!(base_reward(1.0, true, 0.0), 1.0);
        assert!((base_reward(1.0, true, 0.3) - 0.7).abs() < 1e-15);
        assert_eq!(base_reward(0.0, false, 0.3), 0.0);
    }

    #[test]
    fn urllc_distance_is_constant_over_an_episode() {
        let mut env = small_env(DeliveryMode::Decoupled, 5);
        let d0 = env.channel().distances[0];
        let alloc = Allocation::empty(9, 8);
        for k in 0..300 {
            let out = env.step(false, 0.0, &alloc).unwrap();
            assert_eq!(env.channel().distances[0], d0);
            if out.done {
                break;
            }
            let _ = k;
        }
    }

    #[test]
    fn first_reward_examples() {
        let cfg = NetworkConfig::default();
        let rw = RewardParams::default();
        let empty = Allocation::empty(cfg.n_users(), cfg.subcarriers);
        // All users unmet: exactly the circuit draw.
        let none = QosStatus {
            satisfied: vec![false; cfg.n_users()],
        };
        assert!((first_reward(&empty, &none, &cfg, &rw) + 0.1).abs() < 1e-15);
        // One vacuously satisfied URLLC user adds mu3.
        let one = QosStatus {
            satisfied: std::iter::once(true)
                .chain(std::iter::repeat(false).take(cfg.n_embb))
                .collect(),
        };
        assert!((first_reward(&empty, &one, &cfg, &rw) + 0.1 - 0.5).abs() < 1e-15);
        // Over the power cap: flat -mu2 regardless of QoS.
        let mut hot = Allocation::empty(cfg.n_users(), cfg.subcarriers);
        hot.assignment[(0, 0)] = true;
        hot.power[(0, 0)] = cfg.p_bs_max_w + 1.0;
        assert_eq!(first_reward(&hot, &one, &cfg, &rw), -rw.mu2);
        // Exactly at the cap the penalty branch does not fire: the reward is
        // the ordinary power-minus-service formula, not the flat -mu2.
        hot.power[(0, 0)] = cfg.p_bs_max_w;
        let expected = -total_power(&hot, &cfg) + rw.mu3;
        assert_eq!(first_reward(&hot, &one, &cfg, &rw), expected);
    }

    #[test]
    fn coupled_mode_drops_updates_when_urllc_misses() {
        let mut env = small_env(DeliveryMode::Coupled, 3);
        // Empty allocation cannot carry the control packet.
        let alloc = Allocation::empty(9, 8);
        let before = env.u_prev();
        let out = env.step(true, 8.0, &alloc).unwrap();
        assert!(!out.info.effective_beta);
        assert_eq!(out.info.u_applied, before);
        // In decoupled mode the same step applies the new force.
        let mut env = small_env(DeliveryMode::Decoupled, 3);
        let out = env.step(true, 8.0, &alloc).unwrap();
        assert!(out.info.effective_beta);
        assert_eq!(out.info.u_applied, 8.0);
    }

    #[test]
    fn hold_keeps_previous_force_without_update() {
        let mut env = small_env(DeliveryMode::Decoupled, 11);
        let alloc = Allocation::empty(9, 8);
        let out = env.step(true, 4.5, &alloc).unwrap();
        assert_eq!(out.info.u_applied, 4.5);
        let out = env.step(false, -9.9, &alloc).unwrap();
        assert_eq!(out.info.u_applied, 4.5, "hold must ignore the candidate");
    }

    #[test]
    fn actuator_saturates_at_u_max() {
        let mut env = small_env(DeliveryMode::Decoupled, 13);
        let alloc = Allocation::empty(9, 8);
        let out = env.step(true, 25.0, &alloc).unwrap();
        assert_eq!(out.info.u_applied, 10.0);
    }

    #[test]
    fn augmented_state_packing_matches_dimensions() {
        let h0 = AugmentedState::H0 {
            beta_prev: false,
            s_c: [0.0; 4],
        };
        assert_eq!(h0.flatten(), vec![0.0; 5]);
        let h0 = AugmentedState::H0 {
            beta_prev: true,
            s_c: [0.1, 0.2, 0.3, 0.4],
        };
        assert_eq!(h0.flatten(), vec![1.0, 0.1, 0.2, 0.3, 0.4]);
        let l0 = AugmentedState::L0 {
            s_c: [0.1, 0.2, 0.3, 0.4],
            beta: true,
        };
        assert_eq!(l0.flatten(), vec![0.1, 0.2, 0.3, 0.4, 1.0]);
        let (n, j) = (9, 8);
        let h1 = AugmentedState::H1 {
            a_prev: Array2::from_elem((n, j), false),
            s_n: vec![0.0; n],
        };
        assert_eq!(h1.flatten().len(), n * j + n);
        let l1 = AugmentedState::L1 {
            s_n: vec![0.0; n],
            a: Array2::from_elem((n, j), false),
        };
        assert_eq!(l1.flatten().len(), n + n * j);
        // Order: H1 packs the assignment first, L1 packs the status first.
        let mut a = Array2::from_elem((2, 2), false);
        a[(0, 0)] = true;
        let h1 = AugmentedState::H1 {
            a_prev: a.clone(),
            s_n: vec![0.5, 0.25],
        };
        assert_eq!(h1.flatten(), vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.25]);
        let l1 = AugmentedState::L1 {
            s_n: vec![0.5, 0.25],
            a,
        };
        assert_eq!(l1.flatten(), vec![0.5, 0.25, 1.0, 0.0, 0.0, 0.0]);
    }

    proptest! {
        // Reward bounds hold for arbitrary actions.
        #[test]
        fn reward_bounds(seed in 0u64..500, beta in any::<bool>(), u in -20.0f64..20.0) {
            let mut env = small_env(DeliveryMode::Decoupled, seed);
            let cfg = env.net_config.clone();
            let mut alloc = Allocation::empty(cfg.n_users(), cfg.subcarriers);
            // Assign a couple of subcarriers with in-cap powers.
            alloc.assignment[(0, 0)] = true;
            alloc.power[(0, 0)] = (seed as f64 % 7.0) * 0.4;
            alloc.assignment[(3, 5)] = true;
            alloc.power[(3, 5)] = 0.01;
            let out = env.step(beta, u, &alloc).unwrap();
            prop_assert!(out.r0 <= 1.0);
            prop_assert!(out.r1 <= env.rewards.mu3 * cfg.n_users() as f64);
        }
    }
}

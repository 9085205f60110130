//! Shared fixtures for integration tests.
//!
//! The centrepiece is a small tabular MDP whose action factors into a
//! high-level option and a low-level primitive action, mirroring the
//! cascade structure of the joint environment. Three return estimators
//! are coded independently against the same tables so that agreement
//! between them exercises the bookkeeping, not a shared code path:
//!
//! * [`simulate_native`] samples the factored policy directly,
//! * [`simulate_high`] first marginalises the low-level policy into the
//!   transition and reward tables and then simulates an option-only MDP,
//! * [`simulate_low`] augments the state with the chosen option and
//!   simulates a primitive-action MDP over the augmented chain.
//!
//! All three views describe the same trajectory measure, so their Monte
//! Carlo return estimates must agree statistically and their exact
//! backward-induction values must agree to floating-point accuracy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const N_STATES: usize = 4;
pub const N_OPTIONS: usize = 2;
pub const N_ACTIONS: usize = 2;

/// Tabular MDP with a factored policy pi(h, l | s) = pi_h(h | s) * pi_l(l | s, h).
pub struct TabularMdp {
    /// transition[s][h][l][s2] = P(s2 | s, h, l); each row sums to one.
    pub transition: [[[[f64; N_STATES]; N_ACTIONS]; N_OPTIONS]; N_STATES],
    /// reward[s][h][l] is the deterministic one-step reward.
    pub reward: [[[f64; N_ACTIONS]; N_OPTIONS]; N_STATES],
    /// pi_h[s][h] = probability of option h in state s.
    pub pi_h: [[f64; N_OPTIONS]; N_STATES],
    /// pi_l[s][h][l] = probability of action l given state s and option h.
    pub pi_l: [[[f64; N_ACTIONS]; N_OPTIONS]; N_STATES],
    /// Discount factor applied per step.
    pub gamma: f64,
    /// Fixed episode length in steps.
    pub horizon: usize,
    /// Deterministic initial state.
    pub start_state: usize,
}

/// One recorded step of a native trajectory.
#[derive(Clone, Copy, Debug)]
pub struct NativeStep {
    pub state: usize,
    pub option: usize,
    pub action: usize,
    pub reward: f64,
}

/// Sample mean and standard error of a batch of episode returns.
#[derive(Clone, Copy, Debug)]
pub struct ReturnStats {
    pub mean: f64,
    pub std_error: f64,
    pub episodes: usize,
}

impl ReturnStats {
    fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        ReturnStats {
            mean,
            std_error: (var / n as f64).sqrt(),
            episodes: n,
        }
    }

    /// True when the two means differ by at most two pooled standard errors.
    pub fn agrees_with(&self, other: &ReturnStats) -> bool {
        let pooled = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        (self.mean - other.mean).abs() <= 2.0 * pooled
    }
}

/// Hand-written 4-state, 2-option, 2-action instance with irregular
/// probabilities so that symmetry cannot mask indexing mistakes.
pub fn fixture() -> TabularMdp {
    let transition = [
        // state 0
        [
            [
                [0.60, 0.20, 0.15, 0.05],
                [0.10, 0.50, 0.30, 0.10],
            ],
            [
                [0.25, 0.25, 0.25, 0.25],
                [0.05, 0.15, 0.40, 0.40],
            ],
        ],
        // state 1
        [
            [
                [0.30, 0.40, 0.20, 0.10],
                [0.45, 0.05, 0.35, 0.15],
            ],
            [
                [0.20, 0.30, 0.10, 0.40],
                [0.35, 0.35, 0.20, 0.10],
            ],
        ],
        // state 2
        [
            [
                [0.10, 0.10, 0.60, 0.20],
                [0.25, 0.45, 0.10, 0.20],
            ],
            [
                [0.50, 0.10, 0.20, 0.20],
                [0.15, 0.25, 0.35, 0.25],
            ],
        ],
        // state 3
        [
            [
                [0.05, 0.30, 0.25, 0.40],
                [0.40, 0.20, 0.20, 0.20],
            ],
            [
                [0.30, 0.20, 0.30, 0.20],
                [0.10, 0.60, 0.10, 0.20],
            ],
        ],
    ];
    let reward = [
        [[1.0, -0.5], [0.3, 2.0]],
        [[-1.0, 0.8], [1.5, -0.2]],
        [[0.4, 0.4], [-0.7, 1.1]],
        [[2.2, -1.3], [0.0, 0.9]],
    ];
    let pi_h = [
        [0.70, 0.30],
        [0.40, 0.60],
        [0.55, 0.45],
        [0.25, 0.75],
    ];
    let pi_l = [
        [[0.80, 0.20], [0.35, 0.65]],
        [[0.50, 0.50], [0.10, 0.90]],
        [[0.65, 0.35], [0.45, 0.55]],
        [[0.30, 0.70], [0.90, 0.10]],
    ];
    TabularMdp {
        transition,
        reward,
        pi_h,
        pi_l,
        gamma: 0.9,
        horizon: 20,
        start_state: 0,
    }
}

fn sample_categorical(rng: &mut ChaCha20Rng, probs: &[f64]) -> usize {
    let draw: f64 = rng.gen_range(0.0..1.0);
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if draw < cumulative {
            return i;
        }
    }
    probs.len() - 1
}

/// Record one native trajectory: at every step sample the option, then the
/// primitive action, observe the reward, and advance the state.
pub fn record_native_trajectory(mdp: &TabularMdp, rng: &mut ChaCha20Rng) -> Vec<NativeStep> {
    let mut s = mdp.start_state;
    let mut steps = Vec::with_capacity(mdp.horizon);
    for _ in 0..mdp.horizon {
        let h = sample_categorical(rng, &mdp.pi_h[s]);
        let l = sample_categorical(rng, &mdp.pi_l[s][h]);
        steps.push(NativeStep {
            state: s,
            option: h,
            action: l,
            reward: mdp.reward[s][h][l],
        });
        s = sample_categorical(rng, &mdp.transition[s][h][l]);
    }
    steps
}

/// Discounted return of a recorded trajectory under native bookkeeping.
pub fn return_native(steps: &[NativeStep], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for step in steps {
        total += discount * step.reward;
        discount *= gamma;
    }
    total
}

/// Discounted return of the same trajectory re-tagged as a high-level
/// record: only the (state, option, reward) fields are consulted.
pub fn return_as_high(steps: &[NativeStep], gamma: f64) -> f64 {
    let high: Vec<(usize, usize, f64)> = steps
        .iter()
        .map(|st| (st.state, st.option, st.reward))
        .collect();
    high.iter()
        .enumerate()
        .map(|(k, &(_, _, r))| gamma.powi(k as i32) * r)
        .sum()
}

/// Discounted return of the same trajectory re-tagged as a low-level
/// record over the augmented state (state, option) with action l.
pub fn return_as_low(steps: &[NativeStep], gamma: f64) -> f64 {
    let low: Vec<((usize, usize), usize, f64)> = steps
        .iter()
        .map(|st| ((st.state, st.option), st.action, st.reward))
        .collect();
    let mut total = 0.0;
    for (k, &(_, _, r)) in low.iter().enumerate().rev() {
        let _ = k;
        total = r + gamma * total;
    }
    total
}

/// Monte Carlo return estimate from native trajectories.
pub fn simulate_native(mdp: &TabularMdp, episodes: usize, seed: u64) -> ReturnStats {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            let traj = record_native_trajectory(mdp, &mut rng);
            return_native(&traj, mdp.gamma)
        })
        .collect();
    ReturnStats::from_returns(&returns)
}

/// Monte Carlo return estimate from the option-only view: the low-level
/// policy is first marginalised into the transition and reward tables.
pub fn simulate_high(mdp: &TabularMdp, episodes: usize, seed: u64) -> ReturnStats {
    let mut trans_h = [[[0.0; N_STATES]; N_OPTIONS]; N_STATES];
    let mut reward_h = [[0.0; N_OPTIONS]; N_STATES];
    for s in 0..N_STATES {
        for h in 0..N_OPTIONS {
            for l in 0..N_ACTIONS {
                let w = mdp.pi_l[s][h][l];
                reward_h[s][h] += w * mdp.reward[s][h][l];
                for s2 in 0..N_STATES {
                    trans_h[s][h][s2] += w * mdp.transition[s][h][l][s2];
                }
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            let mut s = mdp.start_state;
            let mut total = 0.0;
            let mut discount = 1.0;
            for _ in 0..mdp.horizon {
                let h = sample_categorical(&mut rng, &mdp.pi_h[s]);
                total += discount * reward_h[s][h];
                discount *= mdp.gamma;
                s = sample_categorical(&mut rng, &trans_h[s][h]);
            }
            total
        })
        .collect();
    ReturnStats::from_returns(&returns)
}

/// Monte Carlo return estimate from the augmented low-level view: the
/// chain runs over (state, option) pairs and the option refresh is folded
/// into the augmented transition kernel.
pub fn simulate_low(mdp: &TabularMdp, episodes: usize, seed: u64) -> ReturnStats {
    let n_aug = N_STATES * N_OPTIONS;
    let idx = |s: usize, h: usize| s * N_OPTIONS + h;
    // Augmented kernel: P((s2, h2) | (s, h), l) = P(s2 | s, h, l) * pi_h(h2 | s2).
    let mut trans_aug = vec![[[0.0; 8]; N_ACTIONS]; n_aug];
    for s in 0..N_STATES {
        for h in 0..N_OPTIONS {
            for l in 0..N_ACTIONS {
                for s2 in 0..N_STATES {
                    for h2 in 0..N_OPTIONS {
                        trans_aug[idx(s, h)][l][idx(s2, h2)] =
                            mdp.transition[s][h][l][s2] * mdp.pi_h[s2][h2];
                    }
                }
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            let h0 = sample_categorical(&mut rng, &mdp.pi_h[mdp.start_state]);
            let mut aug = idx(mdp.start_state, h0);
            let mut total = 0.0;
            let mut discount = 1.0;
            for _ in 0..mdp.horizon {
                let (s, h) = (aug / N_OPTIONS, aug % N_OPTIONS);
                let l = sample_categorical(&mut rng, &mdp.pi_l[s][h]);
                total += discount * mdp.reward[s][h][l];
                discount *= mdp.gamma;
                aug = sample_categorical(&mut rng, &trans_aug[aug][l]);
            }
            total
        })
        .collect();
    ReturnStats::from_returns(&returns)
}

/// Exact expected discounted return by backward induction over the native
/// factored tables.
pub fn exact_native(mdp: &TabularMdp) -> f64 {
    let mut value = [0.0; N_STATES];
    for _ in 0..mdp.horizon {
        let mut next = [0.0; N_STATES];
        for s in 0..N_STATES {
            for h in 0..N_OPTIONS {
                for l in 0..N_ACTIONS {
                    let w = mdp.pi_h[s][h] * mdp.pi_l[s][h][l];
                    let future: f64 = (0..N_STATES)
                        .map(|s2| mdp.transition[s][h][l][s2] * value[s2])
                        .sum();
                    next[s] += w * (mdp.reward[s][h][l] + mdp.gamma * future);
                }
            }
        }
        value = next;
    }
    value[mdp.start_state]
}

/// Exact expected discounted return through the marginalised option MDP.
pub fn exact_high(mdp: &TabularMdp) -> f64 {
    let mut value = [0.0; N_STATES];
    for _ in 0..mdp.horizon {
        let mut next = [0.0; N_STATES];
        for s in 0..N_STATES {
            for h in 0..N_OPTIONS {
                let mut r_h = 0.0;
                let mut future = 0.0;
                for l in 0..N_ACTIONS {
                    let w = mdp.pi_l[s][h][l];
                    r_h += w * mdp.reward[s][h][l];
                    for s2 in 0..N_STATES {
                        future += w * mdp.transition[s][h][l][s2] * value[s2];
                    }
                }
                next[s] += mdp.pi_h[s][h] * (r_h + mdp.gamma * future);
            }
        }
        value = next;
    }
    value[mdp.start_state]
}

/// Exact expected discounted return through the augmented low-level MDP.
pub fn exact_low(mdp: &TabularMdp) -> f64 {
    let mut value = [[0.0; N_OPTIONS]; N_STATES];
    for _ in 0..mdp.horizon {
        let mut next = [[0.0; N_OPTIONS]; N_STATES];
        for s in 0..N_STATES {
            for h in 0..N_OPTIONS {
                for l in 0..N_ACTIONS {
                    let w = mdp.pi_l[s][h][l];
                    let mut future = 0.0;
                    for s2 in 0..N_STATES {
                        for h2 in 0..N_OPTIONS {
                            future += mdp.transition[s][h][l][s2]
                                * mdp.pi_h[s2][h2]
                                * value[s2][h2];
                        }
                    }
                    next[s][h] += w * (mdp.reward[s][h][l] + mdp.gamma * future);
                }
            }
        }
        value = next;
    }
    (0..N_OPTIONS)
        .map(|h| mdp.pi_h[mdp.start_state][h] * value[mdp.start_state][h])
        .sum()
}

/// Chi-square goodness-of-fit statistic for the factorisation of the
/// augmented transition kernel: for every (state, option, action) cell the
/// observed (next state, next option) counts are compared against the
/// model P(s2 | s, h, l) * pi_h(h2 | s2). Returns the statistic and its
/// degrees of freedom.
pub fn factorization_chi_square(mdp: &TabularMdp, samples: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // counts[s][h][l][s2][h2]
    let mut counts = vec![0usize; N_STATES * N_OPTIONS * N_ACTIONS * N_STATES * N_OPTIONS];
    let flat = |s: usize, h: usize, l: usize, s2: usize, h2: usize| {
        (((s * N_OPTIONS + h) * N_ACTIONS + l) * N_STATES + s2) * N_OPTIONS + h2
    };
    let mut s = mdp.start_state;
    let mut h = sample_categorical(&mut rng, &mdp.pi_h[s]);
    for _ in 0..samples {
        let l = sample_categorical(&mut rng, &mdp.pi_l[s][h]);
        let s2 = sample_categorical(&mut rng, &mdp.transition[s][h][l]);
        let h2 = sample_categorical(&mut rng, &mdp.pi_h[s2]);
        counts[flat(s, h, l, s2, h2)] += 1;
        s = s2;
        h = h2;
    }
    let mut statistic = 0.0;
    let mut dof = 0;
    for s in 0..N_STATES {
        for h in 0..N_OPTIONS {
            for l in 0..N_ACTIONS {
                let cell_total: usize = (0..N_STATES)
                    .flat_map(|s2| (0..N_OPTIONS).map(move |h2| (s2, h2)))
                    .map(|(s2, h2)| counts[flat(s, h, l, s2, h2)])
                    .sum();
                if cell_total == 0 {
                    continue;
                }
                dof += N_STATES * N_OPTIONS - 1;
                for s2 in 0..N_STATES {
                    for h2 in 0..N_OPTIONS {
                        let expected = cell_total as f64
                            * mdp.transition[s][h][l][s2]
                            * mdp.pi_h[s2][h2];
                        let observed = counts[flat(s, h, l, s2, h2)] as f64;
                        statistic += (observed - expected).powi(2) / expected;
                    }
                }
            }
        }
    }
    (statistic, dof)
}

/// Upper chi-square quantile via the Wilson-Hilferty cube approximation,
/// accurate to well under one unit for the degrees of freedom used here.
pub fn chi_square_quantile(dof: usize, z: f64) -> f64 {
    let k = dof as f64;
    let term = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    k * term.powi(3)
}

/// z-score of the standard normal 0.99 quantile.
pub const Z_99: f64 = 2.326_347_874_040_841;

//! Small tabular MDPs whose trajectory space is small enough to enumerate.
//!
//! Exact objective values and exact policy gradients computed here are the
//! ground truth for the Monte-Carlo estimator tests.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Environment, MdpSpec, StepOutcome};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::policy::SoftmaxPolicy;

/// Largest number of reachable trajectories we agree to enumerate.
pub const ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOracleSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub initial: Vec<f64>,
    /// `transitions[s][a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`
    pub rewards: Vec<Vec<f64>>,
    /// Optional per-state feature rows; one-hot when absent.
    #[serde(default)]
    pub features: Option<Vec<Vec<f64>>>,
}

impl ChainOracleSpec {
    /// A slippery chain: action 0 steps left, the last action steps right and
    /// any other action stays put, each succeeding with probability 0.8 and
    /// otherwise landing on a uniformly random state. Rewards grow towards the
    /// right end, with a small bonus for higher action indices.
    pub fn slippery_chain(n_states: usize, n_actions: usize, horizon: usize, gamma: f64) -> Self {
        let slip = 0.2;
        let mut transitions = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        let mut rewards = vec![vec![0.0; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let target = if a == 0 {
                    s.saturating_sub(1)
                } else if a + 1 == n_actions {
                    (s + 1).min(n_states - 1)
                } else {
                    s
                };
                for p in transitions[s][a].iter_mut() {
                    *p = slip / n_states as f64;
                }
                transitions[s][a][target] += 1.0 - slip;
                let pos = if n_states > 1 {
                    s as f64 / (n_states - 1) as f64
                } else {
                    1.0
                };
                let bonus = if n_actions > 1 {
                    0.25 * a as f64 / (n_actions - 1) as f64
                } else {
                    0.0
                };
                rewards[s][a] = pos + bonus;
            }
        }
        let mut initial = vec![0.0; n_states];
        initial[0] = 1.0;
        ChainOracleSpec {
            n_states,
            n_actions,
            horizon,
            gamma,
            initial,
            transitions,
            rewards,
            features: None,
        }
    }

    /// `groups` copies of a two-state corridor with a switched middle state,
    /// sharing one absorbing goal worth reward 1 per step. From the start
    /// state action 1 leads to the middle state and action 0 stays; in the
    /// middle state action 0 reaches the goal and action 1 goes back. Both
    /// corridor states of a group share one feature, so no deterministic
    /// policy is optimal and J has a finite maximiser.
    ///
    /// Group features are scaled by √groups so the shared softmax bias does
    /// not dominate the curvature.
    pub fn aliased_corridors(groups: usize, horizon: usize, gamma: f64) -> Self {
        let n_states = 2 * groups + 1;
        let goal = n_states - 1;
        let scale = (groups as f64).sqrt();
        let mut transitions = vec![vec![vec![0.0; n_states]; 2]; n_states];
        let mut rewards = vec![vec![0.0; 2]; n_states];
        let mut features = vec![vec![0.0; groups + 1]; n_states];
        let mut initial = vec![0.0; n_states];
        for g in 0..groups {
            let (start, middle) = (2 * g, 2 * g + 1);
            transitions[start][0][start] = 1.0;
            transitions[start][1][middle] = 1.0;
            transitions[middle][0][goal] = 1.0;
            transitions[middle][1][start] = 1.0;
            features[start][g] = scale;
            features[middle][g] = scale;
            initial[start] = 1.0 / groups as f64;
        }
        transitions[goal][0][goal] = 1.0;
        transitions[goal][1][goal] = 1.0;
        rewards[goal] = vec![1.0, 1.0];
        features[goal][groups] = 1.0;
        ChainOracleSpec {
            n_states,
            n_actions: 2,
            horizon,
            gamma,
            initial,
            transitions,
            rewards,
            features: Some(features),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 || self.horizon == 0 {
            return Err(Error::config("chain oracle sizes must be positive"));
        }
        check_distribution(&self.initial, ns, "initial distribution")?;
        if self.transitions.len() != ns || self.rewards.len() != ns {
            return Err(Error::config(
                "transition/reward tables must have one row per state",
            ));
        }
        for s in 0..ns {
            if self.transitions[s].len() != na || self.rewards[s].len() != na {
                return Err(Error::config(format!(
                    "state {s}: expected {na} actions in transition and reward tables"
                )));
            }
            for a in 0..na {
                check_distribution(
                    &self.transitions[s][a],
                    ns,
                    &format!("transition row ({s},{a})"),
                )?;
                let r = self.rewards[s][a];
                if !(r.is_finite() && r >= 0.0) {
                    return Err(Error::config(format!(
                        "reward ({s},{a}) = {r} must be finite and non-negative"
                    )));
                }
            }
        }
        if let Some(features) = &self.features {
            if features.len() != ns {
                return Err(Error::config("feature table must have one row per state"));
            }
            let dim = features[0].len();
            if dim == 0 || features.iter().any(|row| row.len() != dim) {
                return Err(Error::config("feature rows must share a positive length"));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match &self.features {
            Some(f) => f[0].len(),
            None => self.n_states,
        }
    }

    /// Number of trajectories with non-zero probability under a policy that
    /// gives every action positive mass.
    pub fn trajectory_space(&self) -> u128 {
        let na = self.n_actions as u128;
        let mut paths: Vec<u128> = self.initial.iter().map(|&p| u128::from(p > 0.0)).collect();
        for _ in 1..self.horizon {
            let mut next = vec![0u128; self.n_states];
            for (s, &count) in paths.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                for row in &self.transitions[s] {
                    for (s2, &pt) in row.iter().enumerate() {
                        if pt > 0.0 {
                            next[s2] = next[s2].saturating_add(count);
                        }
                    }
                }
            }
            paths = next;
        }
        paths
            .iter()
            .fold(0u128, |acc, &c| acc.saturating_add(c.saturating_mul(na)))
    }
}

fn check_distribution(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::config(format!(
            "{what} has {} entries, expected {len}",
            row.len()
        )));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::config(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Parse the plain-text tabular format:
///
/// ```text
/// states 3
/// actions 2
/// horizon 3
/// gamma 0.9
/// initial 1 0 0
/// transition <s> <a> <p(s'=0)> ... <p(s'=n-1)>
/// reward <s> <a> <r>
/// feature <s> <f_0> ... <f_m>     # optional, all states or none
/// ```
///
/// Blank lines and `#` comments are ignored.
pub fn parse_chain_spec(text: &str) -> Result<ChainOracleSpec> {
    let mut n_states = None;
    let mut n_actions = None;
    let mut horizon = None;
    let mut gamma = None;
    let mut initial = None;
    let mut transitions: Vec<(usize, usize, Vec<f64>, usize)> = Vec::new();
    let mut rewards: Vec<(usize, usize, f64, usize)> = Vec::new();
    let mut features: Vec<(usize, Vec<f64>, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let single = match rest.as_slice() {
            [v] => Ok(*v),
            _ => Err(err(format!("`{key}` takes exactly one value"))),
        };
        let one = |_: &[&str]| single.clone();
        match key {
            "states" => n_states = Some(int(one(&rest)?)?),
            "actions" => n_actions = Some(int(one(&rest)?)?),
            "horizon" => horizon = Some(int(one(&rest)?)?),
            "gamma" => gamma = Some(real(one(&rest)?)?),
            "initial" => initial = Some(rest.iter().map(|s| real(s)).collect::<Result<Vec<_>>>()?),
            "transition" | "reward" => {
                if rest.len() < 3 {
                    return Err(err(format!("`{key}` needs a state, an action and values")));
                }
                let s = int(rest[0])?;
                let a = int(rest[1])?;
                let vals = rest[2..]
                    .iter()
                    .map(|v| real(v))
                    .collect::<Result<Vec<_>>>()?;
                if key == "transition" {
                    transitions.push((s, a, vals, line_no));
                } else {
                    if vals.len() != 1 {
                        return Err(err("`reward` takes exactly one value".into()));
                    }
                    rewards.push((s, a, vals[0], line_no));
                }
            }
            "feature" => {
                if rest.len() < 2 {
                    return Err(err("`feature` needs a state and values".into()));
                }
                let s = int(rest[0])?;
                let vals = rest[1..]
                    .iter()
                    .map(|v| real(v))
                    .collect::<Result<Vec<_>>>()?;
                features.push((s, vals, line_no));
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }

    let missing = |what: &str| Error::Parse {
        line: 0,
        msg: format!("missing `{what}`"),
    };
    let ns = n_states.ok_or_else(|| missing("states"))?;
    let na = n_actions.ok_or_else(|| missing("actions"))?;
    let horizon = horizon.ok_or_else(|| missing("horizon"))?;
    let gamma = gamma.ok_or_else(|| missing("gamma"))?;
    let initial = initial.ok_or_else(|| missing("initial"))?;

    let mut trans = vec![vec![None; na]; ns];
    for (s, a, row, line) in transitions {
        if s >= ns || a >= na {
            return Err(Error::Parse {
                line,
                msg: format!("({s},{a}) out of range"),
            });
        }
        if trans[s][a].replace(row).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate transition ({s},{a})"),
            });
        }
    }
    let mut rew = vec![vec![None; na]; ns];
    for (s, a, r, line) in rewards {
        if s >= ns || a >= na {
            return Err(Error::Parse {
                line,
                msg: format!("({s},{a}) out of range"),
            });
        }
        if rew[s][a].replace(r).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate reward ({s},{a})"),
            });
        }
    }
    let transitions = trans
        .into_iter()
        .enumerate()
        .map(|(s, row)| {
            row.into_iter()
                .enumerate()
                .map(|(a, p)| p.ok_or_else(|| missing(&format!("transition {s} {a}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards = rew
        .into_iter()
        .enumerate()
        .map(|(s, row)| {
            row.into_iter()
                .enumerate()
                .map(|(a, r)| r.ok_or_else(|| missing(&format!("reward {s} {a}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let features = if features.is_empty() {
        None
    } else {
        let mut rows = vec![None; ns];
        for (s, row, line) in features {
            if s >= ns {
                return Err(Error::Parse {
                    line,
                    msg: format!("state {s} out of range"),
                });
            }
            rows[s] = Some(row);
        }
        Some(
            rows.into_iter()
                .enumerate()
                .map(|(s, r)| r.ok_or_else(|| missing(&format!("feature {s}"))))
                .collect::<Result<Vec<_>>>()?,
        )
    };

    let spec = ChainOracleSpec {
        n_states: ns,
        n_actions: na,
        horizon,
        gamma,
        initial,
        transitions,
        rewards,
        features,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct ChainOracle {
    spec: ChainOracleSpec,
    mdp: MdpSpec,
    features: Vec<Vec<f64>>,
}

impl ChainOracle {
    pub fn new(spec: ChainOracleSpec) -> Result<Self> {
        spec.validate()?;
        let reward_bound = spec
            .rewards
            .iter()
            .flatten()
            .fold(0.0f64, |m, r| m.max(*r))
            .max(f64::MIN_POSITIVE);
        let mdp = MdpSpec {
            state_dim: spec.feature_dim(),
            action_count: spec.n_actions,
            horizon: spec.horizon,
            gamma: spec.gamma,
            reward_bound,
        };
        mdp.validate()?;
        let features = match &spec.features {
            Some(f) => f.clone(),
            None => (0..spec.n_states)
                .map(|s| {
                    let mut row = vec![0.0; spec.n_states];
                    row[s] = 1.0;
                    row
                })
                .collect(),
        };
        Ok(ChainOracle {
            spec,
            mdp,
            features,
        })
    }

    pub fn oracle_spec(&self) -> &ChainOracleSpec {
        &self.spec
    }

    pub fn features(&self, state: usize) -> &[f64] {
        &self.features[state]
    }

    fn state_index(state: &[f64]) -> usize {
        state[0] as usize
    }

    fn check_enumerable(&self) -> Result<()> {
        let size = self.spec.trajectory_space();
        if size > ENUMERATION_CAP {
            return Err(Error::config(format!(
                "trajectory space {size} exceeds the enumeration cap {ENUMERATION_CAP}"
            )));
        }
        Ok(())
    }

    /// Visit every trajectory `(s_0, a_0, ..., s_{H-1}, a_{H-1})` with non-zero
    /// probability, handing `(probability, discounted return, actions taken)`
    /// to the callback.
    fn enumerate(&self, log_pi: &[Vec<f64>], mut visit: impl FnMut(f64, f64, &[(usize, usize)])) {
        let mut path = Vec::with_capacity(self.spec.horizon);
        for (s0, &p0) in self.spec.initial.iter().enumerate() {
            if p0 > 0.0 {
                self.descend(s0, p0, 0.0, 1.0, log_pi, &mut path, &mut visit);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn descend(
        &self,
        state: usize,
        prob: f64,
        ret: f64,
        discount: f64,
        log_pi: &[Vec<f64>],
        path: &mut Vec<(usize, usize)>,
        visit: &mut impl FnMut(f64, f64, &[(usize, usize)]),
    ) {
        for a in 0..self.spec.n_actions {
            let pa = log_pi[state][a].exp();
            if pa == 0.0 {
                continue;
            }
            let p = prob * pa;
            let r = ret + discount * self.spec.rewards[state][a];
            path.push((state, a));
            if path.len() == self.spec.horizon {
                visit(p, r, path);
            } else {
                for (next, &pt) in self.spec.transitions[state][a].iter().enumerate() {
                    if pt > 0.0 {
                        self.descend(
                            next,
                            p * pt,
                            r,
                            discount * self.spec.gamma,
                            log_pi,
                            path,
                            visit,
                        );
                    }
                }
            }
            path.pop();
        }
    }

    fn policy_table(&self, policy: &SoftmaxPolicy, theta: &ParamVector) -> Result<Vec<Vec<f64>>> {
        (0..self.spec.n_states)
            .map(|s| policy.action_log_probs(theta, &self.features[s]))
            .collect()
    }

    /// J(θ): expected discounted return, by exhaustive enumeration.
    pub fn exact_objective(&self, policy: &SoftmaxPolicy, theta: &ParamVector) -> Result<f64> {
        self.check_enumerable()?;
        let log_pi = self.policy_table(policy, theta)?;
        let mut total = 0.0;
        self.enumerate(&log_pi, |p, r, _| total += p * r);
        Ok(total)
    }

    /// ∇J(θ) = Σ_τ p(τ|θ) ∇log p(τ|θ) R(τ), by exhaustive enumeration.
    pub fn exact_gradient(
        &self,
        policy: &SoftmaxPolicy,
        theta: &ParamVector,
    ) -> Result<ParamVector> {
        self.check_enumerable()?;
        let log_pi = self.policy_table(policy, theta)?;
        let (ns, na) = (self.spec.n_states, self.spec.n_actions);
        // Weight of each score ∇log π(a|s) in the sum over trajectories.
        let mut coeff = vec![vec![0.0; na]; ns];
        self.enumerate(&log_pi, |p, r, path| {
            for &(s, a) in path {
                coeff[s][a] += p * r;
            }
        });
        let mut grad = ParamVector::zeros(policy.param_count());
        for s in 0..ns {
            for a in 0..na {
                if coeff[s][a] != 0.0 {
                    let score = policy.log_prob_gradient(theta, &self.features[s], a)?;
                    grad.axpy(coeff[s][a], &score);
                }
            }
        }
        Ok(grad)
    }

    /// `marginals[h][s]` = P(s_h = s) under π_θ, by forward recursion.
    pub fn state_marginals(
        &self,
        policy: &SoftmaxPolicy,
        theta: &ParamVector,
    ) -> Result<Vec<Vec<f64>>> {
        let log_pi = self.policy_table(policy, theta)?;
        let ns = self.spec.n_states;
        let mut out = Vec::with_capacity(self.spec.horizon);
        let mut current = self.spec.initial.clone();
        for _ in 0..self.spec.horizon {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..self.spec.n_actions {
                    let w = current[s] * log_pi[s][a].exp();
                    for (s2, pt) in self.spec.transitions[s][a].iter().enumerate() {
                        next[s2] += w * pt;
                    }
                }
            }
            out.push(current);
            current = next;
        }
        Ok(out)
    }
}

impl Environment for ChainOracle {
    fn spec(&self) -> &MdpSpec {
        &self.mdp
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![draw(&self.spec.initial, rng) as f64]
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut dyn RngCore) -> Result<StepOutcome> {
        let s = Self::state_index(state);
        if s >= self.spec.n_states || action >= self.spec.n_actions {
            return Err(Error::config(format!(
                "chain step ({s},{action}) out of range"
            )));
        }
        let next = draw(&self.spec.transitions[s][action], rng);
        Ok(StepOutcome {
            next_state: vec![next as f64],
            reward: self.spec.rewards[s][action],
            terminal: false,
        })
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        self.features[Self::state_index(state)].clone()
    }

    fn as_enumerable(&self) -> Option<&ChainOracle> {
        Some(self)
    }
}

fn draw(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Exact ∇J(θ) for an enumerable environment.
pub fn enumerate_exact_gradient(
    oracle: &ChainOracle,
    policy: &SoftmaxPolicy,
    theta: &ParamVector,
) -> Result<ParamVector> {
    oracle.exact_gradient(policy, theta)
}

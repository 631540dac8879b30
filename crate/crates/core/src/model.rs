//! Closed-loop compliance model.
//!
//! Each agent `i` complies at step `k + 1` with probability
//! `p(q_i + C(k) + c_i(k))`, where `p` clamps to `[0, 1]`. The shared signal
//! `C` integrates the ensemble compliance error and the personal signal `c_i`
//! integrates the error of the agent's exponentially averaged compliance
//! `M̄_i`:
//!
//! ```text
//! C(k+1)   = C(k)   + α (Q* − n⁻¹ Σ_i M_i(k))
//! c_i(k+1) = c_i(k) + β (Q* − M̄_i(k))
//! M̄_i(k+1) = γ M̄_i(k) + (1 − γ) M_i(k+1)
//! ```
//!
//! Only the single clamp `p(x) = mid{0, 1, x}` is provided; per-agent
//! non-decreasing Lipschitz maps would slot in where [`clamp_probability`]
//! is called.

use rand::Rng;

use crate::error::ConfigError;
use crate::rng::SimRng;

/// `mid{0, 1, x}`.
///
/// Panics on non-finite input: a NaN probability means the state has
/// already been corrupted upstream.
pub fn clamp_probability(x: f64) -> f64 {
    assert!(x.is_finite(), "probability argument must be finite, got {x}");
    x.clamp(0.0, 1.0)
}

/// Bernoulli draw consuming exactly one uniform variate.
pub fn draw_compliance(rng: &mut SimRng, prob: f64) -> u8 {
    let u: f64 = rng.random();
    u8::from(u < prob)
}

pub fn ema_update(m_bar: f64, m_new: u8, gamma: f64) -> f64 {
    gamma * m_bar + (1.0 - gamma) * f64::from(m_new)
}

pub fn global_update(c_global: f64, mean_m: f64, alpha: f64, q_star: f64) -> f64 {
    c_global + alpha * (q_star - mean_m)
}

pub fn individual_update(c: f64, m_bar: f64, beta: f64, q_star: f64) -> f64 {
    c + beta * (q_star - m_bar)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentParams {
    pub id: usize,
    /// Base proclivity, an additive offset inside the probability map.
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub c: f64,
    pub m_bar: f64,
    pub last_m: u8,
    /// Probability used for the most recent draw (0 before the first step).
    pub last_prob: f64,
    pub defecting: bool,
}

impl AgentState {
    pub fn new(m_bar: f64) -> Self {
        Self {
            c: 0.0,
            m_bar,
            last_m: 0,
            last_prob: 0.0,
            defecting: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalSignal {
    pub c_global: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agent {
    pub params: AgentParams,
    pub state: AgentState,
}

/// Probability that `agent` complies on its next draw.
pub fn compliance_probability(agent: &Agent, global: GlobalSignal) -> f64 {
    if agent.state.defecting {
        return 0.0;
    }
    clamp_probability(agent.params.q + global.c_global + agent.state.c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub q_star: f64,
    pub enable_global: bool,
    pub enable_individual: bool,
}

impl ControlConfig {
    /// Gains used for all four simulation scenarios by default.
    pub const DEFAULT: ControlConfig = ControlConfig {
        alpha: 0.025,
        beta: 0.1,
        gamma: 0.95,
        q_star: 0.85,
        enable_global: true,
        enable_individual: true,
    };

    pub fn validate(&self) -> Result<(), ConfigError> {
        finite("alpha", self.alpha)?;
        finite("beta", self.beta)?;
        finite("gamma", self.gamma)?;
        finite("qstar", self.q_star)?;
        if self.alpha <= 0.0 {
            return Err(out_of_range("alpha", self.alpha, "alpha > 0"));
        }
        if self.beta <= 0.0 {
            return Err(out_of_range("beta", self.beta, "beta > 0"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(out_of_range("gamma", self.gamma, "0 <= gamma < 1"));
        }
        if !(0.0..=1.0).contains(&self.q_star) {
            return Err(out_of_range("qstar", self.q_star, "0 <= qstar <= 1"));
        }
        Ok(())
    }

    pub fn next_global(&self, c_global: f64, mean_m: f64) -> f64 {
        if self.enable_global {
            global_update(c_global, mean_m, self.alpha, self.q_star)
        } else {
            c_global
        }
    }

    pub fn next_individual(&self, c: f64, m_bar: f64) -> f64 {
        if self.enable_individual {
            individual_update(c, m_bar, self.beta, self.q_star)
        } else {
            c
        }
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Small-parameter gain family: `α = ε^{3/2} α₀`, `β = ε β₀ w`, `1 − γ = ε w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingParams {
    pub epsilon: f64,
    pub w: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl ScalingParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        finite("epsilon", self.epsilon)?;
        finite("w", self.w)?;
        finite("alpha0", self.alpha0)?;
        finite("beta0", self.beta0)?;
        if self.epsilon <= 0.0 {
            return Err(out_of_range("epsilon", self.epsilon, "epsilon > 0"));
        }
        if self.w <= 0.0 {
            return Err(out_of_range("w", self.w, "w > 0"));
        }
        if self.alpha0 <= 0.0 {
            return Err(out_of_range("alpha0", self.alpha0, "alpha0 > 0"));
        }
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return Err(out_of_range("beta0", self.beta0, "0 < beta0 <= 1"));
        }
        let product = self.epsilon * self.w;
        if product >= 1.0 {
            return Err(ConfigError::WindowTooShort { product });
        }
        Ok(())
    }
}

/// Raw gains for a scaling parameterization; both loops enabled, `q_star` supplied by caller.
pub fn derive_gains(s: &ScalingParams, q_star: f64) -> Result<ControlConfig, ConfigError> {
    s.validate()?;
    let cfg = ControlConfig {
        alpha: s.epsilon.powf(1.5) * s.alpha0,
        beta: s.epsilon * s.beta0 * s.w,
        gamma: 1.0 - s.epsilon * s.w,
        q_star,
        enable_global: true,
        enable_individual: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub step: u64,
    pub global: GlobalSignal,
    pub agents: Vec<Agent>,
}

impl EnsembleState {
    /// Fresh state with `C(0) = c_i(0) = 0`, `M_i(0) = 0` and `M̄_i(0) = m_bar0`.
    pub fn new(proclivities: &[f64], m_bar0: f64) -> Self {
        let agents = proclivities
            .iter()
            .enumerate()
            .map(|(id, &q)| Agent {
                params: AgentParams { id, q },
                state: AgentState::new(m_bar0),
            })
            .collect();
        Self {
            step: 0,
            global: GlobalSignal { c_global: 0.0 },
            agents,
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Ensemble mean of the most recent draws, summed as an integer count.
    pub fn mean_m(&self) -> f64 {
        let complied: u64 = self.agents.iter().map(|a| u64::from(a.state.last_m)).sum();
        complied as f64 / self.agents.len() as f64
    }

    /// Advance one step.
    ///
    /// New signals are computed from `M_i(k)` and `M̄_i(k)` first; draws for
    /// step `k + 1` then use the signals `C(k)`, `c_i(k)` in ascending agent
    /// order, after which each `M̄_i` absorbs its new draw.
    pub fn step(&mut self, cfg: &ControlConfig, rng: &mut SimRng) {
        let old_global = self.global;
        let next_c_global = cfg.next_global(old_global.c_global, self.mean_m());
        for agent in &mut self.agents {
            let prob = compliance_probability(agent, old_global);
            let next_c = cfg.next_individual(agent.state.c, agent.state.m_bar);
            let m = draw_compliance(rng, prob);
            agent.state.c = next_c;
            agent.state.last_m = m;
            agent.state.last_prob = prob;
            agent.state.m_bar = ema_update(agent.state.m_bar, m, cfg.gamma);
        }
        self.global.c_global = next_c_global;
        self.step += 1;
    }
}

pub fn step_ensemble(mut state: EnsembleState, cfg: &ControlConfig, rng: &mut SimRng) -> EnsembleState {
    state.step(cfg, rng);
    state
}

fn finite(name: &'static str, value: f64) -> Result<(), ConfigError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::NonFinite { name, value })
    }
}

fn out_of_range(name: &'static str, value: f64, expected: &'static str) -> ConfigError {
    ConfigError::OutOfRange {
        name,
        value,
        expected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_probability(0.3), 0.3);
        assert_eq!(clamp_probability(-0.2), 0.0);
        assert_eq!(clamp_probability(1.7), 1.0);
        assert_eq!(clamp_probability(0.0), 0.0);
        assert_eq!(clamp_probability(1.0), 1.0);
    }

    #[test]
    #[should_panic]
    fn clamp_rejects_nan() {
        clamp_probability(f64::NAN);
    }

    fn agent(q: f64, c: f64, defecting: bool) -> Agent {
        Agent {
            params: AgentParams { id: 0, q },
            state: AgentState {
                c,
                defecting,
                ..AgentState::new(0.0)
            },
        }
    }

    #[test]
    fn probability_examples() {
        let g = |c_global| GlobalSignal { c_global };
        assert!(close(compliance_probability(&agent(0.2, 0.1, false), g(0.3)), 0.6));
        assert_eq!(compliance_probability(&agent(0.2, 0.0, false), g(-1.0)), 0.0);
        assert_eq!(compliance_probability(&agent(0.35, 0.0, true), g(0.0)), 0.0);
    }

    #[test]
    fn draw_extremes_and_frequency() {
        let mut rng = rng_from_seed(11);
        assert!((0..1000).all(|_| draw_compliance(&mut rng, 1.0) == 1));
        assert!((0..1000).all(|_| draw_compliance(&mut rng, 0.0) == 0));
        let hits: u32 = (0..100_000).map(|_| u32::from(draw_compliance(&mut rng, 0.5))).sum();
        assert!((f64::from(hits) / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn draw_consumes_one_variate() {
        let mut a = rng_from_seed(3);
        let mut b = rng_from_seed(3);
        draw_compliance(&mut a, 0.7);
        let _: f64 = rand::Rng::random(&mut b);
        assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut b));
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(1.0, 1, 0.95), 1.0);
        assert_eq!(ema_update(0.0, 0, 0.95), 0.0);
        assert!(close(ema_update(0.8, 1, 0.95), 0.81));
    }

    #[test]
    fn global_update_examples() {
        assert_eq!(global_update(0.0, 0.85, 0.025, 0.85), 0.0);
        assert!(close(global_update(0.0, 0.75, 0.025, 0.85), 0.0025));
        assert!(close(global_update(0.5, 1.0, 0.025, 0.85), 0.49625));
    }

    #[test]
    fn individual_update_examples() {
        assert_eq!(individual_update(0.0, 0.85, 0.1, 0.85), 0.0);
        assert!(close(individual_update(0.0, 0.0, 0.1, 0.85), 0.085));
        assert!(close(individual_update(-0.2, 1.0, 0.1, 0.85), -0.215));
    }

    #[test]
    fn disabled_loops_hold_signals() {
        let cfg = ControlConfig {
            enable_global: false,
            enable_individual: false,
            ..ControlConfig::DEFAULT
        };
        assert_eq!(cfg.next_global(0.4, 0.1), 0.4);
        assert_eq!(cfg.next_individual(-0.3, 0.0), -0.3);
    }

    #[test]
    fn derive_gains_examples() {
        let s = ScalingParams {
            epsilon: 0.04,
            w: 1.0,
            alpha0: 1.0,
            beta0: 1.0,
        };
        let g = derive_gains(&s, 0.85).unwrap();
        assert!(close(g.alpha, 0.008));
        assert!(close(g.beta, 0.04));
        assert!(close(g.gamma, 0.96));

        assert!(derive_gains(&ScalingParams { epsilon: 0.0, ..s }, 0.85).is_err());
        assert!(derive_gains(
            &ScalingParams {
                epsilon: 0.05,
                beta0: 2.0,
                ..s
            },
            0.85
        )
        .is_err());
        assert_eq!(
            derive_gains(&ScalingParams { epsilon: 0.5, w: 2.0, ..s }, 0.85),
            Err(ConfigError::WindowTooShort { product: 1.0 })
        );
    }

    #[test]
    fn control_config_rejects_bad_gamma() {
        let cfg = ControlConfig {
            gamma: 1.2,
            ..ControlConfig::DEFAULT
        };
        assert!(cfg.validate().is_err());
        assert!(ControlConfig::DEFAULT.validate().is_ok());
    }

    #[test]
    fn hand_traced_step() {
        let mut state = EnsembleState::new(&[0.2], 0.5);
        state.agents[0].state.last_m = 1;
        let cfg = ControlConfig::DEFAULT;
        let mut rng = rng_from_seed(5);
        state.step(&cfg, &mut rng);
        assert!(close(state.global.c_global, -0.00375));
        assert!(close(state.agents[0].state.c, 0.035));
        assert_eq!(state.agents[0].state.last_prob, 0.2);
        let m = state.agents[0].state.last_m;
        assert!(close(state.agents[0].state.m_bar, 0.95 * 0.5 + 0.05 * f64::from(m)));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn saturated_agent_is_a_fixed_point() {
        let cfg = ControlConfig {
            q_star: 1.0,
            ..ControlConfig::DEFAULT
        };
        let mut state = EnsembleState::new(&[2.0], 1.0);
        state.agents[0].state.last_m = 1;
        let mut rng = rng_from_seed(1);
        for _ in 0..50 {
            state.step(&cfg, &mut rng);
            assert_eq!(state.agents[0].state.last_m, 1);
            assert_eq!(state.agents[0].state.m_bar, 1.0);
            assert_eq!(state.agents[0].state.c, 0.0);
            assert_eq!(state.global.c_global, 0.0);
        }
    }

    #[test]
    fn defector_draws_zero_but_controllers_run() {
        let cfg = ControlConfig::DEFAULT;
        let mut state = EnsembleState::new(&[0.9], 0.0);
        state.agents[0].state.defecting = true;
        let mut rng = rng_from_seed(2);
        let mut expected_c = 0.0;
        let mut expected_mbar = 0.0;
        for _ in 0..20 {
            expected_c = individual_update(expected_c, expected_mbar, cfg.beta, cfg.q_star);
            state.step(&cfg, &mut rng);
            expected_mbar = ema_update(expected_mbar, 0, cfg.gamma);
            assert_eq!(state.agents[0].state.last_m, 0);
            assert_eq!(state.agents[0].state.c, expected_c);
            assert_eq!(state.agents[0].state.m_bar, expected_mbar);
        }
        assert!(state.global.c_global > 0.0);
    }

    #[test]
    fn equilibrium_leaves_signals_unchanged() {
        // 17 of 20 agents complied last step, every M̄ sits at Q* = 0.85.
        let cfg = ControlConfig::DEFAULT;
        let mut state = EnsembleState::new(&[0.5; 20], 0.85);
        for (i, a) in state.agents.iter_mut().enumerate() {
            a.state.last_m = u8::from(i < 17);
            a.state.c = 0.1;
        }
        state.global.c_global = -0.2;
        let mut rng = rng_from_seed(9);
        state.step(&cfg, &mut rng);
        assert_eq!(state.global.c_global, -0.2);
        assert!(state.agents.iter().all(|a| a.state.c == 0.1));
    }

    #[test]
    fn ema_recursion_matches_closed_form_sum() {
        let gamma = 0.95;
        let mut rng = rng_from_seed(21);
        let draws: Vec<u8> = (0..100).map(|_| draw_compliance(&mut rng, 0.6)).collect();
        let mut m_bar = 0.0;
        for &m in &draws {
            m_bar = ema_update(m_bar, m, gamma);
        }
        let k = draws.len();
        let closed: f64 = (1.0 - gamma)
            * draws
                .iter()
                .enumerate()
                .map(|(j, &m)| gamma.powi((k - 1 - j) as i32) * f64::from(m))
                .sum::<f64>();
        assert!((m_bar - closed).abs() <= 1e-12);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let q: Vec<f64> = (0..50).map(|i| 0.1 + 0.005 * i as f64).collect();
        let run = |seed| {
            let mut s = EnsembleState::new(&q, 0.0);
            let mut rng = rng_from_seed(seed);
            let mut out = Vec::new();
            for _ in 0..100 {
                s.step(&ControlConfig::DEFAULT, &mut rng);
                out.push(s.clone());
            }
            out
        };
        assert_eq!(run(4), run(4));
    }

    proptest! {
        #[test]
        fn clamp_is_monotone_and_idempotent(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(clamp_probability(lo) <= clamp_probability(hi));
            prop_assert_eq!(clamp_probability(clamp_probability(x)), clamp_probability(x));
        }

        #[test]
        fn ema_stays_in_unit_interval(m_bar in 0.0f64..=1.0, m in 0u8..=1, gamma in 0.0f64..0.999_999) {
            let out = ema_update(m_bar, m, gamma);
            prop_assert!((0.0..=1.0).contains(&out));
        }
    }
}

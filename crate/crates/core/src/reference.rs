//! Noise-free companions of the stochastic loop.
//!
//! For one agent, write `y = (M̄, X)` with `X = q + C + c`. Dropping the
//! martingale noise and the slow global term leaves the mean field
//!
//! ```text
//! h₁(y) = w (p(y₂) − y₁)
//! h₂(y) = β₀ w (Q* − y₁)
//! ```
//!
//! whose unique zero is `y* = (Q*, Q*)`. This module integrates the map
//! `y ← y + ε h(y)` and the ODE `ż = h(z)`, and provides the closed forms
//! (saturated-region excursion, linear flow inside the unit square,
//! eigenvalues, Lyapunov function) used to check them against each other.

use num_complex::Complex64;

use crate::model::clamp_probability;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    /// Compliance coordinate.
    pub y1: f64,
    /// Signal coordinate `q + C + c`.
    pub y2: f64,
}

impl RefPoint {
    pub const fn new(y1: f64, y2: f64) -> Self {
        Self { y1, y2 }
    }

    pub fn dist(self, other: RefPoint) -> f64 {
        (self.y1 - other.y1).hypot(self.y2 - other.y2)
    }

    fn axpy(self, a: f64, d: [f64; 2]) -> RefPoint {
        RefPoint::new(self.y1 + a * d[0], self.y2 + a * d[1])
    }

    pub fn in_unit_square(self) -> bool {
        (0.0..=1.0).contains(&self.y1) && (0.0..=1.0).contains(&self.y2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefParams {
    pub w: f64,
    pub beta0: f64,
    pub q_star: f64,
    /// Step of the discrete map; unused by the ODE.
    pub epsilon: f64,
}

impl RefParams {
    pub fn fixed_point(&self) -> RefPoint {
        RefPoint::new(self.q_star, self.q_star)
    }

    /// Fixed RK4 step: `min(0.01 / w, 0.01)`.
    pub fn default_dt(&self) -> f64 {
        (0.01 / self.w).min(0.01)
    }
}

pub fn vector_field_h(y: RefPoint, p: &RefParams) -> [f64; 2] {
    [
        p.w * (clamp_probability(y.y2) - y.y1),
        p.beta0 * p.w * (p.q_star - y.y1),
    ]
}

/// `y(k+1) = y(k) + ε h(y(k))`, returning `steps + 1` points.
pub fn discrete_iterate(y0: RefPoint, p: &RefParams, steps: usize) -> Vec<RefPoint> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0;
    out.push(y);
    for _ in 0..steps {
        y = y.axpy(p.epsilon, vector_field_h(y, p));
        out.push(y);
    }
    out
}

fn discrete_endpoint(y0: RefPoint, p: &RefParams, steps: usize) -> RefPoint {
    let mut y = y0;
    for _ in 0..steps {
        y = y.axpy(p.epsilon, vector_field_h(y, p));
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub z: Vec<RefPoint>,
}

impl Trajectory {
    pub fn last(&self) -> RefPoint {
        *self.z.last().expect("trajectory holds at least its start point")
    }
}

fn rk4_step(z: RefPoint, p: &RefParams, dt: f64) -> RefPoint {
    let k1 = vector_field_h(z, p);
    let k2 = vector_field_h(z.axpy(dt / 2.0, k1), p);
    let k3 = vector_field_h(z.axpy(dt / 2.0, k2), p);
    let k4 = vector_field_h(z.axpy(dt, k3), p);
    RefPoint::new(
        z.y1 + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        z.y2 + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    )
}

/// Classical RK4 on `[0, t_end]` with a uniform step no larger than `dt`.
///
/// The clamp boundaries `z₂ ∈ {0, 1}` are not located; with the default step
/// the kink error stays far below the tolerances used in the checks.
pub fn ode_integrate(z0: RefPoint, p: &RefParams, t_end: f64, dt: f64) -> Trajectory {
    assert!(dt > 0.0 && t_end >= 0.0, "need dt > 0 and t_end >= 0");
    let steps = (t_end / dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let mut t = Vec::with_capacity(steps + 1);
    let mut z = Vec::with_capacity(steps + 1);
    let mut cur = z0;
    t.push(0.0);
    z.push(cur);
    for i in 1..=steps {
        cur = rk4_step(cur, p, h);
        t.push(i as f64 * h);
        z.push(cur);
    }
    Trajectory { t, z }
}

/// Closed-form `z₂(t)` while the trajectory stays in `{z₂ ≥ 1}` (where `p(z₂) = 1`).
pub fn region_excursion_solution(z2_0: f64, z1_0: f64, p: &RefParams, t: f64) -> f64 {
    z2_0 - p.beta0 * p.w * t * (1.0 - p.q_star) + p.beta0 * (1.0 - z1_0) * (1.0 - (-p.w * t).exp())
}

/// Matching closed-form `z₁(t)` in `{z₂ ≥ 1}`.
pub fn region_excursion_z1(z1_0: f64, p: &RefParams, t: f64) -> f64 {
    1.0 - (1.0 - z1_0) * (-p.w * t).exp()
}

/// `V(z) = β₀ (z₁ − Q*)² + (z₂ − Q*)²`.
pub fn lyapunov_value(z: RefPoint, p: &RefParams) -> f64 {
    let a = z.y1 - p.q_star;
    let b = z.y2 - p.q_star;
    p.beta0 * a * a + b * b
}

/// Eigenvalues of `A = [[−1, 1], [−β₀, 0]]`, roots of `λ² + λ + β₀`.
///
/// The flow inside the unit square is `ż = w A (z − y*)`, so its rates are
/// these values times `w`. Real roots are returned in ascending order,
/// complex ones with the positive imaginary part first.
pub fn stability_eigenvalues(beta0: f64) -> [Complex64; 2] {
    // λ² − tr λ + det with tr = −1, det = β₀.
    let b = 1.0;
    let c = beta0;
    let disc = b * b - 4.0 * c;
    if disc >= 0.0 {
        // Cancellation-free pair: q = −(b + √disc)/2, roots q and c/q.
        let q = -0.5 * (b + disc.sqrt());
        let (r1, r2) = (q, c / q);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        [Complex64::new(lo, 0.0), Complex64::new(hi, 0.0)]
    } else {
        let im = 0.5 * (-disc).sqrt();
        [Complex64::new(-0.5 * b, im), Complex64::new(-0.5 * b, -im)]
    }
}

/// Exact solution of the linear flow `ż = w A (z − y*)` valid while the
/// trajectory stays inside the unit square.
pub fn linear_flow(z0: RefPoint, p: &RefParams, t: f64) -> RefPoint {
    let wt = p.w * t;
    // M = wt·A, s = tr(M)/2, disc = s² − det(M).
    let m = [[-wt, wt], [-p.beta0 * wt, 0.0]];
    let s = -wt / 2.0;
    let disc = s * s - p.beta0 * wt * wt;
    let (c0, c1) = if disc > 0.0 {
        let d = disc.sqrt();
        (d.cosh(), d.sinh() / d)
    } else if disc < 0.0 {
        let d = (-disc).sqrt();
        (d.cos(), d.sin() / d)
    } else {
        (1.0, 1.0)
    };
    let es = s.exp();
    // E = e^s (c0 I + c1 (M − s I))
    let e = [
        [es * (c0 + c1 * (m[0][0] - s)), es * c1 * m[0][1]],
        [es * c1 * m[1][0], es * (c0 + c1 * (m[1][1] - s))],
    ];
    let u = [z0.y1 - p.q_star, z0.y2 - p.q_star];
    RefPoint::new(
        p.q_star + e[0][0] * u[0] + e[0][1] * u[1],
        p.q_star + e[1][0] * u[0] + e[1][1] * u[1],
    )
}

/// Evenly spaced `side × side` grid over `[y1_lo, y1_hi] × [y2_lo, y2_hi]`.
pub fn start_grid(side: usize, y1: (f64, f64), y2: (f64, f64)) -> Vec<RefPoint> {
    let lerp = |(lo, hi): (f64, f64), i: usize| {
        if side <= 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (side - 1) as f64
        }
    };
    (0..side)
        .flat_map(|i| (0..side).map(move |j| RefPoint::new(lerp(y1, i), lerp(y2, j))))
        .collect()
}

/// Largest `|y₂(k)|` reached by the discrete map from a 21×21 grid over the unit
/// square, iterated for `horizon` units of `t = εk` (scaled by `1/w`).
pub fn estimate_k2_prime(p: &RefParams, horizon: f64) -> f64 {
    let steps = (horizon / (p.epsilon * p.w)).ceil() as usize;
    start_grid(21, (0.0, 1.0), (0.0, 1.0))
        .into_iter()
        .map(|y0| {
            let mut y = y0;
            let mut peak = y.y2.abs();
            for _ in 0..steps {
                y = y.axpy(p.epsilon, vector_field_h(y, p));
                peak = peak.max(y.y2.abs());
            }
            peak
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    /// First horizon tried, in units of `t = εk`.
    pub tau_start: f64,
    /// Geometric growth factor between successive horizons.
    pub tau_growth: f64,
    /// Give up beyond this horizon.
    pub tau_cap: f64,
    /// Largest acceptable `B̂₁`.
    pub b1_cap: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            tau_start: 0.5,
            tau_growth: 1.25,
            tau_cap: 500.0,
            b1_cap: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionEstimate {
    pub tau: f64,
    pub b1: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("no horizon up to {tau_cap} halves the distance to the fixed point within B1 <= {b1_cap}; best B1 seen {best_b1} at tau {best_tau}")]
pub struct ProbeFailure {
    pub tau_cap: f64,
    pub b1_cap: f64,
    pub best_tau: f64,
    pub best_b1: f64,
}

/// Smallest horizon `τ̂` on a geometric grid such that, for every start and
/// every `ε`, `‖y(τ̂/ε) − y*‖ ≤ ½‖y(0) − y*‖ + B̂₁ ε` with `B̂₁ ≤ b1_cap`.
///
/// `B̂₁` is fitted as the smallest constant making the inequality hold at `τ̂`.
pub fn contraction_probe(p: &RefParams, eps_list: &[f64], starts: &[RefPoint], opts: &ProbeOptions) -> Result<ContractionEstimate, ProbeFailure> {
    let target = p.fixed_point();
    let mut tau = opts.tau_start;
    let mut best = (f64::NAN, f64::INFINITY);
    while tau <= opts.tau_cap {
        let mut b1 = 0.0f64;
        for &eps in eps_list {
            let pe = RefParams { epsilon: eps, ..*p };
            let steps = (tau / eps).round() as usize;
            for &y0 in starts {
                let d0 = y0.dist(target);
                let d1 = discrete_endpoint(y0, &pe, steps).dist(target);
                b1 = b1.max((d1 - 0.5 * d0) / eps);
            }
        }
        if b1 < best.1 {
            best = (tau, b1);
        }
        if b1 <= opts.b1_cap {
            return Ok(ContractionEstimate { tau, b1 });
        }
        tau *= opts.tau_growth;
    }
    Err(ProbeFailure {
        tau_cap: opts.tau_cap,
        b1_cap: opts.b1_cap,
        best_tau: best.0,
        best_b1: best.1,
    })
}

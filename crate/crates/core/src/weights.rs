//! Carleman weights in log space, the cutoff `χ`, and the weighted
//! functionals used as empirical diagnostics.
//!
//! With a spatial profile `η` (positive inside, zero on the boundary, one
//! critical point located in the innermost region) the weights are
//!
//! ```text
//! α = (e^{2λm} − e^{λ(m+η)}) / (t(T−t)),   ξ = e^{λ(m+η)} / (t(T−t)),
//! β = (e^{2λm} − e^{λ(m+η)}) / ℓ(t),       ζ = e^{λ(m+η)} / ℓ(t),
//! ℓ(t) = t(T−t) for t ≤ T/2 and T²/4 afterwards,
//! ```
//!
//! and the time-only family built from `γ = β̂/5`, `β̂ = max_x β`:
//!
//! ```text
//! μ = e^{5sγ} ℓ^{3/2},  μ₀ = e^{4sγ} ℓ^{3/2},  μ₁ = μ₀ ℓ²,
//! μ_k = e^{3sγ} ℓ^{(2k+9)/2}  (k = 2..5).
//! ```
//!
//! All of these overflow double precision long before `t → 0`, so only their
//! logarithms are stored. Weights are sampled at time-cell midpoints, never at
//! the singular endpoints.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    normal_derivative, project, sbp_laplacian, RegionMasks, SpaceTimeField, SpatialGrid, TimeGrid,
};
use crate::linalg::{LogSum, LogValue};
use crate::pdecore::operators::{LinearOperatorSet, ObservationCoupling};
use crate::pdecore::solvers::{backward_with, forward_with};

/// Default exponent above which normalized weights underflow to zero.
pub const DEFAULT_RHO_CLIP: f64 = 700.0;

/// Smallest number of time cells whose least-squares weights must survive
/// the underflow threshold.
pub const MIN_RESOLVED_CELLS: usize = 8;

/// Spatial weight profile `η`.
#[derive(Debug, Clone, Serialize)]
pub struct EtaProfile {
    /// Peak location `c`.
    pub peak: f64,
    /// Domain length.
    pub length: f64,
    /// Curvature parameter shared by the two arcs (`η″(c) = −q`).
    pub q: f64,
    /// Samples of `η` on the grid nodes.
    pub values: Vec<f64>,
    /// Samples of `η′` on the grid nodes.
    pub derivative: Vec<f64>,
    /// Smallest `|η′|` over grid nodes outside the innermost region.
    pub floor: f64,
}

/// Quintic arc on `[0, 1]` with `P(0) = 0`, `P′(0) = 1`, `P″(0) = 0`,
/// `P(1) = 1`, `P′(1) = 0`, `P″(1) = −qq`. Returns `(P, P′, P″)`.
fn arc(s: f64, qq: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let s5 = s4 * s;
    // Hermite basis: slope at 0, value at 1, curvature at 1.
    let h1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
    let h5 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
    let h3 = 0.5 * (s3 - 2.0 * s4 + s5);
    let d1 = 1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4;
    let d5 = 30.0 * s2 - 60.0 * s3 + 30.0 * s4;
    let d3 = 0.5 * (3.0 * s2 - 8.0 * s3 + 5.0 * s4);
    let dd1 = -36.0 * s + 96.0 * s2 - 60.0 * s3;
    let dd5 = 60.0 * s - 180.0 * s2 + 120.0 * s3;
    let dd3 = 0.5 * (6.0 * s - 24.0 * s2 + 20.0 * s3);
    (h1 + h5 - qq * h3, d1 + d5 - qq * d3, dd1 + dd5 - qq * dd3)
}

impl EtaProfile {
    /// `(η, η′, η″)` at `x ∈ [0, L]`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let c = self.peak;
        if x <= c {
            let a = c;
            let (p, dp, ddp) = arc(x / a, self.q * a * a);
            (p, dp / a, ddp / (a * a))
        } else {
            let a = self.length - c;
            let (p, dp, ddp) = arc((self.length - x) / a, self.q * a * a);
            (p, -dp / a, ddp / (a * a))
        }
    }
}

/// Build `η` from two quintic arcs meeting at the peak `c` with matching
/// value, slope and curvature, and verify its defining properties on the
/// grid and on a dense sample of `10⁴` points.
pub fn build_eta(grid: &SpatialGrid, masks: &RegionMasks, peak: f64) -> Result<EtaProfile> {
    let l = grid.length();
    if !masks.omega1.contains(peak) {
        return Err(Error::Config(format!(
            "eta peak {peak} must lie strictly inside the innermost region ({}, {})",
            masks.omega1.lo, masks.omega1.hi
        )));
    }
    let amax = peak.max(l - peak);
    // Curvature at the peak; with this choice both arcs are strictly
    // monotone (the curvature parameter of each arc is at most 16).
    let q = 16.0 / (amax * amax);
    let mut eta = EtaProfile {
        peak,
        length: l,
        q,
        values: Vec::with_capacity(grid.nodes()),
        derivative: Vec::with_capacity(grid.nodes()),
        floor: f64::INFINITY,
    };
    for i in 0..grid.nodes() {
        let x = grid.x(i);
        let (v, d, _) = eta.eval(x);
        eta.values.push(if grid.is_boundary(i) { 0.0 } else { v });
        eta.derivative.push(d);
        if !masks.omega1.contains(x) {
            eta.floor = eta.floor.min(d.abs());
        }
    }
    let n = grid.cells();
    if eta.values[1..n].iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Eta {
            message: "eta must lie in (0, 1] at interior nodes".into(),
            floor: eta.floor,
        });
    }
    let dense = 10_000;
    let mut dense_floor = f64::INFINITY;
    let mut prev = 0.0;
    for k in 1..=dense {
        let x = l * k as f64 / dense as f64;
        let (v, d, _) = eta.eval(x);
        let increasing = x <= peak;
        if (increasing && v < prev) || (!increasing && v > prev && x > peak + l / dense as f64) {
            return Err(Error::Eta {
                message: format!("eta is not monotone near x = {x}"),
                floor: eta.floor,
            });
        }
        prev = v;
        if !masks.omega1.contains(x) {
            dense_floor = dense_floor.min(d.abs());
        }
    }
    if !(eta.floor > 0.0 && dense_floor > 0.0) {
        return Err(Error::Eta {
            message: "eta has a critical point outside the innermost region".into(),
            floor: eta.floor.min(dense_floor),
        });
    }
    Ok(eta)
}

/// Carleman parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightParams {
    /// `s = C_s (T + T²)`.
    pub s: f64,
    /// `λ ≥ 1`.
    pub lambda: f64,
    /// `m > 1`.
    pub m: f64,
    /// Multiplier `C_s ≥ 1`.
    pub c_s: f64,
    /// Underflow threshold for normalized weight exponents.
    pub rho_clip: f64,
}

impl WeightParams {
    /// Parameters with `s = c_s (T + T²)`.
    pub fn new(lambda: f64, m: f64, c_s: f64, horizon: f64, rho_clip: f64) -> Self {
        Self {
            s: c_s * (horizon + horizon * horizon),
            lambda,
            m,
            c_s,
            rho_clip,
        }
    }
}

/// The smallest admissible `m` for a given `λ`: `log(5e^λ − 4)/λ`.
///
/// Above it, `max_x β < (5/4) min_x β` at every time.
pub fn m_threshold(lambda: f64) -> f64 {
    (5.0 * lambda.exp() - 4.0).ln() / lambda
}

/// Check the parameter constraints and return the `m` threshold.
pub fn validate_params(p: &WeightParams, horizon: f64) -> Result<f64> {
    if !(p.lambda.is_finite() && p.lambda >= 1.0) {
        return Err(Error::Parameter {
            message: format!("lambda = {} must be at least 1", p.lambda),
            threshold: 1.0,
        });
    }
    if !(p.c_s.is_finite() && p.c_s >= 1.0) {
        return Err(Error::Parameter {
            message: format!("C_s = {} must be at least 1 (s = C_s(T + T²))", p.c_s),
            threshold: 1.0,
        });
    }
    let expected = p.c_s * (horizon + horizon * horizon);
    if (p.s - expected).abs() > 1e-12 * expected || p.s < 1.0 {
        return Err(Error::Parameter {
            message: format!("s = {} must equal C_s(T + T²) = {expected} and be ≥ 1", p.s),
            threshold: expected.max(1.0),
        });
    }
    if !(p.rho_clip.is_finite() && p.rho_clip > 0.0 && p.rho_clip <= 740.0) {
        return Err(Error::Parameter {
            message: format!(
                "clamp threshold {} must lie in (0, 740] (the double underflow range)",
                p.rho_clip
            ),
            threshold: 740.0,
        });
    }
    let thr = m_threshold(p.lambda);
    if !(p.m > thr && p.m > 1.0) {
        return Err(Error::Parameter {
            message: format!(
                "m = {} must exceed log(5e^λ − 4)/λ for λ = {}",
                p.m, p.lambda
            ),
            threshold: thr.max(1.0),
        });
    }
    Ok(thr)
}

/// `ℓ(t)`.
pub fn ell(t: f64, horizon: f64) -> f64 {
    if t <= 0.5 * horizon {
        t * (horizon - t)
    } else {
        0.25 * horizon * horizon
    }
}

/// `ℓ′(t)`, with the left and right limits agreeing at `T/2`.
pub fn ell_derivative(t: f64, horizon: f64) -> f64 {
    if t <= 0.5 * horizon {
        horizon - 2.0 * t
    } else {
        0.0
    }
}

/// Sampled weights on the grid nodes and time-cell midpoints.
#[derive(Debug, Clone, Serialize)]
pub struct WeightTables {
    /// Parameters used.
    pub params: WeightParams,
    /// Horizon `T`.
    pub horizon: f64,
    /// Evaluation times (cell midpoints), one per cell.
    pub times: Vec<f64>,
    /// `ℓ` per cell.
    pub ell: Vec<f64>,
    /// `γ = β̂/5` per cell.
    pub gamma: Vec<f64>,
    /// `β̂ = max_x β` per cell.
    pub beta_hat: Vec<f64>,
    /// `β̌ = min_x β` per cell.
    pub beta_check: Vec<f64>,
    /// `log μ` per cell.
    pub log_mu: Vec<f64>,
    /// `log μ_k` per cell, `k = 0..=5`.
    pub log_mu_k: [Vec<f64>; 6],
    /// `log α`, row-major by cell then node.
    pub log_alpha: Vec<f64>,
    /// `log ξ`, row-major by cell then node.
    pub log_xi: Vec<f64>,
    /// `log β`, row-major by cell then node.
    pub log_beta: Vec<f64>,
    /// `log ζ`, row-major by cell then node.
    pub log_zeta: Vec<f64>,
    /// Normalization shift: `min_c log μ₀`.
    pub log_shift: f64,
    /// Normalized least-squares weight `μ₀⁻² e^{2·shift}` per cell.
    pub fi_weight0: Vec<f64>,
    /// Normalized least-squares weight `μ₁⁻² e^{2·shift}` per cell.
    pub fi_weight1: Vec<f64>,
    /// Cells where the normalized weight `fi_weight0` underflowed to zero.
    pub clamped: Vec<bool>,
    nodes: usize,
}

impl WeightTables {
    /// Number of grid nodes.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Number of time cells.
    pub fn cells(&self) -> usize {
        self.times.len()
    }

    fn idx(&self, c: usize, i: usize) -> usize {
        (c - 1) * self.nodes + i
    }

    /// `log α` at cell `c` (1-based) and node `i`.
    pub fn log_alpha(&self, c: usize, i: usize) -> f64 {
        self.log_alpha[self.idx(c, i)]
    }

    /// `log ξ` at cell `c` and node `i`.
    pub fn log_xi(&self, c: usize, i: usize) -> f64 {
        self.log_xi[self.idx(c, i)]
    }

    /// `log β` at cell `c` and node `i`.
    pub fn log_beta(&self, c: usize, i: usize) -> f64 {
        self.log_beta[self.idx(c, i)]
    }

    /// `log ζ` at cell `c` and node `i`.
    pub fn log_zeta(&self, c: usize, i: usize) -> f64 {
        self.log_zeta[self.idx(c, i)]
    }

    /// `log μ_k` at cell `c`.
    pub fn log_mu(&self, k: usize, c: usize) -> f64 {
        self.log_mu_k[k][c - 1]
    }

    /// Number of cells whose normalized weight survived.
    pub fn resolved_cells(&self) -> usize {
        self.clamped.iter().filter(|&&b| !b).count()
    }

    /// Rows `(t, ℓ, γ, log μ, log μ₀, …, log μ₅)` for tabular output.
    pub fn profile_rows(&self) -> Vec<[f64; 10]> {
        (0..self.cells())
            .map(|j| {
                [
                    self.times[j],
                    self.ell[j],
                    self.gamma[j],
                    self.log_mu[j],
                    self.log_mu_k[0][j],
                    self.log_mu_k[1][j],
                    self.log_mu_k[2][j],
                    self.log_mu_k[3][j],
                    self.log_mu_k[4][j],
                    self.log_mu_k[5][j],
                ]
            })
            .collect()
    }
}

/// Sample all weights at the cell midpoints.
///
/// The least-squares weights `μ₀⁻²`, `μ₁⁻²` are normalized by the common
/// factor `e^{2 min log μ₀}` (which cancels in the control construction) and
/// set to exactly zero where the normalized exponent exceeds `ρ_clip`.
///
/// # Errors
///
/// [`Error::Resolution`] when fewer than [`MIN_RESOLVED_CELLS`] cells keep a
/// nonzero weight: the grid cannot resolve the weights.
pub fn build_weight_tables(
    grid: &SpatialGrid,
    time: &TimeGrid,
    eta: &EtaProfile,
    params: &WeightParams,
) -> Result<WeightTables> {
    validate_params(params, time.horizon())?;
    if eta.values.len() != grid.nodes() {
        return Err(Error::GridMismatch("eta profile node count".into()));
    }
    let (s, lam, m) = (params.s, params.lambda, params.m);
    let tt = time.horizon();
    let cells = time.steps();
    let np = grid.nodes();
    // log(e^{2λm} − e^{λ(m+η)}) = 2λm + log(1 − e^{λ(η−m)}).
    let log_num: Vec<f64> = eta
        .values
        .iter()
        .map(|&e| 2.0 * lam * m + (-(lam * (e - m)).exp()).ln_1p())
        .collect();
    let log_den_xi: Vec<f64> = eta.values.iter().map(|&e| lam * (m + e)).collect();
    let beta_num_hat = (2.0 * lam * m).exp() - (lam * m).exp();
    let beta_num_check = (2.0 * lam * m).exp() - (lam * (m + 1.0)).exp();

    let mut t = WeightTables {
        params: *params,
        horizon: tt,
        times: Vec::with_capacity(cells),
        ell: Vec::with_capacity(cells),
        gamma: Vec::with_capacity(cells),
        beta_hat: Vec::with_capacity(cells),
        beta_check: Vec::with_capacity(cells),
        log_mu: Vec::with_capacity(cells),
        log_mu_k: Default::default(),
        log_alpha: Vec::with_capacity(cells * np),
        log_xi: Vec::with_capacity(cells * np),
        log_beta: Vec::with_capacity(cells * np),
        log_zeta: Vec::with_capacity(cells * np),
        log_shift: 0.0,
        fi_weight0: Vec::with_capacity(cells),
        fi_weight1: Vec::with_capacity(cells),
        clamped: Vec::with_capacity(cells),
        nodes: np,
    };
    for c in 1..=cells {
        let tm = time.midpoint(c);
        let l = ell(tm, tt);
        let log_l = l.ln();
        let log_tt = (tm * (tt - tm)).ln();
        let bh = beta_num_hat / l;
        let bc = beta_num_check / l;
        if !(bh < 1.25 * bc) {
            return Err(Error::Internal(format!(
                "max β = {bh} is not below 5/4 · min β = {} at t = {tm}",
                1.25 * bc
            )));
        }
        let g = bh / 5.0;
        t.times.push(tm);
        t.ell.push(l);
        t.gamma.push(g);
        t.beta_hat.push(bh);
        t.beta_check.push(bc);
        t.log_mu.push(5.0 * s * g + 1.5 * log_l);
        let mu0 = 4.0 * s * g + 1.5 * log_l;
        t.log_mu_k[0].push(mu0);
        t.log_mu_k[1].push(mu0 + 2.0 * log_l);
        for k in 2..=5 {
            t.log_mu_k[k].push(3.0 * s * g + (2.0 * k as f64 + 9.0) / 2.0 * log_l);
        }
        for i in 0..np {
            t.log_alpha.push(log_num[i] - log_tt);
            t.log_xi.push(log_den_xi[i] - log_tt);
            t.log_beta.push(log_num[i] - log_l);
            t.log_zeta.push(log_den_xi[i] - log_l);
        }
    }
    t.log_shift = t.log_mu_k[0].iter().cloned().fold(f64::INFINITY, f64::min);
    let clip = params.rho_clip;
    for j in 0..cells {
        let e0 = 2.0 * (t.log_mu_k[0][j] - t.log_shift);
        let e1 = 2.0 * (t.log_mu_k[1][j] - t.log_shift);
        let clamped = e0 > clip;
        t.clamped.push(clamped);
        t.fi_weight0.push(if clamped { 0.0 } else { (-e0).exp() });
        t.fi_weight1.push(if e1 > clip { 0.0 } else { (-e1).exp() });
    }
    let resolved = t.resolved_cells();
    if resolved < MIN_RESOLVED_CELLS {
        return Err(Error::Resolution(format!(
            "only {resolved} of {cells} time cells keep a nonzero least-squares weight \
             (at least {MIN_RESOLVED_CELLS} are required); refine M or reduce s, λ, m"
        )));
    }
    Ok(t)
}

/// Empirical constant of one elementary weight inequality.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateEntry {
    /// Inequality label.
    pub name: String,
    /// `max_t log(LHS/RHS)`; the empirical constant is its exponential.
    pub max_log_ratio: f64,
}

/// Empirical constants of the elementary inequalities between the `μ`
/// weights, and the residual of the algebraic identity
/// `μ₃ μ₁⁻² = μ⁻¹ ℓ²`.
#[derive(Debug, Clone, Serialize)]
pub struct ElementaryEstimates {
    /// Largest residual of the identity, in log space, relative to the sum of
    /// the magnitudes of the logs involved.
    pub identity_residual: f64,
    /// One entry per inequality.
    pub entries: Vec<EstimateEntry>,
}

/// Coefficients `(p, q)` of `log μ_k = p·s·γ + q·log ℓ` (`k = None` for `μ`).
fn mu_exponents(k: Option<usize>) -> (f64, f64) {
    match k {
        None => (5.0, 1.5),
        Some(0) => (4.0, 1.5),
        Some(1) => (4.0, 3.5),
        Some(k) => (3.0, (2.0 * k as f64 + 9.0) / 2.0),
    }
}

/// Evaluate the elementary weight inequalities.
///
/// The weights are closed-form functions of time, so time derivatives are
/// exact: with `γ = γ̄/ℓ`, `d/dt log μ_k = (q − p·s·γ) ℓ′/ℓ` for
/// `log μ_k = p·s·γ + q·log ℓ`. Difference quotients would not resolve
/// weights that change by many orders of magnitude per cell near `t = 0`.
pub fn check_elementary_estimates(t: &WeightTables) -> Result<ElementaryEstimates> {
    let cells = t.cells();
    let s = t.params.s;
    let mu = |k: usize, j: usize| t.log_mu_k[k][j];
    let mut identity_residual = 0.0_f64;
    for j in 0..cells {
        let terms = [mu(3, j), -2.0 * mu(1, j), t.log_mu[j], -2.0 * t.ell[j].ln()];
        let sum: f64 = terms.iter().sum();
        let scale: f64 = terms.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        identity_residual = identity_residual.max(sum.abs() / scale);
    }
    if identity_residual > 1e-12 {
        return Err(Error::Internal(format!(
            "weight identity μ₃μ₁⁻² = μ⁻¹ℓ² violated (relative log residual {identity_residual:e})"
        )));
    }
    // d/dt log of e^{p s γ + q log ℓ}.
    let dlog = |(p, q): (f64, f64), j: usize| -> f64 {
        let l = t.ell[j];
        (q - p * s * t.gamma[j]) * ell_derivative(t.times[j], t.horizon) / l
    };
    let log_abs = |x: f64| {
        if x == 0.0 {
            f64::NEG_INFINITY
        } else {
            x.abs().ln()
        }
    };
    let max_over = |f: &dyn Fn(usize) -> f64| (0..cells).map(f).fold(f64::NEG_INFINITY, f64::max);
    let mut entries = Vec::new();
    let mut push = |name: &str, v: f64| {
        entries.push(EstimateEntry {
            name: name.to_string(),
            max_log_ratio: v,
        })
    };
    let (p3, q3) = mu_exponents(Some(3));
    let (p1, q1) = mu_exponents(Some(1));
    let e31 = (p3 - 2.0 * p1, q3 - 2.0 * q1);
    push(
        "(mu3 mu1^-2)_t <= C mu^-1",
        max_over(&|j| mu(3, j) - 2.0 * mu(1, j) + log_abs(dlog(e31, j)) + t.log_mu[j]),
    );
    push(
        "|mu3_t| <= C mu1",
        max_over(&|j| mu(3, j) + log_abs(dlog(mu_exponents(Some(3)), j)) - mu(1, j)),
    );
    push("mu0 <= C mu", max_over(&|j| mu(0, j) - t.log_mu[j]));
    push("mu <= C mu5^2", max_over(&|j| t.log_mu[j] - 2.0 * mu(5, j)));
    for k in 1..=5 {
        push(
            &format!("mu{k} <= C mu{}", k - 1),
            max_over(&|j| mu(k, j) - mu(k - 1, j)),
        );
    }
    for k in 2..=5 {
        push(
            &format!("|mu{k} mu{k}_t| <= C mu{}^2", k - 1),
            max_over(&|j| {
                2.0 * mu(k, j) + log_abs(dlog(mu_exponents(Some(k)), j)) - 2.0 * mu(k - 1, j)
            }),
        );
    }
    Ok(ElementaryEstimates {
        identity_residual,
        entries,
    })
}

/// Cutoff `χ` with `χ = 1` on the outer region `ω‴` and `χ = 0` outside `ω`.
#[derive(Debug, Clone, Serialize)]
pub struct ChiBump {
    /// Samples of `χ`.
    pub values: Vec<f64>,
    /// Samples of `χ′`.
    pub d1: Vec<f64>,
    /// Samples of `χ″`.
    pub d2: Vec<f64>,
}

/// Quintic smoothstep `S(u) = 6u⁵ − 15u⁴ + 10u³` and its two derivatives.
fn smoothstep(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if u >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let u2 = u * u;
    (
        u2 * u * (10.0 - 15.0 * u + 6.0 * u2),
        30.0 * u2 * (1.0 - u) * (1.0 - u),
        60.0 * u * (1.0 - u) * (1.0 - 2.0 * u),
    )
}

/// Build `χ` from smoothstep ramps across `ω \ ω‴` on each side.
pub fn build_chi(grid: &SpatialGrid, masks: &RegionMasks) -> Result<ChiBump> {
    let (w, w3) = (masks.omega, masks.omega3);
    let wl = w3.lo - w.lo;
    let wr = w.hi - w3.hi;
    let h = grid.spacing();
    if wl < 2.0 * h || wr < 2.0 * h {
        return Err(Error::Resolution(format!(
            "the outer region is not compactly inside the control region at grid resolution \
             (ramp widths {wl}, {wr}, need at least 2h = {})",
            2.0 * h
        )));
    }
    let mut chi = ChiBump {
        values: Vec::with_capacity(grid.nodes()),
        d1: Vec::with_capacity(grid.nodes()),
        d2: Vec::with_capacity(grid.nodes()),
    };
    for i in 0..grid.nodes() {
        let x = grid.x(i);
        let (v, d, dd) = if x <= w.lo || x >= w.hi {
            (0.0, 0.0, 0.0)
        } else if x < w3.lo {
            let (v, d, dd) = smoothstep((x - w.lo) / wl);
            (v, d / wl, dd / (wl * wl))
        } else if x > w3.hi {
            let (v, d, dd) = smoothstep((w.hi - x) / wr);
            (v, -d / wr, dd / (wr * wr))
        } else {
            (1.0, 0.0, 0.0)
        };
        chi.values.push(v);
        chi.d1.push(d);
        chi.d2.push(dd);
    }
    Ok(chi)
}

/// Which weighted functional to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CarlemanKind {
    /// The functional `I` with the doubly singular weights `α`, `ξ`.
    Classical,
    /// The functional `J` with the weights `β`, `ℓ` singular at `t = 0` only.
    Modified,
}

/// Additive terms of a weighted functional.
#[derive(Debug, Clone, Serialize)]
pub struct CarlemanBreakdown {
    /// Named components (bulk then surface), each a log-space value.
    pub components: Vec<(String, LogValue)>,
    /// Sum of the components.
    pub total: LogValue,
    /// The same total accumulated directly in a single pass.
    pub direct_total: LogValue,
}

const COMPONENTS: [&str; 9] = [
    "bulk_time_derivative",
    "bulk_laplacian",
    "bulk_gradient",
    "bulk_value",
    "surface_time_derivative",
    "surface_laplace_beltrami",
    "surface_tangential_gradient",
    "surface_value",
    "normal_derivative",
];

/// Evaluate `I(Φ, s, λ, t₁, t₂)` or `J(Φ, s, λ, t₁, t₂)` for a
/// trace-compatible field on the cells whose midpoints lie in `[t₁, t₂]`.
///
/// Time derivatives are cell differences, spatial quantities are evaluated
/// on cell averages, the bulk integral is the trapezoid rule (gradients on
/// faces with log-averaged weights), and the time integral is the midpoint
/// rule. Tangential surface terms vanish identically on a two-point boundary.
pub fn carleman_functional(
    kind: CarlemanKind,
    phi: &SpaceTimeField,
    grid: &SpatialGrid,
    tables: &WeightTables,
    t1: f64,
    t2: f64,
) -> Result<CarlemanBreakdown> {
    let cells = tables.cells();
    if phi.steps() != cells || phi.slices[0].bulk.len() != grid.nodes() {
        return Err(Error::GridMismatch(
            "field does not match the weight tables".into(),
        ));
    }
    let dt = tables.horizon / cells as f64;
    let h = grid.spacing();
    let n = grid.cells();
    let (s, lam) = (tables.params.s, tables.params.lambda);
    let mut parts = [LogSum::new(); 9];
    let mut direct = LogSum::new();
    let mut add = |k: usize, lw: f64, v: f64, parts: &mut [LogSum; 9]| {
        parts[k].add(lw, v);
        direct.add(lw, v);
    };
    let ln_s = s.ln();
    let ln_l = lam.ln();
    let mut avg = vec![0.0; n + 1];
    let mut dtv = vec![0.0; n + 1];
    for c in 1..=cells {
        let tm = tables.times[c - 1];
        if tm < t1 || tm > t2 {
            continue;
        }
        let (a, b) = (&phi.slices[c - 1], &phi.slices[c]);
        for i in 0..=n {
            avg[i] = 0.5 * (a.bulk[i] + b.bulk[i]);
            dtv[i] = (b.bulk[i] - a.bulk[i]) / dt;
        }
        let lap = sbp_laplacian(&avg, grid)?;
        let nd = normal_derivative(&avg, grid)?;
        let surf_avg = [
            0.5 * (a.surface[0] + b.surface[0]),
            0.5 * (a.surface[1] + b.surface[1]),
        ];
        let surf_dt = [
            (b.surface[0] - a.surface[0]) / dt,
            (b.surface[1] - a.surface[1]) / dt,
        ];
        let log_ell = tables.ell[c - 1].ln();
        // Per-node log-weights: exponential factor and the powers of sξ or ℓ.
        let node_weight = |i: usize, p: f64, lam_pow: f64| -> f64 {
            match kind {
                CarlemanKind::Classical => {
                    -2.0 * s * tables.log_alpha(c, i).exp()
                        + p * (ln_s + tables.log_xi(c, i))
                        + lam_pow * ln_l
                }
                // ℓ-powers: the I-exponent p maps to −p in J.
                CarlemanKind::Modified => -2.0 * s * tables.log_beta(c, i).exp() - p * log_ell,
            }
        };
        let ldt = dt.ln();
        for i in 0..=n {
            let lq = (grid.trapezoid_weight(i)).ln() + ldt;
            add(
                0,
                lq + node_weight(i, -1.0, 0.0),
                dtv[i] * dtv[i],
                &mut parts,
            );
            add(
                1,
                lq + node_weight(i, -1.0, 0.0),
                lap[i] * lap[i],
                &mut parts,
            );
            add(
                3,
                lq + node_weight(i, 3.0, 4.0),
                avg[i] * avg[i],
                &mut parts,
            );
        }
        for f in 0..n {
            let g = (avg[f + 1] - avg[f]) / h;
            let lw = 0.5 * (node_weight(f, 1.0, 2.0) + node_weight(f + 1, 1.0, 2.0));
            add(2, h.ln() + ldt + lw, g * g, &mut parts);
        }
        for (k, i) in [0, n].into_iter().enumerate() {
            add(
                4,
                ldt + node_weight(i, -1.0, 0.0),
                surf_dt[k] * surf_dt[k],
                &mut parts,
            );
            let lam_val = if kind == CarlemanKind::Classical {
                3.0
            } else {
                0.0
            };
            add(
                7,
                ldt + node_weight(i, 3.0, lam_val),
                surf_avg[k] * surf_avg[k],
                &mut parts,
            );
            let lam_nd = if kind == CarlemanKind::Classical {
                1.0
            } else {
                0.0
            };
            add(
                8,
                ldt + node_weight(i, 1.0, lam_nd),
                nd[k] * nd[k],
                &mut parts,
            );
        }
    }
    let mut total = LogSum::new();
    let mut components = Vec::with_capacity(9);
    for (k, p) in parts.iter().enumerate() {
        let v = p.total();
        total.add_log(v);
        components.push((COMPONENTS[k].to_string(), v));
    }
    Ok(CarlemanBreakdown {
        components,
        total: total.total(),
        direct_total: direct.total(),
    })
}

/// Right-hand side of the Carleman inequality for a sample.
fn carleman_rhs(
    kind: CarlemanKind,
    phi: &SpaceTimeField,
    f1: &SpaceTimeField,
    g1: &SpaceTimeField,
    grid: &SpatialGrid,
    masks: &RegionMasks,
    tables: &WeightTables,
) -> LogValue {
    let cells = tables.cells();
    let dt = tables.horizon / cells as f64;
    let n = grid.cells();
    let (s, lam) = (tables.params.s, tables.params.lambda);
    let mut acc = LogSum::new();
    for c in 1..=cells {
        let log_ell = tables.ell[c - 1].ln();
        let ldt = dt.ln();
        let (a, b) = (&phi.slices[c - 1].bulk, &phi.slices[c].bulk);
        let fc = f1.cell(c);
        let gc = g1.cell(c);
        for i in 0..=n {
            let lq = grid.trapezoid_weight(i).ln() + ldt;
            let (expo, obs_pow, src_pow) = match kind {
                CarlemanKind::Classical => {
                    let e = -2.0 * s * tables.log_alpha(c, i).exp();
                    let lx = tables.log_xi(c, i);
                    (
                        e,
                        7.0 * s.ln() + 8.0 * lam.ln() + 7.0 * lx,
                        3.0 * s.ln() + 4.0 * lam.ln() + 3.0 * lx,
                    )
                }
                CarlemanKind::Modified => {
                    let e = -2.0 * s * tables.log_beta(c, i).exp();
                    (e, -7.0 * log_ell, -3.0 * log_ell)
                }
            };
            if masks.omega3_nodes[i] {
                let p = 0.5 * (a[i] + b[i]);
                acc.add(lq + expo + obs_pow, p * p);
            }
            acc.add(lq + expo + src_pow, fc.bulk[i] * fc.bulk[i]);
            acc.add(lq + expo, gc.bulk[i] * gc.bulk[i]);
        }
        for (k, i) in [0, n].into_iter().enumerate() {
            let expo = match kind {
                CarlemanKind::Classical => -2.0 * s * tables.log_alpha(c, i).exp(),
                CarlemanKind::Modified => -2.0 * s * tables.log_beta(c, i).exp(),
            };
            acc.add(ldt + expo, fc.surface[k] * fc.surface[k]);
            acc.add(ldt + expo, gc.surface[k] * gc.surface[k]);
        }
    }
    acc.total()
}

/// Solve the adjoint cascade `LK = g¹`, `K(0) = 0`, then
/// `L*Φ = f¹ + BK`, `Φ(T) = 0`. Returns `(Φ, K)`.
pub fn solve_adjoint_cascade(
    ops: &LinearOperatorSet,
    coupling: &ObservationCoupling,
    f1: &SpaceTimeField,
    g1: &SpaceTimeField,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    ops.check_shape(f1)?;
    ops.check_shape(g1)?;
    let zero = vec![0.0; ops.grid().nodes()];
    let k = forward_with(ops, Some(g1), &zero, |_, _| {});
    let mass = ops.mass().to_vec();
    let phi = backward_with(ops, Some(f1), &zero, |c, src| {
        coupling.add_source(&mass, 1.0, &k.cell(c).bulk, src);
    });
    Ok((phi, k))
}

/// Outcome of the empirical Carleman check.
#[derive(Debug, Clone, Serialize)]
pub struct CarlemanCheck {
    /// Functional used.
    pub kind: CarlemanKind,
    /// `log(LHS/RHS)` per sample (`−∞` for zero samples).
    pub log_ratios: Vec<f64>,
    /// Largest log ratio: the logarithm of the empirical constant.
    pub max_log_ratio: f64,
}

/// For each source sample `(f¹, g¹)` solve the adjoint cascade and compare
/// `I(Φ) + I(K)` (or `J`) with the weighted right-hand side of the Carleman
/// inequality. Zero samples contribute a zero ratio.
#[allow(clippy::too_many_arguments)]
pub fn empirical_carleman_check(
    kind: CarlemanKind,
    samples: &[(SpaceTimeField, SpaceTimeField)],
    ops: &LinearOperatorSet,
    coupling: &ObservationCoupling,
    masks: &RegionMasks,
    tables: &WeightTables,
) -> Result<CarlemanCheck> {
    let grid = ops.grid();
    let tt = tables.horizon;
    let mut log_ratios = Vec::with_capacity(samples.len());
    for (f1, g1) in samples {
        let (phi, k) = solve_adjoint_cascade(ops, coupling, f1, g1)?;
        let lhs = carleman_functional(kind, &phi, grid, tables, 0.0, tt)?
            .total
            .add(carleman_functional(kind, &k, grid, tables, 0.0, tt)?.total);
        let rhs = carleman_rhs(kind, &phi, f1, g1, grid, masks, tables);
        let r = if lhs.is_zero() {
            f64::NEG_INFINITY
        } else {
            lhs.log_ratio(rhs)
        };
        log_ratios.push(r);
    }
    let max_log_ratio = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(CarlemanCheck {
        kind,
        log_ratios,
        max_log_ratio,
    })
}

/// Projected source for a weighted pairing; re-exported for front ends that
/// need the trace-identified form of a field.
pub fn trace_identified(field: &crate::geometry::BulkSurfaceField, grid: &SpatialGrid) -> Vec<f64> {
    project(field, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_masks, Alignment, EndpointSet, Interval};

    fn masks(grid: &SpatialGrid) -> RegionMasks {
        build_masks(
            grid,
            Interval::new(0.3, 0.7).unwrap(),
            Interval::new(0.2, 0.8).unwrap(),
            EndpointSet::default(),
            0.03,
        )
        .unwrap()
    }

    #[test]
    fn threshold_examples() {
        assert!((m_threshold(2.0) - 1.7474).abs() < 1e-4);
        assert!((m_threshold(1.0) - 2.2609).abs() < 1e-4);
        assert!((m_threshold(10.0) - 1.1609).abs() < 1e-4);
        let p = WeightParams::new(2.0, 2.0, 1.0, 1.0, 700.0);
        assert!(validate_params(&p, 1.0).is_ok());
        let p = WeightParams::new(1.0, 2.0, 1.0, 1.0, 700.0);
        match validate_params(&p, 1.0) {
            Err(Error::Parameter { threshold, .. }) => assert!((threshold - 2.2609).abs() < 1e-4),
            other => panic!("{other:?}"),
        }
        assert!(validate_params(&WeightParams::new(10.0, 1.2, 1.0, 1.0, 700.0), 1.0).is_ok());
    }

    #[test]
    fn ell_examples_and_smoothness() {
        assert!((ell(0.25, 1.0) - 0.1875).abs() < 1e-15);
        assert_eq!(ell(0.75, 1.0), 0.25);
        assert!((ell_derivative(0.5, 1.0) - ell_derivative(0.5 + 1e-15, 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn xi_example() {
        // λ = 2, m = 2, η = 1, ℓ = 0.25: ξ = e^6 / 0.25.
        let v: f64 = (2.0 * (2.0 + 1.0) - 0.25_f64.ln()).exp();
        assert!((v - 1613.7).abs() < 0.1);
    }

    #[test]
    fn eta_properties() {
        let g = SpatialGrid::new(1.0, 128).unwrap();
        let mk = masks(&g);
        let e = build_eta(&g, &mk, 0.5).unwrap();
        let (v, d, _) = e.eval(0.5);
        assert!((v - 1.0).abs() < 1e-15 && d.abs() < 1e-15);
        assert_eq!(e.values[0], 0.0);
        assert_eq!(e.values[128], 0.0);
        assert!(e.eval(0.25).1 > 0.0 && e.eval(0.75).1 < 0.0);
        // Curvature matches at the peak.
        let (_, _, left) = e.eval(0.5 - 1e-12);
        let (_, _, right) = e.eval(0.5 + 1e-12);
        assert!((left - right).abs() < 1e-6);

        let e = build_eta(&g, &mk, 0.52).unwrap();
        assert!(e.floor > 0.0);
        assert!(build_eta(&g, &mk, 0.2).is_err());
    }

    #[test]
    fn chi_properties() {
        let g = SpatialGrid::new(1.0, 200).unwrap();
        let mk = masks(&g);
        let chi = build_chi(&g, &mk).unwrap();
        for i in 0..g.nodes() {
            assert!((0.0..=1.0).contains(&chi.values[i]));
            if mk.omega3_nodes[i] {
                assert_eq!(chi.values[i], 1.0);
            }
            if !mk.omega_nodes[i] {
                assert_eq!(chi.values[i], 0.0);
            }
        }
        let mid = 0.5 * (mk.omega.lo + mk.omega3.lo);
        assert!((smoothstep(0.5).0 - 0.5).abs() < 1e-15);
        assert!(mid > mk.omega.lo);
    }

    #[test]
    fn tables_invariants() {
        let g = SpatialGrid::new(1.0, 64).unwrap();
        let t = TimeGrid::new(1.0, 128).unwrap();
        let mk = masks(&g);
        let eta = build_eta(&g, &mk, 0.5).unwrap();
        let p = WeightParams::new(1.0, 2.3, 1.0, 1.0, DEFAULT_RHO_CLIP);
        let w = build_weight_tables(&g, &t, &eta, &p).unwrap();
        for c in 1..=w.cells() {
            assert!(w.beta_hat[c - 1] < 1.25 * w.beta_check[c - 1]);
            if w.times[c - 1] <= 0.5 {
                for i in 0..g.nodes() {
                    assert!((w.log_alpha(c, i) - w.log_beta(c, i)).abs() < 1e-12);
                }
            }
        }
        assert!(w.log_mu_k[0][0] > w.log_mu_k[0][1]);
        let est = check_elementary_estimates(&w).unwrap();
        assert!(est.identity_residual <= 1e-12);
        for e in &est.entries {
            assert!(e.max_log_ratio.is_finite(), "{}", e.name);
        }
        let five = est
            .entries
            .iter()
            .find(|e| e.name == "mu5 <= C mu4")
            .unwrap();
        assert!(five.max_log_ratio <= (0.25_f64).ln() + 1e-12);
    }

    #[test]
    fn functional_zero_and_consistency() {
        let g = SpatialGrid::new(1.0, 32).unwrap();
        let t = TimeGrid::new(1.0, 32).unwrap();
        let mk = masks(&g);
        let eta = build_eta(&g, &mk, 0.5).unwrap();
        let p = WeightParams::new(1.0, 2.3, 1.0, 1.0, DEFAULT_RHO_CLIP);
        let w = build_weight_tables(&g, &t, &eta, &p).unwrap();
        let z = SpaceTimeField::zeros(&g, &t, Alignment::Forward);
        let b = carleman_functional(CarlemanKind::Classical, &z, &g, &w, 0.0, 1.0).unwrap();
        assert!(b.total.is_zero());
        let mut f = SpaceTimeField::from_cell_fn(
            &g,
            &t,
            Alignment::Forward,
            |x, s| (3.0 * x).sin() * (1.0 + s),
            |x, s| (3.0 * x).sin() * (1.0 + s),
        );
        f.slices[0] = crate::geometry::BulkSurfaceField::from_fn(
            &g,
            |x| (3.0 * x).sin(),
            |x| (3.0 * x).sin(),
        );
        for kind in [CarlemanKind::Classical, CarlemanKind::Modified] {
            let b = carleman_functional(kind, &f, &g, &w, 0.0, 1.0).unwrap();
            assert!((b.total.log - b.direct_total.log).abs() < 1e-12);
        }
    }
}

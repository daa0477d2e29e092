//! One-dimensional grids, region masks, bulk-surface fields and the
//! summation-by-parts Laplacian.
//!
//! The domain is the interval `(0, L)` and its boundary is the two endpoints.
//! A bulk-surface field stores nodal bulk values together with one value per
//! endpoint. The pair space carries the inner product "trapezoid integral over
//! the bulk plus the sum of the two endpoint products" (the surface measure of
//! a zero-dimensional boundary is the counting measure). Tangential operators
//! on the boundary vanish identically.
//!
//! # Degrees of freedom
//!
//! Solvers work with trace-identified unknowns `u ∈ R^{N+1}`: the surface value
//! at an endpoint equals the bulk value at that node. In that representation
//! the pair inner product is `uᵀ W v` with the diagonal mass
//! `W_ii = h ω_i + [i ∈ {0, N}]`, where `ω_i` are trapezoid weights (½ at the
//! ends, 1 inside). A general (not trace-compatible) field enters the solvers
//! through its Galerkin projection [`project`], which preserves pairings with
//! every trace-compatible field.
//!
//! # Summation by parts
//!
//! [`sbp_laplacian`] uses the central stencil inside and the one-sided
//! stencil `(y_0 − 2y_1 + y_2)/h²` at the ends, while [`normal_derivative`]
//! uses the second-order one-sided difference. With the face gradient
//! `g_{i+½} = (y_{i+1} − y_i)/h` these satisfy
//!
//! ```text
//! Σ_i h ω_i (Δ_h y)_i w_i = −Σ_f h g_f(y) g_f(w) + Σ_Γ (∂_ν y) w
//! ```
//!
//! exactly for all `y`, `w`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Uniform grid on `(0, L)` with nodes `x_i = i h`, `i = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialGrid {
    length: f64,
    n: usize,
    h: f64,
}

impl SpatialGrid {
    /// Smallest admissible number of cells.
    pub const MIN_CELLS: usize = 8;

    /// Build a grid with `n` cells on `(0, length)`.
    pub fn new(length: f64, n: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Config(format!(
                "domain length must be positive and finite, got {length}"
            )));
        }
        if n < Self::MIN_CELLS {
            return Err(Error::Config(format!(
                "spatial cell count must be at least {}, got {n}",
                Self::MIN_CELLS
            )));
        }
        Ok(Self {
            length,
            n,
            h: length / n as f64,
        })
    }

    /// Domain length `L`.
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of cells `N`.
    pub fn cells(&self) -> usize {
        self.n
    }

    /// Number of nodes `N + 1`.
    pub fn nodes(&self) -> usize {
        self.n + 1
    }

    /// Mesh width `h = L / N`.
    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Coordinate of node `i`.
    pub fn x(&self, i: usize) -> f64 {
        if i == self.n {
            self.length
        } else {
            i as f64 * self.h
        }
    }

    /// Indices of the two boundary nodes, left then right.
    pub fn boundary_nodes(&self) -> [usize; 2] {
        [0, self.n]
    }

    /// Whether node `i` lies on the boundary.
    pub fn is_boundary(&self, i: usize) -> bool {
        i == 0 || i == self.n
    }

    /// Trapezoid quadrature weight `h ω_i` of node `i`.
    pub fn trapezoid_weight(&self, i: usize) -> f64 {
        if self.is_boundary(i) {
            0.5 * self.h
        } else {
            self.h
        }
    }

    /// Diagonal of the pair mass matrix `W` in trace-identified unknowns.
    pub fn mass_diagonal(&self) -> Vec<f64> {
        (0..self.nodes())
            .map(|i| self.trapezoid_weight(i) + if self.is_boundary(i) { 1.0 } else { 0.0 })
            .collect()
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.nodes() {
            return Err(Error::GridMismatch(format!(
                "{what} has {len} nodes, grid has {}",
                self.nodes()
            )));
        }
        Ok(())
    }
}

/// Uniform time grid `t_j = j T / M`, `j = 0..=M`.
///
/// Time cell `c ∈ 1..=M` is the interval `(t_{c−1}, t_c)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    m: usize,
    dt: f64,
}

impl TimeGrid {
    /// Smallest admissible number of time steps.
    pub const MIN_STEPS: usize = 8;

    /// Build a time grid with `m` steps on `(0, horizon)`.
    pub fn new(horizon: f64, m: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if m < Self::MIN_STEPS {
            return Err(Error::Config(format!(
                "time step count must be at least {}, got {m}",
                Self::MIN_STEPS
            )));
        }
        Ok(Self {
            horizon,
            m,
            dt: horizon / m as f64,
        })
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.m
    }

    /// Step `Δt = T / M`.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node `t_j`.
    pub fn t(&self, j: usize) -> f64 {
        if j == self.m {
            self.horizon
        } else {
            j as f64 * self.dt
        }
    }

    /// Midpoint of cell `c` (1-based).
    pub fn midpoint(&self, c: usize) -> f64 {
        (c as f64 - 0.5) * self.dt
    }
}

/// Open interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    /// Left end.
    pub lo: f64,
    /// Right end.
    pub hi: f64,
}

impl Interval {
    /// Build an interval, rejecting empty or non-finite ones.
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid interval ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    /// Whether `x` lies strictly inside.
    pub fn contains(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    /// Length `hi − lo`.
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Intersection, `None` when empty.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo < hi).then_some(Interval { lo, hi })
    }

    /// Interval shrunk inward by `d` on both sides, `None` when empty.
    pub fn shrink(&self, d: f64) -> Option<Interval> {
        let lo = self.lo + d;
        let hi = self.hi - d;
        (lo < hi).then_some(Interval { lo, hi })
    }

    /// Midpoint.
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Subset of the two boundary points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EndpointSet {
    /// Left endpoint `x = 0` included.
    pub left: bool,
    /// Right endpoint `x = L` included.
    pub right: bool,
}

impl EndpointSet {
    /// Membership flags indexed like the surface pair (left, right).
    pub fn flags(&self) -> [bool; 2] {
        [self.left, self.right]
    }
}

/// Control region, observation regions and the nested subregions used by the
/// weight construction, with their node masks.
#[derive(Debug, Clone, Serialize)]
pub struct RegionMasks {
    /// Control region `ω`.
    pub omega: Interval,
    /// Bulk observation region `𝒪`.
    pub obs: Interval,
    /// Boundary observation set `Σ`.
    pub obs_surface: EndpointSet,
    /// Overlap `ω ∩ 𝒪`.
    pub overlap: Interval,
    /// Innermost region `ω′` (overlap shrunk by three margins).
    pub omega1: Interval,
    /// Middle region `ω″` (overlap shrunk by two margins).
    pub omega2: Interval,
    /// Outer region `ω‴` (overlap shrunk by one margin).
    pub omega3: Interval,
    /// Node mask of `ω`.
    pub omega_nodes: Vec<bool>,
    /// Node mask of `𝒪`.
    pub obs_nodes: Vec<bool>,
    /// Node mask of `ω′`.
    pub omega1_nodes: Vec<bool>,
    /// Node mask of `ω″`.
    pub omega2_nodes: Vec<bool>,
    /// Node mask of `ω‴`.
    pub omega3_nodes: Vec<bool>,
}

fn node_mask(grid: &SpatialGrid, iv: &Interval) -> Vec<bool> {
    (0..grid.nodes()).map(|i| iv.contains(grid.x(i))).collect()
}

/// Build the region masks.
///
/// The nested regions are obtained by shrinking `ω ∩ 𝒪` inward by three, two
/// and one times `margin`. The closure of `ω` must lie inside `(0, L)`, the
/// overlap must be nonempty, and every mask must contain at least three nodes.
pub fn build_masks(
    grid: &SpatialGrid,
    omega: Interval,
    obs: Interval,
    obs_surface: EndpointSet,
    margin: f64,
) -> Result<RegionMasks> {
    let l = grid.length();
    if !(margin.is_finite() && margin > 0.0) {
        return Err(Error::Config(format!(
            "nesting margin must be positive, got {margin}"
        )));
    }
    if omega.lo <= 0.0 || omega.hi >= l {
        return Err(Error::Geometry(format!(
            "the closure of the control region ({}, {}) must lie inside (0, {l})",
            omega.lo, omega.hi
        )));
    }
    if obs.lo < 0.0 || obs.hi > l {
        return Err(Error::Geometry(format!(
            "the observation region ({}, {}) must lie inside (0, {l})",
            obs.lo, obs.hi
        )));
    }
    let overlap = omega.intersect(&obs).ok_or_else(|| {
        Error::Geometry(format!(
            "control region ({}, {}) and observation region ({}, {}) do not intersect",
            omega.lo, omega.hi, obs.lo, obs.hi
        ))
    })?;
    let h = grid.spacing();
    if overlap.width() < 6.0 * h + 4.0 * margin {
        return Err(Error::Resolution(format!(
            "overlap width {} is below 6h + 4·margin = {}",
            overlap.width(),
            6.0 * h + 4.0 * margin
        )));
    }
    let shrink = |k: f64| {
        overlap.shrink(k * margin).ok_or_else(|| {
            Error::Resolution(format!(
                "overlap ({}, {}) vanishes when shrunk by {k}·margin",
                overlap.lo, overlap.hi
            ))
        })
    };
    let omega1 = shrink(3.0)?;
    let omega2 = shrink(2.0)?;
    let omega3 = shrink(1.0)?;
    let masks = RegionMasks {
        omega,
        obs,
        obs_surface,
        overlap,
        omega1,
        omega2,
        omega3,
        omega_nodes: node_mask(grid, &omega),
        obs_nodes: node_mask(grid, &obs),
        omega1_nodes: node_mask(grid, &omega1),
        omega2_nodes: node_mask(grid, &omega2),
        omega3_nodes: node_mask(grid, &omega3),
    };
    for (name, mask) in [
        ("control region", &masks.omega_nodes),
        ("observation region", &masks.obs_nodes),
        ("innermost region", &masks.omega1_nodes),
        ("middle region", &masks.omega2_nodes),
        ("outer region", &masks.omega3_nodes),
    ] {
        let count = mask.iter().filter(|&&b| b).count();
        if count < 3 {
            return Err(Error::Resolution(format!(
                "{name} contains {count} grid nodes, at least 3 are required"
            )));
        }
    }
    Ok(masks)
}

/// Element of the pair space: nodal bulk values plus one value per endpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BulkSurfaceField {
    /// Bulk samples on the grid nodes.
    pub bulk: Vec<f64>,
    /// Surface values at the left and right endpoints.
    pub surface: [f64; 2],
}

impl BulkSurfaceField {
    /// Zero field on `grid`.
    pub fn zeros(grid: &SpatialGrid) -> Self {
        Self {
            bulk: vec![0.0; grid.nodes()],
            surface: [0.0; 2],
        }
    }

    /// Trace-compatible field whose surface values copy the end bulk values.
    pub fn from_trace(bulk: Vec<f64>) -> Self {
        let surface = [bulk[0], bulk[bulk.len() - 1]];
        Self { bulk, surface }
    }

    /// Field sampled from bulk and surface functions of `x`.
    pub fn from_fn(
        grid: &SpatialGrid,
        bulk: impl Fn(f64) -> f64,
        surface: impl Fn(f64) -> f64,
    ) -> Self {
        Self {
            bulk: (0..grid.nodes()).map(|i| bulk(grid.x(i))).collect(),
            surface: [surface(0.0), surface(grid.length())],
        }
    }

    /// Whether the surface values equal the end bulk values within `tol`.
    pub fn is_trace_compatible(&self, tol: f64) -> bool {
        let n = self.bulk.len() - 1;
        (self.surface[0] - self.bulk[0]).abs() <= tol
            && (self.surface[1] - self.bulk[n]).abs() <= tol
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &BulkSurfaceField) {
        for (x, y) in self.bulk.iter_mut().zip(&other.bulk) {
            *x += a * y;
        }
        self.surface[0] += a * other.surface[0];
        self.surface[1] += a * other.surface[1];
    }

    /// Multiply in place by `a`.
    pub fn scale(&mut self, a: f64) {
        self.bulk.iter_mut().for_each(|x| *x *= a);
        self.surface[0] *= a;
        self.surface[1] *= a;
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.bulk
            .iter()
            .chain(self.surface.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Pair inner product: trapezoid integral of the bulk product plus the sum of
/// the endpoint products.
pub fn l2_inner(a: &BulkSurfaceField, b: &BulkSurfaceField, grid: &SpatialGrid) -> Result<f64> {
    grid.check_len(a.bulk.len(), "left operand")?;
    grid.check_len(b.bulk.len(), "right operand")?;
    Ok(l2_inner_unchecked(a, b, grid))
}

pub(crate) fn l2_inner_unchecked(
    a: &BulkSurfaceField,
    b: &BulkSurfaceField,
    grid: &SpatialGrid,
) -> f64 {
    bulk_inner(&a.bulk, &b.bulk, grid) + a.surface[0] * b.surface[0] + a.surface[1] * b.surface[1]
}

/// Pair norm.
pub fn l2_norm(a: &BulkSurfaceField, grid: &SpatialGrid) -> f64 {
    l2_inner_unchecked(a, a, grid).max(0.0).sqrt()
}

/// Trapezoid inner product of two bulk vectors.
pub fn bulk_inner(a: &[f64], b: &[f64], grid: &SpatialGrid) -> f64 {
    let n = grid.cells();
    let h = grid.spacing();
    let interior: f64 = (1..n).map(|i| a[i] * b[i]).sum();
    h * (interior + 0.5 * (a[0] * b[0] + a[n] * b[n]))
}

/// Discrete Laplacian with the summation-by-parts boundary closure.
pub fn sbp_laplacian(y: &[f64], grid: &SpatialGrid) -> Result<Vec<f64>> {
    grid.check_len(y.len(), "Laplacian argument")?;
    let n = grid.cells();
    let ih2 = 1.0 / (grid.spacing() * grid.spacing());
    let mut out = vec![0.0; n + 1];
    for i in 1..n {
        out[i] = (y[i - 1] - 2.0 * y[i] + y[i + 1]) * ih2;
    }
    out[0] = (y[0] - 2.0 * y[1] + y[2]) * ih2;
    out[n] = (y[n] - 2.0 * y[n - 1] + y[n - 2]) * ih2;
    Ok(out)
}

/// Outward normal derivative at the left and right endpoints, second-order
/// one-sided.
pub fn normal_derivative(y: &[f64], grid: &SpatialGrid) -> Result<[f64; 2]> {
    grid.check_len(y.len(), "normal derivative argument")?;
    let n = grid.cells();
    let i2h = 0.5 / grid.spacing();
    Ok([
        (3.0 * y[0] - 4.0 * y[1] + y[2]) * i2h,
        (3.0 * y[n] - 4.0 * y[n - 1] + y[n - 2]) * i2h,
    ])
}

/// Face gradients `(y_{i+1} − y_i)/h`, one per cell.
pub fn face_gradient(y: &[f64], grid: &SpatialGrid) -> Result<Vec<f64>> {
    grid.check_len(y.len(), "gradient argument")?;
    let ih = 1.0 / grid.spacing();
    Ok(y.windows(2).map(|w| (w[1] - w[0]) * ih).collect())
}

/// Galerkin projection of a pair field onto trace-identified unknowns.
///
/// The result `u` satisfies `uᵀ W v = ⟨field, v⟩` for every trace-compatible
/// `v`. It equals the bulk values for trace-compatible fields.
pub fn project(field: &BulkSurfaceField, grid: &SpatialGrid) -> Vec<f64> {
    let n = grid.cells();
    let mut u = field.bulk.clone();
    if field.is_trace_compatible(0.0) {
        return u;
    }
    let hb = 0.5 * grid.spacing();
    for (k, i) in [0, n].into_iter().enumerate() {
        u[i] = (hb * field.bulk[i] + field.surface[k]) / (hb + 1.0);
    }
    u
}

/// Orientation of a space-time field relative to the time cells.
///
/// A forward field stores its initial datum in slice 0 and associates cell
/// `c` with slice `c`. A backward field stores its terminal datum in slice `M`
/// and associates cell `c` with slice `c − 1`. Sources, controls and operator
/// residuals are cell quantities and may use either orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Alignment {
    /// Cell `c` maps to slice `c`.
    Forward,
    /// Cell `c` maps to slice `c − 1`.
    Backward,
}

impl Alignment {
    /// Slice index of cell `c` (1-based).
    pub fn slice_of(self, c: usize) -> usize {
        match self {
            Alignment::Forward => c,
            Alignment::Backward => c - 1,
        }
    }

    /// Slice that holds the end datum (initial for forward, terminal for
    /// backward).
    pub fn datum_slice(self, m: usize) -> usize {
        match self {
            Alignment::Forward => 0,
            Alignment::Backward => m,
        }
    }
}

/// Time-indexed sequence of pair fields on the `M + 1` time nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceTimeField {
    /// Orientation of the slices relative to the time cells.
    pub alignment: Alignment,
    /// One pair field per time node.
    pub slices: Vec<BulkSurfaceField>,
}

impl SpaceTimeField {
    /// Zero field.
    pub fn zeros(grid: &SpatialGrid, time: &TimeGrid, alignment: Alignment) -> Self {
        Self {
            alignment,
            slices: vec![BulkSurfaceField::zeros(grid); time.steps() + 1],
        }
    }

    /// Build a cell field from a closure `(x, t) -> (bulk, left, right)` style
    /// samplers evaluated at the time node associated with each cell.
    pub fn from_cell_fn(
        grid: &SpatialGrid,
        time: &TimeGrid,
        alignment: Alignment,
        bulk: impl Fn(f64, f64) -> f64,
        surface: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut f = Self::zeros(grid, time, alignment);
        for c in 1..=time.steps() {
            let j = alignment.slice_of(c);
            let t = time.t(j);
            f.slices[j] = BulkSurfaceField::from_fn(grid, |x| bulk(x, t), |x| surface(x, t));
        }
        f
    }

    /// Number of time steps `M`.
    pub fn steps(&self) -> usize {
        self.slices.len() - 1
    }

    /// Slice associated with cell `c` (1-based).
    pub fn cell(&self, c: usize) -> &BulkSurfaceField {
        &self.slices[self.alignment.slice_of(c)]
    }

    /// Mutable slice associated with cell `c` (1-based).
    pub fn cell_mut(&mut self, c: usize) -> &mut BulkSurfaceField {
        let j = self.alignment.slice_of(c);
        &mut self.slices[j]
    }

    /// The same cell data re-expressed in the other orientation; the end
    /// datum of the result is zero.
    pub fn realigned(&self, alignment: Alignment) -> Self {
        if alignment == self.alignment {
            return self.clone();
        }
        let m = self.steps();
        let mut out = Self {
            alignment,
            slices: vec![BulkSurfaceField::zeros_like(&self.slices[0]); m + 1],
        };
        for c in 1..=m {
            *out.cell_mut(c) = self.cell(c).clone();
        }
        out
    }

    /// `self += a * other`, slice by slice.
    pub fn axpy(&mut self, a: f64, other: &SpaceTimeField) {
        for (x, y) in self.slices.iter_mut().zip(&other.slices) {
            x.axpy(a, y);
        }
    }

    /// Multiply in place by `a`.
    pub fn scale(&mut self, a: f64) {
        self.slices.iter_mut().for_each(|s| s.scale(a));
    }

    /// Largest absolute entry over all slices.
    pub fn max_abs(&self) -> f64 {
        self.slices.iter().fold(0.0, |m, s| m.max(s.max_abs()))
    }

    /// Whether every cell slice is identically zero.
    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }
}

impl BulkSurfaceField {
    /// Zero field with the same shape as `other`.
    pub fn zeros_like(other: &BulkSurfaceField) -> Self {
        Self {
            bulk: vec![0.0; other.bulk.len()],
            surface: [0.0; 2],
        }
    }
}

/// Space-time inner product `Σ_c Δt ⟨a_c, b_c⟩` over the time cells, each
/// field read through its own alignment.
pub fn st_inner(
    a: &SpaceTimeField,
    b: &SpaceTimeField,
    grid: &SpatialGrid,
    time: &TimeGrid,
) -> Result<f64> {
    if a.steps() != time.steps() || b.steps() != time.steps() {
        return Err(Error::GridMismatch(format!(
            "space-time fields have {} and {} steps, time grid has {}",
            a.steps(),
            b.steps(),
            time.steps()
        )));
    }
    let mut acc = 0.0;
    for c in 1..=time.steps() {
        acc += l2_inner(a.cell(c), b.cell(c), grid)?;
    }
    Ok(acc * time.dt())
}

/// Space-time norm.
pub fn st_norm(a: &SpaceTimeField, grid: &SpatialGrid, time: &TimeGrid) -> Result<f64> {
    Ok(st_inner(a, a, grid, time)?.max(0.0).sqrt())
}

/// Largest pair norm over all time slices (a `C([0,T]; 𝕃²)` proxy).
pub fn sup_norm_in_time(a: &SpaceTimeField, grid: &SpatialGrid) -> f64 {
    a.slices.iter().fold(0.0, |m, s| m.max(l2_norm(s, grid)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(l: f64, n: usize) -> SpatialGrid {
        SpatialGrid::new(l, n).unwrap()
    }

    #[test]
    fn build_grid_examples() {
        let g = grid(1.0, 8);
        assert_eq!(g.spacing(), 0.125);
        assert_eq!(g.boundary_nodes(), [0, 8]);
        assert_eq!(grid(2.0, 16).spacing(), 0.125);
        assert_eq!(grid(1.0, 64).x(32), 0.5);
        assert!((g.spacing() * g.cells() as f64 - g.length()).abs() <= f64::EPSILON);
        assert!(SpatialGrid::new(0.0, 8).is_err());
        assert!(SpatialGrid::new(1.0, 7).is_err());
        assert!(SpatialGrid::new(-1.0, 8).is_err());
    }

    #[test]
    fn time_grid_nodes() {
        let t = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(t.t(0), 0.0);
        assert_eq!(t.t(8), 2.0);
        assert!((1..=8).all(|j| t.t(j) > t.t(j - 1)));
        assert_eq!(t.midpoint(1), 0.125);
        assert!(TimeGrid::new(1.0, 4).is_err());
    }

    #[test]
    fn masks_shrink_examples() {
        let g = grid(1.0, 200);
        let m = build_masks(
            &g,
            Interval::new(0.3, 0.7).unwrap(),
            Interval::new(0.5, 0.9).unwrap(),
            EndpointSet::default(),
            0.02,
        )
        .unwrap();
        assert!((m.overlap.lo - 0.5).abs() < 1e-15 && (m.overlap.hi - 0.7).abs() < 1e-15);
        assert!((m.omega1.lo - 0.56).abs() < 1e-12 && (m.omega1.hi - 0.64).abs() < 1e-12);

        let m = build_masks(
            &g,
            Interval::new(0.3, 0.7).unwrap(),
            Interval::new(0.3, 0.7).unwrap(),
            EndpointSet::default(),
            0.05,
        )
        .unwrap();
        assert!((m.omega3.lo - 0.35).abs() < 1e-12 && (m.omega3.hi - 0.65).abs() < 1e-12);
    }

    #[test]
    fn masks_reject_disjoint_and_thin() {
        let g = grid(1.0, 64);
        let err = build_masks(
            &g,
            Interval::new(0.1, 0.2).unwrap(),
            Interval::new(0.8, 0.9).unwrap(),
            EndpointSet::default(),
            0.01,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        let err = build_masks(
            &g,
            Interval::new(0.4, 0.5).unwrap(),
            Interval::new(0.4, 0.5).unwrap(),
            EndpointSet::default(),
            0.02,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Resolution(_)));
        let err = build_masks(
            &g,
            Interval::new(0.0, 0.5).unwrap(),
            Interval::new(0.2, 0.5).unwrap(),
            EndpointSet::default(),
            0.01,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn masks_are_nested() {
        let g = grid(1.0, 128);
        let m = build_masks(
            &g,
            Interval::new(0.2, 0.75).unwrap(),
            Interval::new(0.35, 0.95).unwrap(),
            EndpointSet {
                left: false,
                right: true,
            },
            0.03,
        )
        .unwrap();
        for i in 0..g.nodes() {
            assert!(!m.omega1_nodes[i] || m.omega2_nodes[i]);
            assert!(!m.omega2_nodes[i] || m.omega3_nodes[i]);
            assert!(!m.omega3_nodes[i] || (m.omega_nodes[i] && m.obs_nodes[i]));
        }
    }

    #[test]
    fn inner_product_examples() {
        let g = grid(1.0, 64);
        let one = BulkSurfaceField::from_fn(&g, |_| 1.0, |_| 1.0);
        assert!((l2_inner(&one, &one, &g).unwrap() - 3.0).abs() < 1e-14);
        let zero = BulkSurfaceField::zeros(&g);
        assert_eq!(l2_inner(&zero, &one, &g).unwrap(), 0.0);
        let x = BulkSurfaceField::from_fn(&g, |x| x, |x| x);
        // Exact integral 1/2 plus endpoint sum 0 + 1; trapezoid is exact on
        // linear functions.
        assert!((l2_inner(&x, &one, &g).unwrap() - 1.5).abs() < 1e-14);
        let x2 = BulkSurfaceField::from_fn(&g, |x| x * x, |_| 0.0);
        let err = (l2_inner(&x2, &one, &g).unwrap() - 1.0 / 3.0).abs();
        assert!(err <= g.spacing().powi(2), "quadrature error {err}");
        let other = BulkSurfaceField::zeros(&grid(1.0, 32));
        assert!(matches!(
            l2_inner(&one, &other, &g),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn laplacian_examples() {
        let g = grid(1.0, 16);
        let x: Vec<f64> = (0..g.nodes()).map(|i| g.x(i)).collect();
        let lap = sbp_laplacian(&x, &g).unwrap();
        assert!(lap.iter().all(|v| v.abs() < 1e-11));
        let nd = normal_derivative(&x, &g).unwrap();
        assert!((nd[0] + 1.0).abs() < 1e-12 && (nd[1] - 1.0).abs() < 1e-12);
        let c = vec![3.5; g.nodes()];
        assert!(sbp_laplacian(&c, &g).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(normal_derivative(&c, &g).unwrap(), [0.0, 0.0]);
        let q: Vec<f64> = x.iter().map(|x| x * x).collect();
        let lap = sbp_laplacian(&q, &g).unwrap();
        assert!(lap.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }

    #[test]
    fn projection_preserves_pairings() {
        let g = grid(1.0, 10);
        let f = BulkSurfaceField {
            bulk: (0..11).map(|i| (i as f64 * 0.7).sin()).collect(),
            surface: [2.0, -1.5],
        };
        let u = project(&f, &g);
        let w = g.mass_diagonal();
        let v: Vec<f64> = (0..11).map(|i| (i as f64 * 1.3).cos()).collect();
        let lhs: f64 = (0..11).map(|i| u[i] * w[i] * v[i]).sum();
        let rhs = l2_inner(&f, &BulkSurfaceField::from_trace(v), &g).unwrap();
        assert!((lhs - rhs).abs() < 1e-14);
        let t = BulkSurfaceField::from_trace(vec![1.0; 11]);
        assert_eq!(project(&t, &g), t.bulk);
    }
}

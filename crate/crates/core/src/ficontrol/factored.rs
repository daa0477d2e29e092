//! Direct orthogonal factorization of the weighted residual operator.
//!
//! Grouping the unknowns by time cell, `u_c = (φ_{c−1}, k_c)`, the rows
//! `(R1_c, R2_{c+1}, R3_c)` touch only `u_c` and `u_{c+1}` (plus `R2_1`, which
//! touches only `u_1`). The row-scaled operator `R̂ = X^{1/2} R` is therefore
//! block upper bidiagonal after grouping, and a sweep of dense Householder
//! factorizations over the time cells yields `R̂ = Q T` with `T` block upper
//! bidiagonal.
//!
//! Working with `R̂` rather than the Gram matrix `R̂ᵀR̂` avoids squaring the
//! condition number, which for these weights exceeds the range of `f64`
//! once squared. The residual stack of the solution, `R̂ x = Q T⁻ᵀ b̂`, is
//! obtained without forming the (badly scaled) dual pair `x` at all.
//!
//! Each unknown is scaled by the square root of its largest weight before
//! factoring (a column scaling that the factorization is insensitive to)
//! so that no entry approaches the subnormal range. Unknowns whose weights
//! all vanish never enter the stack; they are excluded and stay zero, and
//! stack rows with zero weight are excluded as well.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::FISetup;

/// Origin of a row in one stage of the sweep.
#[derive(Debug, Clone, Copy)]
enum RowKind {
    /// Row carried over from the previous stage.
    Carry(usize),
    /// Row of the residual stack (flat index).
    Stack(usize),
}

#[derive(Debug, Clone)]
struct Stage {
    /// Active local columns of `u_c` (`0..np` for `φ_{c−1}`, `np..2np` for `k_c`).
    active: Vec<usize>,
    /// Column scaling of the active columns.
    scale: Vec<f64>,
    /// Diagonal block of `T`.
    t: DMatrix<f64>,
    /// Coupling block of `T` to the active columns of `u_{c+1}`.
    u: DMatrix<f64>,
    /// Thin orthogonal factor of the stage.
    q: DMatrix<f64>,
    rows: Vec<RowKind>,
}

/// Factored residual operator.
#[derive(Debug, Clone)]
pub(super) struct StackFactor {
    np: usize,
    m: usize,
    stages: Vec<Stage>,
    /// Square root of the pair weight of each stack row's node.
    row_weight: Vec<f64>,
    /// Smallest and largest squared diagonal entry of the column-scaled `T`.
    pub(super) diag_range: (f64, f64),
}

/// Coefficients of one stack row over the local columns `(u_c, u_{c+1})`
/// of a stage, before column scaling.
struct Row {
    index: usize,
    entries: Vec<(usize, f64)>,
}

impl StackFactor {
    pub(super) fn new(setup: &FISetup) -> Result<Self> {
        let (np, m) = (setup.np(), setup.m());
        let dt = setup.time().dt();
        let mass = setup.ops.mass();
        let j = setup.ops.stiffness();
        let w0 = |c: usize| {
            if (1..=m).contains(&c) {
                setup.tables.fi_weight0[c - 1]
            } else {
                0.0
            }
        };
        let w1 = |c: usize| setup.tables.fi_weight1[c - 1];
        let chi = &setup.chi.values;
        let sdiag = &setup.coupling.s_diag;
        let rw: Vec<f64> = mass.iter().map(|mi| (dt * mi).sqrt()).collect();
        // Largest weight seen by local column `i` of block `c`.
        let reference = |c: usize, i: usize| -> f64 {
            if i < np {
                w0(c).max(w0(c - 1)).max(w1(c) * chi[i])
            } else {
                w0(c).max(w0(c + 1))
            }
        };
        let active_cols =
            |c: usize| -> Vec<usize> { (0..2 * np).filter(|&i| reference(c, i) > 0.0).collect() };
        // `(A y)_i = Σ_j J_ij y_j / m_i` as (column, coefficient) pairs.
        let spatial_row = |i: usize, offset: usize, out: &mut Vec<(usize, f64)>| {
            out.push((offset + i, j.diag[i] / mass[i]));
            if i > 0 {
                out.push((offset + i - 1, j.lower[i - 1] / mass[i]));
            }
            if i + 1 < np {
                out.push((offset + i + 1, j.upper[i] / mass[i]));
            }
        };
        let idt = 1.0 / dt;
        let group = |c: usize| -> Vec<Row> {
            let mut rows = Vec::new();
            let wc = w0(c);
            if c == 1 && wc > 0.0 {
                for i in 0..np {
                    let mut e = vec![(np + i, idt)];
                    spatial_row(i, np, &mut e);
                    rows.push(Row {
                        index: (m) * np + i,
                        entries: scale_entries(e, wc.sqrt() * rw[i]),
                    });
                }
            }
            if wc > 0.0 {
                for i in 0..np {
                    let mut e = vec![(i, idt), (np + i, -sdiag[i] / mass[i])];
                    spatial_row(i, 0, &mut e);
                    if c < m {
                        e.push((2 * np + i, -idt));
                    }
                    rows.push(Row {
                        index: (c - 1) * np + i,
                        entries: scale_entries(e, wc.sqrt() * rw[i]),
                    });
                }
            }
            let wn = w0(c + 1);
            if c < m && wn > 0.0 {
                for i in 0..np {
                    let mut e = vec![(3 * np + i, idt), (np + i, -idt)];
                    spatial_row(i, 3 * np, &mut e);
                    rows.push(Row {
                        index: (m + c) * np + i,
                        entries: scale_entries(e, wn.sqrt() * rw[i]),
                    });
                }
            }
            for i in 0..np {
                let w = w1(c) * chi[i];
                if w > 0.0 {
                    rows.push(Row {
                        index: (2 * m + c - 1) * np + i,
                        entries: vec![(i, w.sqrt() * rw[i])],
                    });
                }
            }
            rows
        };

        let mut stages = Vec::with_capacity(m);
        let mut carry = DMatrix::<f64>::zeros(0, 0);
        let mut active = active_cols(1);
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
        for c in 1..=m {
            let next = if c < m {
                active_cols(c + 1)
            } else {
                Vec::new()
            };
            let (p, q) = (active.len(), next.len());
            // Map local column index to position among the active columns.
            let mut pos = vec![usize::MAX; 4 * np];
            let mut col_scale = vec![0.0; p + q];
            for (a, &i) in active.iter().enumerate() {
                pos[i] = a;
                col_scale[a] = 1.0 / reference(c, i).sqrt();
            }
            for (a, &i) in next.iter().enumerate() {
                pos[2 * np + i] = p + a;
                col_scale[p + a] = 1.0 / reference(c + 1, i).sqrt();
            }
            let rows = group(c);
            let nrows = carry.nrows() + rows.len();
            if nrows < p {
                return Err(observability(c));
            }
            let mut mat = DMatrix::<f64>::zeros(nrows, p + q);
            let mut kinds = Vec::with_capacity(nrows);
            for r in 0..carry.nrows() {
                for a in 0..carry.ncols() {
                    mat[(r, a)] = carry[(r, a)];
                }
                kinds.push(RowKind::Carry(r));
            }
            for (k, row) in rows.iter().enumerate() {
                let r = carry.nrows() + k;
                for &(col, v) in &row.entries {
                    let a = pos[col];
                    debug_assert!(a != usize::MAX, "stack row touches an inactive unknown");
                    mat[(r, a)] += v * col_scale[a];
                }
                kinds.push(RowKind::Stack(row.index));
            }
            // Larger rows first keeps the Householder sweep accurate for
            // rows of very different size.
            let norms: Vec<f64> = (0..nrows).map(|r| mat.row(r).norm()).collect();
            let mut order: Vec<usize> = (0..nrows).collect();
            order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
            let sorted = DMatrix::from_fn(nrows, p + q, |r, col| mat[(order[r], col)]);
            let kinds: Vec<RowKind> = order.iter().map(|&r| kinds[r]).collect();
            let qr = sorted.qr();
            let rfac = qr.r();
            let qthin = qr.q();
            let t = rfac.view((0, 0), (p, p)).into_owned();
            let u = rfac.view((0, p), (p, q)).into_owned();
            let top = (0..p).map(|i| t[(i, i)].abs()).fold(0.0_f64, f64::max);
            for i in 0..p {
                let d = t[(i, i)].abs();
                if !(d > 1e-300 && d > f64::EPSILON * 1e-4 * top) {
                    return Err(observability(c));
                }
                dmin = dmin.min(d * d);
                dmax = dmax.max(d * d);
            }
            let keep = rfac.nrows().saturating_sub(p);
            carry = rfac.view((p, p), (keep, q)).into_owned();
            stages.push(Stage {
                active: active.clone(),
                scale: col_scale[..p].to_vec(),
                t,
                u,
                q: qthin,
                rows: kinds,
            });
            active = next;
        }
        let mut row_weight = vec![0.0; 3 * m * np];
        for (idx, w) in row_weight.iter_mut().enumerate() {
            *w = rw[idx % np];
        }
        Ok(Self {
            np,
            m,
            stages,
            row_weight,
            diag_range: (dmin, dmax),
        })
    }

    fn flat(&self, c: usize, i: usize) -> usize {
        let np = self.np;
        if i < np {
            (c - 1) * np + i
        } else {
            (self.m + c - 1) * np + i - np
        }
    }

    /// Forward substitution `Tᵀ z = D b̂` for a Euclidean right-hand side in
    /// flat dual layout.
    fn forward(&self, rhs: &[f64]) -> Vec<DVector<f64>> {
        let mut z: Vec<DVector<f64>> = Vec::with_capacity(self.m);
        for (k, st) in self.stages.iter().enumerate() {
            let c = k + 1;
            let mut r = DVector::from_iterator(
                st.active.len(),
                st.active
                    .iter()
                    .zip(&st.scale)
                    .map(|(&i, s)| rhs[self.flat(c, i)] * s),
            );
            if k > 0 {
                r -= self.stages[k - 1].u.transpose() * &z[k - 1];
            }
            let zc = st.t.tr_solve_upper_triangular(&r).unwrap_or(r);
            z.push(zc);
        }
        z
    }

    /// Given `z`, the stack `Q z` in unweighted form (`R x` rather than
    /// `X^{1/2} R x`) and the dual pair `x = D T⁻¹ z`.
    fn expand(&self, z: &[DVector<f64>], want_x: bool) -> (Vec<f64>, Vec<f64>) {
        let mut stack = vec![0.0; 3 * self.m * self.np];
        let mut carry_in: Vec<f64> = Vec::new();
        for (k, st) in self.stages.iter().enumerate().rev() {
            let p = st.active.len();
            let mut out = DVector::zeros(st.q.ncols());
            out.rows_mut(0, p).copy_from(&z[k]);
            for (a, v) in carry_in.iter().enumerate() {
                out[p + a] = *v;
            }
            let vals = &st.q * out;
            let ncarry = st
                .rows
                .iter()
                .filter(|r| matches!(r, RowKind::Carry(_)))
                .count();
            carry_in = vec![0.0; ncarry];
            for (r, kind) in st.rows.iter().enumerate() {
                match *kind {
                    RowKind::Carry(j) => carry_in[j] = vals[r],
                    RowKind::Stack(idx) => stack[idx] = vals[r] / self.row_weight[idx],
                }
            }
        }
        let mut x = vec![0.0; 2 * self.m * self.np];
        if want_x {
            let mut next: Option<DVector<f64>> = None;
            for (k, st) in self.stages.iter().enumerate().rev() {
                let mut r = z[k].clone();
                if let Some(xn) = &next {
                    r -= &st.u * xn;
                }
                let xc = st.t.solve_upper_triangular(&r).unwrap_or(r);
                for (a, &i) in st.active.iter().enumerate() {
                    x[self.flat(k + 1, i)] = xc[a] * st.scale[a];
                }
                next = Some(xc);
            }
        }
        (stack, x)
    }

    /// Minimum-norm stack `y` with `Rᵀ X y = rhs` (Euclidean right-hand side
    /// in flat dual layout), together with the dual pair `x` with `R x = y`.
    pub(super) fn solve(&self, rhs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.forward(rhs);
        self.expand(&z, true)
    }
}

fn scale_entries(mut e: Vec<(usize, f64)>, s: f64) -> Vec<(usize, f64)> {
    for (_, v) in e.iter_mut() {
        *v *= s;
    }
    e
}

fn observability(c: usize) -> Error {
    Error::Conditioning {
        message: format!(
            "the weighted residual operator is rank deficient at time cell {c}: \
             the observation does not determine the dual pair"
        ),
        iterations: 0,
        residual: f64::NAN,
    }
}

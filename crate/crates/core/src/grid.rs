//! Discrete geometry and linear operators.
//!
//! The domain Ω is either the unit interval or the unit square on a uniform
//! vertex grid; Γ is its boundary, ordered as a closed discrete curve
//! (counterclockwise in 2-d, the two endpoints in 1-d). All mass matrices
//! are lumped, so means and L² products are plain weighted sums and the
//! partition-of-unity identities hold exactly at the discrete level.
//!
//! Assembled operators:
//! * `stiffness`           — bulk FEM stiffness K (linear elements in 1-d,
//!   bilinear quads in 2-d), symmetric PSD, kernel = constants;
//! * `boundary_stiffness`  — Laplace–Beltrami stiffness K_Γ along the closed
//!   boundary curve (zero in 1-d, where Γ is two points);
//! * the trace map and its adjoint, connecting bulk and boundary vectors.
//!
//! On top of these sit the zero-mean Neumann solver N (K p = M v with
//! mean p = 0) and the dual norm ‖v‖_* = √⟨M v, N v⟩ it induces.

use serde::Serialize;
use thiserror::Error;

use crate::solver::{pcg, SolverError};
use crate::sparse::Csr;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("field length {found} does not match expected {expected}")]
    FieldMismatch { expected: usize, found: usize },
    #[error("field contains a non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("mean-zero precondition violated: mean = {0:.3e}")]
    MeanViolation(f64),
    #[error("norm space {space:?} does not accept a {kind} field")]
    SpaceMismatch { space: NormSpace, kind: &'static str },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    OneDim,
    TwoDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSpace {
    H,
    V,
    HGamma,
    VGamma,
}

/// Scalar field on the bulk vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkField {
    values: Vec<f64>,
}

/// Scalar field on the ordered boundary vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryField {
    values: Vec<f64>,
}

macro_rules! field_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn new(values: Vec<f64>) -> Result<Self, GridError> {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(GridError::NonFinite(i));
                }
                Ok(Self { values })
            }

            pub fn zeros(len: usize) -> Self {
                Self { values: vec![0.0; len] }
            }

            pub fn constant(c: f64, len: usize) -> Self {
                Self { values: vec![c; len] }
            }

            pub fn from_vec_unchecked(values: Vec<f64>) -> Self {
                Self { values }
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.values
            }

            pub fn scale(&mut self, a: f64) {
                self.values.iter_mut().for_each(|v| *v *= a);
            }

            pub fn axpy(&mut self, a: f64, other: &Self) {
                for (v, o) in self.values.iter_mut().zip(&other.values) {
                    *v += a * o;
                }
            }
        }
    };
}

field_impl!(BulkField);
field_impl!(BoundaryField);

/// Immutable discrete domain: geometry, quadrature weights and assembled
/// operators. Safe to share across threads; all operations are pure.
#[derive(Debug, Clone)]
pub struct Grid {
    mode: GridMode,
    n: usize,
    h: f64,
    bulk_count: usize,
    boundary_index: Vec<usize>,
    bulk_weights: Vec<f64>,
    boundary_weights: Vec<f64>,
    stiffness: Csr,
    boundary_stiffness: Csr,
    omega: f64,
    gamma_measure: f64,
}

#[derive(Debug, Serialize)]
struct GridDescriptor<'a> {
    mode: GridMode,
    n: usize,
    h: f64,
    bulk_count: usize,
    boundary_index: &'a [usize],
}

impl Grid {
    pub fn build(mode: GridMode, n: usize) -> Result<Self, GridError> {
        if n < 3 {
            return Err(GridError::InvalidMesh(format!(
                "need at least 3 vertices per side, got {n}"
            )));
        }
        let h = 1.0 / (n as f64 - 1.0);
        let grid = match mode {
            GridMode::OneDim => {
                let bulk_count = n;
                let mut triplets = Vec::with_capacity(4 * (n - 1));
                let inv_h = 1.0 / h;
                for e in 0..n - 1 {
                    triplets.push((e, e, inv_h));
                    triplets.push((e + 1, e + 1, inv_h));
                    triplets.push((e, e + 1, -inv_h));
                    triplets.push((e + 1, e, -inv_h));
                }
                let stiffness = Csr::from_triplets(bulk_count, &triplets);
                let mut bulk_weights = vec![h; bulk_count];
                bulk_weights[0] = 0.5 * h;
                bulk_weights[n - 1] = 0.5 * h;
                // Γ is the two endpoints; the boundary "integral" is a sum,
                // so each point carries unit weight and Δ_Γ ≡ 0.
                Grid {
                    mode,
                    n,
                    h,
                    bulk_count,
                    boundary_index: vec![0, n - 1],
                    bulk_weights,
                    boundary_weights: vec![1.0, 1.0],
                    stiffness,
                    boundary_stiffness: Csr::from_triplets(2, &[]),
                    omega: 1.0,
                    gamma_measure: 2.0,
                }
            }
            GridMode::TwoDim => {
                let bulk_count = n * n;
                // Bilinear quadrilateral element stiffness on a square is
                // independent of h: diag 2/3, edge neighbours −1/6,
                // opposite corner −1/3.
                const E: [[f64; 4]; 4] = [
                    [4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0],
                    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0],
                    [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
                    [-1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0],
                ];
                let mut triplets = Vec::with_capacity(16 * (n - 1) * (n - 1));
                let mut bulk_weights = vec![0.0; bulk_count];
                let cell_quarter = 0.25 * h * h;
                for j in 0..n - 1 {
                    for i in 0..n - 1 {
                        let corners = [
                            j * n + i,
                            j * n + i + 1,
                            (j + 1) * n + i + 1,
                            (j + 1) * n + i,
                        ];
                        for (a, &ia) in corners.iter().enumerate() {
                            bulk_weights[ia] += cell_quarter;
                            for (b, &ib) in corners.iter().enumerate() {
                                triplets.push((ia, ib, E[a][b]));
                            }
                        }
                    }
                }
                let stiffness = Csr::from_triplets(bulk_count, &triplets);

                // Closed counterclockwise boundary curve, corners included
                // as ordinary vertices with uniform arclength spacing h.
                let mut boundary_index = Vec::with_capacity(4 * (n - 1));
                for i in 0..n - 1 {
                    boundary_index.push(i);
                }
                for j in 0..n - 1 {
                    boundary_index.push(j * n + (n - 1));
                }
                for i in (1..n).rev() {
                    boundary_index.push((n - 1) * n + i);
                }
                for j in (1..n).rev() {
                    boundary_index.push(j * n);
                }
                let b = boundary_index.len();
                let inv_h = 1.0 / h;
                let mut btrip = Vec::with_capacity(4 * b);
                for p in 0..b {
                    let q = (p + 1) % b;
                    btrip.push((p, p, inv_h));
                    btrip.push((q, q, inv_h));
                    btrip.push((p, q, -inv_h));
                    btrip.push((q, p, -inv_h));
                }
                let boundary_stiffness = Csr::from_triplets(b, &btrip);
                Grid {
                    mode,
                    n,
                    h,
                    bulk_count,
                    boundary_index,
                    bulk_weights,
                    boundary_weights: vec![h; b],
                    stiffness,
                    boundary_stiffness,
                    omega: 1.0,
                    gamma_measure: 4.0,
                }
            }
        };
        grid.check_invariants()?;
        Ok(grid)
    }

    fn check_invariants(&self) -> Result<(), GridError> {
        let total: f64 = self.bulk_weights.iter().sum();
        if (total - self.omega).abs() > 1e-12 {
            return Err(GridError::InvalidMesh(format!(
                "bulk weights sum to {total}, expected {}",
                self.omega
            )));
        }
        if self.bulk_weights.iter().any(|&w| w <= 0.0)
            || self.boundary_weights.iter().any(|&w| w <= 0.0)
        {
            return Err(GridError::InvalidMesh("nonpositive quadrature weight".into()));
        }
        let mut seen = vec![false; self.bulk_count];
        for &i in &self.boundary_index {
            if i >= self.bulk_count || seen[i] {
                return Err(GridError::InvalidMesh(
                    "boundary index is not an injection into the bulk".into(),
                ));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn bulk_count(&self) -> usize {
        self.bulk_count
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary_index.len()
    }

    pub fn boundary_index(&self) -> &[usize] {
        &self.boundary_index
    }

    pub fn bulk_weights(&self) -> &[f64] {
        &self.bulk_weights
    }

    pub fn boundary_weights(&self) -> &[f64] {
        &self.boundary_weights
    }

    /// |Ω|
    pub fn omega_measure(&self) -> f64 {
        self.omega
    }

    /// |Γ|
    pub fn gamma_measure(&self) -> f64 {
        self.gamma_measure
    }

    pub fn stiffness(&self) -> &Csr {
        &self.stiffness
    }

    pub fn boundary_stiffness(&self) -> &Csr {
        &self.boundary_stiffness
    }

    /// Vertex coordinates; the second component is 0 in 1-d.
    pub fn coords(&self, i: usize) -> (f64, f64) {
        match self.mode {
            GridMode::OneDim => (i as f64 * self.h, 0.0),
            GridMode::TwoDim => ((i % self.n) as f64 * self.h, (i / self.n) as f64 * self.h),
        }
    }

    pub fn bulk_from_fn(&self, f: impl Fn(f64, f64) -> f64) -> BulkField {
        BulkField::from_vec_unchecked(
            (0..self.bulk_count)
                .map(|i| {
                    let (x, y) = self.coords(i);
                    f(x, y)
                })
                .collect(),
        )
    }

    fn expect_bulk(&self, field: &BulkField) -> Result<(), GridError> {
        if field.len() != self.bulk_count {
            return Err(GridError::FieldMismatch { expected: self.bulk_count, found: field.len() });
        }
        Ok(())
    }

    fn expect_boundary(&self, field: &BoundaryField) -> Result<(), GridError> {
        if field.len() != self.boundary_count() {
            return Err(GridError::FieldMismatch {
                expected: self.boundary_count(),
                found: field.len(),
            });
        }
        Ok(())
    }

    /// Generalized mean value (1/|Ω|) Σ w_i y_i.
    pub fn mean(&self, field: &BulkField) -> f64 {
        self.mean_slice(field.values())
    }

    /// Mean of raw values against the bulk quadrature weights.
    pub fn mean_slice(&self, values: &[f64]) -> f64 {
        let s: f64 = values.iter().zip(&self.bulk_weights).map(|(v, w)| v * w).sum();
        s / self.omega
    }

    /// K y
    pub fn apply_bulk_stiffness(&self, field: &BulkField) -> BulkField {
        let mut out = vec![0.0; self.bulk_count];
        self.stiffness.mul(field.values(), &mut out);
        BulkField::from_vec_unchecked(out)
    }

    /// K_Γ g (zero field in 1-d)
    pub fn apply_boundary_stiffness(&self, field: &BoundaryField) -> BoundaryField {
        let b = self.boundary_count();
        let mut out = vec![0.0; b];
        if self.mode == GridMode::TwoDim {
            self.boundary_stiffness.mul(field.values(), &mut out);
        }
        BoundaryField::from_vec_unchecked(out)
    }

    pub fn trace(&self, field: &BulkField) -> BoundaryField {
        BoundaryField::from_vec_unchecked(
            self.boundary_index.iter().map(|&i| field.values()[i]).collect(),
        )
    }

    pub(crate) fn trace_slice(&self, values: &[f64], out: &mut [f64]) {
        for (p, &i) in self.boundary_index.iter().enumerate() {
            out[p] = values[i];
        }
    }

    /// Writes boundary values into a copy of `background`.
    pub fn lift(&self, field: &BoundaryField, background: &BulkField) -> BulkField {
        let mut out = background.values().to_vec();
        for (p, &i) in self.boundary_index.iter().enumerate() {
            out[i] = field.values()[p];
        }
        BulkField::from_vec_unchecked(out)
    }

    /// Zero-mean Neumann solve: returns p with K p = M v and mean p = 0.
    /// The caller must supply a (numerically) zero-mean v.
    pub fn neumann_solve(&self, v: &BulkField) -> Result<BulkField, GridError> {
        self.expect_bulk(v)?;
        let m = self.mean(v);
        if m.abs() > 1e-10 {
            return Err(GridError::MeanViolation(m));
        }
        let mut rhs = vec![0.0; self.bulk_count];
        for i in 0..self.bulk_count {
            rhs[i] = self.bulk_weights[i] * v.values()[i];
        }
        // compatibility: remove the kernel component left by roundoff
        let shift: f64 = rhs.iter().sum::<f64>() / self.bulk_count as f64;
        rhs.iter_mut().for_each(|r| *r -= shift);

        let inv_diag: Vec<f64> = self.stiffness.diagonal().iter().map(|d| 1.0 / d).collect();
        let nvert = self.bulk_count as f64;
        let project = move |x: &mut [f64]| {
            let s: f64 = x.iter().sum::<f64>() / nvert;
            x.iter_mut().for_each(|xi| *xi -= s);
        };
        let mut p = vec![0.0; self.bulk_count];
        pcg(
            |x: &[f64], y: &mut [f64]| self.stiffness.mul(x, y),
            &inv_diag,
            &rhs,
            &mut p,
            1e-12,
            10 * self.bulk_count,
            Some(&project),
        )?;
        let mut out = BulkField::from_vec_unchecked(p);
        let mean_p = self.mean(&out);
        out.values_mut().iter_mut().for_each(|x| *x -= mean_p);
        Ok(out)
    }

    /// ‖v‖_* = √⟨M v, N v⟩ on the zero-mean subspace.
    pub fn dual_norm(&self, v: &BulkField) -> Result<f64, GridError> {
        let p = self.neumann_solve(v)?;
        let mut acc = 0.0;
        for i in 0..self.bulk_count {
            acc += self.bulk_weights[i] * v.values()[i] * p.values()[i];
        }
        Ok(acc.max(0.0).sqrt())
    }

    /// Dual (V_Γ*-type) norm of a boundary field via a (K_Γ + M_Γ) solve.
    pub fn boundary_dual_norm(&self, g: &BoundaryField) -> Result<f64, GridError> {
        self.expect_boundary(g)?;
        let b = self.boundary_count();
        let rhs: Vec<f64> =
            (0..b).map(|p| self.boundary_weights[p] * g.values()[p]).collect();
        let apply = |x: &[f64], y: &mut [f64]| {
            y.iter_mut().for_each(|v| *v = 0.0);
            if self.mode == GridMode::TwoDim {
                self.boundary_stiffness.mul(x, y);
            }
            for p in 0..b {
                y[p] += self.boundary_weights[p] * x[p];
            }
        };
        let mut diag = if self.mode == GridMode::TwoDim {
            self.boundary_stiffness.diagonal()
        } else {
            vec![0.0; b]
        };
        for p in 0..b {
            diag[p] += self.boundary_weights[p];
        }
        let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
        let mut x = vec![0.0; b];
        pcg(apply, &inv_diag, &rhs, &mut x, 1e-12, 10 * b.max(8), None::<&fn(&mut [f64])>)?;
        let mut acc = 0.0;
        for p in 0..b {
            acc += rhs[p] * x[p];
        }
        Ok(acc.max(0.0).sqrt())
    }

    pub fn norm_bulk(&self, field: &BulkField, space: NormSpace) -> Result<f64, GridError> {
        self.expect_bulk(field)?;
        let l2: f64 = field
            .values()
            .iter()
            .zip(&self.bulk_weights)
            .map(|(v, w)| w * v * v)
            .sum();
        match space {
            NormSpace::H => Ok(l2.sqrt()),
            NormSpace::V => Ok((l2 + self.stiffness.quadratic_form(field.values())).sqrt()),
            _ => Err(GridError::SpaceMismatch { space, kind: "bulk" }),
        }
    }

    pub fn norm_boundary(&self, field: &BoundaryField, space: NormSpace) -> Result<f64, GridError> {
        self.expect_boundary(field)?;
        let l2: f64 = field
            .values()
            .iter()
            .zip(&self.boundary_weights)
            .map(|(v, w)| w * v * v)
            .sum();
        match space {
            NormSpace::HGamma => Ok(l2.sqrt()),
            NormSpace::VGamma => {
                let semi = if self.mode == GridMode::TwoDim {
                    self.boundary_stiffness.quadratic_form(field.values())
                } else {
                    0.0
                };
                Ok((l2 + semi).sqrt())
            }
            _ => Err(GridError::SpaceMismatch { space, kind: "boundary" }),
        }
    }

    /// Weighted L²(Ω) inner product ⟨M a, b⟩.
    pub fn inner_bulk(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.bulk_weights).map(|((x, y), w)| w * x * y).sum()
    }

    /// Weighted L²(Γ) inner product ⟨M_Γ a, b⟩.
    pub fn inner_boundary(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.boundary_weights).map(|((x, y), w)| w * x * y).sum()
    }

    /// JSON descriptor (mode, n, h, boundary ordering).
    pub fn descriptor_json(&self) -> String {
        let d = GridDescriptor {
            mode: self.mode,
            n: self.n,
            h: self.h,
            bulk_count: self.bulk_count,
            boundary_index: &self.boundary_index,
        };
        serde_json::to_string_pretty(&d).expect("grid descriptor serializes")
    }

    /// CSV rows (index, coordinates, value), one per bulk vertex.
    pub fn bulk_field_csv(&self, field: &BulkField) -> String {
        let mut out = String::new();
        match self.mode {
            GridMode::OneDim => {
                out.push_str("index,x,value\n");
                for (i, v) in field.values().iter().enumerate() {
                    let (x, _) = self.coords(i);
                    out.push_str(&format!("{i},{x},{v}\n"));
                }
            }
            GridMode::TwoDim => {
                out.push_str("index,x,y,value\n");
                for (i, v) in field.values().iter().enumerate() {
                    let (x, y) = self.coords(i);
                    out.push_str(&format!("{i},{x},{y},{v}\n"));
                }
            }
        }
        out
    }

    /// CSV rows for a boundary field, ordered along the curve.
    pub fn boundary_field_csv(&self, field: &BoundaryField) -> String {
        let mut out = String::from("position,bulk_index,x,y,value\n");
        for (p, v) in field.values().iter().enumerate() {
            let i = self.boundary_index[p];
            let (x, y) = self.coords(i);
            out.push_str(&format!("{p},{i},{x},{y},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rng_values(seed: u64, len: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rejects_tiny_mesh() {
        assert!(matches!(Grid::build(GridMode::OneDim, 2), Err(GridError::InvalidMesh(_))));
    }

    #[test]
    fn one_dim_n3_layout() {
        let g = Grid::build(GridMode::OneDim, 3).unwrap();
        assert_eq!(g.bulk_count(), 3);
        assert_eq!(g.boundary_index(), &[0, 2]);
        let h = 0.5;
        assert_eq!(g.bulk_weights(), &[h / 2.0, h, h / 2.0]);
    }

    #[test]
    fn two_dim_n3_counts_and_cycle() {
        let g = Grid::build(GridMode::TwoDim, 3).unwrap();
        assert_eq!(g.bulk_count(), 9);
        assert_eq!(g.boundary_count(), 8);
        // closed cycle: consecutive boundary vertices are grid neighbours,
        // including the wrap-around pair
        let b = g.boundary_index();
        for p in 0..b.len() {
            let q = (p + 1) % b.len();
            let (x0, y0) = g.coords(b[p]);
            let (x1, y1) = g.coords(b[q]);
            let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            assert!((d - g.h()).abs() < 1e-14);
        }
    }

    #[test]
    fn bulk_weights_partition_of_unity() {
        for n in [3, 9, 17] {
            let g = Grid::build(GridMode::TwoDim, n).unwrap();
            let total: f64 = g.bulk_weights().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_examples() {
        let g = Grid::build(GridMode::OneDim, 11).unwrap();
        assert!((g.mean(&BulkField::constant(3.25, 11)) - 3.25).abs() < 1e-14);
        assert_eq!(g.mean(&BulkField::zeros(11)), 0.0);
        let linear = g.bulk_from_fn(|x, _| x);
        assert!((g.mean(&linear) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn stiffness_kernel_and_psd() {
        for (mode, n) in [(GridMode::OneDim, 17), (GridMode::TwoDim, 9)] {
            let g = Grid::build(mode, n).unwrap();
            let c = BulkField::constant(2.0, g.bulk_count());
            let kc = g.apply_bulk_stiffness(&c);
            assert!(kc.values().iter().all(|v| v.abs() < 1e-13));
            for trial in 0..100 {
                let y = BulkField::from_vec_unchecked(rng_values(trial, g.bulk_count()));
                assert!(g.stiffness().quadratic_form(y.values()) >= -1e-12);
            }
            assert!(g.stiffness().asymmetry() <= 1e-14);
            assert!(g.boundary_stiffness().asymmetry() <= 1e-14);
        }
    }

    #[test]
    fn dirichlet_energy_converges_second_order() {
        // ∫ |∇cos(πx)|² = π²/2
        let exact = PI * PI / 2.0;
        let energy = |n: usize| {
            let g = Grid::build(GridMode::OneDim, n).unwrap();
            let y = g.bulk_from_fn(|x, _| (PI * x).cos());
            g.stiffness().quadratic_form(y.values())
        };
        let e1 = (energy(33) - exact).abs();
        let e2 = (energy(65) - exact).abs();
        let ratio = e1 / e2;
        assert!((3.2..=4.8).contains(&ratio), "ratio {ratio}");

        // same check in 2-d with cos(πx)cos(πy), energy π²/2
        let energy2 = |n: usize| {
            let g = Grid::build(GridMode::TwoDim, n).unwrap();
            let y = g.bulk_from_fn(|x, yv| (PI * x).cos() * (PI * yv).cos());
            g.stiffness().quadratic_form(y.values())
        };
        let f1 = (energy2(17) - exact).abs();
        let f2 = (energy2(33) - exact).abs();
        let ratio2 = f1 / f2;
        assert!((3.2..=4.8).contains(&ratio2), "2-d ratio {ratio2}");
    }

    #[test]
    fn boundary_stiffness_basics() {
        let g1 = Grid::build(GridMode::OneDim, 9).unwrap();
        let any = BoundaryField::new(vec![1.3, -0.4]).unwrap();
        assert!(g1
            .apply_boundary_stiffness(&any)
            .values()
            .iter()
            .all(|v| *v == 0.0));

        let g2 = Grid::build(GridMode::TwoDim, 9).unwrap();
        let c = BoundaryField::constant(5.0, g2.boundary_count());
        let kc = g2.apply_boundary_stiffness(&c);
        assert!(kc.values().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn boundary_laplacian_lowest_eigenvalue() {
        // lowest nonzero eigenvalue of the periodic Laplace–Beltrami operator
        // on the square perimeter (L = 4) is (2π/L)²; inverse iteration with
        // the constant mode deflated
        let exact = (2.0 * PI / 4.0).powi(2);
        let estimate = |n: usize| -> f64 {
            let g = Grid::build(GridMode::TwoDim, n).unwrap();
            let b = g.boundary_count();
            let wsum: f64 = g.boundary_weights().iter().sum();
            let deflate = |x: &mut Vec<f64>| {
                let m: f64 =
                    x.iter().zip(g.boundary_weights()).map(|(v, w)| v * w).sum::<f64>() / wsum;
                x.iter_mut().for_each(|v| *v -= m);
            };
            let mut v: Vec<f64> = (0..b).map(|p| ((p * 37 + 11) % 17) as f64 - 8.0).collect();
            deflate(&mut v);
            let inv_diag: Vec<f64> =
                g.boundary_stiffness().diagonal().iter().map(|d| 1.0 / d).collect();
            for _ in 0..60 {
                let rhs: Vec<f64> =
                    v.iter().zip(g.boundary_weights()).map(|(x, w)| x * w).collect();
                let mut x = vec![0.0; b];
                let nb = b as f64;
                let project = move |y: &mut [f64]| {
                    let s: f64 = y.iter().sum::<f64>() / nb;
                    y.iter_mut().for_each(|z| *z -= s);
                };
                pcg(
                    |a: &[f64], y: &mut [f64]| g.boundary_stiffness().mul(a, y),
                    &inv_diag,
                    &rhs,
                    &mut x,
                    1e-13,
                    10 * b,
                    Some(&project),
                )
                .unwrap();
                deflate(&mut x);
                let nrm: f64 = x
                    .iter()
                    .zip(g.boundary_weights())
                    .map(|(a, w)| w * a * a)
                    .sum::<f64>()
                    .sqrt();
                x.iter_mut().for_each(|z| *z /= nrm);
                v = x;
            }
            let num = g.boundary_stiffness().quadratic_form(&v);
            let den: f64 = v.iter().zip(g.boundary_weights()).map(|(a, w)| w * a * a).sum();
            num / den
        };
        let e1 = (estimate(9) - exact).abs();
        let e2 = (estimate(17) - exact).abs();
        assert!(e1 / e2 > 3.2 && e1 / e2 < 4.8, "ratio {}", e1 / e2);
        assert!(e2 < 0.01 * exact);
    }

    #[test]
    fn trace_and_lift() {
        let g = Grid::build(GridMode::TwoDim, 5).unwrap();
        let c = BulkField::constant(7.5, g.bulk_count());
        assert!(g.trace(&c).values().iter().all(|v| *v == 7.5));

        let gfield =
            BoundaryField::from_vec_unchecked((0..g.boundary_count()).map(|p| p as f64).collect());
        let y = g.bulk_from_fn(|x, _| x);
        let lifted = g.lift(&gfield, &y);
        assert_eq!(g.trace(&lifted), gfield);

        // trace of x₁ lies in [0,1] and matches vertex coordinates
        let tr = g.trace(&y);
        for (p, v) in tr.values().iter().enumerate() {
            let (x, _) = g.coords(g.boundary_index()[p]);
            assert_eq!(*v, x);
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn neumann_zero_and_mean_violation() {
        let g = Grid::build(GridMode::OneDim, 17).unwrap();
        let z = g.neumann_solve(&BulkField::zeros(17)).unwrap();
        assert!(z.values().iter().all(|v| v.abs() < 1e-14));
        let bad = BulkField::constant(0.5, 17);
        assert!(matches!(g.neumann_solve(&bad), Err(GridError::MeanViolation(_))));
    }

    #[test]
    fn neumann_cosine_analytic() {
        // −p″ = cos(πx) with Neumann data: p = cos(πx)/π²
        let err = |n: usize| -> f64 {
            let g = Grid::build(GridMode::OneDim, n).unwrap();
            let v = g.bulk_from_fn(|x, _| (PI * x).cos());
            let p = g.neumann_solve(&v).unwrap();
            let pexact = g.bulk_from_fn(|x, _| (PI * x).cos() / (PI * PI));
            p.values()
                .iter()
                .zip(pexact.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(17);
        let e2 = err(33);
        assert!(e1 / e2 > 3.2 && e1 / e2 < 4.8, "ratio {}", e1 / e2);
    }

    #[test]
    fn neumann_symmetry_right_inverse_and_mean() {
        let g = Grid::build(GridMode::TwoDim, 9).unwrap();
        let nvert = g.bulk_count();
        for trial in 0..20 {
            let mut u = rng_values(100 + trial, nvert);
            let mut v = rng_values(200 + trial, nvert);
            let mu = g.mean_slice(&u);
            u.iter_mut().for_each(|x| *x -= mu);
            let mv = g.mean_slice(&v);
            v.iter_mut().for_each(|x| *x -= mv);
            let uf = BulkField::from_vec_unchecked(u.clone());
            let vf = BulkField::from_vec_unchecked(v.clone());
            let nu = g.neumann_solve(&uf).unwrap();
            let nv = g.neumann_solve(&vf).unwrap();
            let lhs = g.inner_bulk(&u, nv.values());
            let rhs = g.inner_bulk(&v, nu.values());
            assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + lhs.abs()));
            // right inverse: ‖K (N v) − M v‖ ≤ 1e−11 ‖M v‖
            let kp = g.apply_bulk_stiffness(&nv);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..nvert {
                let mvi = g.bulk_weights()[i] * v[i];
                num += (kp.values()[i] - mvi).powi(2);
                den += mvi * mvi;
            }
            assert!(num.sqrt() <= 1e-11 * den.sqrt());
            assert!(g.mean(&nv).abs() <= 1e-12);
        }
    }

    #[test]
    fn dual_norm_examples() {
        let g = Grid::build(GridMode::OneDim, 65).unwrap();
        assert_eq!(g.dual_norm(&BulkField::zeros(65)).unwrap(), 0.0);
        let v = g.bulk_from_fn(|x, _| (PI * x).cos());
        let exact = 1.0 / (PI * 2.0_f64.sqrt());
        let d = g.dual_norm(&v).unwrap();
        assert!((d - exact).abs() < 5e-4, "dual norm {d} vs {exact}");
        // homogeneity
        let mut v3 = v.clone();
        v3.scale(-3.0);
        let d3 = g.dual_norm(&v3).unwrap();
        assert!((d3 - 3.0 * d).abs() < 1e-12 * (1.0 + d3));
        // definiteness on the zero-mean subspace
        let mut w = rng_values(7, 65);
        let mw = g.mean_slice(&w);
        w.iter_mut().for_each(|x| *x -= mw);
        let wf = BulkField::from_vec_unchecked(w);
        assert!(g.dual_norm(&wf).unwrap() > 1e-6 * g.norm_bulk(&wf, NormSpace::H).unwrap());
    }

    #[test]
    fn norm_examples_and_mismatch() {
        let g = Grid::build(GridMode::TwoDim, 9).unwrap();
        let one = BulkField::constant(1.0, g.bulk_count());
        assert!((g.norm_bulk(&one, NormSpace::H).unwrap() - 1.0).abs() < 1e-14);
        assert!((g.norm_bulk(&one, NormSpace::V).unwrap() - 1.0).abs() < 1e-13);
        assert!(matches!(
            g.norm_bulk(&one, NormSpace::HGamma),
            Err(GridError::SpaceMismatch { .. })
        ));
        let bone = BoundaryField::constant(1.0, g.boundary_count());
        assert!((g.norm_boundary(&bone, NormSpace::HGamma).unwrap() - 2.0).abs() < 1e-13);
        assert!(matches!(
            g.norm_boundary(&bone, NormSpace::V),
            Err(GridError::SpaceMismatch { .. })
        ));

        let g1 = Grid::build(GridMode::OneDim, 129).unwrap();
        let y = g1.bulk_from_fn(|x, _| (PI * x).cos());
        let hn = g1.norm_bulk(&y, NormSpace::H).unwrap();
        assert!((hn - 1.0 / 2.0_f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn field_validation() {
        assert!(matches!(BulkField::new(vec![0.0, f64::NAN]), Err(GridError::NonFinite(1))));
        let g = Grid::build(GridMode::OneDim, 5).unwrap();
        let short = BulkField::zeros(3);
        assert!(matches!(
            g.norm_bulk(&short, NormSpace::H),
            Err(GridError::FieldMismatch { .. })
        ));
    }

    #[test]
    fn descriptor_and_csv_shapes() {
        let g = Grid::build(GridMode::OneDim, 3).unwrap();
        let json: serde_json::Value = serde_json::from_str(&g.descriptor_json()).unwrap();
        assert_eq!(json["mode"], "one_dim");
        assert_eq!(json["n"], 3);
        let csv = g.bulk_field_csv(&BulkField::zeros(3));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("index,x,value"));
    }
}

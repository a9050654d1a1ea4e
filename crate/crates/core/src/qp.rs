//! Dense reference solver for the U_ad projection on tiny instances.
//!
//! Projecting u onto {box} ∩ {‖D_t x‖ ≤ M₀} in the weighted L²(Σ) metric is
//! a convex QP. This oracle enumerates every active set (each variable free,
//! at its lower or at its upper bound; ball active or inactive), solves the
//! corresponding KKT system exactly (with a scalar secular equation in the
//! ball multiplier), and keeps the KKT-consistent candidate with the best
//! objective. Exponential in the variable count, so only for desk-scale
//! cross-checks of the Dykstra projection.

use crate::control::ControlBox;
use crate::grid::Grid;
use crate::state::BoundaryControl;

/// Weighted metric entries w(level, vertex) = dt · w_Γ(vertex) and the
/// derivative operator rows of D_t in flat index space.
struct Instance {
    levels: usize,
    width: usize,
    dt: f64,
    metric: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    m_0: f64,
}

impl Instance {
    fn flat(&self, level: usize, vertex: usize) -> usize {
        level * self.width + vertex
    }

    /// A = Dᵀ W' D in flat coordinates (W' the left-endpoint Σ-quadrature of
    /// the difference rows), so the ball constraint is xᵀ A x ≤ M₀².
    fn ball_matrix(&self, grid: &Grid) -> Vec<Vec<f64>> {
        let dim = self.levels * self.width;
        let mut a = vec![vec![0.0; dim]; dim];
        if self.levels < 2 {
            return a;
        }
        for p in 0..self.width {
            let wrow = grid.boundary_weights()[p] * self.dt / (self.dt * self.dt);
            for k in 0..self.levels - 1 {
                let i = self.flat(k, p);
                let j = self.flat(k + 1, p);
                a[i][i] += wrow;
                a[j][j] += wrow;
                a[i][j] -= wrow;
                a[j][i] -= wrow;
            }
        }
        a
    }
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for r in 0..n {
            if r == col {
                continue;
            }
            let m = a[r][col] / d;
            if m == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= m * a[col][c];
            }
            b[r] -= m * b[col];
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Exact projection of `u` onto the admissible set by brute-force active-set
/// enumeration. Panics if the instance exceeds 12 variables.
pub fn project_oracle(u: &BoundaryControl, cbox: &ControlBox, grid: &Grid) -> BoundaryControl {
    let dim = u.levels() * u.width();
    assert!(dim <= 12, "oracle is exponential; got {dim} variables");
    let inst = Instance {
        levels: u.levels(),
        width: u.width(),
        dt: u.dt,
        metric: {
            let mut m = Vec::with_capacity(dim);
            for _k in 0..u.levels() {
                for p in 0..u.width() {
                    m.push(u.dt * grid.boundary_weights()[p]);
                }
            }
            m
        },
        lower: cbox.lower().to_vec(),
        upper: cbox.upper().to_vec(),
        m_0: cbox.m_0,
    };
    let ball = inst.ball_matrix(grid);
    let target: Vec<f64> = u.as_slice().to_vec();

    let objective = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&target)
            .zip(&inst.metric)
            .map(|((xi, ui), w)| w * (xi - ui) * (xi - ui))
            .sum::<f64>()
            * 0.5
    };
    let quad = |x: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                acc += x[i] * ball[i][j] * x[j];
            }
        }
        acc
    };

    // KKT solve for a fixed assignment: 0 = free, 1 = lower, 2 = upper,
    // with μ ≥ 0 the ball multiplier (0 when inactive)
    let solve_assignment = |assign: &[u8], mu: f64| -> Option<Vec<f64>> {
        let free: Vec<usize> = (0..dim).filter(|&i| assign[i] == 0).collect();
        let mut x = vec![0.0; dim];
        for i in 0..dim {
            match assign[i] {
                1 => x[i] = inst.lower[i],
                2 => x[i] = inst.upper[i],
                _ => {}
            }
        }
        if free.is_empty() {
            return Some(x);
        }
        let nf = free.len();
        let mut a = vec![vec![0.0; nf]; nf];
        let mut b = vec![0.0; nf];
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                a[r][c] = mu * ball[i][j];
            }
            a[r][r] += inst.metric[i];
            b[r] = inst.metric[i] * target[i];
            for j in 0..dim {
                if assign[j] != 0 {
                    b[r] -= mu * ball[i][j] * x[j];
                }
            }
        }
        let xf = solve_dense(a, b)?;
        for (r, &i) in free.iter().enumerate() {
            x[i] = xf[r];
        }
        Some(x)
    };

    let kkt_ok = |x: &[f64], assign: &[u8], mu: f64| -> bool {
        let tol = 1e-9;
        // gradient of the Lagrangian: W(x − u) + μ A x + bound multipliers
        for i in 0..dim {
            let mut g = inst.metric[i] * (x[i] - target[i]);
            for j in 0..dim {
                g += mu * ball[i][j] * x[j];
            }
            match assign[i] {
                0 => {
                    if g.abs() > tol || x[i] < inst.lower[i] - tol || x[i] > inst.upper[i] + tol {
                        return false;
                    }
                }
                1 => {
                    // at the lower bound the bound multiplier is +g ≥ 0
                    if g < -tol {
                        return false;
                    }
                }
                _ => {
                    if g > tol {
                        return false;
                    }
                }
            }
        }
        quad(x) <= inst.m_0 * inst.m_0 + tol
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |x: Vec<f64>| {
        let j = objective(&x);
        if best.as_ref().map_or(true, |(bj, _)| j < *bj) {
            best = Some((j, x));
        }
    };

    let total = 3usize.pow(dim as u32);
    let mut assign = vec![0u8; dim];
    for code in 0..total {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = (c % 3) as u8;
            c /= 3;
        }
        // ball inactive (μ = 0)
        if let Some(x) = solve_assignment(&assign, 0.0) {
            if kkt_ok(&x, &assign, 0.0) {
                consider(x);
            }
        }
        // ball active: find μ > 0 with quad(x(μ)) = M₀² by bisection
        let m2 = inst.m_0 * inst.m_0;
        let q0 = solve_assignment(&assign, 0.0).map(|x| quad(&x));
        if let Some(q0) = q0 {
            if q0 > m2 {
                let mut lo = 0.0f64;
                let mut hi = 1.0f64;
                let mut guard = 0;
                while let Some(x) = solve_assignment(&assign, hi) {
                    if quad(&x) < m2 {
                        break;
                    }
                    lo = hi;
                    hi *= 4.0;
                    guard += 1;
                    if guard > 200 {
                        break;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    match solve_assignment(&assign, mid) {
                        Some(x) => {
                            if quad(&x) > m2 {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        None => break,
                    }
                    if hi - lo <= 1e-15 * hi.max(1.0) {
                        break;
                    }
                }
                let mu = 0.5 * (lo + hi);
                if let Some(x) = solve_assignment(&assign, mu) {
                    if kkt_ok(&x, &assign, mu) {
                        consider(x);
                    }
                }
            }
        }
    }

    let (_, x) = best.expect("a feasible KKT point exists for a nonempty box");
    BoundaryControl::from_raw(x, u.levels(), u.width(), u.dt)
}

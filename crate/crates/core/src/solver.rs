//! Iterative linear solvers: preconditioned conjugate gradients for the
//! symmetric positive (semi)definite operators and MINRES for the symmetric
//! indefinite block systems of the time stepper.
//!
//! Both solvers are matrix-free (they take an operator closure), use a
//! diagonal preconditioner, and finish with a true-residual check; if the
//! recurrence stopped early of the requested tolerance, the solve restarts
//! on the correction equation. All loops are sequential, so results are
//! bit-reproducible for identical inputs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("linear solver stalled: residual {residual:.3e} after {iterations} iterations (target {target:.3e})")]
    Stalled { residual: f64, iterations: usize, target: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients for `A x = b` with SPD (or PSD with a
/// known kernel) operator. `project` removes kernel components from residuals
/// and search directions; pass it for singular-but-consistent systems.
pub fn pcg<F, P>(
    apply: F,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
    project: Option<&P>,
) -> Result<SolveStats, SolverError>
where
    F: Fn(&[f64], &mut [f64]),
    P: Fn(&mut [f64]) + ?Sized,
{
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];

    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if let Some(proj) = project {
        proj(&mut r);
    }
    let bnorm = norm2(b).max(f64::MIN_POSITIVE);
    let target = rtol * bnorm;
    let mut rnorm = norm2(&r);
    if rnorm <= target {
        return Ok(SolveStats { iterations: 0, residual: rnorm });
    }

    for i in 0..n {
        z[i] = inv_diag[i] * r[i];
    }
    if let Some(proj) = project {
        proj(&mut z);
    }
    p.copy_from_slice(&z);
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut stagnant = 0usize;

    while iterations < max_iter {
        iterations += 1;
        apply(&p, &mut ap);
        if let Some(proj) = project {
            proj(&mut ap);
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break; // lost positivity (roundoff near convergence)
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if let Some(proj) = project {
            proj(&mut r);
        }
        let new_norm = norm2(&r);
        if new_norm <= target {
            rnorm = new_norm;
            return Ok(SolveStats { iterations, residual: rnorm });
        }
        if new_norm >= rnorm * (1.0 - 1e-14) {
            stagnant += 1;
            if stagnant > 50 {
                rnorm = new_norm;
                break;
            }
        } else {
            stagnant = 0;
        }
        rnorm = new_norm;
        for i in 0..n {
            z[i] = inv_diag[i] * r[i];
        }
        if let Some(proj) = project {
            proj(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    if rnorm <= target * 4.0 {
        // within roundoff of the requested tolerance
        return Ok(SolveStats { iterations, residual: rnorm });
    }
    Err(SolverError::Stalled { residual: rnorm, iterations, target })
}

/// One MINRES pass (Paige–Saunders) with an SPD diagonal preconditioner.
/// Returns the preconditioned-residual estimate; the caller verifies the
/// true residual.
fn minres_pass<F>(
    apply: &F,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> usize
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut r1 = vec![0.0; n];
    apply(x, &mut r1);
    for i in 0..n {
        r1[i] = b[i] - r1[i];
    }
    let mut y: Vec<f64> = (0..n).map(|i| inv_diag[i] * r1[i]).collect();
    let beta1_sq = dot(&r1, &y);
    if beta1_sq <= 0.0 {
        return 0;
    }
    let beta1 = beta1_sq.sqrt();
    let mut r2 = r1.clone();

    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn): (f64, f64) = (-1.0, 0.0);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        apply(&v, &mut tmp);
        if iterations >= 2 {
            let c = beta / oldb;
            for i in 0..n {
                tmp[i] -= c * r1[i];
            }
        }
        let alfa = dot(&v, &tmp);
        let c = alfa / beta;
        for i in 0..n {
            tmp[i] -= c * r2[i];
        }
        r1.copy_from_slice(&r2);
        r2.copy_from_slice(&tmp);
        for i in 0..n {
            y[i] = inv_diag[i] * r2[i];
        }
        oldb = beta;
        let beta_sq = dot(&r2, &y);
        beta = if beta_sq > 0.0 { beta_sq.sqrt() } else { 0.0 };

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        for i in 0..n {
            let w1i = w2[i];
            w2[i] = w[i];
            w[i] = (v[i] - oldeps * w1i - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }

        if phibar <= rtol * beta1 || beta == 0.0 {
            break;
        }
    }
    iterations
}

/// MINRES for symmetric (possibly indefinite) `A x = b` with diagonal
/// preconditioning, wrapped in true-residual refinement: once the inner
/// recurrence reports convergence the actual residual is recomputed and the
/// solve restarts on the correction equation until `‖b − Ax‖ ≤ rtol ‖b‖`.
pub fn minres<F>(
    apply: F,
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> Result<SolveStats, SolverError>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| {
            let a = d.abs();
            if a > f64::MIN_POSITIVE { 1.0 / a } else { 1.0 }
        })
        .collect();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|xi| *xi = 0.0);
        return Ok(SolveStats { iterations: 0, residual: 0.0 });
    }
    let target = rtol * bnorm;
    let mut total_iters = 0;
    let mut residual;
    let mut r = vec![0.0; n];
    let mut corr = vec![0.0; n];
    let mut last = f64::INFINITY;

    for _round in 0..8 {
        apply(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        residual = norm2(&r);
        if residual <= target {
            return Ok(SolveStats { iterations: total_iters, residual });
        }
        if total_iters >= max_iter || residual >= last * (1.0 - 1e-12) && _round > 1 {
            break;
        }
        last = residual;
        corr.iter_mut().for_each(|c| *c = 0.0);
        let budget = (max_iter - total_iters).min(2 * n + 50);
        let inner_rtol = (target / residual * 0.1).max(1e-14);
        total_iters += minres_pass(&apply, &inv_diag, &r, &mut corr, inner_rtol, budget);
        for i in 0..n {
            x[i] += corr[i];
        }
    }

    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    residual = norm2(&r);
    if residual <= target * 4.0 {
        return Ok(SolveStats { iterations: total_iters, residual });
    }
    Err(SolverError::Stalled { residual, iterations: total_iters, target })
}

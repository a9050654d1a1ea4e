//! Backward-in-time adjoint solver.
//!
//! The adjoint pair (q, q_Γ) is constructed as the exact transpose of the
//! linearized forward step, frozen at the converged forward states. With
//! multipliers (p_j, r_j) attached to the two equations of step j−1 → j, the
//! stationarity conditions of the discrete Lagrangian read
//!
//! ```text
//! dt K p_j + M r_j = 0
//! M p_j − G(y_j) r_j = M p_{j+1} − C r_{j+1} − dt (M φ_Q,j + Tᵀ M_Γ φ_Σ,j)
//! ```
//!
//! which is the same symmetric indefinite block system the forward Newton
//! iteration solves, with the β-part of the curvature implicit at y_j and the
//! π-part explicit (C collects the explicit-side couplings). The first row
//! eliminates p = −N(q) up to a constant, so the sweep realizes the
//! continuous backward equation −∂_t(N q + τ q) − Δq + λ q = φ_Q coupled with
//! −∂_t q_Γ − Δ_Γ q_Γ + λ_Γ q_Γ = φ_Σ on the zero-mean pair space, and the
//! terminal block (zero data beyond T) imposes the final condition
//! (N q + τ q, q_Γ)(T) ⊥ test pairs.
//!
//! The stored level m carries q(t_m) := r_{m+1}/dt, matching the slab
//! convention of [`crate::state::BoundaryControl`]: the reduced-cost gradient
//! is b₀ u + q_Γ at every stored level, exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::CostSpec;
use crate::grid::{BoundaryField, BulkField, Grid, NormSpace};
use crate::potential::Potential;
use crate::state::{BlockSystem, SolverConfig, StateError, Trajectory};

/// Adjoint state at one time level; q has zero (weighted) mean and q_gamma
/// is its boundary trace.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub q: BulkField,
    pub q_gamma: BoundaryField,
    pub time: f64,
}

#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub states: Vec<AdjointState>,
    pub tau: f64,
    /// Number of backward steps whose frozen curvature lost pointwise
    /// nonnegativity (possible with externally supplied λ); the solve
    /// continues with MINRES, which does not need positivity.
    pub indefinite_steps: usize,
}

impl AdjointTrajectory {
    pub fn levels(&self) -> usize {
        self.states.len()
    }
}

/// Frozen linearization coefficients λ = f″(y), λ_Γ = f_Γ″(y_Γ) and forcings
/// φ_Q = b_Q(y − z_Q), φ_Σ = b_Σ(y_Γ − z_Σ).
///
/// `lambda`/`lambda_gamma` hold all K+1 levels; the forcings hold the K
/// left-endpoint levels of the cost quadrature. The π-slopes record the
/// (linear) explicit split so the sweep can recover β′ = λ − π′.
#[derive(Debug, Clone)]
pub struct AdjointCoefficients {
    pub lambda: Vec<BulkField>,
    pub lambda_gamma: Vec<BoundaryField>,
    pub phi_q: Vec<BulkField>,
    pub phi_sigma: Vec<BoundaryField>,
    pub pi_slope_bulk: f64,
    pub pi_slope_bdry: f64,
}

/// Evaluates the linearization coefficients along a forward trajectory.
pub fn lambda_fields(
    traj: &Trajectory,
    cost: &CostSpec,
    f: &Potential,
    f_gamma: &Potential,
) -> Result<AdjointCoefficients, StateError> {
    let steps = traj.steps();
    let mut lambda = Vec::with_capacity(steps + 1);
    let mut lambda_gamma = Vec::with_capacity(steps + 1);
    for s in &traj.states {
        let lam: Result<Vec<f64>, _> = s.y.values().iter().map(|&v| f.eval(v, 2)).collect();
        lambda.push(BulkField::from_vec_unchecked(lam.map_err(StateError::Potential)?));
        let lam_g: Result<Vec<f64>, _> =
            s.y_gamma.values().iter().map(|&v| f_gamma.eval(v, 2)).collect();
        lambda_gamma
            .push(BoundaryField::from_vec_unchecked(lam_g.map_err(StateError::Potential)?));
    }
    let mut phi_q = Vec::with_capacity(steps);
    let mut phi_sigma = Vec::with_capacity(steps);
    for k in 0..steps {
        let s = &traj.states[k];
        let zq = cost.z_q_level(k);
        let phi: Vec<f64> = s
            .y
            .values()
            .iter()
            .zip(zq)
            .map(|(y, z)| cost.b_q * (y - z))
            .collect();
        phi_q.push(BulkField::from_vec_unchecked(phi));
        let zs = cost.z_sigma_level(k);
        let phi_g: Vec<f64> = s
            .y_gamma
            .values()
            .iter()
            .zip(zs)
            .map(|(y, z)| cost.b_sigma * (y - z))
            .collect();
        phi_sigma.push(BoundaryField::from_vec_unchecked(phi_g));
    }
    Ok(AdjointCoefficients {
        lambda,
        lambda_gamma,
        phi_q,
        phi_sigma,
        pi_slope_bulk: f.split().pi_prime(),
        pi_slope_bdry: f_gamma.split().pi_prime(),
    })
}

/// Backward sweep producing the adjoint trajectory on the forward time grid;
/// the state at t_K is the imposed final condition (identically zero in the
/// eliminated variables), the earlier levels come from the transposed block
/// solves.
pub fn solve_adjoint(
    traj: &Trajectory,
    coeffs: &AdjointCoefficients,
    tau: f64,
    grid: &Grid,
    config: &SolverConfig,
) -> Result<AdjointTrajectory, StateError> {
    let steps = traj.steps();
    let n = grid.bulk_count();
    let b = grid.boundary_count();
    let dt = traj.dt;
    if coeffs.lambda.len() != steps + 1 || coeffs.phi_q.len() != steps {
        return Err(StateError::Config(
            "adjoint coefficients do not conform to the trajectory time grid".into(),
        ));
    }
    let wq = grid.bulk_weights();
    let wg = grid.boundary_weights();

    let mut states: Vec<AdjointState> = Vec::with_capacity(steps + 1);
    states.push(AdjointState {
        q: BulkField::zeros(n),
        q_gamma: BoundaryField::zeros(b),
        time: steps as f64 * dt,
    });

    // explicit-side coupling C = ((τ − dt π′)/dt) M + Tᵀ ((1 − dt π_Γ′)/dt) M_Γ T
    let c_bulk = tau / dt - coeffs.pi_slope_bulk;
    let c_bdry = 1.0 / dt - coeffs.pi_slope_bdry;

    let mut p_next = vec![0.0; n];
    let mut r_next = vec![0.0; n];
    let mut rhs = vec![0.0; 2 * n];
    let mut sol = vec![0.0; 2 * n];
    let mut indefinite_steps = 0usize;

    for j in (1..=steps).rev() {
        // curvature at the implicit level y_j
        let lam = coeffs.lambda[j].values();
        let mut bp_bulk = Vec::with_capacity(n);
        let mut lost_positivity = false;
        for i in 0..n {
            let v = lam[i] - coeffs.pi_slope_bulk;
            if v < 0.0 {
                lost_positivity = true;
            }
            bp_bulk.push(v);
        }
        let lam_g = coeffs.lambda_gamma[j].values();
        let mut bp_bdry = Vec::with_capacity(b);
        for p in 0..b {
            let v = lam_g[p] - coeffs.pi_slope_bdry;
            if v < 0.0 {
                lost_positivity = true;
            }
            bp_bdry.push(v);
        }
        if lost_positivity {
            indefinite_steps += 1;
        }

        // rhs2 = M p_{j+1} − C r_{j+1} − dt (M φ_Q,j + Tᵀ M_Γ φ_Σ,j), φ only
        // for j ≤ K−1 (left-endpoint cost quadrature has no t_K term)
        for i in 0..n {
            rhs[i] = 0.0;
            rhs[n + i] = wq[i] * (p_next[i] - c_bulk * r_next[i]);
        }
        {
            let mut tr = vec![0.0; b];
            grid.trace_slice(&r_next, &mut tr);
            for (p, &i) in grid.boundary_index().iter().enumerate() {
                rhs[n + i] -= c_bdry * wg[p] * tr[p];
            }
        }
        if j < steps {
            let phi = coeffs.phi_q[j].values();
            for i in 0..n {
                rhs[n + i] -= dt * wq[i] * phi[i];
            }
            let phi_g = coeffs.phi_sigma[j].values();
            for (p, &i) in grid.boundary_index().iter().enumerate() {
                rhs[n + i] -= dt * wg[p] * phi_g[p];
            }
        }

        let block = BlockSystem {
            grid,
            tau,
            dt,
            beta_prime_bulk: bp_bulk,
            beta_prime_bdry: bp_bdry,
        };
        sol.iter_mut().for_each(|v| *v = 0.0);
        block
            .solve(&rhs, &mut sol, config.linear_rtol)
            .map_err(|source| StateError::LinearSolve { step: j - 1, source })?;

        let (p_j, r_j) = sol.split_at(n);
        p_next.copy_from_slice(p_j);
        r_next.copy_from_slice(r_j);

        // stored level j−1: q = r_j / dt, with the zero-mean roundoff removed
        let mut q: Vec<f64> = r_j.iter().map(|v| v / dt).collect();
        let shift = grid.mean_slice(&q);
        q.iter_mut().for_each(|v| *v -= shift);
        let qf = BulkField::from_vec_unchecked(q);
        let q_gamma = grid.trace(&qf);
        states.push(AdjointState { q: qf, q_gamma, time: (j - 1) as f64 * dt });
    }

    states.reverse();
    if indefinite_steps > 0 {
        eprintln!(
            "warning: adjoint curvature lost pointwise positivity on {indefinite_steps} of {steps} backward steps"
        );
    }
    Ok(AdjointTrajectory { states, tau, indefinite_steps })
}

/// Tangent linear model: propagates a control perturbation through the
/// linearized forward steps (frozen at the converged trajectory) and returns
/// the state perturbations δy at every level. This is the map whose exact
/// transpose the backward sweep implements; the pairing test between the two
/// is the crate's core correctness check.
pub fn tangent_solve(
    traj: &Trajectory,
    coeffs: &AdjointCoefficients,
    du: &crate::state::BoundaryControl,
    grid: &Grid,
    tau: f64,
    config: &SolverConfig,
) -> Result<Vec<BulkField>, StateError> {
    let steps = traj.steps();
    let n = grid.bulk_count();
    let b = grid.boundary_count();
    let dt = traj.dt;
    let wq = grid.bulk_weights();
    let wg = grid.boundary_weights();
    let c_bulk = tau / dt - coeffs.pi_slope_bulk;
    let c_bdry = 1.0 / dt - coeffs.pi_slope_bdry;

    let mut dys: Vec<BulkField> = Vec::with_capacity(steps + 1);
    dys.push(BulkField::zeros(n));
    let mut rhs = vec![0.0; 2 * n];
    let mut sol = vec![0.0; 2 * n];

    for k in 0..steps {
        let dy = dys[k].values();
        // row 1: M δy_k; row 2: −C δy_k − Tᵀ M_Γ δu_k
        for i in 0..n {
            rhs[i] = wq[i] * dy[i];
            rhs[n + i] = -c_bulk * wq[i] * dy[i];
        }
        let mut tdy = vec![0.0; b];
        grid.trace_slice(dy, &mut tdy);
        for (p, &i) in grid.boundary_index().iter().enumerate() {
            rhs[n + i] -= c_bdry * wg[p] * tdy[p] + wg[p] * du.level(k)[p];
        }

        let lam = coeffs.lambda[k + 1].values();
        let bp_bulk: Vec<f64> = lam.iter().map(|l| l - coeffs.pi_slope_bulk).collect();
        let lam_g = coeffs.lambda_gamma[k + 1].values();
        let bp_bdry: Vec<f64> = lam_g.iter().map(|l| l - coeffs.pi_slope_bdry).collect();
        let block = BlockSystem {
            grid,
            tau,
            dt,
            beta_prime_bulk: bp_bulk,
            beta_prime_bdry: bp_bdry,
        };
        sol.iter_mut().for_each(|v| *v = 0.0);
        block
            .solve(&rhs, &mut sol, config.linear_rtol)
            .map_err(|source| StateError::LinearSolve { step: k, source })?;
        dys.push(BulkField::from_vec_unchecked(sol[n..].to_vec()));
    }
    Ok(dys)
}

/// Residual of the discrete final condition: the pairing of
/// ((N q + τ q)(T), q_Γ(T)) against a spanning set of zero-mean test pairs
/// (e_i − mean, trace(e_i − mean)); returns the largest absolute value.
pub fn final_residual(
    adj: &AdjointTrajectory,
    grid: &Grid,
    tau: f64,
) -> Result<f64, StateError> {
    let last = adj.states.last().expect("nonempty adjoint trajectory");
    let n = grid.bulk_count();
    let wq = grid.bulk_weights();
    let wg = grid.boundary_weights();

    let mut q = last.q.clone();
    let m = grid.mean(&q);
    q.values_mut().iter_mut().for_each(|v| *v -= m);
    let nq = grid.neumann_solve(&q)?;
    let a: Vec<f64> = nq
        .values()
        .iter()
        .zip(last.q.values())
        .map(|(nv, qv)| nv + tau * qv)
        .collect();

    let total_a = grid.inner_bulk(&a, &vec![1.0; n]);
    let total_b: f64 = last
        .q_gamma
        .values()
        .iter()
        .zip(wg)
        .map(|(v, w)| v * w)
        .sum();
    let omega = grid.omega_measure();

    let mut bpos = vec![usize::MAX; n];
    for (p, &i) in grid.boundary_index().iter().enumerate() {
        bpos[i] = p;
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut r = wq[i] * a[i] - wq[i] / omega * (total_a + total_b);
        if bpos[i] != usize::MAX {
            r += wg[bpos[i]] * last.q_gamma.values()[bpos[i]];
        }
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Probe-based estimate of the dual norm of the functional
/// (v, v_Γ) ↦ Σ_k dt (⟨λ q, v⟩ + ⟨λ_Γ q_Γ, v_Γ⟩) over the unit ball of the
/// discrete W-norm (L²-in-time V-norms plus dual norms of the discrete time
/// derivatives, with v(0) = 0 and zero spatial means). Fixed seed, 64 probes.
pub fn lambda_residual_norm(
    adj: &AdjointTrajectory,
    coeffs: &AdjointCoefficients,
    grid: &Grid,
) -> Result<f64, StateError> {
    const PROBES: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a3b_da17);
    let levels = adj.levels();
    let n = grid.bulk_count();
    let dt = adj.states.get(1).map_or(1.0, |s| s.time - adj.states[0].time).abs().max(1e-300);

    let mut best = 0.0f64;
    for _ in 0..PROBES {
        // W₀ probe: zero at t=0, zero weighted mean at every level
        let mut vs: Vec<BulkField> = Vec::with_capacity(levels);
        vs.push(BulkField::zeros(n));
        for _ in 1..levels {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = grid.mean_slice(&v);
            v.iter_mut().for_each(|x| *x -= m);
            vs.push(BulkField::from_vec_unchecked(v));
        }

        let mut w_norm_sq = 0.0;
        for v in vs.iter().skip(1) {
            w_norm_sq += dt * grid.norm_bulk(v, NormSpace::V)?.powi(2);
            let tv = grid.trace(v);
            w_norm_sq += dt * grid.norm_boundary(&tv, NormSpace::VGamma)?.powi(2);
        }
        for k in 0..levels - 1 {
            let mut rate: Vec<f64> = vs[k + 1]
                .values()
                .iter()
                .zip(vs[k].values())
                .map(|(a, b)| (a - b) / dt)
                .collect();
            let m = grid.mean_slice(&rate);
            rate.iter_mut().for_each(|x| *x -= m);
            let rf = BulkField::from_vec_unchecked(rate);
            w_norm_sq += dt * grid.dual_norm(&rf)?.powi(2);
            let trate = grid.trace(&rf);
            w_norm_sq += dt * grid.boundary_dual_norm(&trate)?.powi(2);
        }
        if w_norm_sq <= 0.0 {
            continue;
        }

        let mut f = 0.0;
        for k in 1..levels {
            let lam = coeffs.lambda[k].values();
            let q = adj.states[k].q.values();
            let prod: Vec<f64> = lam.iter().zip(q).map(|(l, qv)| l * qv).collect();
            f += dt * grid.inner_bulk(&prod, vs[k].values());
            let lam_g = coeffs.lambda_gamma[k].values();
            let qg = adj.states[k].q_gamma.values();
            let prod_g: Vec<f64> = lam_g.iter().zip(qg).map(|(l, qv)| l * qv).collect();
            let tv = grid.trace(&vs[k]);
            f += dt * grid.inner_boundary(&prod_g, tv.values());
        }
        best = best.max(f.abs() / w_norm_sq.sqrt());
    }
    Ok(best)
}

//! Double-well potentials with derivatives through third order, the
//! monotone/Lipschitz split f′ = β + π used by the time stepper, and the
//! empirical dominance check |f′| ≤ η |f_Γ′| + C between a bulk and a
//! boundary potential.
//!
//! Values are stored up to an additive constant: a shift is chosen at
//! construction so the stored f is nonnegative on its domain. Derivatives
//! are unaffected, so the dynamics never see the shift.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("argument {r} outside the open domain ({lo}, {hi})")]
    DomainViolation { r: f64, lo: f64, hi: f64 },
    #[error("derivative order {0} not supported (0..=3)")]
    BadOrder(u8),
    #[error("potentials have different domains: ({0}, {1}) vs ({2}, {3})")]
    DomainMismatch(f64, f64, f64, f64),
    #[error("invalid potential parameters: {0}")]
    BadParameters(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    /// f(r) = ¼ (r² − 1)² on the whole line.
    Regular,
    /// f(r) = (1+r) ln(1+r) + (1−r) ln(1−r) − c r² on (−1, 1), c > 0.
    Logarithmic { c: f64 },
    /// f(r) = Σ coeffs[k] rᵏ, optionally restricted to a finite domain.
    Polynomial { coeffs: Vec<f64> },
}

/// Immutable potential. The split is π(r) = pi_slope · r (linear for every
/// supported kind) and β = f′ − π, which is nondecreasing by construction.
#[derive(Debug, Clone)]
pub struct Potential {
    kind: PotentialKind,
    r_minus: f64,
    r_plus: f64,
    shift: f64,
    pi_slope: f64,
    curvature_floor: f64,
}

/// View of the convex/Lipschitz split of f′.
pub struct PotentialSplit<'a> {
    potential: &'a Potential,
}

impl<'a> PotentialSplit<'a> {
    /// Monotone part β(r) = f′(r) − π(r).
    pub fn beta(&self, r: f64) -> Result<f64, PotentialError> {
        Ok(self.potential.eval(r, 1)? - self.pi(r))
    }

    pub fn beta_prime(&self, r: f64) -> Result<f64, PotentialError> {
        Ok(self.potential.eval(r, 2)? - self.potential.pi_slope)
    }

    /// Lipschitz perturbation π(r).
    pub fn pi(&self, r: f64) -> f64 {
        self.potential.pi_slope * r
    }

    pub fn pi_prime(&self) -> f64 {
        self.potential.pi_slope
    }

    pub fn lipschitz_const(&self) -> f64 {
        self.potential.pi_slope.abs()
    }
}

/// Result of the sampled dominance check (compatibility condition).
#[derive(Debug, Clone)]
pub struct CompatReport {
    pub eta: f64,
    pub c: f64,
    pub holds: bool,
    pub worst_ratio_location: f64,
}

impl Potential {
    pub fn regular() -> Self {
        Potential {
            kind: PotentialKind::Regular,
            r_minus: f64::NEG_INFINITY,
            r_plus: f64::INFINITY,
            shift: 0.0,
            pi_slope: -1.0,
            curvature_floor: -1.0,
        }
    }

    pub fn logarithmic(c: f64) -> Result<Self, PotentialError> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(PotentialError::BadParameters(format!(
                "logarithmic potential needs c > 0, got {c}"
            )));
        }
        let mut p = Potential {
            kind: PotentialKind::Logarithmic { c },
            r_minus: -1.0,
            r_plus: 1.0,
            shift: 0.0,
            pi_slope: -2.0 * c,
            // f″ = 2/(1−r²) − 2c ≥ 2 − 2c
            curvature_floor: 2.0 - 2.0 * c,
        };
        p.shift = p.compute_shift();
        Ok(p)
    }

    /// Polynomial potential; `domain` restricts evaluation when given.
    pub fn polynomial(coeffs: Vec<f64>, domain: Option<(f64, f64)>) -> Result<Self, PotentialError> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(PotentialError::BadParameters(
                "polynomial coefficients must be finite and nonempty".into(),
            ));
        }
        let (lo, hi) = domain.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        if !(lo < hi) {
            return Err(PotentialError::BadParameters(format!("empty domain ({lo}, {hi})")));
        }
        let mut p = Potential {
            kind: PotentialKind::Polynomial { coeffs },
            r_minus: lo,
            r_plus: hi,
            shift: 0.0,
            pi_slope: 0.0,
            curvature_floor: 0.0,
        };
        // π = −L r with L the sampled negative-curvature bound, so that
        // β′ = f″ + L stays nonnegative on the sampled domain
        let mut min_fpp = f64::INFINITY;
        for r in p.sample_points(4097) {
            min_fpp = min_fpp.min(p.raw_eval(r, 2));
        }
        if !min_fpp.is_finite() {
            return Err(PotentialError::BadParameters(
                "second derivative unbounded on the sampled domain".into(),
            ));
        }
        p.curvature_floor = min_fpp;
        p.pi_slope = -(-min_fpp).max(0.0);
        p.shift = p.compute_shift();
        Ok(p)
    }

    /// Restrict the domain (used for dominance experiments on a shared box).
    pub fn restricted(&self, lo: f64, hi: f64) -> Result<Self, PotentialError> {
        if !(lo < hi) || lo < self.r_minus || hi > self.r_plus {
            return Err(PotentialError::BadParameters(format!(
                "restriction ({lo}, {hi}) must lie inside ({}, {})",
                self.r_minus, self.r_plus
            )));
        }
        let mut p = self.clone();
        p.r_minus = lo;
        p.r_plus = hi;
        Ok(p)
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn r_minus(&self) -> f64 {
        self.r_minus
    }

    pub fn r_plus(&self) -> f64 {
        self.r_plus
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Lower bound on f″ over the domain (−L with L ≥ 0 in the assumptions).
    pub fn curvature_floor(&self) -> f64 {
        self.curvature_floor
    }

    pub fn contains(&self, r: f64) -> bool {
        r.is_finite() && r > self.r_minus && r < self.r_plus
    }

    pub fn split(&self) -> PotentialSplit<'_> {
        PotentialSplit { potential: self }
    }

    fn sample_points(&self, count: usize) -> Vec<f64> {
        let (lo, hi) = self.sample_box();
        let denom = (count - 1).max(1) as f64;
        (0..count).map(|k| lo + (hi - lo) * k as f64 / denom).collect()
    }

    /// Finite sampling box: the domain with an endpoint margin, or [−10, 10]
    /// clipped to the domain when an endpoint is infinite.
    fn sample_box(&self) -> (f64, f64) {
        const MARGIN: f64 = 1e-6;
        let lo = if self.r_minus.is_finite() { self.r_minus + MARGIN } else { -10.0 };
        let hi = if self.r_plus.is_finite() { self.r_plus - MARGIN } else { 10.0 };
        (lo, hi)
    }

    fn compute_shift(&self) -> f64 {
        let mut min_f = f64::INFINITY;
        for r in self.sample_points(8193) {
            min_f = min_f.min(self.raw_eval(r, 0));
        }
        // polish with a few scalar Newton steps on f′ = 0 near the best sample
        let (lo, hi) = self.sample_box();
        let mut r_best = self
            .sample_points(8193)
            .into_iter()
            .min_by(|a, b| self.raw_eval(*a, 0).total_cmp(&self.raw_eval(*b, 0)))
            .unwrap();
        for _ in 0..40 {
            let fp = self.raw_eval(r_best, 1);
            let fpp = self.raw_eval(r_best, 2);
            if fpp.abs() < 1e-300 {
                break;
            }
            let next = (r_best - fp / fpp).clamp(lo, hi);
            if (next - r_best).abs() < 1e-15 {
                r_best = next;
                break;
            }
            r_best = next;
        }
        min_f = min_f.min(self.raw_eval(r_best, 0));
        (-min_f).max(0.0)
    }

    fn raw_eval(&self, r: f64, order: u8) -> f64 {
        match &self.kind {
            PotentialKind::Regular => match order {
                0 => 0.25 * (r * r - 1.0).powi(2),
                1 => r * r * r - r,
                2 => 3.0 * r * r - 1.0,
                _ => 6.0 * r,
            },
            PotentialKind::Logarithmic { c } => match order {
                0 => (1.0 + r) * (1.0 + r).ln() + (1.0 - r) * (1.0 - r).ln() - c * r * r,
                1 => (1.0 + r).ln() - (1.0 - r).ln() - 2.0 * c * r,
                2 => 1.0 / (1.0 + r) + 1.0 / (1.0 - r) - 2.0 * c,
                _ => -1.0 / (1.0 + r).powi(2) + 1.0 / (1.0 - r).powi(2),
            },
            PotentialKind::Polynomial { coeffs } => {
                let mut cs: Vec<f64> = coeffs.clone();
                for _ in 0..order {
                    cs = cs
                        .iter()
                        .enumerate()
                        .skip(1)
                        .map(|(k, c)| k as f64 * c)
                        .collect();
                }
                cs.iter().rev().fold(0.0, |acc, c| acc * r + c)
            }
        }
    }

    /// f, f′, f″ or f‴ at r; the stored nonnegativity shift applies to
    /// order 0 only. Arguments outside the open domain are rejected rather
    /// than silently returning infinities.
    pub fn eval(&self, r: f64, order: u8) -> Result<f64, PotentialError> {
        if order > 3 {
            return Err(PotentialError::BadOrder(order));
        }
        if !self.contains(r) {
            return Err(PotentialError::DomainViolation {
                r,
                lo: self.r_minus,
                hi: self.r_plus,
            });
        }
        let v = self.raw_eval(r, order);
        Ok(if order == 0 { v + self.shift } else { v })
    }
}

/// Searches η over a dyadic grid for the smallest sampled constant C with
/// |f′| ≤ η |f_Γ′| + C on a uniform interior sample; `holds` means the best
/// C stays below `cap`. This is an empirical certificate, not a proof.
pub fn check_compatibility(
    f: &Potential,
    f_gamma: &Potential,
    samples: usize,
    cap: f64,
) -> Result<CompatReport, PotentialError> {
    if f.r_minus != f_gamma.r_minus || f.r_plus != f_gamma.r_plus {
        return Err(PotentialError::DomainMismatch(
            f.r_minus,
            f.r_plus,
            f_gamma.r_minus,
            f_gamma.r_plus,
        ));
    }
    let pts = f.sample_points(samples.max(16));
    let mut best: Option<(f64, f64, f64)> = None; // (C, eta, location)
    for e in -6..=6 {
        let eta = 2f64.powi(e);
        let mut c_req = 0.0;
        let mut loc = pts[0];
        for &r in &pts {
            let gap = f.raw_eval(r, 1).abs() - eta * f_gamma.raw_eval(r, 1).abs();
            if gap > c_req {
                c_req = gap;
                loc = r;
            }
        }
        if best.as_ref().map_or(true, |(c, _, _)| c_req < *c) {
            best = Some((c_req, eta, loc));
        }
    }
    let (c, eta, worst_ratio_location) = best.unwrap();
    Ok(CompatReport { eta, c, holds: c <= cap, worst_ratio_location })
}

/// Default cap for [`check_compatibility`]: generous enough for genuinely
/// dominated pairs at the 1e−6 endpoint margin, small enough to flag a
/// diverging |f′|/|f_Γ′| ratio.
pub const COMPAT_DEFAULT_CAP: f64 = 10.0;

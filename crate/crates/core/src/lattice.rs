//! Lattice vectors, linear eigenvalues per equation family, Q/O/R mode
//! classification, and numerical validation of the linear-part hypotheses.
//!
//! Sizes of lattice vectors are always the l1 norm `|nu| = |n| + |m_1| + ...
//! + |m_D|`. Cluster constants elsewhere in the crate depend on this choice.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Signed;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("epsilon {0} outside the window [0, {1}]")]
    EpsilonOutsideWindow(f64, f64),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("boundary-ambiguous: mode {0} has |delta|-1/2 within {1} of zero on the grid")]
    BoundaryAmbiguous(ModeVector, f64),
}

/// A lattice point `nu = (n, m)` in `Z^{1+D}`: time frequency plus space modes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeVector {
    pub n: i64,
    pub m: Vec<i64>,
}

impl fmt::Debug for ModeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{:?})", self.n, self.m)
    }
}

impl fmt::Display for ModeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{:?})", self.n, self.m)
    }
}

impl ModeVector {
    pub fn new(n: i64, m: Vec<i64>) -> Self {
        Self { n, m }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            n: 0,
            m: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// l1 size `|n| + sum |m_i|`.
    pub fn size(&self) -> i64 {
        self.n.abs() + self.m.iter().map(|x| x.abs()).sum::<i64>()
    }

    /// Euclidean square of the space part.
    pub fn m_norm_sq(&self) -> i64 {
        self.m.iter().map(|x| x * x).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.n == 0 && self.m.iter().all(|&x| x == 0)
    }

    /// Flips the sign of the i-th space component.
    pub fn flip(&self, i: usize) -> Self {
        let mut m = self.m.clone();
        m[i] = -m[i];
        Self { n: self.n, m }
    }

    /// Canonical representative of the sign-flip orbit: all `m_i >= 0`.
    pub fn canonical(&self) -> (Self, i64) {
        let mut sign = 1i64;
        let m: Vec<i64> = self
            .m
            .iter()
            .map(|&x| {
                if x < 0 {
                    sign = -sign;
                }
                x.abs()
            })
            .collect();
        (Self { n: self.n, m }, sign)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            n: self.n + other.n,
            m: self
                .m
                .iter()
                .zip(other.m.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            n: self.n - other.n,
            m: self
                .m
                .iter()
                .zip(other.m.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn negate(&self) -> Self {
        Self {
            n: -self.n,
            m: self.m.iter().map(|x| -x).collect(),
        }
    }

    pub fn dist(&self, other: &Self) -> i64 {
        self.sub(other).size()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum EquationFamily {
    /// Schroedinger dispersion: first order in time.
    Nls,
    /// Wave dispersion: second order in time, Laplacian spatial part.
    Nlw,
    /// Beam dispersion: second order in time, bi-Laplacian spatial part
    /// (supported in the completely resonant zero-mass form).
    Nlb,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// Fourier coefficient `a_{r,s,m}` of a nonlinearity monomial `u^r ubar^s`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonlinearityCoefficient {
    pub r: u32,
    pub s: u32,
    pub m: Vec<i64>,
    pub value: f64,
}

/// PDE family instance: dispersion parameters plus nonlinearity coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquationSpec {
    pub family: EquationFamily,
    pub dim: usize,
    /// Mass parameter; exact rational `(num, den)`. Zero mass selects the
    /// completely resonant variant (time rescaled so `omega_0 = 1`).
    pub mu_num: i64,
    pub mu_den: i64,
    pub boundary: Boundary,
    /// Leading nonlinearity has degree `N + 1`.
    pub degree_n: u32,
    pub coefficients: Vec<NonlinearityCoefficient>,
    /// Upper end of the epsilon window.
    pub eps_max: f64,
}

impl EquationSpec {
    /// Cubic gauge-invariant NLS (`f = |u|^2 u`) with Dirichlet conditions.
    pub fn nls_cubic(dim: usize, mu_num: i64, mu_den: i64, eps_max: f64) -> Self {
        Self {
            family: EquationFamily::Nls,
            dim,
            mu_num,
            mu_den,
            boundary: Boundary::Dirichlet,
            degree_n: 2,
            coefficients: vec![NonlinearityCoefficient {
                r: 2,
                s: 1,
                m: vec![0; dim],
                value: 1.0,
            }],
            eps_max,
        }
    }

    /// Cubic NLW (`f = v^3`) with Dirichlet conditions.
    pub fn nlw_cubic(dim: usize, mu_num: i64, mu_den: i64, eps_max: f64) -> Self {
        Self {
            family: EquationFamily::Nlw,
            dim,
            mu_num,
            mu_den,
            boundary: Boundary::Dirichlet,
            degree_n: 2,
            coefficients: vec![NonlinearityCoefficient {
                r: 3,
                s: 0,
                m: vec![0; dim],
                value: 1.0,
            }],
            eps_max,
        }
    }

    /// Completely resonant cubic NLS (zero mass, `omega_0 = 1`).
    pub fn nls_resonant(dim: usize, eps_max: f64) -> Self {
        Self::nls_cubic(dim, 0, 1, eps_max)
    }

    /// Completely resonant cubic NLB (zero mass, `omega_0 = 1`).
    pub fn nlb_resonant(dim: usize, eps_max: f64) -> Self {
        Self {
            family: EquationFamily::Nlb,
            dim,
            mu_num: 0,
            mu_den: 1,
            boundary: Boundary::Dirichlet,
            degree_n: 2,
            coefficients: vec![NonlinearityCoefficient {
                r: 3,
                s: 0,
                m: vec![0; dim],
                value: 1.0,
            }],
            eps_max,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu_num as f64 / self.mu_den as f64
    }

    pub fn mu_rational(&self) -> BigRational {
        BigRational::new(BigInt::from(self.mu_num), BigInt::from(self.mu_den))
    }

    pub fn is_resonant(&self) -> bool {
        self.mu_num == 0
    }

    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.dim == 0 {
            return Err(LatticeError::InvalidSpec("dimension must be >= 1".into()));
        }
        if self.mu_den <= 0 {
            return Err(LatticeError::InvalidSpec(
                "mass denominator must be positive".into(),
            ));
        }
        if self.mu_num < 0 {
            return Err(LatticeError::InvalidSpec("mass must be >= 0".into()));
        }
        if self.eps_max <= 0.0 {
            return Err(LatticeError::InvalidSpec(
                "epsilon window must be positive".into(),
            ));
        }
        if self.family == EquationFamily::Nlb && !self.is_resonant() {
            return Err(LatticeError::InvalidSpec(
                "NLB is supported in the resonant zero-mass form only".into(),
            ));
        }
        if self.degree_n < 1 {
            return Err(LatticeError::InvalidSpec("N must be >= 1".into()));
        }
        for c in &self.coefficients {
            if c.r + c.s < self.degree_n + 1 {
                return Err(LatticeError::InvalidSpec(format!(
                    "coefficient ({},{}) below leading degree {}",
                    c.r,
                    c.s,
                    self.degree_n + 1
                )));
            }
        }
        Ok(())
    }

    /// `omega_0` (NLS) or `omega_0^2` (NLW/NLB): `D + mu` off resonance,
    /// `1` in the zero-mass resonant case.
    pub fn omega0_sq_or_omega0(&self) -> f64 {
        if self.is_resonant() {
            1.0
        } else {
            self.dim as f64 + self.mu()
        }
    }

    /// Linear eigenvalue `delta_nu(eps)` of the diagonal operator.
    pub fn eigenvalue(&self, nu: &ModeVector, eps: f64) -> Result<f64, LatticeError> {
        if !(0.0..=self.eps_max).contains(&eps) {
            return Err(LatticeError::EpsilonOutsideWindow(eps, self.eps_max));
        }
        Ok(self.delta0(nu) + self.delta_slope(nu) * eps)
    }

    /// `delta_nu(0)`, exactly affine in eps for all three families.
    pub fn delta0(&self, nu: &ModeVector) -> f64 {
        let w0 = self.omega0_sq_or_omega0();
        let mu = self.mu();
        match self.family {
            EquationFamily::Nls => -w0 * nu.n as f64 + nu.m_norm_sq() as f64 + mu,
            EquationFamily::Nlw => {
                -w0 * (nu.n * nu.n) as f64 + nu.m_norm_sq() as f64 + mu
            }
            EquationFamily::Nlb => {
                let m2 = nu.m_norm_sq();
                -w0 * (nu.n * nu.n) as f64 + (m2 * m2) as f64
            }
        }
    }

    /// `d(delta_nu)/d(eps)`; the map `eps -> delta_nu(eps)` is affine.
    pub fn delta_slope(&self, nu: &ModeVector) -> f64 {
        match self.family {
            EquationFamily::Nls => nu.n as f64,
            EquationFamily::Nlw | EquationFamily::Nlb => (nu.n * nu.n) as f64,
        }
    }

    /// Exact rational `delta_nu(0)`; decides Q membership without tolerance.
    pub fn delta0_rational(&self, nu: &ModeVector) -> BigRational {
        let mu = self.mu_rational();
        let w0 = if self.is_resonant() {
            BigRational::from_integer(BigInt::from(1))
        } else {
            BigRational::from_integer(BigInt::from(self.dim as i64)) + mu.clone()
        };
        let m2 = BigRational::from_integer(BigInt::from(nu.m_norm_sq()));
        match self.family {
            EquationFamily::Nls => {
                -w0 * BigRational::from_integer(BigInt::from(nu.n)) + m2 + mu
            }
            EquationFamily::Nlw => {
                -w0 * BigRational::from_integer(BigInt::from(nu.n * nu.n)) + m2 + mu
            }
            EquationFamily::Nlb => {
                let m2i = BigInt::from(nu.m_norm_sq());
                -w0 * BigRational::from_integer(BigInt::from(nu.n * nu.n))
                    + BigRational::from_integer(&m2i * &m2i)
            }
        }
    }

    /// Exact Q membership: `delta_nu(0) = 0` in exact arithmetic. With the
    /// rational mass `p/q`, `q * delta_nu(0)` is an integer-valued form that
    /// fits machine words on any desk-scale shell.
    pub fn in_q(&self, nu: &ModeVector) -> bool {
        let p = self.mu_num as i128;
        let q = self.mu_den as i128;
        let n = nu.n as i128;
        let m2 = nu.m_norm_sq() as i128;
        let w0q = if self.is_resonant() {
            q
        } else {
            self.dim as i128 * q + p
        };
        let scaled = match self.family {
            EquationFamily::Nls => -w0q * n + q * m2 + p,
            EquationFamily::Nlw => -w0q * n * n + q * m2 + p,
            EquationFamily::Nlb => -w0q * n * n + q * m2 * m2,
        };
        scaled == 0
    }

    /// The Q set the family is expected to produce: the bifurcating orbit for
    /// the massive equations, the resonant paraboloid for zero mass. Used by
    /// the hypothesis validator to flag accidental extra degeneracies.
    pub fn expected_q(&self, nu: &ModeVector) -> bool {
        match (self.family, self.is_resonant()) {
            (EquationFamily::Nls, false) => {
                nu.n == 1 && nu.m.iter().all(|&x| x.abs() == 1)
            }
            (EquationFamily::Nlw, false) => {
                nu.n.abs() == 1 && nu.m.iter().all(|&x| x.abs() == 1)
            }
            (EquationFamily::Nls, true) => nu.n == nu.m_norm_sq(),
            (EquationFamily::Nlw, true) | (EquationFamily::Nlb, true) => {
                nu.n.abs() == nu.m_norm_sq()
            }
            (EquationFamily::Nlb, false) => false,
        }
    }

    /// Minimum of `|delta_nu|` over the window, exact for the affine map.
    pub fn min_abs_delta(&self, nu: &ModeVector) -> f64 {
        let d0 = self.delta0(nu);
        let d1 = self.delta0(nu) + self.delta_slope(nu) * self.eps_max;
        if d0.signum() != d1.signum() {
            0.0
        } else {
            d0.abs().min(d1.abs())
        }
    }
}

/// Mode class: Q (degenerate at eps=0), O (near-resonant somewhere in the
/// window), or R (uniformly nonresonant).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SetLabel {
    Q,
    O,
    R,
}

/// Grid-based classification, cross-checked against the affine closed form.
/// Flags `boundary-ambiguous` when the grid cannot resolve the 1/2 threshold.
pub fn classify(
    spec: &EquationSpec,
    nu: &ModeVector,
    eps_grid: &[f64],
    resolution_tol: f64,
) -> Result<SetLabel, LatticeError> {
    if spec.in_q(nu) {
        return Ok(SetLabel::Q);
    }
    let mut min_gap = f64::INFINITY;
    for &eps in eps_grid {
        let d = spec.eigenvalue(nu, eps)?;
        min_gap = min_gap.min((d.abs() - 0.5).abs());
    }
    if min_gap < resolution_tol {
        return Err(LatticeError::BoundaryAmbiguous(nu.clone(), min_gap));
    }
    // The affine form resolves sign changes between grid points.
    Ok(if spec.min_abs_delta(nu) < 0.5 {
        SetLabel::O
    } else {
        SetLabel::R
    })
}

/// Classification without a grid, from the exact affine eigenvalue map.
pub fn classify_exact(spec: &EquationSpec, nu: &ModeVector) -> SetLabel {
    if spec.in_q(nu) {
        SetLabel::Q
    } else if spec.min_abs_delta(nu) < 0.5 {
        SetLabel::O
    } else {
        SetLabel::R
    }
}

/// All canonical modes with `|nu| <= radius`, in lexicographic order
/// (n first, then m components). Dirichlet keeps `m` in the nonnegative
/// fundamental domain. The origin is included; callers that work on
/// `Z^{D+1}_*` drop it explicitly.
pub fn enumerate_shell(spec: &EquationSpec, radius: i64) -> Vec<ModeVector> {
    let mut out = vec![];
    let dim = spec.dim;
    let mut m = vec![0i64; dim];
    for n in -radius..=radius {
        let rem = radius - n.abs();
        fill_m(spec.boundary, &mut m, 0, rem, n, &mut out);
    }
    out.sort();
    out
}

fn fill_m(
    boundary: Boundary,
    m: &mut Vec<i64>,
    idx: usize,
    budget: i64,
    n: i64,
    out: &mut Vec<ModeVector>,
) {
    if idx == m.len() {
        out.push(ModeVector::new(n, m.clone()));
        return;
    }
    let lo = match boundary {
        Boundary::Dirichlet => 0,
        Boundary::Periodic => -budget,
    };
    for v in lo..=budget {
        m[idx] = v;
        fill_m(boundary, m, idx + 1, budget - v.abs(), n, out);
        m[idx] = 0;
    }
}

/// Report from the linear-part hypothesis validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hypothesis1Report {
    /// Fitted `(gamma0, tau0)` with `|delta_nu(0)| >= gamma0 |nu|^{-tau0}`
    /// over all non-Q modes in the shell.
    pub gamma0: f64,
    pub tau0: f64,
    /// Fitted constants for the eps-derivative bounds: `|d delta/d eps| <=
    /// c2 |nu|^{c0}` everywhere and `>= c1 |nu|^{c0}` on near-resonant modes.
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Fitted constant for the discrete mixed-derivative bound.
    pub c3: f64,
    /// Pairs checked for the size-vs-distance condition (item 5).
    pub pairs_checked: usize,
    pub violations: Vec<String>,
}

impl Hypothesis1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Validates the linear-part conditions on a shell: Diophantine-type lower
/// bound at eps=0 away from Q, derivative bounds, the pairwise
/// `|nu1 - nu2| <= |nu1 + nu2|` condition on jointly near-resonant modes,
/// and agreement of the exact Q set with the family's expected one.
pub fn validate_hypothesis1(
    spec: &EquationSpec,
    radius: i64,
    eps_grid: &[f64],
) -> Result<Hypothesis1Report, LatticeError> {
    spec.validate()?;
    let shell: Vec<ModeVector> = enumerate_shell(spec, radius)
        .into_iter()
        .filter(|nu| !nu.is_zero())
        .collect();
    let mut violations = vec![];

    // Exact-zero eigenvalues must coincide with the expected Q set.
    for nu in &shell {
        let exact_q = spec.in_q(nu);
        let expected = spec.expected_q(nu);
        if exact_q != expected {
            violations.push(format!(
                "hypothesis-violated: mode {} has delta(0)=0 {} expected Q membership {}",
                nu,
                if exact_q { "but was not in" } else { "missing from" },
                expected
            ));
        }
    }

    // Item 2 fit: gamma0 for a small grid of tau0 candidates; keep the
    // smallest tau0 whose gamma0 stays above the float tolerance.
    let mut gamma0 = 0.0;
    let mut tau0 = 0.0;
    for tau_candidate in [0.0, 0.5, 1.0, 2.0, 3.0] {
        let mut g: f64 = f64::INFINITY;
        for nu in &shell {
            if spec.in_q(nu) {
                continue;
            }
            let lower = spec.delta0(nu).abs() * (nu.size() as f64).powf(tau_candidate);
            g = g.min(lower);
        }
        if g > 1e-12 {
            gamma0 = g;
            tau0 = tau_candidate;
            break;
        }
    }
    if gamma0 == 0.0 {
        violations.push("hypothesis-violated: no positive gamma0 fits the shell".into());
    }

    // Items 3-4: slopes are exact; fit c0 from the family, then c1, c2, c3.
    let c0 = match spec.family {
        EquationFamily::Nls => 1.0,
        EquationFamily::Nlw | EquationFamily::Nlb => 2.0,
    };
    let mut c2: f64 = 0.0;
    let mut c1 = f64::INFINITY;
    let mut c3: f64 = 0.0;
    for nu in &shell {
        let slope = spec.delta_slope(nu).abs();
        let size = nu.size() as f64;
        c2 = c2.max(slope / size.powf(c0));
        let near = eps_grid
            .iter()
            .any(|&e| spec.eigenvalue(nu, e).map(|d| d.abs() < 0.5).unwrap_or(false));
        if near {
            if slope == 0.0 {
                violations.push(format!(
                    "hypothesis-violated: near-resonant mode {} has zero eps-slope",
                    nu
                ));
            } else {
                c1 = c1.min(slope / size.powf(c0));
            }
        }
        // Discrete mixed derivative: difference of slopes across unit steps.
        for i in 0..nu.dim() {
            for delta in [-1i64, 1] {
                let mut m = nu.m.clone();
                m[i] += delta;
                let neighbor = ModeVector::new(nu.n, m);
                let diff = (spec.delta_slope(&neighbor) - spec.delta_slope(nu)).abs();
                if diff > 0.0 {
                    c3 = c3.max(diff / size.powf(c0 - 1.0));
                }
            }
        }
        for delta in [-1i64, 1] {
            let neighbor = ModeVector::new(nu.n + delta, nu.m.clone());
            let diff = (spec.delta_slope(&neighbor) - spec.delta_slope(nu)).abs();
            if diff > 0.0 {
                c3 = c3.max(diff / size.powf(c0 - 1.0));
            }
        }
    }
    if !c1.is_finite() {
        c1 = 0.0; // no near-resonant modes in the shell
    }

    // Item 5: pair scan over modes jointly near-resonant at a common grid eps.
    let mut pairs_checked = 0usize;
    let mut near_sets: BTreeMap<usize, Vec<&ModeVector>> = BTreeMap::new();
    for (gi, &eps) in eps_grid.iter().enumerate() {
        let near: Vec<&ModeVector> = shell
            .iter()
            .filter(|nu| {
                spec.eigenvalue(nu, eps)
                    .map(|d| d.abs() < 0.5)
                    .unwrap_or(false)
            })
            .collect();
        if !near.is_empty() {
            near_sets.insert(gi, near);
        }
    }
    for near in near_sets.values() {
        for (i, nu1) in near.iter().enumerate() {
            for nu2 in near.iter().skip(i) {
                pairs_checked += 1;
                let diff = nu1.sub(nu2).size();
                let sum = nu1.add(nu2).size();
                if diff > sum {
                    violations.push(format!(
                        "hypothesis-violated: pair {} {} has |nu1-nu2| = {} > |nu1+nu2| = {}",
                        nu1, nu2, diff, sum
                    ));
                }
            }
        }
    }

    Ok(Hypothesis1Report {
        gamma0,
        tau0,
        c0,
        c1,
        c2,
        c3,
        pairs_checked,
        violations,
    })
}

/// Rational mass from a continued-fraction expansion `[0; a_1, a_2, ...]`
/// with bounded partial quotients. Large denominators push accidental
/// rational resonances of `delta_nu(0)` far outside any desk-scale shell.
pub fn mu_from_continued_fraction(quotients: &[u64]) -> (i64, i64) {
    let (mut num, mut den) = (1i64, 0i64);
    for &a in quotients.iter().rev() {
        let next_num = a as i64 * num + den;
        den = num;
        num = next_num;
    }
    // value of [0; a1, a2, ...] = den/num
    (den, num)
}

/// Expands a canonical Dirichlet field entry to its full sign-flip orbit with
/// the odd-extension signs, calling `visit(nu, sign)` once per orbit point.
/// Components equal to zero generate no distinct flips (such modes carry
/// zero amplitude under the odd symmetry).
pub fn odd_orbit(nu: &ModeVector, mut visit: impl FnMut(ModeVector, i64)) {
    let nonzero: Vec<usize> = (0..nu.dim()).filter(|&i| nu.m[i] != 0).collect();
    if nonzero.len() < nu.dim() {
        return; // zero amplitude: S_i fixes nu and forces u = -u
    }
    for mask in 0..1usize << nonzero.len() {
        let mut out = nu.clone();
        let mut sign = 1i64;
        for (bit, &i) in nonzero.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                out.m[i] = -out.m[i];
                sign = -sign;
            }
        }
        visit(out, sign);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nls_d2() -> EquationSpec {
        EquationSpec::nls_cubic(2, 3, 10, 0.1)
    }

    #[test]
    fn eigenvalue_on_bifurcating_mode() {
        let spec = nls_d2();
        let nu = ModeVector::new(1, vec![1, 1]);
        assert!(spec.in_q(&nu));
        assert!(spec.eigenvalue(&nu, 0.0).unwrap().abs() < 1e-14);
        assert!((spec.eigenvalue(&nu, 0.01).unwrap() - 0.01).abs() < 1e-14);
    }

    #[test]
    fn eigenvalue_resonant_beam() {
        let spec = EquationSpec::nlb_resonant(2, 0.1);
        // n = |m|^2 = 2 at m = (1,1): delta = -(1-eps)*4 + 4 = 4 eps
        let nu = ModeVector::new(2, vec![1, 1]);
        let eps = 0.02;
        assert!((spec.eigenvalue(&nu, eps).unwrap() - 4.0 * eps).abs() < 1e-14);
    }

    #[test]
    fn eigenvalue_rejects_outside_window() {
        let spec = nls_d2();
        let nu = ModeVector::new(1, vec![1, 1]);
        assert!(matches!(
            spec.eigenvalue(&nu, 0.5),
            Err(LatticeError::EpsilonOutsideWindow(_, _))
        ));
    }

    fn grid(spec: &EquationSpec, points: usize) -> Vec<f64> {
        (0..=points)
            .map(|i| spec.eps_max * i as f64 / points as f64)
            .collect()
    }

    #[test]
    fn classify_examples() {
        let spec = nls_d2();
        let g = grid(&spec, 100);
        assert_eq!(
            classify(&spec, &ModeVector::new(1, vec![1, 1]), &g, 1e-9).unwrap(),
            SetLabel::Q
        );
        // delta = 1.3 for all eps
        assert_eq!(
            classify(&spec, &ModeVector::new(0, vec![1, 0]), &g, 1e-9).unwrap(),
            SetLabel::R
        );
        // nu = (2,(1,2)): delta = 0.7 + 2 eps >= 1/2
        assert_eq!(
            classify(&spec, &ModeVector::new(2, vec![1, 2]), &g, 1e-9).unwrap(),
            SetLabel::R
        );
        // nu = (2,(2,0)): delta = -0.3 + 2 eps, inside (-1/2,1/2)
        assert_eq!(
            classify(&spec, &ModeVector::new(2, vec![2, 0]), &g, 1e-9).unwrap(),
            SetLabel::O
        );
    }

    #[test]
    fn classify_stable_under_grid_refinement() {
        let spec = nls_d2();
        let coarse = grid(&spec, 50);
        let fine = grid(&spec, 1000);
        for nu in enumerate_shell(&spec, 8) {
            if nu.is_zero() {
                continue;
            }
            let a = classify(&spec, &nu, &coarse, 1e-9);
            let b = classify(&spec, &nu, &fine, 1e-9);
            match (a, b) {
                (Ok(x), Ok(y)) => assert_eq!(x, y, "mode {nu}"),
                _ => {} // ambiguous on one grid: no stability claim
            }
        }
    }

    #[test]
    fn shell_counts() {
        let d1 = EquationSpec {
            boundary: Boundary::Periodic,
            ..EquationSpec::nls_cubic(1, 3, 10, 0.1)
        };
        let shell = enumerate_shell(&d1, 1);
        assert_eq!(shell.len(), 5); // (0,0), (±1,0), (0,±1)

        let d1d = EquationSpec::nls_cubic(1, 3, 10, 0.1);
        let shell = enumerate_shell(&d1d, 1);
        assert_eq!(shell.len(), 4); // (0,0), (±1,0), (0,1)

        let d2 = EquationSpec {
            boundary: Boundary::Periodic,
            ..EquationSpec::nls_cubic(2, 3, 10, 0.1)
        };
        assert_eq!(enumerate_shell(&d2, 2).len(), 25);
    }

    #[test]
    fn shell_deterministic_lexicographic() {
        let spec = nls_d2();
        let shell = enumerate_shell(&spec, 3);
        let mut sorted = shell.clone();
        sorted.sort();
        assert_eq!(shell, sorted);
        let again = enumerate_shell(&spec, 3);
        assert_eq!(shell, again);
    }

    #[test]
    fn resonant_q_set_is_paraboloid() {
        let spec = EquationSpec::nls_resonant(2, 0.01);
        for nu in enumerate_shell(&spec, 12) {
            let on_paraboloid = nu.n == nu.m_norm_sq();
            assert_eq!(spec.in_q(&nu), on_paraboloid, "mode {nu}");
        }
    }

    #[test]
    fn hypothesis1_passes_for_generic_mass() {
        // Golden-mean-based mass: convergent of [0; 1, 1, 1, ...].
        let (num, den) = mu_from_continued_fraction(&[1; 18]);
        let spec = EquationSpec::nls_cubic(2, num, den, 0.1);
        let g = grid(&spec, 64);
        let report = validate_hypothesis1(&spec, 20, &g).unwrap();
        assert!(report.passed(), "violations: {:?}", report.violations);
        assert!(report.gamma0 > 0.0);
        // NLS: slope is n, so c0 = c2 = 1 and c1 <= 1.
        assert_eq!(report.c0, 1.0);
        assert!((report.c2 - 1.0).abs() < 1e-12);
        assert!(report.c1 <= 1.0 + 1e-12 && report.c1 > 0.0);
        assert!(report.pairs_checked > 0);
    }

    #[test]
    fn hypothesis1_flags_constructed_resonance() {
        // mu = 1: delta(0) = -(D+1) n + |m|^2 + 1 vanishes at (1,(2,0)).
        let spec = EquationSpec::nls_cubic(2, 1, 1, 0.01);
        let g = grid(&spec, 16);
        let report = validate_hypothesis1(&spec, 6, &g).unwrap();
        assert!(!report.passed());
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("hypothesis-violated")));
    }

    #[test]
    fn odd_orbit_roundtrip() {
        // Expanding and re-canonicalizing is the identity.
        let nu = ModeVector::new(3, vec![1, 2]);
        let mut seen = vec![];
        odd_orbit(&nu, |point, sign| {
            let (canon, csign) = point.canonical();
            assert_eq!(canon, nu);
            assert_eq!(csign, sign);
            seen.push(point);
        });
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn odd_orbit_zero_component_vanishes() {
        let nu = ModeVector::new(1, vec![1, 0]);
        let mut count = 0;
        odd_orbit(&nu, |_, _| count += 1);
        assert_eq!(count, 0);
    }

    #[test]
    fn affine_slope_matches_finite_difference() {
        let spec = nls_d2();
        for nu in enumerate_shell(&spec, 6) {
            let d0 = spec.eigenvalue(&nu, 0.0).unwrap();
            let d1 = spec.eigenvalue(&nu, 0.05).unwrap();
            let slope = (d1 - d0) / 0.05;
            assert!((slope - spec.delta_slope(&nu)).abs() < 1e-9, "mode {nu}");
        }
    }
}

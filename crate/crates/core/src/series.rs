//! Order-by-order construction of the periodic solution: sparse lattice
//! convolution of the nonlinearity, the recursive equations with counterterm
//! matrices, a damped-Newton oracle on the truncated system, residual and
//! decay diagnostics, and the empirical measure scan over the parameter
//! window.
//!
//! Field coefficients are stored in a rotated gauge chosen so the sine-basis
//! amplitudes of the supported families are real: `stored = i^D * u^+` for
//! the massive equations and the beam, and `stored = u^+` for the
//! gauge-invariant resonant case (any constant phase is a solution there).
//! In this gauge every supported nonlinearity acts with a real sign factor
//! and the doubled `sigma = -` layer is the entrywise conjugate.

use crate::bifurcation::{self, ResonantFamily};
use crate::clusters::ClusterError;
use crate::lattice::{
    enumerate_shell, odd_orbit, EquationFamily, EquationSpec, LatticeError, ModeVector,
};
use crate::multiscale::{
    admissible, build_blocks, BlockSystem, Counterterm, MultiscaleError, MultiscaleParams,
    ScaleFunctions, Sign,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("order-not-ready: order {0} requested with {1} computed")]
    OrderNotReady(u32, usize),
    #[error("block-singular at mode {0} with nonzero right-hand side")]
    BlockSingular(ModeVector),
    #[error("newton-diverged after {0} step rejections")]
    NewtonDiverged(u32),
    #[error("epsilon {0} excluded: {1}")]
    Excluded(f64, String),
    #[error("no-contraction: measured update ratio {0} exceeds 1/2")]
    NoContraction(f64),
    #[error(
        "nonlinearity coefficient ({r},{s}) does not preserve the real sector in dimension {dim}"
    )]
    SectorNotClosed { r: u32, s: u32, dim: usize },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Multiscale(#[from] MultiscaleError),
    #[error("bifurcation profile error: {0}")]
    Bifurcation(String),
}

/// Sparse Fourier field on the truncated lattice. Only the `sigma = +` layer
/// is stored; the `sigma = -` layer is its entrywise conjugate (the reality
/// pairing of the doubled equations).
#[derive(Clone, Debug, Default)]
pub struct FourierField {
    entries: BTreeMap<ModeVector, Complex64>,
    pub truncation: i64,
}

impl FourierField {
    pub fn new(truncation: i64) -> Self {
        Self {
            entries: BTreeMap::new(),
            truncation,
        }
    }

    pub fn get(&self, nu: &ModeVector, sign: Sign) -> Complex64 {
        let plus = self.entries.get(nu).copied().unwrap_or_default();
        match sign {
            Sign::Plus => plus,
            Sign::Minus => plus.conj(),
        }
    }

    pub fn set(&mut self, nu: ModeVector, value: Complex64) {
        if value.norm() == 0.0 {
            self.entries.remove(&nu);
        } else {
            debug_assert!(nu.size() <= self.truncation);
            self.entries.insert(nu, value);
        }
    }

    pub fn add_to(&mut self, nu: ModeVector, value: Complex64) {
        let cur = self.entries.get(&nu).copied().unwrap_or_default();
        self.set(nu, cur + value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModeVector, &Complex64)> {
        self.entries.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn sup_norm(&self) -> f64 {
        self.entries.values().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        let mut keys: std::collections::BTreeSet<&ModeVector> = self.entries.keys().collect();
        keys.extend(other.entries.keys());
        keys.into_iter()
            .map(|k| (self.get(k, Sign::Plus) - other.get(k, Sign::Plus)).norm())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        let mut out = self.clone();
        for v in out.entries.values_mut() {
            *v *= factor;
        }
        out
    }

    pub fn add_field(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (nu, v) in other.iter() {
            out.add_to(nu.clone(), *v);
        }
        out
    }

    /// Largest violation of the Dirichlet odd symmetry on the stored layer.
    pub fn dirichlet_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (nu, v) in &self.entries {
            for i in 0..nu.dim() {
                if nu.m[i] == 0 {
                    worst = worst.max(v.norm());
                    continue;
                }
                let flipped = nu.flip(i);
                let w = self.entries.get(&flipped).copied().unwrap_or_default();
                worst = worst.max((w + v).norm());
            }
        }
        worst
    }

    /// Largest violation of the real-coefficient sector.
    pub fn imag_defect(&self) -> f64 {
        self.entries
            .values()
            .map(|v| v.im.abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation of the case-II constraint `u^-_nu = u^+_{-nu}`
    /// in the stored gauge: `conj(s_nu) = (-1)^D s_{-nu}`.
    pub fn case_two_defect(&self, dim: usize) -> f64 {
        let sign = if dim % 2 == 1 { -1.0 } else { 1.0 };
        let mut worst = 0.0f64;
        for (nu, v) in &self.entries {
            let neg = nu.negate();
            let w = self.entries.get(&neg).copied().unwrap_or_default();
            worst = worst.max((v.conj() - w * sign).norm());
        }
        worst
    }
}

/// Real sign factor of a nonlinearity coefficient in the rotated gauge.
fn sector_phase(r: u32, s: u32, dim: usize) -> Result<f64, SeriesError> {
    // i^{(s - r + 1) D} must be real
    let e = ((s as i64 - r as i64 + 1) * dim as i64).rem_euclid(4);
    match e {
        0 => Ok(1.0),
        2 => Ok(-1.0),
        _ => Err(SeriesError::SectorNotClosed { r, s, dim }),
    }
}

/// Pairwise convolution `(a * b)_nu = sum a_{nu1} b_{nu - nu1}` with an l1
/// pruning bound on intermediate supports.
fn convolve_pair(a: &FourierField, b: &FourierField, bound: i64) -> FourierField {
    let mut out = FourierField::new(bound);
    for (nu1, v1) in a.iter() {
        for (nu2, v2) in b.iter() {
            let nu = nu1.add(nu2);
            if nu.size() <= bound {
                out.add_to(nu, v1 * v2);
            }
        }
    }
    out
}

/// The field `nu -> conj(s_{-nu})`: the minus layer entering the convolution
/// with negated momentum.
fn conjugate_reflect(a: &FourierField) -> FourierField {
    let mut out = FourierField::new(a.truncation);
    for (nu, v) in a.iter() {
        out.set(nu.negate(), v.conj());
    }
    out
}

fn unit_field(dim: usize, truncation: i64) -> FourierField {
    let mut unit = FourierField::new(truncation);
    unit.set(ModeVector::zero(dim), Complex64::new(1.0, 0.0));
    unit
}

/// Order-`k` coefficient of the nonlinearity in the rotated gauge:
/// distributes the order over the slots of every coefficient monomial and
/// convolves the corresponding layers. `layers[j]` must hold the order-`j`
/// field for every `j < layers.len()`.
pub fn convolve_nonlinearity(
    spec: &EquationSpec,
    layers: &[FourierField],
    k: u32,
    truncation: i64,
) -> Result<FourierField, SeriesError> {
    let n = spec.degree_n;
    let mut out = FourierField::new(truncation);
    for coeff in &spec.coefficients {
        let p = coeff.r + coeff.s;
        let eta_shift = p - n - 1;
        if eta_shift > k {
            continue;
        }
        let distribute = k - eta_shift;
        let phase = sector_phase(coeff.r, coeff.s, spec.dim)? * coeff.value;
        let mut parts = vec![0u32; p as usize];
        compose(&mut parts, 0, distribute, n, &mut |orders: &[u32]| {
            for &o in orders {
                if o as usize >= layers.len() {
                    return Err(SeriesError::OrderNotReady(o, layers.len()));
                }
            }
            let shift = ModeVector::new(0, coeff.m.clone());
            let slack: i64 = coeff.m.iter().map(|x| x.abs()).sum();
            let mut acc: Option<FourierField> = None;
            let mut remaining = p;
            for (slot, &o) in orders.iter().enumerate() {
                let minus_slot = slot as u32 >= coeff.r;
                let layer = &layers[o as usize];
                let factor = if minus_slot {
                    conjugate_reflect(layer)
                } else {
                    layer.clone()
                };
                remaining -= 1;
                let bound = truncation * (1 + remaining as i64) + slack;
                acc = Some(match acc {
                    None => factor,
                    Some(prev) => convolve_pair(&prev, &factor, bound),
                });
            }
            if let Some(mut res) = acc {
                for (nu, v) in std::mem::take(&mut res.entries) {
                    let target = nu.add(&shift);
                    if target.size() <= truncation {
                        out.add_to(target, v * phase);
                    }
                }
            }
            Ok(())
        })?;
    }
    Ok(out)
}

/// Enumerates compositions of `total` into `parts.len()` slots, each either
/// zero or at least `n`.
fn compose<F: FnMut(&[u32]) -> Result<(), SeriesError>>(
    parts: &mut Vec<u32>,
    idx: usize,
    total: u32,
    n: u32,
    f: &mut F,
) -> Result<(), SeriesError> {
    if idx == parts.len() {
        if total == 0 {
            f(parts)?;
        }
        return Ok(());
    }
    parts[idx] = 0;
    compose(parts, idx + 1, total, n, f)?;
    let mut o = n;
    while o <= total {
        parts[idx] = o;
        compose(parts, idx + 1, total - o, n, f)?;
        o += 1;
    }
    parts[idx] = 0;
    Ok(())
}

/// The reduced degenerate-mode system: canonical representatives, the seed
/// amplitudes, eigenvalue weights, and the exact inverse Jacobian mirrored
/// to floating point.
#[derive(Clone, Debug)]
pub struct QBasis {
    /// Canonical Q modes inside the shell (one per symmetry orbit).
    pub modes: Vec<ModeVector>,
    /// Seed amplitudes in the stored gauge (real).
    pub q0: Vec<f64>,
    /// `lambda_nu = eps^{-1} delta_nu(eps)`, constant in eps per family.
    pub lambda: Vec<f64>,
    /// Inverse of the full reduced Jacobian at the seed.
    pub j_inv: DMatrix<f64>,
    /// Whether the family doubles time frequencies (`n = +-`) per mode.
    pub time_even: bool,
}

impl QBasis {
    /// Expands canonical coordinates to a full lattice field.
    pub fn expand(&self, coords: &[Complex64], truncation: i64) -> FourierField {
        let mut field = FourierField::new(truncation);
        for (i, nu) in self.modes.iter().enumerate() {
            let v = coords[i];
            if v.norm() == 0.0 {
                continue;
            }
            let reps: Vec<ModeVector> = if self.time_even && nu.n != 0 {
                vec![nu.clone(), ModeVector::new(-nu.n, nu.m.clone())]
            } else {
                vec![nu.clone()]
            };
            for rep in reps {
                odd_orbit(&rep, |point, sign| {
                    if point.size() <= truncation {
                        field.add_to(point, v * sign as f64);
                    }
                });
            }
        }
        field
    }

    /// Reads the canonical coordinates off a full field.
    pub fn restrict(&self, field: &FourierField) -> Vec<Complex64> {
        self.modes
            .iter()
            .map(|nu| field.get(nu, Sign::Plus))
            .collect()
    }

    pub fn seed_field(&self, truncation: i64) -> FourierField {
        let coords: Vec<Complex64> = self.q0.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.expand(&coords, truncation)
    }
}

/// Builds the reduced degenerate-mode system for the supported families.
pub fn build_q_basis(spec: &EquationSpec, truncation: i64) -> Result<QBasis, SeriesError> {
    if !spec.is_resonant() {
        // single bifurcating orbit (1, (1,...,1)); reduced Jacobian -2 lambda
        let nu0 = ModeVector::new(1, vec![1; spec.dim]);
        let q0 = bifurcation::single_mode_q0_squared_oracle(spec.family, spec.dim)
            .map_err(|e| SeriesError::Bifurcation(e.to_string()))?;
        let q0 = (q0.numer().to_f64().unwrap() / q0.denom().to_f64().unwrap()).sqrt();
        let (weight, time_even) = match spec.family {
            EquationFamily::Nls => (2f64.powi(-(spec.dim as i32)), false),
            EquationFamily::Nlw => (2f64.powi(-(spec.dim as i32 + 1)), true),
            EquationFamily::Nlb => {
                return Err(SeriesError::Bifurcation(
                    "massive beam is not supported".into(),
                ))
            }
        };
        let lambda = 1.0;
        let mut j_inv = DMatrix::<f64>::zeros(1, 1);
        j_inv[(0, 0)] = 1.0 / (-2.0 * lambda);
        return Ok(QBasis {
            modes: vec![nu0],
            q0: vec![q0 * weight],
            lambda: vec![lambda],
            j_inv,
            time_even,
        });
    }
    // completely resonant: degenerate modes on the paraboloid inside the
    // shell, restricted to the invariant odd/even sector with all components
    // nonzero (others carry no amplitude and decouple diagonally)
    let family = match spec.family {
        EquationFamily::Nls => ResonantFamily::Nls,
        EquationFamily::Nlw | EquationFamily::Nlb => ResonantFamily::Nlb,
    };
    let time_even = spec.family != EquationFamily::Nls;
    let mut space_modes: Vec<Vec<i64>> = vec![];
    for nu in enumerate_shell(spec, truncation) {
        if !spec.in_q(&nu) || nu.n <= 0 {
            continue;
        }
        if !bifurcation::in_z1(&nu.m) || nu.m.iter().any(|&x| x <= 0) {
            continue;
        }
        space_modes.push(nu.m.clone());
    }
    space_modes.sort();
    space_modes.dedup();
    let search_radius = space_modes
        .iter()
        .map(|m| bifurcation::l1(m))
        .max()
        .unwrap_or(1);
    let hits = bifurcation::search_supports(family, spec.dim, search_radius, 2);
    let (profile, _) = hits
        .into_iter()
        .filter(|(p, _)| p.support.iter().all(|m| space_modes.contains(m)))
        .max_by_key(|(p, _)| p.support.len())
        .ok_or_else(|| {
            SeriesError::Bifurcation(format!(
                "no residual-zero support inside radius {search_radius}"
            ))
        })?;
    let assembly = bifurcation::assemble_j(&profile, search_radius)
        .map_err(|e| SeriesError::Bifurcation(e.to_string()))?;
    let full = assembly.full_jacobian();
    let n = space_modes.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for (i, mi) in space_modes.iter().enumerate() {
        let ai = assembly
            .index
            .iter()
            .position(|m| m == mi)
            .expect("Q mode inside Jacobian index");
        for (jj, mj) in space_modes.iter().enumerate() {
            let aj = assembly.index.iter().position(|m| m == mj).unwrap();
            j[(i, jj)] = full.get(ai, aj).to_f64();
        }
    }
    let j_inv = j
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| SeriesError::Bifurcation("reduced Jacobian is singular".into()))?;
    let modes: Vec<ModeVector> = space_modes
        .iter()
        .map(|m| {
            let n = m.iter().map(|x| x * x).sum::<i64>();
            ModeVector::new(n, m.clone())
        })
        .collect();
    let lambda: Vec<f64> = modes
        .iter()
        .map(|nu| match family {
            ResonantFamily::Nls => nu.m_norm_sq() as f64,
            ResonantFamily::Nlb => (nu.m_norm_sq() * nu.m_norm_sq()) as f64,
        })
        .collect();
    let q0: Vec<f64> = space_modes
        .iter()
        .map(|m| {
            profile
                .support
                .iter()
                .position(|s| s == m)
                .map(|i| profile.amplitudes[i].to_f64())
                .unwrap_or(0.0)
        })
        .collect();
    // time doubling splits the seed between n = +-|m|^2
    let q0 = if time_even {
        q0.into_iter().map(|x| x / 2.0).collect()
    } else {
        q0
    };
    Ok(QBasis {
        modes,
        q0,
        lambda,
        j_inv,
        time_even,
    })
}

/// Solver configuration: truncation, orders, and multiscale constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub truncation: i64,
    pub k_max: u32,
    pub ms: MultiscaleParams,
    pub beta: f64,
    pub c2: f64,
    pub newton_tol: f64,
    pub newton_max_iters: u32,
    pub newton_max_rejects: u32,
}

impl SolverConfig {
    pub fn with_defaults(spec: &EquationSpec) -> Self {
        Self {
            truncation: 16,
            k_max: spec.degree_n + 6,
            ms: MultiscaleParams::default(),
            beta: 0.25,
            c2: 1.0,
            newton_tol: 1e-10,
            newton_max_iters: 60,
            newton_max_rejects: 40,
        }
    }
}

/// Series state: computed orders, counterterm matrices, and the block system
/// of the renormalized linear operator at `(eps, M)`.
pub struct SeriesState {
    pub spec: EquationSpec,
    pub cfg: SolverConfig,
    pub eps: f64,
    pub qbasis: QBasis,
    pub blocks: BlockSystem,
    pub m: Counterterm,
    /// `orders[k]` is the order-k field; gaps below `N` stay empty.
    pub orders: Vec<FourierField>,
    /// Counterterm matrices per order, in the stored gauge.
    pub l_matrices: BTreeMap<u32, Counterterm>,
}

impl SeriesState {
    pub fn new(
        spec: &EquationSpec,
        cfg: &SolverConfig,
        eps: f64,
        m: Counterterm,
    ) -> Result<Self, SeriesError> {
        let qbasis = build_q_basis(spec, cfg.truncation)?;
        let blocks = build_blocks(spec, &m, eps, cfg.truncation, cfg.beta, cfg.c2, cfg.ms)?;
        let seed = qbasis.seed_field(cfg.truncation);
        Ok(Self {
            spec: spec.clone(),
            cfg: cfg.clone(),
            eps,
            qbasis,
            blocks,
            m,
            orders: vec![seed],
            l_matrices: BTreeMap::new(),
        })
    }

    pub fn order(&self, k: u32) -> Option<&FourierField> {
        self.orders.get(k as usize)
    }

    /// Applies `sum_r L^{(r)} U^{(k-r)}` on the stored layer.
    fn counterterm_sum(&self, k: u32) -> FourierField {
        let n = self.spec.degree_n;
        let mut out = FourierField::new(self.cfg.truncation);
        for (&r, l) in &self.l_matrices {
            if r < n || r + n > k {
                continue;
            }
            let u = &self.orders[(k - r) as usize];
            for ((nu, s, nup, sp), value) in l.entries() {
                if *s != Sign::Plus {
                    continue; // stored layer is the + row
                }
                let amp = u.get(nup, *sp);
                if amp.norm() > 0.0 {
                    out.add_to(nu.clone(), value * amp);
                }
            }
        }
        out
    }

    /// Advances the series by one order, filling `orders[k]`. P rows are
    /// solved through the block system (direct dense inverse) or through the
    /// multiscale propagator sum; Q rows through the exact reduced Jacobian.
    pub fn recursion_step(&mut self, k: u32, via_propagators: bool) -> Result<(), SeriesError> {
        let n = self.spec.degree_n;
        assert!(k >= n, "orders below N are identically zero");
        while self.orders.len() < k as usize {
            self.orders.push(FourierField::new(self.cfg.truncation));
        }
        let f_low = convolve_nonlinearity(&self.spec, &self.orders, k - n, self.cfg.truncation)?;
        let rhs = f_low.add_field(&self.counterterm_sum(k));
        let mut u_k = FourierField::new(self.cfg.truncation);
        let chi = ScaleFunctions::new(self.cfg.ms.gamma, self.cfg.ms.gamma_bar)?;
        let mut handled: std::collections::BTreeSet<ModeVector> = Default::default();
        for block in &self.blocks.blocks {
            let d = 2 * block.modes.len();
            let mut rvec = DMatrix::<Complex64>::zeros(d, 1);
            for (i, nu) in block.modes.iter().enumerate() {
                rvec[(2 * i, 0)] = rhs.get(nu, Sign::Plus);
                rvec[(2 * i + 1, 0)] = rhs.get(nu, Sign::Minus);
            }
            let solved = if via_propagators {
                let mut out = DMatrix::<Complex64>::zeros(d, 1);
                for (i, nu) in block.modes.iter().enumerate() {
                    for s in Sign::all() {
                        let mut acc = Complex64::default();
                        for (j, nup) in block.modes.iter().enumerate() {
                            for sp in Sign::all() {
                                let g = crate::multiscale::propagator_scale_sum(
                                    &self.spec,
                                    &self.blocks,
                                    &chi,
                                    nu,
                                    s,
                                    nup,
                                    sp,
                                )?;
                                acc += g * rvec[(2 * j + sp.index(), 0)];
                            }
                        }
                        out[(2 * i + s.index(), 0)] = acc;
                    }
                }
                out
            } else {
                match &block.inverse {
                    Some(inv) => inv * &rvec,
                    None => {
                        if rvec.iter().any(|v| v.norm() > 0.0) {
                            return Err(SeriesError::BlockSingular(block.modes[0].clone()));
                        }
                        rvec.clone()
                    }
                }
            };
            for (i, nu) in block.modes.iter().enumerate() {
                u_k.set(nu.clone(), solved[(2 * i, 0)]);
                handled.insert(nu.clone());
            }
        }
        for (nu, value) in rhs.iter() {
            if handled.contains(nu) || self.spec.in_q(nu) {
                continue;
            }
            let delta = self.spec.eigenvalue(nu, self.eps)?;
            if delta.abs() < self.blocks.params.gamma_bar {
                return Err(SeriesError::BlockSingular(nu.clone()));
            }
            u_k.set(nu.clone(), value / delta);
        }
        // Q rows: convolve order k with the partial u_k (Q part still zero),
        // then solve with the reduced Jacobian
        self.orders.push(u_k);
        debug_assert_eq!(self.orders.len(), k as usize + 1);
        let f_same = convolve_nonlinearity(&self.spec, &self.orders, k, self.cfg.truncation)?;
        let dim_q = self.qbasis.modes.len();
        let mut coords = vec![Complex64::default(); dim_q];
        for i in 0..dim_q {
            let mut acc = Complex64::default();
            for j in 0..dim_q {
                acc += self.qbasis.j_inv[(i, j)]
                    * f_same.get(&self.qbasis.modes[j], Sign::Plus);
            }
            coords[i] = acc;
        }
        let q_field = self.qbasis.expand(&coords, self.cfg.truncation);
        let u_k = self.orders.last_mut().unwrap();
        for (nu, v) in q_field.iter() {
            u_k.add_to(nu.clone(), *v);
        }
        Ok(())
    }

    /// Runs the recursion up to `k_max`.
    pub fn run(&mut self, via_propagators: bool) -> Result<(), SeriesError> {
        for k in self.spec.degree_n..=self.cfg.k_max {
            self.recursion_step(k, via_propagators)?;
        }
        Ok(())
    }

    /// Physical partial sum `eta * sum_{k <= up_to} eta^k u^{(k)}` at
    /// `eta = eps^{1/N}`: the series solves for the order-one rescaled field,
    /// and the physical solution carries one extra amplitude factor.
    pub fn partial_sum(&self, up_to: u32) -> FourierField {
        let eta = self.eps.powf(1.0 / self.spec.degree_n as f64);
        let mut out = FourierField::new(self.cfg.truncation);
        for (k, field) in self.orders.iter().enumerate() {
            if k as u32 > up_to {
                break;
            }
            let weight = eta.powi(k as i32 + 1);
            for (nu, v) in field.iter() {
                out.add_to(nu.clone(), v * weight);
            }
        }
        out
    }
}

/// Sup-norm residual of the truncated physical system
/// `delta_nu v_nu - F_nu(v) = 0`, away from the truncation boundary.
pub fn residual(
    spec: &EquationSpec,
    field: &FourierField,
    eps: f64,
    margin: i64,
) -> Result<f64, SeriesError> {
    residual_on(spec, field, eps, field.truncation, margin)
}

/// Residual evaluated on a possibly larger shell: embedding a solution of
/// the `field.truncation` system into a wider lattice exposes the dropped
/// tail as residual just outside the original ball, which is the honest
/// truncation-error measure.
pub fn residual_on(
    spec: &EquationSpec,
    field: &FourierField,
    eps: f64,
    eval_truncation: i64,
    margin: i64,
) -> Result<f64, SeriesError> {
    let mut widened = field.clone();
    widened.truncation = eval_truncation.max(field.truncation);
    let f = convolve_physical(spec, &widened)?;
    let mut worst = 0.0f64;
    for nu in enumerate_shell(spec, widened.truncation - margin) {
        let reps = expand_reps(spec, &nu);
        for rep in reps {
            let delta = spec.eigenvalue(&rep, eps)?;
            let r = delta * widened.get(&rep, Sign::Plus) - f.get(&rep, Sign::Plus);
            worst = worst.max(r.norm());
        }
    }
    Ok(worst)
}

/// Residual of the rescaled order-one system: the physical residual divided
/// by `eps^{1/N}` (the rescaling maps one onto the other exactly).
pub fn rescaled_residual(
    spec: &EquationSpec,
    field: &FourierField,
    eps: f64,
    margin: i64,
) -> Result<f64, SeriesError> {
    let r = residual(spec, field, eps, margin)?;
    Ok(r / eps.powf(1.0 / spec.degree_n as f64))
}

/// Full physical nonlinearity `F(v)`: all coefficients at weight one.
pub fn convolve_physical(
    spec: &EquationSpec,
    field: &FourierField,
) -> Result<FourierField, SeriesError> {
    let truncation = field.truncation;
    let mut out = FourierField::new(truncation);
    for coeff in &spec.coefficients {
        let p = coeff.r + coeff.s;
        let phase = sector_phase(coeff.r, coeff.s, spec.dim)? * coeff.value;
        let shift = ModeVector::new(0, coeff.m.clone());
        let slack: i64 = coeff.m.iter().map(|x| x.abs()).sum();
        let reflected = conjugate_reflect(field);
        let mut acc: Option<FourierField> = None;
        let mut remaining = p;
        for slot in 0..p {
            let minus_slot = slot >= coeff.r;
            let factor = if minus_slot {
                reflected.clone()
            } else {
                field.clone()
            };
            remaining -= 1;
            let bound = truncation * (1 + remaining as i64) + slack;
            acc = Some(match acc {
                None => factor,
                Some(prev) => convolve_pair(&prev, &factor, bound),
            });
        }
        if let Some(res) = acc {
            for (nu, v) in res.iter() {
                let target = nu.add(&shift);
                if target.size() <= truncation {
                    out.add_to(target, v * phase);
                }
            }
        }
    }
    Ok(out)
}

fn expand_reps(spec: &EquationSpec, nu: &ModeVector) -> Vec<ModeVector> {
    let mut reps = vec![];
    odd_orbit(nu, |point, _| reps.push(point));
    if reps.is_empty() && spec.boundary == crate::lattice::Boundary::Periodic {
        reps.push(nu.clone());
    }
    reps
}

/// Gevrey-decay regression: fits `log |u_nu| ~ log K - kappa |nu|^{1/2}` and
/// returns `(kappa, r_squared, points)`.
pub fn gevrey_fit(field: &FourierField) -> Option<(f64, f64, usize)> {
    let pts: Vec<(f64, f64)> = field
        .iter()
        .filter(|(_, v)| v.norm() > 1e-300)
        .map(|(nu, v)| ((nu.size() as f64).sqrt(), v.norm().ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Some((-slope, r2, pts.len()))
}

/// Damped Newton iteration on the truncated system with the symmetry
/// constraints imposed: unknowns are the real canonical-mode amplitudes.
pub fn newton_oracle(
    spec: &EquationSpec,
    cfg: &SolverConfig,
    eps: f64,
) -> Result<FourierField, SeriesError> {
    let truncation = cfg.truncation;
    let time_even = spec.family != EquationFamily::Nls;
    let mut unknowns: Vec<ModeVector> = enumerate_shell(spec, truncation)
        .into_iter()
        .filter(|nu| nu.m.iter().all(|&x| x > 0) && (!time_even || nu.n >= 0))
        .collect();
    unknowns.sort();
    let index: BTreeMap<ModeVector, usize> = unknowns
        .iter()
        .enumerate()
        .map(|(i, nu)| (nu.clone(), i))
        .collect();
    let nvar = unknowns.len();
    let qbasis = build_q_basis(spec, truncation)?;
    let sqrt_eps = eps.powf(1.0 / spec.degree_n as f64);

    let expand = |x: &DMatrix<f64>| -> FourierField {
        let mut field = FourierField::new(truncation);
        for (i, nu) in unknowns.iter().enumerate() {
            if x[(i, 0)] == 0.0 {
                continue;
            }
            let reps: Vec<ModeVector> = if time_even && nu.n != 0 {
                vec![nu.clone(), ModeVector::new(-nu.n, nu.m.clone())]
            } else {
                vec![nu.clone()]
            };
            for rep in reps {
                odd_orbit(&rep, |point, sign| {
                    field.add_to(point, Complex64::new(x[(i, 0)] * sign as f64, 0.0));
                });
            }
        }
        field
    };

    let residual_vec = |x: &DMatrix<f64>| -> Result<(DMatrix<f64>, FourierField), SeriesError> {
        let field = expand(x);
        let f = convolve_physical(spec, &field)?;
        let mut g = DMatrix::<f64>::zeros(nvar, 1);
        for (i, nu) in unknowns.iter().enumerate() {
            let delta = spec.eigenvalue(nu, eps)?;
            g[(i, 0)] = delta * x[(i, 0)] - f.get(nu, Sign::Plus).re;
        }
        Ok((g, field))
    };

    // initial guess: eps^{1/N} q0
    let mut x = DMatrix::<f64>::zeros(nvar, 1);
    let seed = qbasis.seed_field(truncation);
    for (nu, v) in seed.iter() {
        if let Some(&i) = index.get(nu) {
            x[(i, 0)] = v.re * sqrt_eps;
        }
    }

    let (mut g, mut field) = residual_vec(&x)?;
    let mut rejects = 0u32;
    for _ in 0..cfg.newton_max_iters {
        let gnorm = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gnorm < cfg.newton_tol {
            return Ok(field);
        }
        // analytic Jacobian: delta on the diagonal minus DF, built from
        // all-but-one-slot partial products per coefficient
        let mut jac = DMatrix::<f64>::zeros(nvar, nvar);
        for (i, nu) in unknowns.iter().enumerate() {
            jac[(i, i)] = spec.eigenvalue(nu, eps)?;
        }
        for coeff in &spec.coefficients {
            let phase = sector_phase(coeff.r, coeff.s, spec.dim)? * coeff.value;
            let shift = ModeVector::new(0, coeff.m.clone());
            let slack: i64 = coeff.m.iter().map(|v| v.abs()).sum();
            let bound = 2 * truncation + slack;
            let reflected = conjugate_reflect(&field);
            if coeff.r >= 1 {
                let mut acc: Option<FourierField> = None;
                for _ in 0..(coeff.r - 1) {
                    acc = Some(match acc {
                        None => field.clone(),
                        Some(prev) => convolve_pair(&prev, &field, bound),
                    });
                }
                for _ in 0..coeff.s {
                    acc = Some(match acc {
                        None => reflected.clone(),
                        Some(prev) => convolve_pair(&prev, &reflected, bound),
                    });
                }
                let partial = acc.unwrap_or_else(|| unit_field(spec.dim, truncation));
                add_jacobian_columns(
                    &unknowns,
                    &index,
                    &partial,
                    &shift,
                    coeff.r as f64 * phase,
                    false,
                    time_even,
                    &mut jac,
                );
            }
            if coeff.s >= 1 {
                let mut acc: Option<FourierField> = None;
                for _ in 0..coeff.r {
                    acc = Some(match acc {
                        None => field.clone(),
                        Some(prev) => convolve_pair(&prev, &field, bound),
                    });
                }
                for _ in 0..(coeff.s - 1) {
                    acc = Some(match acc {
                        None => reflected.clone(),
                        Some(prev) => convolve_pair(&prev, &reflected, bound),
                    });
                }
                let partial = acc.unwrap_or_else(|| unit_field(spec.dim, truncation));
                add_jacobian_columns(
                    &unknowns,
                    &index,
                    &partial,
                    &shift,
                    coeff.s as f64 * phase,
                    true,
                    time_even,
                    &mut jac,
                );
            }
        }
        let lu = jac.lu();
        let Some(step) = lu.solve(&(-&g)) else {
            return Err(SeriesError::NewtonDiverged(rejects));
        };
        // Armijo backtracking with halving
        let mut t = 1.0f64;
        let mut accepted = false;
        while rejects <= cfg.newton_max_rejects {
            let candidate = &x + &step * t;
            let (g_new, field_new) = residual_vec(&candidate)?;
            let new_norm = g_new.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if new_norm <= (1.0 - 1e-4 * t) * gnorm {
                x = candidate;
                g = g_new;
                field = field_new;
                accepted = true;
                break;
            }
            t *= 0.5;
            rejects += 1;
        }
        if !accepted {
            return Err(SeriesError::NewtonDiverged(rejects));
        }
    }
    let gnorm = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if gnorm < cfg.newton_tol {
        Ok(field)
    } else {
        Err(SeriesError::NewtonDiverged(rejects))
    }
}

/// Adds `-factor * d(conv)/d(unknown)` columns to the Jacobian: the partial
/// product convolved with each orbit image of the unknown.
#[allow(clippy::too_many_arguments)]
fn add_jacobian_columns(
    unknowns: &[ModeVector],
    index: &BTreeMap<ModeVector, usize>,
    partial: &FourierField,
    shift: &ModeVector,
    factor: f64,
    minus_slot: bool,
    time_even: bool,
    jac: &mut DMatrix<f64>,
) {
    for (col, nu_col) in unknowns.iter().enumerate() {
        let reps: Vec<ModeVector> = if time_even && nu_col.n != 0 {
            vec![nu_col.clone(), ModeVector::new(-nu_col.n, nu_col.m.clone())]
        } else {
            vec![nu_col.clone()]
        };
        for rep in reps {
            odd_orbit(&rep, |point, sign| {
                let slot_mode = if minus_slot { point.negate() } else { point };
                for (nu_p, v) in partial.iter() {
                    let target = nu_p.add(&slot_mode).add(shift);
                    if let Some(&row) = index.get(&target) {
                        jac[(row, col)] -= factor * sign as f64 * v.re;
                    }
                }
            });
        }
    }
}

/// Surviving-fraction table of the admissibility scan over dyadic windows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureScan {
    /// `(window upper bound, surviving fraction, sample count)` per dyadic
    /// window `[0, eps0 2^{-j}]`, j ascending.
    pub windows: Vec<(f64, f64, usize)>,
    pub monotone: bool,
    pub excluded: Vec<f64>,
}

/// Scans the window for admissible eps values (with the given counterterm,
/// usually the zero first-order proxy) and reports surviving fractions per
/// dyadic subwindow.
pub fn measure_scan(
    spec: &EquationSpec,
    cfg: &SolverConfig,
    radius: i64,
    grid: usize,
    dyadic_levels: u32,
    m: &Counterterm,
) -> Result<MeasureScan, SeriesError> {
    let eps0 = spec.eps_max;
    let mut admissible_flags = vec![];
    let mut excluded = vec![];
    for i in 1..=grid {
        let eps = eps0 * i as f64 / grid as f64;
        let system = build_blocks(spec, m, eps, radius, cfg.beta, cfg.c2, cfg.ms)?;
        let rep = admissible(spec, &system, radius)?;
        admissible_flags.push((eps, rep.admissible));
        if !rep.admissible {
            excluded.push(eps);
        }
    }
    let mut windows = vec![];
    for j in 0..=dyadic_levels {
        let hi = eps0 * 2f64.powi(-(j as i32));
        let in_window: Vec<&(f64, bool)> = admissible_flags
            .iter()
            .filter(|(e, _)| *e <= hi + 1e-15)
            .collect();
        let total = in_window.len();
        let surviving = in_window.iter().filter(|(_, a)| *a).count();
        let fraction = if total == 0 {
            1.0
        } else {
            surviving as f64 / total as f64
        };
        windows.push((hi, fraction, total));
    }
    let monotone = windows.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12);
    Ok(MeasureScan {
        windows,
        monotone,
        excluded,
    })
}

/// Hook supplying the counterterm map `L(eta, eps, M)`; the tree engine
/// provides the definitional implementation.
pub trait CountertermSource {
    fn l_total(
        &self,
        spec: &EquationSpec,
        cfg: &SolverConfig,
        eps: f64,
        m: &Counterterm,
    ) -> Result<Counterterm, SeriesError>;
}

/// Outcome of the compatibility fixed point.
pub enum FixpointOutcome {
    Converged {
        m: Counterterm,
        iterations: usize,
        /// Largest successive-update ratio observed.
        ratio: f64,
    },
    Excluded {
        witness: String,
    },
}

/// Iterates `M <- L(eps^{1/N}, eps, M)` to a fixed point, rejecting eps
/// values whose block system fails admissibility along the way.
pub fn counterterm_fixpoint(
    spec: &EquationSpec,
    cfg: &SolverConfig,
    eps: f64,
    source: &dyn CountertermSource,
    tol: f64,
    max_iters: usize,
) -> Result<FixpointOutcome, SeriesError> {
    let mut m = Counterterm::zero();
    let mut last_update: Option<f64> = None;
    let mut ratio: f64 = 0.0;
    for iter in 0..max_iters {
        let system = build_blocks(spec, &m, eps, cfg.truncation, cfg.beta, cfg.c2, cfg.ms)?;
        let rep = admissible(spec, &system, cfg.truncation)?;
        if !rep.admissible {
            let (nu, why) = rep.witness.unwrap();
            return Ok(FixpointOutcome::Excluded {
                witness: format!("mode {nu}: {why}"),
            });
        }
        let next = source.l_total(spec, cfg, eps, &m)?;
        let update = next.sup_distance(&m);
        if let Some(prev) = last_update {
            if prev > 0.0 {
                let r = update / prev;
                ratio = ratio.max(r);
                if r > 0.5 && update > tol {
                    return Err(SeriesError::NoContraction(r));
                }
            }
        }
        m = next;
        if update < tol {
            return Ok(FixpointOutcome::Converged {
                m,
                iterations: iter + 1,
                ratio,
            });
        }
        last_update = Some(update);
    }
    Err(SeriesError::NoContraction(ratio.max(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nls_d1(eps_max: f64) -> EquationSpec {
        EquationSpec::nls_cubic(1, 3, 10, eps_max)
    }

    fn small_cfg(spec: &EquationSpec, truncation: i64, k_max: u32) -> SolverConfig {
        SolverConfig {
            truncation,
            k_max,
            ..SolverConfig::with_defaults(spec)
        }
    }

    #[test]
    fn seed_field_is_symmetric() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let basis = build_q_basis(&spec, 8).unwrap();
        let seed = basis.seed_field(8);
        assert!(seed.dirichlet_defect() < 1e-14);
        assert!(seed.imag_defect() < 1e-14);
        // canonical amplitude q0 / 2^D = (4/3) / 4
        let v = seed.get(&ModeVector::new(1, vec![1, 1]), Sign::Plus);
        assert!((v.re - (4.0 / 3.0) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn cubic_of_single_mode_hits_odd_harmonics() {
        let spec = nls_d1(0.01);
        let basis = build_q_basis(&spec, 8).unwrap();
        let seed = basis.seed_field(8);
        let f0 = convolve_nonlinearity(&spec, std::slice::from_ref(&seed), 0, 8).unwrap();
        for (nu, v) in f0.iter() {
            assert!(v.norm() > 0.0);
            assert!(nu.n % 2 != 0, "time harmonic {} must be odd", nu.n);
            assert!(nu.m[0] % 2 != 0, "space harmonic must be odd");
        }
        // the D=1 seed-mode coefficient carries the sign-weighted count 3
        let w = basis.q0[0];
        let expect = 3.0 * w * w * w;
        let got = f0.get(&ModeVector::new(1, vec![1]), Sign::Plus).re;
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn grid_oracle_matches_convolution() {
        // dealiased pointwise-product oracle on a 32-point grid for |u|^2 u
        let spec = nls_d1(0.01);
        let basis = build_q_basis(&spec, 12).unwrap();
        let seed = basis.seed_field(12);
        let f = convolve_nonlinearity(&spec, std::slice::from_ref(&seed), 0, 12).unwrap();
        let grid = 32usize;
        let mut u_grid = vec![Complex64::default(); grid * grid];
        for (nu, v) in seed.iter() {
            for it in 0..grid {
                for ix in 0..grid {
                    let phase = 2.0 * std::f64::consts::PI
                        * (nu.n as f64 * it as f64 + nu.m[0] as f64 * ix as f64)
                        / grid as f64;
                    u_grid[it * grid + ix] += v * Complex64::new(0.0, phase).exp();
                }
            }
        }
        let w_grid: Vec<Complex64> = u_grid.iter().map(|u| u * u * u.conj()).collect();
        let mut proj = Complex64::default();
        for it in 0..grid {
            for ix in 0..grid {
                let phase = -2.0 * std::f64::consts::PI * (it as f64 + ix as f64) / grid as f64;
                proj += w_grid[it * grid + ix] * Complex64::new(0.0, phase).exp();
            }
        }
        proj /= (grid * grid) as f64;
        let direct = f.get(&ModeVector::new(1, vec![1]), Sign::Plus);
        assert!(
            (proj - direct).norm() < 1e-10,
            "grid {proj} vs conv {direct}"
        );
    }

    #[test]
    fn zero_state_stays_zero() {
        let spec = nls_d1(0.01);
        let cfg = small_cfg(&spec, 8, 4);
        let mut state = SeriesState::new(&spec, &cfg, 1e-3, Counterterm::zero()).unwrap();
        state.orders[0] = FourierField::new(8);
        state.run(false).unwrap();
        for k in 0..=cfg.k_max {
            if let Some(f) = state.order(k) {
                assert!(f.is_empty(), "order {k} must vanish");
            }
        }
    }

    #[test]
    fn orders_below_n_and_odd_orders_vanish_for_cubic() {
        let spec = nls_d1(0.01);
        let cfg = small_cfg(&spec, 8, 5);
        let mut state = SeriesState::new(&spec, &cfg, 1e-3, Counterterm::zero()).unwrap();
        state.run(false).unwrap();
        assert!(state.order(1).map(|f| f.is_empty()).unwrap_or(true));
        assert!(!state.order(2).unwrap().is_empty());
        assert!(state.order(3).unwrap().is_empty());
        assert!(state.order(5).unwrap().is_empty());
    }

    #[test]
    fn leading_order_formula_on_nonresonant_rows() {
        // u^{(N)} = f^{(0)} / delta entrywise away from blocks and Q
        let spec = nls_d1(0.01);
        let cfg = small_cfg(&spec, 8, 2);
        let eps = 1e-3;
        let mut state = SeriesState::new(&spec, &cfg, eps, Counterterm::zero()).unwrap();
        state.run(false).unwrap();
        let f0 = convolve_nonlinearity(&spec, &state.orders[..1], 0, 8).unwrap();
        let u2 = state.order(2).unwrap();
        for (nu, v) in f0.iter() {
            if spec.in_q(nu) {
                continue;
            }
            if state.blocks.block_of(nu).is_some() {
                continue;
            }
            let delta = spec.eigenvalue(nu, eps).unwrap();
            let expect = v / delta;
            let got = u2.get(nu, Sign::Plus);
            assert!((expect - got).norm() < 1e-12, "mode {nu}: {got} vs {expect}");
        }
    }

    #[test]
    fn recursion_preserves_symmetries() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let cfg = small_cfg(&spec, 8, 4);
        let mut state = SeriesState::new(&spec, &cfg, 1e-3, Counterterm::zero()).unwrap();
        state.run(false).unwrap();
        for k in [0u32, 2, 4] {
            let f = state.order(k).unwrap();
            assert!(f.dirichlet_defect() < 1e-12, "order {k} oddness");
            assert!(f.imag_defect() < 1e-12, "order {k} reality");
        }
    }

    #[test]
    fn nlw_recursion_preserves_time_evenness() {
        let spec = EquationSpec::nlw_cubic(1, 3, 10, 0.01);
        let cfg = small_cfg(&spec, 8, 4);
        let mut state = SeriesState::new(&spec, &cfg, 1e-3, Counterterm::zero()).unwrap();
        state.run(false).unwrap();
        for k in [0u32, 2, 4] {
            let f = state.order(k).unwrap();
            assert!(f.case_two_defect(1) < 1e-12, "order {k} case-II");
            for (nu, v) in f.iter() {
                let mirrored = f.get(&ModeVector::new(-nu.n, nu.m.clone()), Sign::Plus);
                assert!((v - mirrored).norm() < 1e-12, "order {k} evenness at {nu}");
            }
        }
    }

    #[test]
    fn dual_path_solves_agree() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.2);
        let mut cfg = small_cfg(&spec, 8, 4);
        cfg.c2 = 6.0; // merge the |m|^2-degenerate pair into one block
        let eps = 0.1;
        let mut direct = SeriesState::new(&spec, &cfg, eps, Counterterm::zero()).unwrap();
        direct.run(false).unwrap();
        let mut via_prop = SeriesState::new(&spec, &cfg, eps, Counterterm::zero()).unwrap();
        via_prop.run(true).unwrap();
        for k in (spec.degree_n..=cfg.k_max).step_by(2) {
            let a = direct.order(k).unwrap();
            let b = via_prop.order(k).unwrap();
            assert!(a.sup_distance(b) < 1e-10, "order {k}");
        }
    }

    #[test]
    fn newton_converges_at_small_eps_d1() {
        let spec = nls_d1(0.01);
        let cfg = small_cfg(&spec, 10, 4);
        let eps = 1e-3;
        let field = newton_oracle(&spec, &cfg, eps).unwrap();
        let r = residual(&spec, &field, eps, 3).unwrap();
        assert!(r < 1e-10, "residual {r}");
        // leading amplitude ~ sqrt(eps) q0 / 2
        let v = field.get(&ModeVector::new(1, vec![1]), Sign::Plus).re;
        let expect = eps.sqrt() * (4.0f64 / 3.0).sqrt() / 2.0;
        assert!((v - expect).abs() < 0.1 * expect.abs(), "{v} vs {expect}");
    }

    #[test]
    fn newton_at_zero_eps_returns_bifurcation_point() {
        // at eps = 0 the physical branch passes through v = 0 and the seed
        // scaling eps^{1/N} q0 vanishes: the oracle returns that point
        let spec = nls_d1(0.01);
        let cfg = small_cfg(&spec, 8, 2);
        let field = newton_oracle(&spec, &cfg, 0.0).unwrap();
        assert!(field.sup_norm() < 1e-14);
        let r = residual(&spec, &field, 0.0, 2).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn partial_sums_approach_newton() {
        let spec = nls_d1(0.002);
        let cfg = small_cfg(&spec, 10, 8);
        let eps = 1e-3;
        let newton = newton_oracle(&spec, &cfg, eps).unwrap();
        let mut state = SeriesState::new(&spec, &cfg, eps, Counterterm::zero()).unwrap();
        state.run(false).unwrap();
        let mut dists = vec![];
        for k in [2u32, 4, 6, 8] {
            let partial = state.partial_sum(k);
            dists.push(partial.sup_distance(&newton));
        }
        for w in dists.windows(2) {
            assert!(
                w[1] <= w[0] * 1.001,
                "partial sums not improving: {dists:?}"
            );
        }
        assert!(*dists.last().unwrap() < 1e-6, "final distance {dists:?}");
    }

    #[test]
    fn gevrey_fit_on_newton_solution() {
        let spec = nls_d1(0.01);
        let cfg = small_cfg(&spec, 12, 4);
        let field = newton_oracle(&spec, &cfg, 1e-3).unwrap();
        let (kappa, r2, points) = gevrey_fit(&field).unwrap();
        assert!(kappa > 0.0);
        assert!(r2 > 0.9, "r2 = {r2} over {points} points");
    }

    #[test]
    fn truncation_study_residual_decreases() {
        // evaluate every truncated solution on a common wider shell: the
        // dropped tail just outside the ball shrinks as the ball grows
        let spec = nls_d1(0.01);
        let eps = 8e-3;
        let mut residuals = vec![];
        for truncation in [6i64, 10, 14] {
            let cfg = small_cfg(&spec, truncation, 8);
            let mut state = SeriesState::new(&spec, &cfg, eps, Counterterm::zero()).unwrap();
            state.run(false).unwrap();
            let partial = state.partial_sum(8);
            residuals.push(residual_on(&spec, &partial, eps, 18, 2).unwrap());
        }
        // strict improvement until the tail falls below machine noise
        assert!(
            residuals[1] < residuals[0] * 1e-2 && residuals[2] <= residuals[1],
            "residuals not improving: {residuals:?}"
        );
    }

    #[test]
    fn measure_scan_fractions() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let cfg = small_cfg(&spec, 12, 2);
        let scan = measure_scan(&spec, &cfg, 12, 400, 4, &Counterterm::zero()).unwrap();
        assert_eq!(scan.windows.len(), 5);
        assert!(scan.monotone, "windows: {:?}", scan.windows);
        let last = scan.windows.last().unwrap();
        assert!(last.1 >= 0.9, "smallest window fraction {}", last.1);
    }

    #[test]
    fn measure_scan_gamma_monotone() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let mut cfg = small_cfg(&spec, 12, 2);
        let base = measure_scan(&spec, &cfg, 12, 200, 3, &Counterterm::zero()).unwrap();
        cfg.ms.gamma *= 2.0;
        let wider = measure_scan(&spec, &cfg, 12, 200, 3, &Counterterm::zero()).unwrap();
        for (a, b) in base.windows.iter().zip(wider.windows.iter()) {
            assert!(b.1 <= a.1 + 1e-12, "exclusions must widen: {a:?} vs {b:?}");
        }
    }

    struct ZeroSource;
    impl CountertermSource for ZeroSource {
        fn l_total(
            &self,
            _spec: &EquationSpec,
            _cfg: &SolverConfig,
            _eps: f64,
            _m: &Counterterm,
        ) -> Result<Counterterm, SeriesError> {
            Ok(Counterterm::zero())
        }
    }

    #[test]
    fn fixpoint_trivial_without_resonant_pairs() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let cfg = small_cfg(&spec, 10, 4);
        match counterterm_fixpoint(&spec, &cfg, 1e-3, &ZeroSource, 1e-10, 10).unwrap() {
            FixpointOutcome::Converged { m, iterations, .. } => {
                assert!(m.is_zero());
                assert_eq!(iterations, 1);
            }
            FixpointOutcome::Excluded { witness } => panic!("unexpected exclusion: {witness}"),
        }
    }

    #[test]
    fn fixpoint_detects_exclusion() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.2);
        let cfg = small_cfg(&spec, 12, 4);
        // eps = 0.05 puts mode (2,(2,0)) exactly on the gamma_bar threshold
        match counterterm_fixpoint(&spec, &cfg, 0.05, &ZeroSource, 1e-10, 10).unwrap() {
            FixpointOutcome::Excluded { .. } => {}
            FixpointOutcome::Converged { .. } => panic!("expected exclusion"),
        }
    }

    #[test]
    fn resonant_q_basis_seeds_residual_zero_profile() {
        let spec = EquationSpec::nls_resonant(2, 0.01);
        let basis = build_q_basis(&spec, 9).unwrap();
        // support (1,2): a^2 = 5/9
        let idx = basis
            .modes
            .iter()
            .position(|nu| nu.m == vec![1, 2])
            .expect("support mode present");
        assert!((basis.q0[idx] - (5.0f64 / 9.0).sqrt()).abs() < 1e-12);
        assert_eq!(basis.lambda[idx], 5.0);
        let seed = basis.seed_field(9);
        assert!(seed.dirichlet_defect() < 1e-14);
    }
}

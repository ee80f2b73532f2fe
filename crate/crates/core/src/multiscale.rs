//! Small-divisor machinery: matrix norms, near-diagonal blocks of the
//! renormalized linear operator, small divisors, smooth scale decompositions,
//! propagators, and the admissibility conditions that carve out the
//! parameter Cantor set.

use crate::clusters::{partition, ClusterError, ClusterPartition};
use crate::lattice::{enumerate_shell, EquationSpec, LatticeError, ModeVector};
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MultiscaleError {
    #[error("not-self-adjoint: max asymmetry {0}")]
    NotSelfAdjoint(f64),
    #[error("mode-not-small: |delta_nu(eps)| = {0} >= gamma-bar")]
    ModeNotSmall(f64),
    #[error("parameter-order violation: {0}")]
    ParameterOrder(String),
    #[error("label inconsistency: {0}")]
    LabelInconsistency(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Small-divisor and exclusion parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MultiscaleParams {
    /// Lower cutoff scale; must satisfy `0 < gamma < gamma_bar`.
    pub gamma: f64,
    /// Step-function threshold; must satisfy `gamma_bar < 1/4`.
    pub gamma_bar: f64,
    /// Diophantine exponent for the small-divisor condition.
    pub tau: f64,
    /// Diophantine exponent for the threshold-distance condition.
    pub tau1: f64,
    /// Size rescaling exponent inside the small divisor.
    pub xi: f64,
}

impl Default for MultiscaleParams {
    fn default() -> Self {
        Self {
            gamma: 1e-3,
            gamma_bar: 0.2,
            tau: 2.0,
            tau1: 2.0,
            xi: 2.0,
        }
    }
}

impl MultiscaleParams {
    pub fn validate(&self) -> Result<(), MultiscaleError> {
        if !(self.gamma > 0.0 && self.gamma < self.gamma_bar && self.gamma_bar < 0.25) {
            return Err(MultiscaleError::ParameterOrder(format!(
                "need 0 < gamma ({}) < gamma_bar ({}) < 1/4",
                self.gamma, self.gamma_bar
            )));
        }
        if self.xi <= 0.0 || self.tau <= 0.0 || self.tau1 <= 0.0 {
            return Err(MultiscaleError::ParameterOrder(
                "tau, tau1, xi must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sign index of the doubled equations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn flip(self) -> Self {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }

    pub fn all() -> [Sign; 2] {
        [Sign::Plus, Sign::Minus]
    }
}

/// Self-adjoint counterterm supported on resonant pairs, stored sparsely.
#[derive(Clone, Debug, Default)]
pub struct Counterterm {
    entries: BTreeMap<(ModeVector, Sign, ModeVector, Sign), Complex64>,
}

impl Counterterm {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn get(&self, nu: &ModeVector, s: Sign, nup: &ModeVector, sp: Sign) -> Complex64 {
        self.entries
            .get(&(nu.clone(), s, nup.clone(), sp))
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Inserts an entry together with its self-adjoint mirror and the
    /// doubled-sign symmetry partner required for reality.
    pub fn set_symmetric(
        &mut self,
        nu: &ModeVector,
        s: Sign,
        nup: &ModeVector,
        sp: Sign,
        value: Complex64,
    ) {
        self.entries
            .insert((nu.clone(), s, nup.clone(), sp), value);
        self.entries
            .insert((nup.clone(), sp, nu.clone(), s), value.conj());
        // M^{sigma,sigma'}_{nu,nu'} = M^{-sigma',-sigma}_{nu',nu}
        self.entries
            .insert((nup.clone(), sp.flip(), nu.clone(), s.flip()), value);
        self.entries
            .insert((nu.clone(), s.flip(), nup.clone(), sp.flip()), value.conj());
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|v| v.norm() == 0.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(ModeVector, Sign, ModeVector, Sign), &Complex64)> {
        self.entries.iter()
    }

    /// Weighted sup norm with Gevrey-type weight `exp(kappa |nu-nu'|^rho)`.
    pub fn kappa_norm(&self, kappa: f64, rho: f64) -> f64 {
        self.entries
            .iter()
            .map(|((nu, _, nup, _), v)| {
                v.norm() * (kappa * (nu.dist(nup) as f64).powf(rho)).exp()
            })
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.entries.values().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise difference against another counterterm.
    pub fn sup_distance(&self, other: &Counterterm) -> f64 {
        let mut keys: std::collections::BTreeSet<_> = self.entries.keys().cloned().collect();
        keys.extend(other.entries.keys().cloned());
        keys.into_iter()
            .map(|k| {
                let a = self.entries.get(&k).copied().unwrap_or_default();
                let b = other.entries.get(&k).copied().unwrap_or_default();
                (a - b).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues of a Hermitian matrix via the symmetric real embedding
/// `[[X, -Y], [Y, X]]` (each eigenvalue appears twice), ascending.
pub fn hermitian_eigenvalues(a: &DMatrix<Complex64>) -> Vec<f64> {
    let d = a.nrows();
    let mut embed = DMatrix::<f64>::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            let z = a[(i, j)];
            embed[(i, j)] = z.re;
            embed[(i + d, j + d)] = z.re;
            embed[(i, j + d)] = -z.im;
            embed[(i + d, j)] = z.im;
        }
    }
    let eig = SymmetricEigen::new(embed);
    let mut all: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    all.sort_by(f64::total_cmp);
    all.into_iter().step_by(2).collect()
}

/// Checks self-adjointness to the stated tolerance.
pub fn assert_self_adjoint(a: &DMatrix<Complex64>, tol: f64) -> Result<(), MultiscaleError> {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    if worst > tol {
        return Err(MultiscaleError::NotSelfAdjoint(worst));
    }
    Ok(())
}

/// The three matrix norms: max entry, normalized Frobenius
/// `sqrt(tr(A^2)/d)`, and the spectral norm.
pub fn matrix_norms(a: &DMatrix<Complex64>) -> Result<(f64, f64, f64), MultiscaleError> {
    assert_self_adjoint(a, 1e-12)?;
    let d = a.nrows() as f64;
    let max_entry = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    // tr(A^2) = sum |A_ij|^2 for self-adjoint A
    let frob: f64 = a.iter().map(|z| z.norm_sqr()).sum();
    let norm = (frob / d).sqrt();
    let spectral = hermitian_eigenvalues(a)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max);
    Ok((max_entry, norm, spectral))
}

/// One near-diagonal block of `D(eps) + M`: the modes of a cluster whose
/// eigenvalue is below `gamma_bar`, doubled over the sign index.
#[derive(Clone, Debug)]
pub struct Block {
    pub cluster: usize,
    /// Sorted mode list; matrix index is `2 * mode_position + sign.index()`.
    pub modes: Vec<ModeVector>,
    pub matrix: DMatrix<Complex64>,
    pub inverse: Option<DMatrix<Complex64>>,
    /// Minimum mode size over the block.
    pub p: i64,
    /// Small divisor `x_nu`, zero when the block is singular.
    pub x: f64,
}

impl Block {
    pub fn entry_index(&self, nu: &ModeVector, s: Sign) -> Option<usize> {
        self.modes
            .iter()
            .position(|m| m == nu)
            .map(|i| 2 * i + s.index())
    }
}

/// The block decomposition of `D(eps) + M` on a truncated shell at fixed eps.
#[derive(Clone, Debug)]
pub struct BlockSystem {
    pub eps: f64,
    pub params: MultiscaleParams,
    pub blocks: Vec<Block>,
    pub partition: ClusterPartition,
}

impl BlockSystem {
    pub fn block_of(&self, nu: &ModeVector) -> Option<&Block> {
        self.blocks.iter().find(|b| b.modes.contains(nu))
    }
}

const SINGULAR_TOL: f64 = 1e-13;

/// Builds all near-diagonal blocks at `eps` from the cluster partition of
/// the shell: for each class, the modes with `|delta| < gamma_bar` form one
/// self-adjoint block of `diag(delta) + M`.
pub fn build_blocks(
    spec: &EquationSpec,
    m: &Counterterm,
    eps: f64,
    radius: i64,
    beta: f64,
    c2: f64,
    params: MultiscaleParams,
) -> Result<BlockSystem, MultiscaleError> {
    params.validate()?;
    let part = partition(spec, eps, radius, beta, c2)?;
    let mut blocks = vec![];
    for (j, class) in part.classes.iter().enumerate() {
        let mut modes: Vec<ModeVector> = vec![];
        for nu in class {
            if spec.eigenvalue(nu, eps)?.abs() < params.gamma_bar {
                modes.push(nu.clone());
            }
        }
        if modes.is_empty() {
            continue;
        }
        modes.sort();
        let d = 2 * modes.len();
        let mut matrix = DMatrix::<Complex64>::zeros(d, d);
        for (i, nu) in modes.iter().enumerate() {
            let delta = spec.eigenvalue(nu, eps)?;
            for s in Sign::all() {
                let row = 2 * i + s.index();
                matrix[(row, row)] = Complex64::new(delta, 0.0);
                for (ip, nup) in modes.iter().enumerate() {
                    for sp in Sign::all() {
                        let col = 2 * ip + sp.index();
                        let v = m.get(nu, s, nup, sp);
                        if v.norm() > 0.0 {
                            matrix[(row, col)] += v;
                        }
                    }
                }
            }
        }
        assert_self_adjoint(&matrix, 1e-12)?;
        let eigenvalues = hermitian_eigenvalues(&matrix);
        let p = modes.iter().map(|nu| nu.size()).min().unwrap();
        let singular = eigenvalues.iter().any(|l| l.abs() < SINGULAR_TOL);
        let (inverse, x) = if singular {
            (None, 0.0)
        } else {
            let inv = matrix
                .clone()
                .lu()
                .try_inverse()
                .expect("nonsingular by eigenvalue check");
            // ||A^{-1}|| = sqrt(tr(A^{-2}) / d) for the normalized Frobenius
            let tr_inv_sq: f64 = eigenvalues.iter().map(|l| 1.0 / (l * l)).sum();
            let norm_inv = (tr_inv_sq / d as f64).sqrt();
            let x = (p as f64).powf(-params.xi) / norm_inv;
            (Some(inv), x)
        };
        blocks.push(Block {
            cluster: j,
            modes,
            matrix,
            inverse,
            p,
            x,
        });
    }
    Ok(BlockSystem {
        eps,
        params,
        blocks,
        partition: part,
    })
}

/// Small divisor of a near-resonant mode: `p^{-xi} / ||(A^nu)^{-1}||`, zero
/// when the block is singular. Rejects modes outside the `gamma_bar` band.
pub fn small_divisor(
    spec: &EquationSpec,
    system: &BlockSystem,
    nu: &ModeVector,
) -> Result<f64, MultiscaleError> {
    let delta = spec.eigenvalue(nu, system.eps)?;
    if delta.abs() >= system.params.gamma_bar {
        return Err(MultiscaleError::ModeNotSmall(delta.abs()));
    }
    let block = system
        .block_of(nu)
        .expect("mode below gamma_bar must lie in a block");
    Ok(block.x)
}

/// Smooth scale functions built from the standard exponential glue.
#[derive(Clone, Copy, Debug)]
pub struct ScaleFunctions {
    pub gamma: f64,
    pub gamma_bar: f64,
}

fn glue(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

impl ScaleFunctions {
    pub fn new(gamma: f64, gamma_bar: f64) -> Result<Self, MultiscaleError> {
        if !(0.0 < gamma && gamma < gamma_bar && gamma_bar < 0.25) {
            return Err(MultiscaleError::ParameterOrder(format!(
                "need 0 < gamma ({gamma}) < gamma_bar ({gamma_bar}) < 1/4"
            )));
        }
        Ok(Self { gamma, gamma_bar })
    }

    /// Non-increasing bump: 1 on `[0, gamma]`, 0 on `[2 gamma, inf)`.
    pub fn chi(&self, x: f64) -> f64 {
        let t = (2.0 * self.gamma - x) / self.gamma;
        let up = glue(t);
        let down = glue(1.0 - t);
        if up + down == 0.0 {
            return if x <= self.gamma { 1.0 } else { 0.0 };
        }
        up / (up + down)
    }

    /// Dyadic band `chi(2^h x) - chi(2^{h+1} x)` for `h >= 0`,
    /// `1 - chi(x)` at `h = -1`.
    pub fn chi_h(&self, h: i32, x: f64) -> f64 {
        if h < 0 {
            1.0 - self.chi(x)
        } else {
            self.chi(2f64.powi(h) * x) - self.chi(2f64.powi(h + 1) * x)
        }
    }

    /// Step functions at the `gamma_bar` threshold.
    pub fn chi_bar1(&self, x: f64) -> f64 {
        if x.abs() < self.gamma_bar {
            1.0
        } else {
            0.0
        }
    }

    pub fn chi_bar0(&self, x: f64) -> f64 {
        1.0 - self.chi_bar1(x)
    }

    /// Scales with `chi_h` possibly nonzero at `x`: the support of the band
    /// `h` is `[2^{-h-1} gamma, 2^{-h+1} gamma]`.
    pub fn active_scales(&self, x: f64) -> Vec<i32> {
        let mut out = vec![];
        if self.chi_h(-1, x) != 0.0 {
            out.push(-1);
        }
        if x <= 0.0 {
            return out;
        }
        let h_max = (2.0 * self.gamma / x).log2().ceil() as i32 + 1;
        for h in 0..=h_max.max(0) {
            if self.chi_h(h, x) != 0.0 {
                out.push(h);
            }
        }
        out
    }

    /// Measured Lipschitz constant of `chi` in units of `1/gamma`.
    pub fn measured_steepness(&self, samples: usize) -> f64 {
        let mut worst = 0.0f64;
        let mut prev = self.chi(self.gamma * 0.5);
        let lo = 0.5 * self.gamma;
        let hi = 2.5 * self.gamma;
        let step = (hi - lo) / samples as f64;
        for i in 1..=samples {
            let x = lo + step * i as f64;
            let cur = self.chi(x);
            worst = worst.max((cur - prev).abs() / step);
            prev = cur;
        }
        worst * self.gamma
    }
}

/// Scale labels: `(i, h)` with `i = 0` forcing `h = -1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScaleIndex {
    pub i: u8,
    pub h: i32,
}

impl ScaleIndex {
    pub fn new(i: u8, h: i32) -> Result<Self, MultiscaleError> {
        if i == 0 && h != -1 {
            return Err(MultiscaleError::LabelInconsistency(format!(
                "type 0 forces scale -1, got {h}"
            )));
        }
        if i > 1 {
            return Err(MultiscaleError::LabelInconsistency(format!(
                "type label must be 0 or 1, got {i}"
            )));
        }
        Ok(Self { i, h })
    }
}

/// Propagator entry of the multiscale decomposition.
#[allow(clippy::too_many_arguments)]
pub fn propagator(
    spec: &EquationSpec,
    system: &BlockSystem,
    chi: &ScaleFunctions,
    nu: &ModeVector,
    s: Sign,
    nup: &ModeVector,
    sp: Sign,
    scale: ScaleIndex,
) -> Result<Complex64, MultiscaleError> {
    let delta = spec.eigenvalue(nu, system.eps)?;
    if scale.i == 0 {
        if nu != nup || s != sp {
            return Ok(Complex64::new(0.0, 0.0));
        }
        return Ok(Complex64::new(chi.chi_bar0(delta) / delta, 0.0));
    }
    // i = 1: block propagator
    let deltap = spec.eigenvalue(nup, system.eps)?;
    let cut = chi.chi_bar1(delta) * chi.chi_bar1(deltap);
    if cut == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let Some(block) = system.block_of(nu) else {
        return Ok(Complex64::new(0.0, 0.0));
    };
    let (Some(row), Some(col)) = (block.entry_index(nu, s), block.entry_index(nup, sp)) else {
        return Ok(Complex64::new(0.0, 0.0));
    };
    let weight = chi.chi_h(scale.h, block.x);
    if weight == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let Some(inv) = &block.inverse else {
        return Ok(Complex64::new(0.0, 0.0));
    };
    Ok(inv[(row, col)] * weight * cut)
}

/// Sums the propagators over `(i, h)` for a block entry; equals the dense
/// block inverse entry when the decomposition is exact.
pub fn propagator_scale_sum(
    spec: &EquationSpec,
    system: &BlockSystem,
    chi: &ScaleFunctions,
    nu: &ModeVector,
    s: Sign,
    nup: &ModeVector,
    sp: Sign,
) -> Result<Complex64, MultiscaleError> {
    let mut acc = propagator(
        spec,
        system,
        chi,
        nu,
        s,
        nup,
        sp,
        ScaleIndex::new(0, -1)?,
    )?;
    let x = system.block_of(nu).map(|b| b.x).unwrap_or(0.0);
    for h in chi.active_scales(x) {
        acc += propagator(spec, system, chi, nu, s, nup, sp, ScaleIndex { i: 1, h })?;
    }
    Ok(acc)
}

/// Admissibility at `(eps, M)`: small divisors bounded below on every block
/// and eigenvalues away from the `gamma_bar` threshold on the whole shell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub witness: Option<(ModeVector, String)>,
}

pub fn admissible(
    spec: &EquationSpec,
    system: &BlockSystem,
    radius: i64,
) -> Result<AdmissibilityReport, MultiscaleError> {
    let params = system.params;
    for block in &system.blocks {
        let bound = params.gamma / (block.p as f64).powf(params.tau);
        if block.x < bound {
            return Ok(AdmissibilityReport {
                admissible: false,
                witness: Some((
                    block.modes[0].clone(),
                    format!("x = {} < gamma/p^tau = {}", block.x, bound),
                )),
            });
        }
    }
    for nu in enumerate_shell(spec, radius) {
        if nu.is_zero() || spec.in_q(&nu) {
            continue;
        }
        // only modes that are near-resonant somewhere in the window matter
        if spec.min_abs_delta(&nu) >= 0.5 {
            continue;
        }
        let delta = spec.eigenvalue(&nu, system.eps)?;
        let dist = (delta.abs() - params.gamma_bar).abs();
        let bound = params.gamma / (nu.size() as f64).powf(params.tau1);
        if dist < bound {
            return Ok(AdmissibilityReport {
                admissible: false,
                witness: Some((
                    nu.clone(),
                    format!("||delta|-gamma_bar| = {dist} < {bound}"),
                )),
            });
        }
    }
    Ok(AdmissibilityReport {
        admissible: true,
        witness: None,
    })
}

/// Selects a threshold `gamma_bar` from a grid by rejection against the
/// Diophantine-type condition `||delta_nu(0)| - gamma_bar| >= gb0 |nu|^{-tb0}`
/// over the shell.
pub fn select_gamma_bar(
    spec: &EquationSpec,
    radius: i64,
    gb0: f64,
    tb0: f64,
    grid: usize,
) -> Option<f64> {
    let shell: Vec<ModeVector> = enumerate_shell(spec, radius)
        .into_iter()
        .filter(|nu| !nu.is_zero() && !spec.in_q(nu))
        .collect();
    for i in (1..grid).rev() {
        let gb = 0.25 * i as f64 / grid as f64;
        let ok = shell.iter().all(|nu| {
            let d0 = spec.delta0(nu).abs();
            (d0 - gb).abs() >= gb0 / (nu.size() as f64).powf(tb0)
        });
        if ok {
            return Some(gb);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_hermitian(rng: &mut StdRng, d: usize) -> DMatrix<Complex64> {
        let mut a = DMatrix::<Complex64>::zeros(d, d);
        for i in 0..d {
            a[(i, i)] = Complex64::new(rng.gen_range(-1.0..1.0), 0.0);
            for j in (i + 1)..d {
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                a[(i, j)] = z;
                a[(j, i)] = z.conj();
            }
        }
        a
    }

    #[test]
    fn norms_on_identity() {
        let a = DMatrix::<Complex64>::identity(2, 2);
        let (max, norm, spec) = matrix_norms(&a).unwrap();
        assert_eq!((max, norm, spec), (1.0, 1.0, 1.0));
    }

    #[test]
    fn norms_on_diag() {
        let mut a = DMatrix::<Complex64>::zeros(2, 2);
        a[(0, 0)] = Complex64::new(1.0, 0.0);
        a[(1, 1)] = Complex64::new(-3.0, 0.0);
        let (max, norm, spec) = matrix_norms(&a).unwrap();
        assert_eq!(max, 3.0);
        assert!((norm - 5.0f64.sqrt()).abs() < 1e-12);
        assert!((spec - 3.0).abs() < 1e-10);
    }

    #[test]
    fn norm_sandwich_inequalities() {
        // ||A||/sqrt(d) <= |A|_inf <= sqrt(d) ||A|| and the eigenvalue
        // sandwich max|l|/sqrt(d) <= ||A|| <= max|l|.
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let d = rng.gen_range(2..=6);
            let a = random_hermitian(&mut rng, d);
            let (max_entry, norm, spectral) = matrix_norms(&a).unwrap();
            let sd = (d as f64).sqrt();
            assert!(norm / sd <= max_entry + 1e-12);
            assert!(max_entry <= sd * norm + 1e-12);
            assert!(spectral / sd <= norm + 1e-12);
            assert!(norm <= spectral + 1e-12);
        }
    }

    #[test]
    fn lidskii_bound_holds() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let d = rng.gen_range(2..=10);
            let a = random_hermitian(&mut rng, d);
            let b = random_hermitian(&mut rng, d);
            let la = hermitian_eigenvalues(&a);
            let lab = hermitian_eigenvalues(&(a.clone() + b.clone()));
            let lb = hermitian_eigenvalues(&b);
            let budget: f64 = lb.iter().map(|l| l.abs()).sum();
            for (x, y) in la.iter().zip(lab.iter()) {
                assert!((x - y).abs() <= budget + 1e-9);
            }
        }
    }

    #[test]
    fn spectral_norm_below_max_row_sum() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..200 {
            let d = rng.gen_range(2..=8);
            let a = random_hermitian(&mut rng, d);
            let (_, _, spectral) = matrix_norms(&a).unwrap();
            let row_sum = (0..d)
                .map(|i| (0..d).map(|j| a[(i, j)].norm()).sum::<f64>())
                .fold(0.0, f64::max);
            assert!(spectral <= row_sum + 1e-10);
        }
    }

    #[test]
    fn partition_of_unity() {
        let chi = ScaleFunctions::new(1e-3, 0.2).unwrap();
        for k in 1..=1000 {
            let x = 1e-6 + (k as f64) * 3e-4;
            let sum: f64 = chi
                .active_scales(x)
                .into_iter()
                .map(|h| chi.chi_h(h, x))
                .sum();
            assert!((sum - 1.0).abs() < 1e-12, "x = {x}: sum = {sum}");
        }
    }

    #[test]
    fn chi_h_support_band() {
        let gamma = 1e-3;
        let chi = ScaleFunctions::new(gamma, 0.2).unwrap();
        for h in 0..10 {
            // inside the band the function may be nonzero; outside it is 0
            let lo = 2f64.powi(-h - 1) * gamma;
            let hi = 2f64.powi(-h + 1) * gamma;
            assert_eq!(chi.chi_h(h, hi * 1.01), 0.0);
            assert_eq!(chi.chi_h(h, lo * 0.99), 0.0);
            let mid = 2f64.powi(-h) * gamma;
            assert!(chi.chi_h(h, mid) > 0.0);
        }
    }

    #[test]
    fn chi_bar_product_vanishes() {
        let chi = ScaleFunctions::new(1e-3, 0.2).unwrap();
        for x in [-0.3, -0.1, 0.0, 0.15, 0.2, 0.25] {
            assert_eq!(chi.chi_bar0(x) * chi.chi_bar1(x), 0.0);
        }
    }

    #[test]
    fn chi_steepness_bounded() {
        let chi = ScaleFunctions::new(1e-3, 0.2).unwrap();
        let gamma_big = chi.measured_steepness(100000);
        assert!(gamma_big < 4.0, "steepness {gamma_big}");
    }

    fn nls_fixture() -> (EquationSpec, Counterterm, MultiscaleParams) {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.2);
        let params = MultiscaleParams {
            gamma: 1e-3,
            gamma_bar: 0.2,
            tau: 2.0,
            tau1: 2.0,
            xi: 2.0,
        };
        (spec, Counterterm::zero(), params)
    }

    #[test]
    fn diagonal_block_small_divisor() {
        let (spec, m, params) = nls_fixture();
        // eps = 0.1: mode (2,(2,0)) has delta = -0.3 + 0.2 = -0.1
        let system = build_blocks(&spec, &m, 0.1, 12, 0.25, 1.0, params).unwrap();
        let nu = ModeVector::new(2, vec![2, 0]);
        let x = small_divisor(&spec, &system, &nu).unwrap();
        let delta: f64 = 0.1;
        let p = nu.size() as f64;
        assert!((x - delta / p.powf(params.xi)).abs() < 1e-12);
    }

    #[test]
    fn small_divisor_rejects_large_mode() {
        let (spec, m, params) = nls_fixture();
        let system = build_blocks(&spec, &m, 0.0, 8, 0.25, 1.0, params).unwrap();
        let nu = ModeVector::new(0, vec![1, 0]); // delta = 1.3
        assert!(matches!(
            small_divisor(&spec, &system, &nu),
            Err(MultiscaleError::ModeNotSmall(_))
        ));
    }

    #[test]
    fn singular_block_gives_zero_divisor() {
        let (spec, _, params) = nls_fixture();
        // make the 2x2 sign-doubled block singular by a counterterm that
        // shifts one eigenvalue to exactly -delta
        let nu = ModeVector::new(2, vec![2, 0]);
        let eps = 0.1;
        let delta = spec.eigenvalue(&nu, eps).unwrap();
        let mut m = Counterterm::zero();
        m.set_symmetric(&nu, Sign::Plus, &nu, Sign::Plus, Complex64::new(-delta, 0.0));
        let system = build_blocks(&spec, &m, eps, 12, 0.25, 1.0, params).unwrap();
        let x = small_divisor(&spec, &system, &nu).unwrap();
        assert_eq!(x, 0.0);
    }

    #[test]
    fn block_constancy_over_closure() {
        // all modes of one block report the same x
        let (spec, _, params) = nls_fixture();
        let mut m = Counterterm::zero();
        let a = ModeVector::new(2, vec![2, 0]);
        let b = ModeVector::new(2, vec![0, 2]);
        m.set_symmetric(&a, Sign::Plus, &b, Sign::Plus, Complex64::new(0.01, 0.0));
        let system = build_blocks(&spec, &m, 0.1, 12, 0.25, 6.0, params).unwrap();
        let xa = small_divisor(&spec, &system, &a).unwrap();
        let xb = small_divisor(&spec, &system, &b).unwrap();
        assert_eq!(xa, xb);
        let block = system.block_of(&a).unwrap();
        assert!(block.modes.contains(&b));
    }

    #[test]
    fn propagator_saturated_step_is_reciprocal() {
        let (spec, m, params) = nls_fixture();
        let system = build_blocks(&spec, &m, 0.0, 8, 0.25, 1.0, params).unwrap();
        let chi = ScaleFunctions::new(params.gamma, params.gamma_bar).unwrap();
        // delta = -0.3 at eps = 0: |delta| >= 2 gamma_bar region? 0.3 >= 0.2
        let nu = ModeVector::new(2, vec![2, 0]);
        let g = propagator(
            &spec,
            &system,
            &chi,
            &nu,
            Sign::Plus,
            &nu,
            Sign::Plus,
            ScaleIndex::new(0, -1).unwrap(),
        )
        .unwrap();
        let delta = spec.eigenvalue(&nu, 0.0).unwrap();
        assert!((g.re - 1.0 / delta).abs() < 1e-12);
        assert_eq!(g.im, 0.0);
    }

    #[test]
    fn propagator_sum_matches_dense_inverse() {
        let (spec, _, params) = nls_fixture();
        let mut m = Counterterm::zero();
        let a = ModeVector::new(2, vec![2, 0]);
        let b = ModeVector::new(2, vec![0, 2]);
        m.set_symmetric(&a, Sign::Plus, &b, Sign::Plus, Complex64::new(0.02, 0.01));
        let system = build_blocks(&spec, &m, 0.1, 12, 0.25, 6.0, params).unwrap();
        let chi = ScaleFunctions::new(params.gamma, params.gamma_bar).unwrap();
        let block = system.block_of(&a).unwrap();
        let inv = block.inverse.as_ref().unwrap();
        for (i, nu) in block.modes.iter().enumerate() {
            for s in Sign::all() {
                for (j, nup) in block.modes.iter().enumerate() {
                    for sp in Sign::all() {
                        let total =
                            propagator_scale_sum(&spec, &system, &chi, nu, s, nup, sp).unwrap();
                        let expect = inv[(2 * i + s.index(), 2 * j + sp.index())];
                        assert!(
                            (total - expect).norm() < 1e-10,
                            "entry ({nu},{s:?}),({nup},{sp:?})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn propagators_self_adjoint() {
        let (spec, _, params) = nls_fixture();
        let mut m = Counterterm::zero();
        let a = ModeVector::new(2, vec![2, 0]);
        let b = ModeVector::new(2, vec![0, 2]);
        m.set_symmetric(&a, Sign::Plus, &b, Sign::Minus, Complex64::new(0.015, -0.02));
        let system = build_blocks(&spec, &m, 0.1, 12, 0.25, 6.0, params).unwrap();
        let chi = ScaleFunctions::new(params.gamma, params.gamma_bar).unwrap();
        let block = system.block_of(&a).unwrap();
        let x = block.x;
        for h in chi.active_scales(x) {
            for (nu, s) in [(&a, Sign::Plus), (&a, Sign::Minus), (&b, Sign::Plus)] {
                for (nup, sp) in [(&b, Sign::Plus), (&b, Sign::Minus), (&a, Sign::Plus)] {
                    let g1 = propagator(
                        &spec,
                        &system,
                        &chi,
                        nu,
                        s,
                        nup,
                        sp,
                        ScaleIndex { i: 1, h },
                    )
                    .unwrap();
                    let g2 = propagator(
                        &spec,
                        &system,
                        &chi,
                        nup,
                        sp,
                        nu,
                        s,
                        ScaleIndex { i: 1, h },
                    )
                    .unwrap();
                    assert!((g1 - g2.conj()).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn admissibility_monotone_in_gamma() {
        let (spec, m, mut params) = nls_fixture();
        let mut admissible_at = vec![];
        for &g in &[3e-3, 1e-3, 3e-4] {
            params.gamma = g;
            let system = build_blocks(&spec, &m, 0.03, 12, 0.25, 1.0, params).unwrap();
            let rep = admissible(&spec, &system, 12).unwrap();
            admissible_at.push(rep.admissible);
        }
        // once admissible, smaller gamma stays admissible
        for w in admissible_at.windows(2) {
            assert!(!w[0] || w[1]);
        }
    }

    #[test]
    fn boundary_eps_is_excluded() {
        let (spec, m, params) = nls_fixture();
        // tune eps so |delta| = gamma_bar exactly for mode (2,(2,0)):
        // -0.3 + 2 eps = -0.2  =>  eps = 0.05
        let system = build_blocks(&spec, &m, 0.05, 12, 0.25, 1.0, params).unwrap();
        let rep = admissible(&spec, &system, 12).unwrap();
        assert!(!rep.admissible);
        assert!(rep.witness.is_some());
    }

    #[test]
    fn empty_shell_vacuously_admissible() {
        let (spec, m, params) = nls_fixture();
        // radius 1 shell has no near-resonant P modes
        let system = build_blocks(&spec, &m, 0.01, 1, 0.25, 1.0, params).unwrap();
        let rep = admissible(&spec, &system, 1).unwrap();
        assert!(rep.admissible);
    }

    #[test]
    fn gamma_bar_selection() {
        let (spec, _, _) = nls_fixture();
        let gb = select_gamma_bar(&spec, 12, 0.01, 2.0, 64).unwrap();
        assert!(gb > 0.0 && gb < 0.25);
        for nu in enumerate_shell(&spec, 12) {
            if nu.is_zero() || spec.in_q(&nu) {
                continue;
            }
            let d0 = spec.delta0(&nu).abs();
            assert!((d0 - gb).abs() >= 0.01 / (nu.size() as f64).powf(2.0));
        }
    }

    #[test]
    fn eigenvalue_derivative_bound() {
        // |d lambda / d eps| <= ||dA/d eps||_2 + tolerance on smooth stretches
        let (spec, _, params) = nls_fixture();
        let mut m = Counterterm::zero();
        let a = ModeVector::new(2, vec![2, 0]);
        let b = ModeVector::new(2, vec![0, 2]);
        m.set_symmetric(&a, Sign::Plus, &b, Sign::Plus, Complex64::new(0.02, 0.0));
        let eps = 0.1;
        let de = 1e-6;
        let s0 = build_blocks(&spec, &m, eps, 12, 0.25, 6.0, params).unwrap();
        let s1 = build_blocks(&spec, &m, eps + de, 12, 0.25, 6.0, params).unwrap();
        let b0 = s0.block_of(&a).unwrap();
        let b1 = s1.block_of(&a).unwrap();
        assert_eq!(b0.modes, b1.modes);
        let l0 = hermitian_eigenvalues(&b0.matrix);
        let l1 = hermitian_eigenvalues(&b1.matrix);
        // dA/deps = diag(slope): spectral norm = max slope
        let slope_norm = b0
            .modes
            .iter()
            .map(|nu| spec.delta_slope(nu).abs())
            .fold(0.0, f64::max);
        for (x, y) in l0.iter().zip(l1.iter()) {
            let deriv = (y - x).abs() / de;
            assert!(deriv <= slope_norm + 1e-6, "deriv {deriv} vs {slope_norm}");
        }
    }
}

//! Exact arithmetic in the ring generated over the rationals by square roots
//! of distinct primes, together with the parity-based invertibility machinery
//! used for the bifurcation Jacobian blocks.
//!
//! An element is stored as a dense vector of rational coefficients over the
//! basis `{ prod_{i in I} sqrt(p_i) : I subset of {1..k} }`. Zero testing is
//! coefficient-wise; this is exactly the linear independence of the basis
//! over the rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlgebraError {
    #[error("prime lists conflict: {0} is not prime")]
    NotPrime(u64),
    #[error("dimension-cap-exceeded: matrix size {0} above cap {1}")]
    DimensionCap(usize, usize),
    #[error("precondition-violated: {0}")]
    PrecondViolated(String),
    #[error("singular matrix")]
    Singular,
    #[error("negative radicand")]
    NegativeRadicand,
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2u64;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Exact element of `Q[sqrt(p_1), ..., sqrt(p_k)]`.
#[derive(Clone, PartialEq, Eq)]
pub struct AlgebraicNumber {
    /// Sorted list of distinct primes adjoined as square roots.
    primes: Vec<u64>,
    /// Coefficient of `prod_{i in I} sqrt(p_i)` at index `I` (bit mask).
    coeffs: Vec<BigRational>,
}

impl fmt::Debug for AlgebraicNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for AlgebraicNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (mask, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if mask == 0 {
                write!(f, "{}", c)?;
            } else {
                let p: u64 = self
                    .primes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, &p)| p)
                    .product();
                write!(f, "{}*sqrt({})", c, p)?;
            }
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

impl AlgebraicNumber {
    pub fn zero() -> Self {
        Self {
            primes: vec![],
            coeffs: vec![BigRational::zero()],
        }
    }

    pub fn one() -> Self {
        Self::from_rational(BigRational::one())
    }

    pub fn from_rational(q: BigRational) -> Self {
        Self {
            primes: vec![],
            coeffs: vec![q],
        }
    }

    pub fn from_i64(n: i64) -> Self {
        Self::from_rational(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        Self::from_rational(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// `sqrt(p)` for a prime `p`.
    pub fn sqrt_prime(p: u64) -> Result<Self, AlgebraError> {
        if !is_prime(p) {
            return Err(AlgebraError::NotPrime(p));
        }
        Ok(Self {
            primes: vec![p],
            coeffs: vec![BigRational::zero(), BigRational::one()],
        })
    }

    /// Exact square root of a nonnegative rational, as `r * sqrt(squarefree)`.
    pub fn sqrt_rational(q: &BigRational) -> Result<Self, AlgebraError> {
        if q.is_negative() {
            return Err(AlgebraError::NegativeRadicand);
        }
        if q.is_zero() {
            return Ok(Self::zero());
        }
        // sqrt(a/b) = sqrt(a*b)/b
        let n = q.numer() * q.denom();
        let (square_root, squarefree) = split_square(&n);
        let coeff = BigRational::new(square_root, q.denom().clone());
        if squarefree.is_one() {
            return Ok(Self::from_rational(coeff));
        }
        let primes = factor_squarefree(&squarefree);
        let k = primes.len();
        let mut coeffs = vec![BigRational::zero(); 1 << k];
        coeffs[(1 << k) - 1] = coeff;
        Ok(Self { primes, coeffs })
    }

    pub fn primes(&self) -> &[u64] {
        &self.primes
    }

    /// Rational coefficient of the basis element indexed by the given subset
    /// of `self.primes()` (bit mask).
    pub fn coeff(&self, mask: usize) -> &BigRational {
        &self.coeffs[mask]
    }

    pub fn rational_part(&self) -> &BigRational {
        &self.coeffs[0]
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    pub fn is_rational(&self) -> bool {
        self.coeffs.iter().skip(1).all(|c| c.is_zero())
    }

    /// Drops primes whose every coefficient is zero.
    fn compress(&self) -> Self {
        let k = self.primes.len();
        let mut used = 0usize;
        for (mask, c) in self.coeffs.iter().enumerate() {
            if !c.is_zero() {
                used |= mask;
            }
        }
        if used == (1 << k) - 1 && k > 0 {
            return self.clone();
        }
        let kept: Vec<usize> = (0..k).filter(|i| used >> i & 1 == 1).collect();
        let primes: Vec<u64> = kept.iter().map(|&i| self.primes[i]).collect();
        let mut coeffs = vec![BigRational::zero(); 1 << primes.len()];
        for (mask, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let mut new_mask = 0usize;
            for (j, &i) in kept.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    new_mask |= 1 << j;
                }
            }
            coeffs[new_mask] = c.clone();
        }
        Self { primes, coeffs }
    }

    /// Rewrites both operands over the union of their prime lists.
    fn promote(a: &Self, b: &Self) -> (Self, Self) {
        if a.primes == b.primes {
            return (a.clone(), b.clone());
        }
        let mut primes: Vec<u64> = a.primes.iter().chain(b.primes.iter()).copied().collect();
        primes.sort_unstable();
        primes.dedup();
        (a.embed(&primes), b.embed(&primes))
    }

    fn embed(&self, primes: &[u64]) -> Self {
        let mut coeffs = vec![BigRational::zero(); 1 << primes.len()];
        for (mask, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let mut new_mask = 0usize;
            for (i, &p) in self.primes.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    let j = primes.iter().position(|&q| q == p).expect("superset");
                    new_mask |= 1 << j;
                }
            }
            coeffs[new_mask] = c.clone();
        }
        Self {
            primes: primes.to_vec(),
            coeffs,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let (mut a, b) = Self::promote(self, other);
        for (ca, cb) in a.coeffs.iter_mut().zip(b.coeffs.iter()) {
            *ca += cb;
        }
        a.compress()
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        let mut r = self.clone();
        for c in r.coeffs.iter_mut() {
            *c = -c.clone();
        }
        r
    }

    pub fn mul(&self, other: &Self) -> Self {
        let (a, b) = Self::promote(self, other);
        let k = a.primes.len();
        let mut coeffs = vec![BigRational::zero(); 1 << k];
        for (ma, ca) in a.coeffs.iter().enumerate() {
            if ca.is_zero() {
                continue;
            }
            for (mb, cb) in b.coeffs.iter().enumerate() {
                if cb.is_zero() {
                    continue;
                }
                // sqrt(P_I) * sqrt(P_J) = P_{I & J} * sqrt(P_{I ^ J})
                let common = ma & mb;
                let mut factor = BigInt::one();
                for i in 0..k {
                    if common >> i & 1 == 1 {
                        factor *= BigInt::from(a.primes[i]);
                    }
                }
                coeffs[ma ^ mb] += ca * cb * BigRational::from_integer(factor);
            }
        }
        Self {
            primes: a.primes,
            coeffs,
        }
        .compress()
    }

    pub fn scale(&self, q: &BigRational) -> Self {
        let mut r = self.clone();
        for c in r.coeffs.iter_mut() {
            *c *= q;
        }
        r.compress()
    }

    /// Image under the automorphism flipping `sqrt(p_i)` for `i` in `flips`.
    pub fn galois_image(&self, flips: usize) -> Self {
        let mut r = self.clone();
        for (mask, c) in r.coeffs.iter_mut().enumerate() {
            if (mask & flips).count_ones() % 2 == 1 {
                *c = -c.clone();
            }
        }
        r
    }

    /// All `2^k` Galois images of this element.
    pub fn galois_orbit(&self) -> Vec<Self> {
        (0..1usize << self.primes.len())
            .map(|flips| self.galois_image(flips))
            .collect()
    }

    /// Exact multiplicative inverse via the Galois norm.
    pub fn inverse(&self) -> Result<Self, AlgebraError> {
        if self.is_zero() {
            return Err(AlgebraError::Singular);
        }
        let k = self.primes.len();
        let mut cofactor = Self::one();
        for flips in 1..1usize << k {
            cofactor = cofactor.mul(&self.galois_image(flips));
        }
        let norm = self.mul(&cofactor);
        debug_assert!(norm.is_rational(), "Galois norm must be rational");
        let n = norm.rational_part().clone();
        if n.is_zero() {
            return Err(AlgebraError::Singular);
        }
        Ok(cofactor.scale(&n.recip()))
    }

    pub fn to_f64(&self) -> f64 {
        let mut acc = 0.0;
        for (mask, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let mut root = 1.0f64;
            for (i, &p) in self.primes.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    root *= (p as f64).sqrt();
                }
            }
            acc += rational_to_f64(c) * root;
        }
        acc
    }

    /// High-precision evaluation: returns `(value, error_bound)` where the
    /// value is a rational approximation with each `sqrt` computed to
    /// `digits` decimal digits.
    pub fn eval_precise(&self, digits: u32) -> (BigRational, BigRational) {
        let scale = BigInt::from(10u32).pow(digits);
        let scale_r = BigRational::from_integer(scale.clone());
        let mut value = BigRational::zero();
        let mut err = BigRational::zero();
        for (mask, c) in self.coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let mut radicand = BigInt::one();
            for (i, &p) in self.primes.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    radicand *= BigInt::from(p);
                }
            }
            // floor(sqrt(radicand * 10^(2*digits))) / 10^digits
            let approx = (radicand * &scale * &scale).sqrt();
            value += c * BigRational::new(approx, scale.clone());
            err += c.abs() / &scale_r;
        }
        (value, err)
    }
}

pub fn rational_to_f64(q: &BigRational) -> f64 {
    q.numer().to_f64().unwrap_or(f64::NAN) / q.denom().to_f64().unwrap_or(f64::NAN)
}

/// Splits `n > 0` as `s^2 * f` with `f` squarefree; returns `(s, f)`.
fn split_square(n: &BigInt) -> (BigInt, BigInt) {
    let mut remaining = n.clone();
    let mut square_root = BigInt::one();
    let mut squarefree = BigInt::one();
    let mut d = BigInt::from(2u32);
    while &d * &d <= remaining {
        let mut count = 0u32;
        while (&remaining % &d).is_zero() {
            remaining /= &d;
            count += 1;
        }
        if count > 0 {
            square_root *= d.pow(count / 2);
            if count % 2 == 1 {
                squarefree *= &d;
            }
        }
        d += 1;
    }
    if remaining > BigInt::one() {
        squarefree *= remaining;
    }
    (square_root, squarefree)
}

fn factor_squarefree(n: &BigInt) -> Vec<u64> {
    let mut out = vec![];
    let mut remaining = n.clone();
    let mut d = BigInt::from(2u32);
    while &d * &d <= remaining {
        if (&remaining % &d).is_zero() {
            out.push(d.to_u64().expect("small prime"));
            remaining /= &d;
        }
        d += 1;
    }
    if remaining > BigInt::one() {
        out.push(remaining.to_u64().expect("small prime"));
    }
    out.sort_unstable();
    out
}

/// Dense square matrix over the algebraic ring.
#[derive(Clone, Debug)]
pub struct ExactMatrix {
    pub n: usize,
    entries: Vec<AlgebraicNumber>,
}

pub const DEFAULT_DIMENSION_CAP: usize = 16;

impl ExactMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: vec![AlgebraicNumber::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, AlgebraicNumber::one());
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<AlgebraicNumber>>) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "square matrix required");
        Self {
            n,
            entries: rows.into_iter().flatten().collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> &AlgebraicNumber {
        &self.entries[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: AlgebraicNumber) {
        self.entries[i * self.n + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j).clone());
            }
        }
        t
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                let mut acc = AlgebraicNumber::zero();
                for l in 0..self.n {
                    acc = acc.add(&self.get(i, l).mul(other.get(l, j)));
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn entrywise_map(&self, f: impl Fn(&AlgebraicNumber) -> AlgebraicNumber) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(f).collect(),
        }
    }

    /// Exact determinant by Gaussian elimination over the field, with a
    /// dimension cap matching the small-block regime of the Jacobian.
    pub fn det_exact(&self, cap: usize) -> Result<AlgebraicNumber, AlgebraError> {
        if self.n > cap {
            return Err(AlgebraError::DimensionCap(self.n, cap));
        }
        let mut m = self.clone();
        let mut det = AlgebraicNumber::one();
        for col in 0..m.n {
            let pivot_row = (col..m.n).find(|&r| !m.get(r, col).is_zero());
            let pivot_row = match pivot_row {
                Some(r) => r,
                None => return Ok(AlgebraicNumber::zero()),
            };
            if pivot_row != col {
                for j in 0..m.n {
                    let a = m.get(col, j).clone();
                    let b = m.get(pivot_row, j).clone();
                    m.set(col, j, b);
                    m.set(pivot_row, j, a);
                }
                det = det.neg();
            }
            let pivot = m.get(col, col).clone();
            det = det.mul(&pivot);
            let pivot_inv = pivot.inverse()?;
            for row in (col + 1)..m.n {
                if m.get(row, col).is_zero() {
                    continue;
                }
                let factor = m.get(row, col).mul(&pivot_inv);
                for j in col..m.n {
                    let v = m.get(row, j).sub(&factor.mul(m.get(col, j)));
                    m.set(row, j, v);
                }
            }
        }
        Ok(det)
    }

    /// Exact inverse via Gauss-Jordan elimination.
    pub fn invert(&self) -> Result<Self, AlgebraError> {
        let n = self.n;
        let mut m = self.clone();
        let mut inv = Self::identity(n);
        for col in 0..n {
            let pivot_row = (col..n).find(|&r| !m.get(r, col).is_zero());
            let pivot_row = pivot_row.ok_or(AlgebraError::Singular)?;
            if pivot_row != col {
                for j in 0..n {
                    let a = m.get(col, j).clone();
                    let b = m.get(pivot_row, j).clone();
                    m.set(col, j, b);
                    m.set(pivot_row, j, a);
                    let a = inv.get(col, j).clone();
                    let b = inv.get(pivot_row, j).clone();
                    inv.set(col, j, b);
                    inv.set(pivot_row, j, a);
                }
            }
            let pivot_inv = m.get(col, col).inverse()?;
            for j in 0..n {
                let v = m.get(col, j).mul(&pivot_inv);
                m.set(col, j, v);
                let v = inv.get(col, j).mul(&pivot_inv);
                inv.set(col, j, v);
            }
            for row in 0..n {
                if row == col || m.get(row, col).is_zero() {
                    continue;
                }
                let factor = m.get(row, col).clone();
                for j in 0..n {
                    let v = m.get(row, j).sub(&factor.mul(m.get(col, j)));
                    m.set(row, j, v);
                    let v = inv.get(row, j).sub(&factor.mul(inv.get(col, j)));
                    inv.set(row, j, v);
                }
            }
        }
        Ok(inv)
    }
}

fn is_even_integer(q: &BigRational) -> bool {
    q.is_integer() && (q.numer() % BigInt::from(2)).is_zero()
}

fn is_odd_integer(q: &BigRational) -> bool {
    q.is_integer() && !(q.numer() % BigInt::from(2)).is_zero()
}

/// An element lies in `2a` when every basis coefficient is an even integer.
pub fn in_two_a(x: &AlgebraicNumber) -> bool {
    (0..x.coeffs.len()).all(|mask| is_even_integer(x.coeff(mask)))
}

/// Checks the parity normal form (odd integer diagonal plus entries in `2a`)
/// and certifies invertibility: the determinant is then an odd integer plus
/// an element of `2a`, which is nonzero by linear independence of the basis.
pub fn parity_invertible(a: &ExactMatrix, cap: usize) -> Result<bool, AlgebraError> {
    for i in 0..a.n {
        for j in 0..a.n {
            let e = a.get(i, j);
            if i == j {
                if !is_odd_integer(e.rational_part()) {
                    return Err(AlgebraError::PrecondViolated(format!(
                        "diagonal entry ({i},{i}) has rational part {} (odd integer required)",
                        e.rational_part()
                    )));
                }
                for mask in 1..e.coeffs.len() {
                    if !is_even_integer(e.coeff(mask)) {
                        return Err(AlgebraError::PrecondViolated(format!(
                            "diagonal entry ({i},{i}) has a non-even irrational coefficient"
                        )));
                    }
                }
            } else if !in_two_a(e) {
                return Err(AlgebraError::PrecondViolated(format!(
                    "off-diagonal entry ({i},{j}) not in 2a"
                )));
            }
        }
    }
    let det = a.det_exact(cap)?;
    let odd_unit = is_odd_integer(det.rational_part());
    let even_rest = (1..det.coeffs.len()).all(|mask| is_even_integer(det.coeff(mask)));
    Ok(odd_unit && even_rest)
}

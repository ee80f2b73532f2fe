//! Equivalence classes of near-resonant modes on truncated lattices, resonant
//! sets and their closures, and empirical verification of the separation
//! properties that the multiscale analysis relies on.

use crate::lattice::{enumerate_shell, EquationSpec, LatticeError, ModeVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("not-resonant: {0}")]
    NotResonant(String),
    #[error("gamma-bar {0} invalid: the admissible set requires 0 < gamma-bar < 1/4")]
    InvalidGammaBar(f64),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(len: usize) -> Self {
        Self {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, x: usize, y: usize) {
        let (mut xr, mut yr) = (self.find(x), self.find(y));
        if xr == yr {
            return;
        }
        if self.size[xr] < self.size[yr] {
            std::mem::swap(&mut xr, &mut yr);
        }
        self.parent[yr] = xr;
        self.size[xr] += self.size[yr];
    }
}

/// Chain-graph edge test: short lattice jump relative to the mode sizes.
pub fn chain_edge(a: &ModeVector, b: &ModeVector, beta: f64, c2: f64) -> bool {
    let dist = a.dist(b) as f64;
    dist <= c2 / 2.0 * ((a.size() + b.size()) as f64).powf(beta)
}

/// Partition of the near-resonant shell modes at a fixed eps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub eps: f64,
    pub radius: i64,
    pub beta: f64,
    pub c2: f64,
    /// Disjoint classes, each sorted; classes ordered by increasing
    /// `p_j = min |nu|`, ties by lexicographic least element.
    pub classes: Vec<Vec<ModeVector>>,
    /// Per-class minimum size `p_j`.
    pub p: Vec<i64>,
}

impl ClusterPartition {
    pub fn fingerprint(&self) -> Vec<Vec<ModeVector>> {
        self.classes.clone()
    }

    pub fn class_of(&self, nu: &ModeVector) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(nu))
    }
}

/// Modes of the truncated lattice that are near-resonant at `eps`
/// (`|delta_nu(eps)| < 1/2`), excluding Q modes and the origin. For
/// Dirichlet problems the canonical shell is expanded to the full sign
/// orbit: clusters are a geometric property of the full lattice, and mirror
/// modes couple through the counterterm blocks.
pub fn near_resonant_shell(
    spec: &EquationSpec,
    eps: f64,
    radius: i64,
) -> Result<Vec<ModeVector>, LatticeError> {
    let mut out = vec![];
    for nu in enumerate_shell(spec, radius) {
        if nu.is_zero() || spec.in_q(&nu) {
            continue;
        }
        if spec.eigenvalue(&nu, eps)?.abs() < 0.5 {
            match spec.boundary {
                crate::lattice::Boundary::Periodic => out.push(nu),
                crate::lattice::Boundary::Dirichlet => {
                    // all sign patterns, including modes with zero components
                    let nonzero: Vec<usize> =
                        (0..nu.dim()).filter(|&i| nu.m[i] != 0).collect();
                    for mask in 0..1usize << nonzero.len() {
                        let mut image = nu.clone();
                        for (bit, &i) in nonzero.iter().enumerate() {
                            if mask >> bit & 1 == 1 {
                                image.m[i] = -image.m[i];
                            }
                        }
                        out.push(image);
                    }
                }
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Connected components of the chain graph on the near-resonant shell.
pub fn partition(
    spec: &EquationSpec,
    eps: f64,
    radius: i64,
    beta: f64,
    c2: f64,
) -> Result<ClusterPartition, ClusterError> {
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0,1)");
    assert!(c2 > 0.0, "C2 must be positive");
    let modes = near_resonant_shell(spec, eps, radius)?;
    let mut uf = UnionFind::new(modes.len());
    for i in 0..modes.len() {
        for j in (i + 1)..modes.len() {
            if chain_edge(&modes[i], &modes[j], beta, c2) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<ModeVector>> = BTreeMap::new();
    for (i, nu) in modes.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(nu.clone());
    }
    let mut classes: Vec<Vec<ModeVector>> = groups
        .into_values()
        .map(|mut c| {
            c.sort();
            c
        })
        .collect();
    classes.sort_by_key(|c| {
        (
            c.iter().map(|nu| nu.size()).min().unwrap_or(i64::MAX),
            c.first().cloned(),
        )
    });
    let p = classes
        .iter()
        .map(|c| c.iter().map(|nu| nu.size()).min().unwrap_or(0))
        .collect();
    Ok(ClusterPartition {
        eps,
        radius,
        beta,
        c2,
        classes,
        p,
    })
}

/// A finite set of modes witnessed to lie in one class at one eps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResonantSet {
    pub modes: Vec<ModeVector>,
    pub witness_eps: f64,
}

impl ResonantSet {
    /// Verifies the defining invariant against a fresh partition.
    pub fn verify(
        &self,
        spec: &EquationSpec,
        radius: i64,
        beta: f64,
        c2: f64,
    ) -> Result<usize, ClusterError> {
        let part = partition(spec, self.witness_eps, radius, beta, c2)?;
        let classes: BTreeSet<usize> = self
            .modes
            .iter()
            .map(|nu| {
                part.class_of(nu).ok_or_else(|| {
                    ClusterError::NotResonant(format!(
                        "mode {nu} not near-resonant at witness eps"
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        if classes.len() != 1 {
            return Err(ClusterError::NotResonant(format!(
                "modes straddle {} classes at witness eps",
                classes.len()
            )));
        }
        Ok(classes.into_iter().next().unwrap())
    }
}

/// Mode-to-class lookup tables, one per grid eps.
pub fn class_maps(
    spec: &EquationSpec,
    eps_grid: &[f64],
    radius: i64,
    beta: f64,
    c2: f64,
) -> Result<Vec<(f64, BTreeMap<ModeVector, usize>)>, ClusterError> {
    let mut out = vec![];
    for &eps in eps_grid {
        let part = partition(spec, eps, radius, beta, c2)?;
        let mut map = BTreeMap::new();
        for (j, class) in part.classes.iter().enumerate() {
            for nu in class {
                map.insert(nu.clone(), j);
            }
        }
        out.push((eps, map));
    }
    Ok(out)
}

fn share_class(map: &BTreeMap<ModeVector, usize>, modes: &[ModeVector]) -> bool {
    let mut class = None;
    for nu in modes {
        match map.get(nu) {
            None => return false,
            Some(&j) => {
                if *class.get_or_insert(j) != j {
                    return false;
                }
            }
        }
    }
    true
}

/// Whether all given modes share one class at some grid eps; returns the
/// first witnessing eps.
pub fn resonant_together(
    spec: &EquationSpec,
    modes: &[ModeVector],
    eps_grid: &[f64],
    radius: i64,
    beta: f64,
    c2: f64,
) -> Result<Option<f64>, ClusterError> {
    for (eps, map) in class_maps(spec, eps_grid, radius, beta, c2)? {
        if share_class(&map, modes) {
            return Ok(Some(eps));
        }
    }
    Ok(None)
}

/// Closure pair: modes extending the set resonantly anywhere in the window,
/// and the near-diagonal part at a fixed eps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosureSets {
    /// Modes `nu` such that `set + {nu}` is still resonant at some grid eps.
    pub closure: Vec<ModeVector>,
    /// Members of `closure` with `|delta_nu(eps)| < gamma_bar`.
    pub near: Vec<ModeVector>,
}

#[allow(clippy::too_many_arguments)]
pub fn closure(
    spec: &EquationSpec,
    set: &ResonantSet,
    eps: f64,
    gamma_bar: f64,
    radius: i64,
    eps_grid: &[f64],
    beta: f64,
    c2: f64,
) -> Result<ClosureSets, ClusterError> {
    if gamma_bar <= 0.0 || gamma_bar >= 0.25 {
        return Err(ClusterError::InvalidGammaBar(gamma_bar));
    }
    set.verify(spec, radius, beta, c2)?;
    let maps = class_maps(spec, eps_grid, radius, beta, c2)?;
    let mut closure_modes = vec![];
    for nu in enumerate_shell(spec, radius) {
        if nu.is_zero() || spec.in_q(&nu) {
            continue;
        }
        let mut candidate = set.modes.clone();
        if !candidate.contains(&nu) {
            candidate.push(nu.clone());
        }
        if maps.iter().any(|(_, map)| share_class(map, &candidate)) {
            closure_modes.push(nu);
        }
    }
    let near = closure_modes
        .iter()
        .filter(|nu| {
            spec.eigenvalue(nu, eps)
                .map(|d| d.abs() < gamma_bar)
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    Ok(ClosureSets {
        closure: closure_modes,
        near,
    })
}

/// Separation checks against the cluster-size hypothesis, with the smallest
/// constants that make every inequality hold on the shell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparationReport {
    pub alpha: f64,
    pub beta: f64,
    pub c2: f64,
    /// Smallest C1 with `|class| <= C1 p^alpha` and `diam <= C1 C2 p^{alpha+beta}`.
    pub fitted_c1: f64,
    /// Smallest K with `max |nu| <= K p` per class (the hypothesis needs <= 2).
    pub fitted_size_ratio: f64,
    pub class_count: usize,
    pub violations: Vec<String>,
}

impl SeparationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn separation_report(part: &ClusterPartition, alpha: f64, c1_cap: f64) -> SeparationReport {
    let beta = part.beta;
    let c2 = part.c2;
    let mut fitted_c1: f64 = 1.0;
    let mut fitted_size_ratio: f64 = 1.0;
    let mut violations = vec![];
    for (j, class) in part.classes.iter().enumerate() {
        let p = part.p[j] as f64;
        if p == 0.0 {
            violations.push(format!("class {j} contains the origin"));
            continue;
        }
        let cardinality = class.len() as f64;
        fitted_c1 = fitted_c1.max(cardinality / p.powf(alpha));
        let diam = class
            .iter()
            .flat_map(|a| class.iter().map(move |b| a.dist(b)))
            .max()
            .unwrap_or(0) as f64;
        fitted_c1 = fitted_c1.max(diam / (c2 * p.powf(alpha + beta)));
        let max_size = class.iter().map(|nu| nu.size()).max().unwrap_or(0) as f64;
        fitted_size_ratio = fitted_size_ratio.max(max_size / p);
    }
    if fitted_size_ratio > 2.0 {
        violations.push(format!(
            "separation-violated: max|nu| <= 2 p_j fails (ratio {fitted_size_ratio:.3})"
        ));
    }
    if fitted_c1 > c1_cap {
        violations.push(format!(
            "separation-violated: required C1 = {fitted_c1:.3} exceeds cap {c1_cap}"
        ));
    }
    // Inter-class distances must dominate the chain threshold.
    for j in 0..part.classes.len() {
        for jp in (j + 1)..part.classes.len() {
            let dist = part.classes[j]
                .iter()
                .flat_map(|a| part.classes[jp].iter().map(move |b| a.dist(b)))
                .min()
                .unwrap_or(i64::MAX) as f64;
            let threshold = c2 / 2.0 * ((part.p[j] + part.p[jp]) as f64).powf(beta);
            if dist < threshold {
                violations.push(format!(
                    "separation-violated: classes {j},{jp} at distance {dist} below threshold {threshold:.3}"
                ));
            }
        }
    }
    SeparationReport {
        alpha,
        beta,
        c2,
        fitted_c1,
        fitted_size_ratio,
        class_count: part.classes.len(),
        violations,
    }
}

/// Maximal eps-grid intervals on which the partition fingerprint is constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityScan {
    /// `(eps_start, eps_end, class count)` per constancy interval.
    pub intervals: Vec<(f64, f64, usize)>,
    /// Analytic crossing points `delta_nu(eps) = ±1/2` inside the window.
    pub crossings: Vec<(ModeVector, f64)>,
}

pub fn stability_scan(
    spec: &EquationSpec,
    radius: i64,
    eps_grid: &[f64],
    beta: f64,
    c2: f64,
) -> Result<StabilityScan, ClusterError> {
    assert!(
        eps_grid.windows(2).all(|w| w[0] <= w[1]),
        "grid must be sorted"
    );
    let mut intervals: Vec<(f64, f64, usize)> = vec![];
    let mut last_fp: Option<Vec<Vec<ModeVector>>> = None;
    for &eps in eps_grid {
        let part = partition(spec, eps, radius, beta, c2)?;
        let fp = part.fingerprint();
        match (&last_fp, intervals.last_mut()) {
            (Some(prev), Some(interval)) if *prev == fp => {
                interval.1 = eps;
            }
            _ => {
                intervals.push((eps, eps, fp.len()));
            }
        }
        last_fp = Some(fp);
    }
    // Closed-form crossings of the half threshold (delta affine in eps).
    let mut crossings = vec![];
    for nu in enumerate_shell(spec, radius) {
        if nu.is_zero() || spec.in_q(&nu) {
            continue;
        }
        let d0 = spec.delta0(&nu);
        let slope = spec.delta_slope(&nu);
        if slope == 0.0 {
            continue;
        }
        for target in [0.5, -0.5] {
            let eps = (target - d0) / slope;
            if eps > 0.0 && eps < spec.eps_max {
                crossings.push((nu.clone(), eps));
            }
        }
    }
    crossings.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(StabilityScan {
        intervals,
        crossings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::EquationSpec;
    use std::collections::VecDeque;

    fn grid(spec: &EquationSpec, points: usize) -> Vec<f64> {
        (0..=points)
            .map(|i| spec.eps_max * i as f64 / points as f64)
            .collect()
    }

    /// Independent oracle: BFS transitive closure of the pairwise relation.
    fn bfs_components(modes: &[ModeVector], beta: f64, c2: f64) -> Vec<Vec<ModeVector>> {
        let mut seen = vec![false; modes.len()];
        let mut components = vec![];
        for start in 0..modes.len() {
            if seen[start] {
                continue;
            }
            let mut comp = vec![];
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                comp.push(modes[i].clone());
                for j in 0..modes.len() {
                    if !seen[j] && chain_edge(&modes[i], &modes[j], beta, c2) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            comp.sort();
            components.push(comp);
        }
        components.sort_by_key(|c| {
            (
                c.iter().map(|nu| nu.size()).min().unwrap_or(i64::MAX),
                c.first().cloned(),
            )
        });
        components
    }

    #[test]
    fn partition_matches_bfs_oracle() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.001);
        let part = partition(&spec, 1e-3, 30, 0.25, 1.0).unwrap();
        let modes = near_resonant_shell(&spec, 1e-3, 30).unwrap();
        let oracle = bfs_components(&modes, 0.25, 1.0);
        assert_eq!(part.classes, oracle);
        assert!(!part.classes.is_empty());
    }

    #[test]
    fn partition_deterministic() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let a = partition(&spec, 5e-3, 20, 0.25, 1.0).unwrap();
        let b = partition(&spec, 5e-3, 20, 0.25, 1.0).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn far_modes_are_singletons() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let part = partition(&spec, 1e-3, 20, 0.25, 1.0).unwrap();
        for class in &part.classes {
            assert_eq!(class.len(), 1, "expected singleton classes at C2=1");
            for nu in class {
                assert!(spec.eigenvalue(nu, 1e-3).unwrap().abs() < 0.5);
            }
        }
    }

    #[test]
    fn wide_chain_constant_merges_classes() {
        // With a large C2, modes sharing n and |m|^2 coalesce.
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let part = partition(&spec, 1e-3, 20, 0.25, 6.0).unwrap();
        let a = ModeVector::new(2, vec![2, 0]);
        let b = ModeVector::new(2, vec![0, 2]);
        let ja = part.class_of(&a).expect("mode in O");
        let jb = part.class_of(&b).expect("mode in O");
        assert_eq!(ja, jb);
    }

    #[test]
    fn closure_stays_in_class() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let g = grid(&spec, 16);
        let nu = ModeVector::new(2, vec![2, 0]);
        let set = ResonantSet {
            modes: vec![nu.clone()],
            witness_eps: 1e-3,
        };
        let sets = closure(&spec, &set, 1e-3, 0.2, 20, &g, 0.25, 6.0).unwrap();
        assert!(sets.closure.contains(&nu));
        let part = partition(&spec, 1e-3, 20, 0.25, 6.0).unwrap();
        let j = part.class_of(&nu).unwrap();
        for member in &sets.near {
            assert_eq!(part.class_of(member), Some(j), "member {member} escapes");
        }
    }

    #[test]
    fn closure_rejects_bad_gamma_bar() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let set = ResonantSet {
            modes: vec![ModeVector::new(2, vec![2, 0])],
            witness_eps: 1e-3,
        };
        let g = grid(&spec, 4);
        assert!(matches!(
            closure(&spec, &set, 1e-3, 0.3, 10, &g, 0.25, 6.0),
            Err(ClusterError::InvalidGammaBar(_))
        ));
    }

    #[test]
    fn separation_singletons_pass() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let part = partition(&spec, 1e-3, 30, 0.25, 1.0).unwrap();
        let report = separation_report(&part, 0.5, 16.0);
        assert!(report.passed(), "violations: {:?}", report.violations);
        assert!(report.fitted_c1 >= 1.0);
    }

    #[test]
    fn separation_dense_spectrum_violates() {
        // Zero-mass periodic NLS has heavily repeated eigenvalues; with an
        // aggressive chain constant the size condition max|nu| <= 2 p fails.
        let spec = EquationSpec {
            boundary: crate::lattice::Boundary::Periodic,
            ..EquationSpec::nls_resonant(2, 0.2)
        };
        let part = partition(&spec, 0.15, 16, 0.25, 8.0).unwrap();
        let report = separation_report(&part, 0.5, 16.0);
        assert!(
            !report.passed(),
            "expected stress-case violation, got C1={} ratio={}",
            report.fitted_c1,
            report.fitted_size_ratio
        );
    }

    #[test]
    fn stability_scan_intervals() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let g = grid(&spec, 1000);
        let scan = stability_scan(&spec, 20, &g, 0.25, 1.0).unwrap();
        assert!(scan.intervals.len() <= scan.crossings.len() + 1);
        // Each fingerprint change sits within one grid step of a crossing.
        let step = spec.eps_max / 1000.0;
        for w in scan.intervals.windows(2) {
            let breakpoint = w[1].0;
            let nearest = scan
                .crossings
                .iter()
                .map(|(_, e)| (e - breakpoint).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(
                nearest <= step + 1e-12,
                "breakpoint {breakpoint} not near any crossing"
            );
        }
    }

    #[test]
    fn no_class_splits_without_breakpoint() {
        let spec = EquationSpec::nls_cubic(2, 3, 10, 0.01);
        let g = grid(&spec, 50);
        let scan = stability_scan(&spec, 16, &g, 0.25, 6.0).unwrap();
        for &(start, end, _) in &scan.intervals {
            let pa = partition(&spec, start, 16, 0.25, 6.0).unwrap();
            let pb = partition(&spec, end, 16, 0.25, 6.0).unwrap();
            assert_eq!(pa.classes, pb.classes);
        }
    }
}

use smalldiv::lattice::EquationSpec;
use smalldiv::multiscale::Counterterm;
use smalldiv::series::SolverConfig;
use smalldiv::trees::*;

fn main() {
    let spec = EquationSpec::nls_cubic(2, 3, 10, 0.2);
    let mut cfg = SolverConfig { truncation: 6, k_max: 4, ..SolverConfig::with_defaults(&spec) };
    cfg.c2 = 6.0;
    cfg.ms.gamma = 0.012;
    let m = Counterterm::zero();
    let ctx = TreeContext::new(&spec, &cfg, 0.1, &m, 4, 6).unwrap();
    let mut e = Enumerator::new(&ctx);
    let t0 = std::time::Instant::now();
    let mut count: u64 = 0;
    e.theta_fold(2, false, &mut |_t, _v, _m| count += 1);
    println!("k=2: {count} trees in {:?}", t0.elapsed());
    let t0 = std::time::Instant::now();
    let mut count: u64 = 0;
    let sums = e.theta_value_sums(4, false);
    println!("k=4 value_sums: {} buckets in {:?} (count {count})", sums.len(), t0.elapsed());
}

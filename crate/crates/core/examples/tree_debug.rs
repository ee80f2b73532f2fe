use smalldiv::lattice::{EquationSpec, ModeVector};
use smalldiv::multiscale::{Counterterm, Sign};
use smalldiv::series::SolverConfig;
use smalldiv::trees::*;

fn main() {
    let spec = EquationSpec::nlw_cubic(1, 3, 10, 0.27);
    let mut cfg = SolverConfig { truncation: 10, k_max: 4, ..SolverConfig::with_defaults(&spec) };
    cfg.c2 = 6.5;
    cfg.ms.gamma_bar = 0.22;
    cfg.ms.gamma = 8e-3;
    let eps = 0.25;
    let m = Counterterm::zero();
    let ctx = TreeContext::new(&spec, &cfg, eps, &m, 4, 10).unwrap();
    let a = ModeVector::new(3, vec![3]);
    let b = ModeVector::new(3, vec![-3]);
    println!("resonant pair: {}", ctx.resonant_pair(&a, &b));
    if let Some(block) = ctx.blocks.block_of(&a) {
        println!("block modes {:?} x = {:.6e} active {:?}", block.modes, block.x, ctx.chi.active_scales(block.x));
    } else {
        println!("NO BLOCK at {a}");
    }
    let mut re = ResonanceEnumerator::new(&ctx);
    for (x, y) in [(&a, &b), (&a, &a), (&b, &b)] {
        for s1 in Sign::all() {
            for s2 in Sign::all() {
                let fam = re.resonance_r(2, x, y, s1, s2);
                for (h, trees) in &fam {
                    let sum: num_complex::Complex64 = trees
                        .iter()
                        .map(|t| tree_value(&ctx, t) * multiplicity(t) as f64)
                        .sum();
                    println!("fam {x}->{y} ({s1:?},{s2:?}) h'={h}: {} trees sum {sum:.4e}", trees.len());
                }
            }
        }
    }
    let l2 = counterterm_matrix(&ctx, 2);
    println!("L2 zero: {}", l2.is_zero());
    let l4 = counterterm_matrix(&ctx, 4);
    println!("L4 zero: {}", l4.is_zero());
}

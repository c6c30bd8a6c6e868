//! Compares publisher-side and kernel-side result correction cost as the
//! number of participants grows.

use crowd_kernel::config::KernelConfig;
use crowd_kernel::sim::{compare_tro_costs, slope};

fn main() {
    let cfg = KernelConfig::default();
    let v = 5;
    let rows = compare_tro_costs(&[1, 10, 50, 100, 500], v, &cfg.cost_model, &cfg).unwrap();
    println!("{:>5} {:>8} {:>8} {:>8}", "n", "cost_A", "cost_B", "notices");
    for r in &rows {
        println!("{:>5} {:>8.1} {:>8.1} {:>8}", r.n, r.cost_a, r.cost_b, r.notices);
    }
    let a: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.cost_a)).collect();
    let b: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.cost_b)).collect();
    println!("slope per participant: cost_A {:.3}, cost_B {:.3}", slope(&a), slope(&b));
}

use fogrep_sim::convergence::{sweep, ConvergenceParams};
fn main() {
    let t2 = std::time::Instant::now();
    let outcomes = sweep(0..100, &ConvergenceParams::default());
    let failed: Vec<u64> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.seed).collect();
    println!("100 seeds in {:?}; failed: {:?}", t2.elapsed(), failed);
}

use odeforge::gradcheck::{run_all, DEFAULT_TOL};
fn main() {
    let mut bad = 0;
    for seed in 0..40u64 {
        let results = run_all(seed, DEFAULT_TOL).unwrap();
        let worst = results.iter().map(|r| r.max_rel).fold(0.0f64, f64::max);
        let all = results.iter().all(|r| r.pass());
        if !all { bad += 1; println!("seed {seed:2}: FAIL worst={worst:.3e} ({})", results.iter().filter(|r| !r.pass()).map(|r| r.name.clone()).collect::<Vec<_>>().join(",")); }
    }
    println!("failing seeds: {bad}/40");
}

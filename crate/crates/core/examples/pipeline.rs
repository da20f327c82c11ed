//! Runs the default pipeline and prints the identity table.

use std::time::Instant;

use theta_ring::harness::{run_pipeline, RunConfig};

fn main() {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let (built, report) = run_pipeline(&cfg).expect("pipeline");
    for r in &report.identities {
        let mark = if r.pass { "PASS" } else { "FAIL" };
        println!(
            "{mark} {:<30} {:.3e} < {:.0e}  {}",
            r.name, r.residual, r.tolerance, r.detail
        );
    }
    println!("resampled {} times", built.draw.log.len());
    println!("{:.1?}", start.elapsed());
}

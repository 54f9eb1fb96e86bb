//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;
mod driver_contract;
mod durability;
mod fidelity;
mod identity;
mod mismatch;
mod pins;
mod staged_direct;
mod sync_convergence;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Check = fn() -> Result<String, String>;

const CRITERIA: &[(u32, &str, &str, Check)] = &[
    (1, "round-trip fidelity", "exact", fidelity::run),
    (2, "permission mismatch", "exact", mismatch::run),
    (3, "staged vs direct copies", "exact counts", staged_direct::run),
    (4, "pin/reservation safety", "exact", pins::run),
    (5, "sync convergence", "exact", sync_convergence::run),
    (6, "durability under kill -9", "exact for acknowledged ops", durability::run),
    (7, "identity decoupling", "exact", identity::run),
    (8, "driver contract", "exact", driver_contract::run),
];

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let started = Instant::now();
    for (n, name, tol, check) in CRITERIA {
        if !picked.is_empty() && !picked.contains(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} [{name}] PASS tolerance={tol} ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} [{name}] FAIL tolerance={tol} ({secs:.1}s) {why}");
            }
        }
    }
    println!("acceptance: {failed} failed, total {:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance gate: runs every criterion, prints one line per criterion and
//! exits nonzero when any of them fails.

use std::process::ExitCode;
use std::time::Instant;

mod cost;
mod export;
mod gradients;
mod pareto;
mod reproducibility;

/// Result of one criterion.
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "gradient suite", gradients::gradient_suite),
    (2, "weight blend equals output blend", gradients::blend_equivalence),
    (3, "smooth max bounds", cost::smooth_max_bounds),
    (4, "cost model oracle", cost::cost_oracle),
    (5, "min-cost optimality", cost::min_cost_optimality),
    (6, "reorder and split equivalence", export::reorder_equivalence),
    (7, "contiguity of operator splits", export::contiguity),
    (8, "energy with zero active power", cost::idle_energy),
    (9, "pareto behavior", pareto::pareto_behavior),
    (10, "warmup freeze and determinism", reproducibility::freeze_and_determinism),
];

fn main() -> ExitCode {
    // `cargo test -- <filter>` style selection by criterion number
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for &(id, name, run) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} ({name}): {status} {} [{:.1}s]",
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!outcome.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

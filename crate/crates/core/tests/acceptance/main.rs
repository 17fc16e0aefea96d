//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any fails.
//!
//! `DCBV_ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::Instant;

mod common;
mod determinism;
mod gradients;
mod identity;
mod metric_oracles;
mod minmax;
mod ordering;
mod reduction;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u8, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", gradients::run),
        (2, "metric oracles", metric_oracles::run),
        (3, "baseline reduction identity", reduction::run),
        (4, "determinism and persistence", determinism::run),
        (5, "min-max update directions", minmax::run),
        (6, "identity sanity", identity::run),
        (7, "method ordering at desk scale", ordering::run_ordering),
        (8, "structural consistency probe", ordering::run_structure),
    ];
    let only: Option<Vec<u8>> = std::env::var("DCBV_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {status} {name} ({secs:.1} s): {}", v.detail);
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! One line per acceptance criterion. Exits non-zero if any fails.

mod alignment;
mod checker;
mod fixtures;
mod grammar;
mod metrics;
mod perturbation;
mod protocol;
mod rendering;
mod service;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 8] = [
    Criterion {
        name: "grammar",
        limit: Some(Duration::from_secs(10)),
        run: grammar::run,
    },
    Criterion {
        name: "rendering",
        limit: None,
        run: rendering::run,
    },
    Criterion {
        name: "alignment",
        limit: Some(Duration::from_secs(5)),
        run: alignment::run,
    },
    Criterion {
        name: "checker",
        limit: None,
        run: checker::run,
    },
    Criterion {
        name: "metrics",
        limit: None,
        run: metrics::run,
    },
    Criterion {
        name: "protocol",
        limit: Some(Duration::from_secs(30)),
        run: protocol::run,
    },
    Criterion {
        name: "perturbation",
        limit: None,
        run: perturbation::run,
    },
    Criterion {
        name: "service durability",
        limit: None,
        run: service::run,
    },
];

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters from the default harness
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("{}: test", c.name);
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();

    let mut failed = 0;
    let mut ran = 0;
    for c in &CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| Err(panic_message(p)));
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (o, _) => o,
        };
        let limit = c.limit.map(|l| format!(" (limit {l:?})")).unwrap_or_default();
        match outcome {
            Ok(detail) => println!("PASS {:<20} {detail} [{elapsed:.2?}{limit}]", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {:<20} {why} [{elapsed:.2?}{limit}]", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

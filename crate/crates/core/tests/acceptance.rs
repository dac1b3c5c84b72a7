//! The eight acceptance criteria under the default configuration. Prints one
//! line per criterion, then fails if any criterion failed.

use exitlab::harness::{run_acceptance_suite, Suite};
use exitlab::ExperimentConfig;

#[test]
fn acceptance_criteria() {
    exitlab::seeding::install_thread_limit();
    let cfg = ExperimentConfig::default();
    let outcome = run_acceptance_suite(&cfg, cfg.seed, Suite::All);
    println!("{}", outcome.table());
    for r in &outcome.reports {
        println!("criterion {}: {} ({:.1}s)", r.name, if r.passed { "PASS" } else { "FAIL" }, r.runtime_secs);
    }
    let failed: Vec<&str> = outcome.reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert_eq!(outcome.reports.len(), 8);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

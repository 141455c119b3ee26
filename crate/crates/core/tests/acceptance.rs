//! Acceptance suite: every shipped criterion at its pinned budget, one
//! pass/fail line per criterion. Run with
//! `cargo test --test acceptance -- --nocapture`.

use lagflow::verify::{run_criterion, Context, Suite};

#[test]
fn acceptance_criteria() {
    let ctx = Context::default();
    let mut results = Vec::new();
    for id in Suite::All.criteria() {
        let r = run_criterion(id, &ctx);
        println!("{}", r.line());
        results.push(r);
    }
    let failures: Vec<String> =
        results.iter().filter(|r| !r.pass).map(|r| r.line()).collect();
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}

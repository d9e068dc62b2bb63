//! Golden suite of formatted model outputs.

mod common;

use common::golden::{cases, check};

#[test]
fn fifty_cases_no_mismatch() {
    let cases = cases();
    assert_eq!(cases.len(), 50);
    let mut failures = Vec::new();
    for c in &cases {
        for b in check(c) {
            failures.push(format!("{}: {b}", c.id));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn every_mapping_branch_is_covered() {
    let kinds: std::collections::BTreeSet<String> = cases().into_iter().map(|c| c.kind).collect();
    for k in ["proportion_scaled", "percentile_passthrough", "unknown->percentile_clipped", "unparsable"] {
        assert!(kinds.contains(k), "{k}");
    }
}

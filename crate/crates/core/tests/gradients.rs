mod common;

use common::{worst_error, CASES, TOLERANCE};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, (name, case)) in CASES.iter().enumerate() {
        let worst = worst_error(*case, i as u64 + 1);
        println!("{name:28} worst rel err {worst:.2e}");
        if worst > TOLERANCE {
            failures.push(format!("{name}: {worst:.2e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

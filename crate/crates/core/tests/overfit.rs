mod common;

use std::time::Duration;

#[test]
fn single_pair_overfits() {
    let run = common::overfit_single_pair();
    let at = run.below_001_at.expect("loss never fell below 0.01 within 500 updates");
    assert!(at <= 500);
    assert_eq!(run.decoded_at_300, run.target);
    assert!(run.elapsed < Duration::from_secs(30), "took {:?}", run.elapsed);
}

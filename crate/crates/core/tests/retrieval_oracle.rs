mod common;

#[test]
fn retrieval_matches_brute_force() {
    common::retrieval_oracle_trials(1000, 2024).unwrap();
}

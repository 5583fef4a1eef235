mod common;

#[test]
fn average_precision_matches_brute_force() {
    let detail = common::average_precision_oracle().unwrap();
    println!("{detail}");
}

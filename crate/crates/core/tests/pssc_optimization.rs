mod common;

#[test]
fn contrast_alone_pulls_positives_and_pushes_negatives() {
    let detail = common::pssc_optimization().unwrap();
    println!("{detail}");
}

use vesselgan::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_gradient_matches_finite_differences() {
    let results = run_suite(7).unwrap();
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "{} checks above {TOLERANCE}: {failed:?}", failed.len());
}

#[test]
fn a_detached_path_is_caught() {
    use rand::SeedableRng;
    use vesselgan::gradcheck::check_gradients;
    use vesselgan::Tensor;

    let x = Tensor::new(&[1, 1, 2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 1.1]).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let honest = check_gradients(
        "square",
        std::slice::from_ref(&x),
        &[],
        &|tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            tape.sum(sq)
        },
        16,
        &mut rng,
    )
    .unwrap();
    assert!(honest.passed, "{honest}");

    let broken = check_gradients(
        "square with one factor detached",
        &[x],
        &[],
        &|tape, v| {
            let d = tape.detach(v[0]);
            let sq = tape.mul(v[0], d)?;
            tape.sum(sq)
        },
        16,
        &mut rng,
    )
    .unwrap();
    assert!(!broken.passed, "{broken}");
    assert!(broken.max_rel_err > 0.4);
}

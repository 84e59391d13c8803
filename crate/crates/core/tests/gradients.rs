use dpl::testkit::{op_gradients, pipeline_gradients};

#[test]
fn primitives_match_finite_differences() {
    for r in op_gradients(100, 2024).unwrap() {
        assert!(r.worst <= 1e-6, "{}: {:e} ({} kinks skipped)", r.name, r.worst, r.skipped);
    }
}

#[test]
fn network_pipelines_match_finite_differences() {
    for r in pipeline_gradients(25, 11).unwrap() {
        println!("{}: worst {:e}, {} kinks skipped", r.name, r.worst, r.skipped);
        assert!(r.worst <= 1e-5, "{}: {:e}", r.name, r.worst);
    }
}

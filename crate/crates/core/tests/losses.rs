use dpl::losses::{color_loss, ContextualParams};
use dpl::tensor::{Tape, Tensor};
use dpl::testkit::{contextual_reference, loss_properties};

#[test]
fn loss_invariants_hold() {
    let reports = loss_properties(1000, 7);
    for r in &reports {
        println!("{:<60} {:>5} cases  {}", r.name, r.cases, if r.passed() { "ok" } else { "FAILED" });
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn color_loss_ignores_fine_checkerboard() {
    let (h, w) = (32, 32);
    let base: Vec<f64> = (0..3 * h * w).map(|i| 0.3 + 0.4 * ((i % w) as f64 / w as f64)).collect();
    let checked: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (r, c) = ((i / w) % h, i % w);
            v + if (r + c) % 2 == 0 { 0.05 } else { -0.05 }
        })
        .collect();
    let mut t = Tape::new();
    let a = t.constant(&Tensor::new(&[3, h, w], base).unwrap());
    let b = t.constant(&Tensor::new(&[3, h, w], checked).unwrap());
    let loss = color_loss(&mut t, a, b, 3.0).unwrap();
    let v = t.scalar(loss).unwrap();
    assert!(v < 1e-4, "{v}");
}

#[test]
fn contextual_reference_of_matching_sets_is_small() {
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
    let v = contextual_reference(&x, &x, &ContextualParams::default());
    assert!(v >= 0.0 && v < 0.01, "{v}");
}

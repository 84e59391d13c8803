//! Order-independent summation: a running sum kept as non-overlapping
//! partials (Shewchuk) and rounded once on read.

/// Adds `x` to the expansion in `partials`.
pub fn push(partials: &mut Vec<f64>, mut x: f64) {
    if !x.is_finite() || partials.last().is_some_and(|p| !p.is_finite()) {
        let naive = round(partials) + x;
        partials.clear();
        partials.push(naive);
        return;
    }
    let mut kept = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[kept] = lo;
            kept += 1;
        }
        x = hi;
    }
    partials.truncate(kept);
    partials.push(x);
}

/// Correctly rounded value of the expansion.
pub fn round(partials: &[f64]) -> f64 {
    let Some(&last) = partials.last() else {
        return 0.0;
    };
    if !last.is_finite() {
        return last;
    }
    let mut n = partials.len() - 1;
    let mut hi = last;
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        let y = partials[n - 1];
        n -= 1;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // half-way case: look at the sign of what lies below
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Correctly rounded sum of `values` regardless of their order.
pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut p = Vec::new();
    for v in values {
        push(&mut p, v);
    }
    round(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(sum([0.1; 10]), 1.0);
        assert_eq!(sum([]), 0.0);
    }

    #[test]
    fn non_finite_propagates() {
        assert!(sum([1.0, f64::NAN]).is_nan());
        assert_eq!(sum([1.0, f64::INFINITY, 2.0]), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn order_does_not_matter(mut v in prop::collection::vec(-1e6f64..1e6, 1..20), k in 0usize..20) {
            let a = sum(v.iter().copied());
            v.reverse();
            let n = v.len();
            v.rotate_left(k % n);
            prop_assert_eq!(a, sum(v.iter().copied()));
        }

        #[test]
        fn doubling_is_exact(v in prop::collection::vec(-1e6f64..1e6, 1..10)) {
            let once = sum(v.iter().copied());
            prop_assert_eq!(2.0 * once, sum(v.iter().chain(&v).copied()));
        }
    }
}

/// Compares an analytic gradient with central finite differences.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)` where
/// `fd_i = (f(x + h eᵢ) − f(x − h eᵢ)) / 2h`. Callers checking quantized
/// paths must pick points away from rounding boundaries; the tester does not
/// know about them.
pub fn finite_diff_check<F>(mut f: F, analytic: &[f64], point: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        analytic.len(),
        point.len(),
        "gradient and point lengths differ"
    );
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_product_gradient_is_exact_enough() {
        let p = [0.3, -1.2, 2.5, 0.0];
        let grad: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(|w| w.iter().map(|v| v * v).sum(), &grad, &p, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = [0.3, -1.2, 2.5];
        // correct gradient is 2w; inject a 10% fault on one coordinate
        let mut grad: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        grad[2] *= 1.1;
        let err = finite_diff_check(|w| w.iter().map(|v| v * v).sum(), &grad, &p, 1e-5);
        assert!(err > 1e-2, "{err}");
    }
}

//! Gauss rules on intervals and symmetric rules on the reference triangle.
//!
//! The reference triangle is `{(xi, eta) : xi >= 0, eta >= 0, xi + eta <= 1}`
//! with area 1/2; triangle weights below already include that factor.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on `[-1, 1]`, computed by Newton
/// iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    x.iter()
        .zip(&w)
        .map(|(&x, &w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect()
}

/// A quadrature point on the reference triangle.
#[derive(Debug, Clone, Copy)]
pub struct TriPoint {
    pub xi: f64,
    pub eta: f64,
    pub weight: f64,
}

fn orbit3(a: f64, w: f64, out: &mut Vec<TriPoint>) {
    let b = 1.0 - 2.0 * a;
    for (xi, eta) in [(a, a), (b, a), (a, b)] {
        out.push(TriPoint { xi, eta, weight: 0.5 * w });
    }
}

fn orbit6(a: f64, b: f64, w: f64, out: &mut Vec<TriPoint>) {
    let c = 1.0 - a - b;
    for (xi, eta) in [(a, b), (b, a), (a, c), (c, a), (b, c), (c, b)] {
        out.push(TriPoint { xi, eta, weight: 0.5 * w });
    }
}

/// Six-point rule exact for polynomials of degree 4.
pub fn triangle_degree4() -> Vec<TriPoint> {
    let mut pts = Vec::with_capacity(6);
    orbit3(0.445_948_490_915_965, 0.223_381_589_678_011, &mut pts);
    orbit3(0.091_576_213_509_771, 0.109_951_743_655_322, &mut pts);
    pts
}

/// Twelve-point rule exact for polynomials of degree 6.
pub fn triangle_degree6() -> Vec<TriPoint> {
    let mut pts = Vec::with_capacity(12);
    orbit3(0.249_286_745_170_910, 0.116_786_275_726_379, &mut pts);
    orbit3(0.063_089_014_491_502, 0.050_844_906_370_207, &mut pts);
    orbit6(
        0.310_352_451_033_785,
        0.053_145_049_844_816,
        0.082_851_075_618_374,
        &mut pts,
    );
    pts
}

/// `rule` repeated on the `n^2` congruent subtriangles of the reference
/// triangle.
pub fn subdivided(rule: &[TriPoint], n: usize) -> Vec<TriPoint> {
    let h = 1.0 / n as f64;
    let scale = h * h;
    let mut out = Vec::with_capacity(rule.len() * n * n);
    for i in 0..n {
        for j in 0..n - i {
            let (x0, y0) = (i as f64 * h, j as f64 * h);
            for q in rule {
                out.push(TriPoint {
                    xi: x0 + q.xi * h,
                    eta: y0 + q.eta * h,
                    weight: q.weight * scale,
                });
            }
            if i + j + 1 < n {
                // Downward triangle with corners (x0+h, y0+h), (x0, y0+h), (x0+h, y0).
                for q in rule {
                    out.push(TriPoint {
                        xi: x0 + h - q.xi * h,
                        eta: y0 + h - q.eta * h,
                        weight: q.weight * scale,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    // Exact integral of xi^a eta^b over the reference triangle.
    fn monomial_exact(a: u32, b: u32) -> f64 {
        factorial(a) * factorial(b) / factorial(a + b + 2)
    }

    fn check_rule(rule: &[TriPoint], degree: u32) {
        for a in 0..=degree {
            for b in 0..=(degree - a) {
                let q: f64 = rule
                    .iter()
                    .map(|p| p.weight * p.xi.powi(a as i32) * p.eta.powi(b as i32))
                    .sum();
                let exact = monomial_exact(a, b);
                assert!(
                    (q - exact).abs() < 1e-13,
                    "degree {degree} rule fails on xi^{a} eta^{b}: {q} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn triangle_rules_are_exact_to_their_degree() {
        check_rule(&triangle_degree4(), 4);
        check_rule(&triangle_degree6(), 6);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for k in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} k={k}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn subdivided_rule_keeps_exactness() {
        let q = subdivided(&triangle_degree6(), 5);
        assert_eq!(q.len(), 25 * triangle_degree6().len());
        // int x^4 y^2 over the reference triangle is 4! 2! / 8!.
        let v: f64 = q.iter().map(|p| p.weight * p.xi.powi(4) * p.eta.powi(2)).sum();
        assert!((v - factorial(4) * factorial(2) / factorial(8)).abs() < 1e-15);
        assert!(q.iter().all(|p| p.xi >= 0.0 && p.eta >= 0.0 && p.xi + p.eta <= 1.0 + 1e-15));
    }
}

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Config("quadrature needs at least one node".into()));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // P_n(x) and P_n'(x) by the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            x = 0.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Ok((nodes, weights))
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (x, w) = gauss_legendre(n)?;
    let (h, c) = (0.5 * (b - a), 0.5 * (a + b));
    Ok((x.iter().map(|t| c + h * t).collect(), w.iter().map(|v| v * h).collect()))
}

/// Composite rule: `nodes_per_panel[i]` Gauss–Legendre nodes on each
/// `[breaks[i], breaks[i+1]]`.
pub fn composite_gauss_legendre(breaks: &[f64], nodes_per_panel: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if breaks.len() != nodes_per_panel.len() + 1 || breaks.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Config("panel breaks must be strictly increasing, one more than panels".into()));
    }
    let (mut xs, mut ws) = (Vec::new(), Vec::new());
    for (i, &n) in nodes_per_panel.iter().enumerate() {
        let (x, w) = gauss_legendre_on(n, breaks[i], breaks[i + 1])?;
        xs.extend(x);
        ws.extend(w);
    }
    Ok((xs, ws))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_rules() {
        let (x, w) = gauss_legendre(2).unwrap();
        assert!((x[1] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15);
        let (x, w) = gauss_legendre(1).unwrap();
        assert_eq!((x[0], w[0]), (0.0, 2.0));
    }

    #[test]
    fn large_rule_integrates_polynomials_and_smooth_functions() {
        let (x, w) = gauss_legendre(2048).unwrap();
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        let x4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((x4 - 0.4).abs() < 1e-12);
        let (x, w) = gauss_legendre_on(64, 0.0, PI).unwrap();
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.sin()).sum();
        assert!((s - 2.0).abs() < 1e-14);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }
}

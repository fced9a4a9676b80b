//! Reference computations shared by the integration and acceptance tests.
//! They avoid the code paths they check.
#![allow(dead_code)]

/// Projects `v` onto `{0 <= a_i <= c, sum a_i y_i = 0}` by bisection on the
/// multiplier of the equality constraint.
fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |lam: f64| -> (Vec<f64>, f64) {
        let a: Vec<f64> = v
            .iter()
            .zip(y)
            .map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c))
            .collect();
        let s = a.iter().zip(y).map(|(ai, yi)| ai * yi).sum();
        (a, s)
    };
    // sum a_i y_i is non-increasing in lam
    let span = v.iter().map(|x| x.abs()).fold(0.0, f64::max) + c + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi)).0
}

/// Maximizes the SVM dual `sum a - 1/2 a'Qa` with accelerated projected
/// gradient ascent. Returns the objective value.
pub fn dual_qp_oracle(x: &[Vec<f64>], y: &[f64], c: f64, iters: usize) -> f64 {
    let n = y.len();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| y[i] * y[j] * x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect();
    // Frobenius norm bounds the largest eigenvalue
    let lip = q.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let objective = |a: &[f64]| -> f64 {
        let quad: f64 = (0..n)
            .map(|i| a[i] * (0..n).map(|j| q[i][j] * a[j]).sum::<f64>())
            .sum();
        a.iter().sum::<f64>() - 0.5 * quad
    };
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad: Vec<f64> = (0..n)
            .map(|i| 1.0 - (0..n).map(|j| q[i][j] * z[j]).sum::<f64>())
            .collect();
        let step: Vec<f64> = z.iter().zip(&grad).map(|(zi, g)| zi + g / lip).collect();
        let next = project(&step, y, c);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        z = next
            .iter()
            .zip(&a)
            .map(|(n1, a0)| n1 + mom * (n1 - a0))
            .collect();
        // restart momentum when it stops helping
        if objective(&next) < objective(&a) {
            z = next.clone();
            t = 1.0;
        } else {
            t = t_next;
        }
        a = next;
    }
    objective(&a)
}

/// Savitzky-Golay weights from the hat matrix of an orthonormalized
/// (modified Gram-Schmidt) Vandermonde basis.
pub fn savgol_oracle(order: usize, frame: usize) -> Vec<f64> {
    let half = (frame / 2) as i64;
    let xs: Vec<f64> = (-half..=half).map(|x| x as f64).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in 0..=order {
        let mut v: Vec<f64> = xs.iter().map(|x| x.powi(p as i32)).collect();
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= d * qi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|a| a / norm).collect());
    }
    let center = half as usize;
    (0..frame)
        .map(|k| basis.iter().map(|q| q[center] * q[k]).sum())
        .collect()
}

/// Quadratic smoothing weights in closed form for half-width `m`.
pub fn savgol_quadratic_closed_form(m: i64) -> Vec<f64> {
    let den = ((2 * m - 1) * (2 * m + 1) * (2 * m + 3)) as f64;
    (-m..=m)
        .map(|k| (3.0 * (3 * m * m + 3 * m - 1) as f64 - 15.0 * (k * k) as f64) / den)
        .collect()
}

/// Index of the largest-magnitude DFT bin in 1..n/2.
pub fn dominant_bin(x: &[f64]) -> usize {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    (1..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += (v - mean) * ph.cos();
                im += (v - mean) * ph.sin();
            }
            (k, re * re + im * im)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

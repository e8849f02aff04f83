use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LimeError;

/// `n` rows of `d` segment switches. Row 0 keeps every segment; the others
/// switch each segment on with probability 1/2.
pub fn sample_perturbations<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<u8>> {
    (0..n).map(|i| if i == 0 { vec![1; d] } else { (0..d).map(|_| rng.gen_bool(0.5) as u8).collect() }).collect()
}

/// Cosine distance between a switch row and the all-ones row. A row with
/// nothing switched on is at distance 1.
pub fn cosine_distance_to_ones(z: &[u8]) -> f64 {
    let on = z.iter().filter(|&&v| v != 0).count();
    if on == 0 || z.is_empty() {
        return 1.0;
    }
    1.0 - (on as f64 / z.len() as f64).sqrt()
}

/// `exp(-D^2 / width^2)` for every row.
pub fn kernel_weights(z: &[Vec<u8>], kernel_width: f64) -> Vec<f64> {
    z.iter()
        .map(|row| {
            let d = cosine_distance_to_ones(row);
            (-(d * d) / (kernel_width * kernel_width)).exp()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Weighted coefficient of determination on the fitted sample.
    pub local_r2: f64,
}

/// In-place Cholesky factor (lower triangle) of a symmetric matrix.
/// Returns `None` when a pivot is not clearly positive.
fn cholesky(a: &mut [f64], n: usize) -> Option<()> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > scale * 1e-12) {
            return None;
        }
        let l = diag.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / l;
        }
    }
    Some(())
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

/// Weighted ridge regression of `preds` on the switch rows with an
/// unpenalized intercept. Sample weights are rescaled to mean 1 first, so
/// multiplying all of them by a constant does not change the fit.
pub fn fit_surrogate(
    z: &[Vec<u8>],
    preds: &[f64],
    sample_weights: &[f64],
    lambda: f64,
) -> Result<Surrogate, LimeError> {
    let n = z.len();
    if preds.len() != n || sample_weights.len() != n {
        return Err(LimeError::LengthMismatch {
            what: "surrogate inputs",
            expected: n,
            found: if preds.len() != n { preds.len() } else { sample_weights.len() },
        });
    }
    let d = z.first().map_or(0, Vec::len);
    if let Some(row) = z.iter().position(|r| r.len() != d) {
        return Err(LimeError::LengthMismatch { what: "perturbation row", expected: d, found: z[row].len() });
    }
    if n < d + 1 {
        return Err(LimeError::TooFewSamples { samples: n, segments: d });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LimeError::InvalidConfig(format!("ridge_lambda must be finite and >= 0, got {lambda}")));
    }
    if sample_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(LimeError::InvalidConfig("sample weights must be finite and nonnegative".into()));
    }
    if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
        return Err(LimeError::Predict { index: i, detail: format!("non-finite score {}", preds[i]) });
    }
    let total: f64 = sample_weights.iter().sum();
    if total <= 0.0 {
        return Err(LimeError::InvalidConfig("sample weights are all zero".into()));
    }
    let sw: Vec<f64> = sample_weights.iter().map(|w| w * n as f64 / total).collect();

    // normal equations over [1, z]
    let m = d + 1;
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    let mut x = vec![0.0; m];
    for ((row, &y), &w) in z.iter().zip(preds).zip(&sw) {
        x[0] = 1.0;
        for (k, &v) in row.iter().enumerate() {
            x[k + 1] = v as f64;
        }
        for i in 0..m {
            if x[i] == 0.0 {
                continue;
            }
            b[i] += w * x[i] * y;
            for j in 0..=i {
                a[i * m + j] += w * x[i] * x[j];
            }
        }
    }
    for i in 0..m {
        for j in i + 1..m {
            a[i * m + j] = a[j * m + i];
        }
    }
    for i in 1..m {
        a[i * m + i] += lambda;
    }
    if cholesky(&mut a, m).is_none() {
        return Err(LimeError::Singular { lambda });
    }
    cholesky_solve(&a, m, &mut b);

    let fitted = |row: &[u8]| b[0] + row.iter().zip(&b[1..]).map(|(&v, c)| v as f64 * c).sum::<f64>();
    let ybar = preds.iter().zip(&sw).map(|(y, w)| y * w).sum::<f64>() / n as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut ss_raw = 0.0;
    for ((row, &y), &w) in z.iter().zip(preds).zip(&sw) {
        ss_res += w * (y - fitted(row)).powi(2);
        ss_tot += w * (y - ybar).powi(2);
        ss_raw += w * y * y;
    }
    // a constant target has no variance to explain; a fit that reproduces it counts as perfect
    let local_r2 = if ss_tot <= 1e-24 * ss_raw.max(f64::MIN_POSITIVE) {
        if ss_res <= 1e-20 * ss_raw.max(1.0) {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Surrogate { intercept: b[0], weights: b[1..].to_vec(), local_r2 })
}

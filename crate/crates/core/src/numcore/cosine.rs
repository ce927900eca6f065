use serde::{Deserialize, Serialize};

use super::{Matrix, NumError, Result};

/// Norms below this are treated as zero and the cosine is defined as 0.
pub const DEFAULT_EPS: f64 = 1e-12;

/// How the structure similarity normalizes its numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// `Σ(hx⊙m⊙hy) / (√Σ(hx⊙m)² · √Σhy²)`, a true cosine in `[-1, 1]`.
    #[default]
    Proper,
    /// `Σ(hx⊙m⊙hy) / (√Σ(hx⊙m) · √Σhy)`, radicands without squares.
    /// A nonpositive radicand yields 0. Not bounded.
    Literal,
}

fn check_pair(op: &'static str, hx: &Matrix, hy: &Matrix) -> Result<()> {
    if hx.shape() != hy.shape() {
        return Err(NumError::Shape {
            op,
            expected: format!("{}x{}", hx.rows(), hx.cols()),
            found: format!("{}x{}", hy.rows(), hy.cols()),
        });
    }
    if hx.rows() == 0 {
        return Err(NumError::InvalidArgument(format!("{op}: empty batch")));
    }
    Ok(())
}

/// Per-feature cosine similarity taken over the batch axis.
pub fn batch_cosine(hx: &Matrix, hy: &Matrix, eps: f64) -> Result<Vec<f64>> {
    check_pair("batch_cosine", hx, hy)?;
    let n_f = hx.cols();
    let mut xy = vec![0.0; n_f];
    let mut xx = vec![0.0; n_f];
    let mut yy = vec![0.0; n_f];
    for r in 0..hx.rows() {
        for (f, (a, b)) in hx.row(r).iter().zip(hy.row(r)).enumerate() {
            xy[f] += a * b;
            xx[f] += a * a;
            yy[f] += b * b;
        }
    }
    Ok((0..n_f)
        .map(|f| {
            let (nx, ny) = (xx[f].sqrt(), yy[f].sqrt());
            if nx < eps || ny < eps {
                0.0
            } else {
                (xy[f] / (nx * ny)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Similarity between `hy` and `hx` weighted by each structure column of
/// `m`, taken over the feature axis and averaged over the batch.
/// Returns a `1 × n_s` row.
pub fn structure_cosine(
    hx: &Matrix,
    hy: &Matrix,
    m: &Matrix,
    eps: f64,
    mode: CosineMode,
) -> Result<Matrix> {
    check_pair("structure_cosine", hx, hy)?;
    if m.rows() != hx.cols() {
        return Err(NumError::Shape {
            op: "structure_cosine",
            expected: format!("M with {} rows", hx.cols()),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    let b = hx.rows();
    let n_s = m.cols();
    let mut xy = hx.clone();
    for (v, y) in xy.as_mut_slice().iter_mut().zip(hy.as_slice()) {
        *v *= y;
    }
    let num = xy.matmul(m)?;
    let (x_rad, y_rad) = match mode {
        CosineMode::Proper => (
            hx.map(|v| v * v).matmul(&m.map(|v| v * v))?,
            hy.as_slice()
                .chunks(hy.cols())
                .map(|r| r.iter().map(|v| v * v).sum::<f64>())
                .collect::<Vec<_>>(),
        ),
        CosineMode::Literal => (
            hx.matmul(m)?,
            hy.as_slice()
                .chunks(hy.cols())
                .map(|r| r.iter().sum::<f64>())
                .collect::<Vec<_>>(),
        ),
    };
    let mut out = vec![0.0; n_s];
    for r in 0..b {
        for (s, o) in out.iter_mut().enumerate() {
            let (xr, yr) = (x_rad.get(r, s), y_rad[r]);
            if xr <= 0.0 || yr <= 0.0 {
                continue;
            }
            let (nx, ny) = (xr.sqrt(), yr.sqrt());
            if nx < eps || ny < eps {
                continue;
            }
            let c = num.get(r, s) / (nx * ny);
            *o += match mode {
                CosineMode::Proper => c.clamp(-1.0, 1.0),
                CosineMode::Literal => c,
            };
        }
    }
    for o in &mut out {
        *o /= b as f64;
    }
    Matrix::from_vec(1, n_s, out)
}

//! Singular values via one-sided Jacobi rotations.
//!
//! Only the values are needed (spectral diagnostics), so no U/V accumulation.
//! The matrix is transposed up-front when that makes the column count the
//! smaller side, keeping each sweep over min(n,d)² column pairs.

use crate::error::{Error, Result};

use super::Tensor;

const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

/// Singular values of a rank-2 tensor, descending, each ≥ 0.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = m.dims2()?;
    if rows == 0 || cols == 0 {
        return Err(Error::BadShape {
            op: "singular_values",
            expected: "a non-empty matrix",
            got: m.shape().to_vec(),
        });
    }

    // Work with columns; orthogonalize the smaller side.
    let (h, w, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut columns: Vec<Vec<f64>> = vec![vec![0.0; h]; w];
    for i in 0..rows {
        for j in 0..cols {
            let v = m.data()[i * cols + j];
            if transpose {
                columns[i][j] = v;
            } else {
                columns[j][i] = v;
            }
        }
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..w {
            for q in (p + 1)..w {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&columns[p], &columns[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..h {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.abs() <= JACOBI_TOL * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = columns.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                for i in 0..h {
                    let vp = cp[i];
                    let vq = cq[i];
                    cp[i] = c * vp - s * vq;
                    cq[i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut values: Vec<f64> = columns
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    Ok(values)
}

//! Differentiable primitives shared by the forward and backward passes.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

pub const RMS_EPS: f64 = 1e-6;
/// Additive mask value; large enough that masked weights underflow to zero.
pub const MASK_NEG: f64 = -1e9;

/// Row-wise RMS normalization with a learned gain.
pub fn rms_norm(x: &Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt();
        row.zip_mut_with(&gain.view(), |v, g| *v = *v / rms * g);
    }
    out
}

/// Gradients of [`rms_norm`]: returns `(d_input, d_gain)`.
pub fn rms_norm_backward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgain = Array1::zeros(gain.raw_dim());
    for (r, (xrow, dyrow)) in x.rows().into_iter().zip(dy.rows()).enumerate() {
        let rms = (xrow.iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt();
        // s = sum_i g_i dy_i x_i
        let mut s = 0.0;
        for i in 0..x.ncols() {
            s += gain[i] * dyrow[i] * xrow[i];
            dgain[i] += dyrow[i] * xrow[i] / rms;
        }
        let inv = 1.0 / rms;
        let inv3 = inv * inv * inv / n;
        for i in 0..x.ncols() {
            dx[[r, i]] = gain[i] * dyrow[i] * inv - xrow[i] * s * inv3;
        }
    }
    (dx, dgain)
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu_derivative(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through a row-wise softmax: `dz = p ⊙ (dp − Σ p ⊙ dp)`.
pub fn softmax_rows_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(probs.raw_dim());
    for (r, (prow, dprow)) in probs.rows().into_iter().zip(dprobs.rows()).enumerate() {
        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(p, d)| p * d).sum();
        for c in 0..probs.ncols() {
            dz[[r, c]] = prow[c] * (dprow[c] - dot);
        }
    }
    dz
}

/// Log-softmax of one row (for decode scoring).
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - log_sum).collect()
}

/// Per-slot rotary angle tables: `cos`/`sin` are `[len, head_dim/2]`.
pub fn rope_tables(
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> (Array2<f64>, Array2<f64>) {
    let half = head_dim / 2;
    let mut cos = Array2::zeros((positions.len(), half));
    let mut sin = Array2::zeros((positions.len(), half));
    for (s, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos[[s, i]] = theta.cos();
            sin[[s, i]] = theta.sin();
        }
    }
    (cos, sin)
}

/// Rotary rotation (half-split pairing) applied in place to `[H, L, hd]`.
pub fn apply_rope(x: &mut Array3<f64>, cos: &ArrayView2<f64>, sin: &ArrayView2<f64>) {
    let half = x.len_of(Axis(2)) / 2;
    for mut head in x.axis_iter_mut(Axis(0)) {
        for (s, mut row) in head.axis_iter_mut(Axis(0)).enumerate() {
            for i in 0..half {
                let (a, b) = (row[i], row[i + half]);
                let (c, sn) = (cos[[s, i]], sin[[s, i]]);
                row[i] = a * c - b * sn;
                row[i + half] = a * sn + b * c;
            }
        }
    }
}

/// Backward of [`apply_rope`]: the rotation is orthogonal, so the gradient
/// rotates by the negative angle.
pub fn apply_rope_backward(dx: &mut Array3<f64>, cos: &ArrayView2<f64>, sin: &ArrayView2<f64>) {
    let half = dx.len_of(Axis(2)) / 2;
    for mut head in dx.axis_iter_mut(Axis(0)) {
        for (s, mut row) in head.axis_iter_mut(Axis(0)).enumerate() {
            for i in 0..half {
                let (d1, d2) = (row[i], row[i + half]);
                let (c, sn) = (cos[[s, i]], sin[[s, i]]);
                row[i] = d1 * c + d2 * sn;
                row[i + half] = -d1 * sn + d2 * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rms_norm_of_zero_input_is_zero() {
        let x = Array2::zeros((3, 4));
        let g = Array1::ones(4);
        let y = rms_norm(&x, &g);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = array![[1.0, 2.0, 3.0], [-(1e9), 0.0, 0.0]];
        softmax_rows(&mut s);
        for row in s.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s[[1, 0]] < 1e-300, "masked entry underflows to zero");
    }

    #[test]
    fn rope_round_trips_through_backward() {
        let positions = [0usize, 5, 8192];
        let (cos, sin) = rope_tables(&positions, 8, 10_000.0);
        let mut x = Array3::from_shape_fn((2, 3, 8), |(h, s, i)| {
            (h * 31 + s * 7 + i) as f64 * 0.1 - 1.0
        });
        let orig = x.clone();
        apply_rope(&mut x, &cos.view(), &sin.view());
        apply_rope_backward(&mut x, &cos.view(), &sin.view());
        for (a, b) in x.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let g = array![1.1, 0.9, 1.3];
        let dy = array![[0.2, -0.5, 1.0], [0.7, 0.3, -0.2]];
        let (dx, dgain) = rms_norm_backward(&x, &g, &dy);
        let f = |x: &Array2<f64>, g: &Array1<f64>| (rms_norm(x, g) * &dy).sum();
        let eps = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += eps;
                let mut xm = x.clone();
                xm[[r, c]] -= eps;
                let fd = (f(&xp, &g) - f(&xm, &g)) / (2.0 * eps);
                assert!((fd - dx[[r, c]]).abs() < 1e-7, "dx[{r},{c}]");
            }
        }
        for c in 0..3 {
            let mut gp = g.clone();
            gp[c] += eps;
            let mut gm = g.clone();
            gm[c] -= eps;
            let fd = (f(&x, &gp) - f(&x, &gm)) / (2.0 * eps);
            assert!((fd - dgain[c]).abs() < 1e-7, "dgain[{c}]");
        }
    }
}

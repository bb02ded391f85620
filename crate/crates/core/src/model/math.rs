//! Dense vector kernels shared by the forward and backward passes.

/// `out = b + x · W` with `W` stored row-major as `in × out`.
pub(crate) fn matvec(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    debug_assert_eq!(w.len(), x.len() * n_out);
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// Accumulates `dW += x ⊗ dy`, `db += dy` and, if requested, `dx += W · dy`.
pub(crate) fn matvec_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_out = dy.len();
    for (d, &g) in db.iter_mut().zip(dy) {
        *d += g;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n_out..(i + 1) * n_out];
        for (d, &g) in row.iter_mut().zip(dy) {
            *d += xi * g;
        }
    }
    if let Some(dx) = dx {
        for (i, d) in dx.iter_mut().enumerate() {
            let row = &w[i * n_out..(i + 1) * n_out];
            *d += row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    (y, xhat, rstd)
}

/// Accumulates parameter gradients and adds the input gradient into `dx`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    for i in 0..dy.len() {
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        let dxh = dy[i] * gain[i];
        mean_d += dxh;
        mean_dx += dxh * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        dx[i] += rstd * (dxh - mean_d - xhat[i] * mean_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Log-softmax of `logits / temperature` restricted to `keep`; excluded
/// entries are `-inf`. Max-subtracted.
pub fn log_softmax(logits: &[f64], keep: Option<&[bool]>, temperature: f64) -> Vec<f64> {
    let kept = |i: usize| keep.map_or(true, |k| k[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &z) in logits.iter().enumerate() {
        if kept(i) {
            max = max.max(z / temperature);
        }
    }
    let mut sum = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        if kept(i) {
            sum += (z / temperature - max).exp();
        }
    }
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if kept(i) {
                z / temperature - lse
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits, None, 1.0)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Exact `KL(p‖q) = Σ p (log p − log q)` from log-probabilities.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

pub fn entropy(log_p: &[f64]) -> f64 {
    -log_p
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| lp.exp() * lp)
        .sum::<f64>()
}

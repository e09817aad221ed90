//! Scaled cosine logits, symmetric cross-entropy, and the analytic gradient
//! back to the adapter parameters.

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, matmul_transposed, rowwise_l2_normalize, Matrix, NORM_EPS};

/// Default logit scale.
pub const DEFAULT_SCALE: f64 = 100.0;

/// Image-to-text logits and their transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPair {
    pub image_logits: Matrix,
    pub text_logits: Matrix,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient in the canonical flat adapter layout.
    pub grad: Vec<f64>,
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("logit scale must be positive, got {s}")))
    }
}

/// `s · norm(adapted) · norm(text)ᵀ` and its transpose.
pub fn compute_logits(adapted: &Matrix, text_batch: &Matrix, s: f64) -> Result<LogitPair> {
    check_scale(s)?;
    if adapted.shape() != text_batch.shape() {
        return Err(Error::shape(format!(
            "image batch {:?} and text batch {:?} differ",
            adapted.shape(),
            text_batch.shape()
        )));
    }
    let img = rowwise_l2_normalize(adapted)?;
    let txt = rowwise_l2_normalize(text_batch)?;
    let cos = matmul_transposed(&img, &txt)?;
    let image_logits = Matrix::new(cos.rows(), cos.cols(), cos.data().iter().map(|c| s * c).collect())?;
    let text_logits = image_logits.transpose();
    Ok(LogitPair {
        image_logits,
        text_logits,
        scale: s,
    })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of each row against its diagonal position.
fn diagonal_ce(logits: &Matrix) -> f64 {
    let b = logits.rows();
    let total: f64 = logits
        .row_iter()
        .enumerate()
        .map(|(i, row)| log_sum_exp(row) - row[i])
        .sum();
    total / b as f64
}

/// Average of the image-direction and text-direction cross-entropies, with
/// sample `i` matched to column `i`.
pub fn symmetric_ce_loss(lp: &LogitPair) -> Result<f64> {
    let (r, c) = lp.image_logits.shape();
    if r != c || lp.text_logits.shape() != (c, r) {
        return Err(Error::shape(format!("logits must be square, got {r}x{c}")));
    }
    if r == 0 {
        return Err(Error::shape("empty batch"));
    }
    let loss = 0.5 * (diagonal_ce(&lp.image_logits) + diagonal_ce(&lp.text_logits));
    if loss.is_finite() {
        Ok(loss.max(0.0))
    } else {
        Err(Error::Numeric("loss is not finite".into()))
    }
}

fn check_batch(p: &AdapterParams, features: &Matrix, text_batch: &Matrix) -> Result<()> {
    if features.cols() != p.dim() || features.shape() != text_batch.shape() {
        return Err(Error::shape(format!(
            "features {:?} / text {:?} do not fit adapter of dim {}",
            features.shape(),
            text_batch.shape(),
            p.dim()
        )));
    }
    if features.rows() == 0 {
        return Err(Error::shape("empty batch"));
    }
    Ok(())
}

/// Loss of the full forward chain, without gradients.
pub fn loss_value(p: &AdapterParams, features: &Matrix, text_batch: &Matrix, s: f64) -> Result<f64> {
    check_batch(p, features, text_batch)?;
    let fwd = p.forward(features)?;
    symmetric_ce_loss(&compute_logits(&fwd.adapted, text_batch, s)?)
}

/// Symmetric contrastive loss and its exact gradient with respect to the
/// flattened adapter parameters.
pub fn loss_and_grad(
    p: &AdapterParams,
    features: &Matrix,
    text_batch: &Matrix,
    s: f64,
) -> Result<LossGrad> {
    check_batch(p, features, text_batch)?;
    check_scale(s)?;
    let (b, d) = features.shape();
    let fwd = p.forward(features)?;

    let norms: Vec<f64> = fwd.adapted.row_iter().map(l2_norm).collect();
    let img = rowwise_l2_normalize(&fwd.adapted)?;
    let txt = rowwise_l2_normalize(text_batch)?;
    let cos = matmul_transposed(&img, &txt)?;
    let logits = Matrix::new(b, b, cos.data().iter().map(|c| s * c).collect())?;
    let lp = LogitPair {
        text_logits: logits.transpose(),
        image_logits: logits,
        scale: s,
    };
    let loss = symmetric_ce_loss(&lp)?;

    // dL/dlogits[i][j] = (P_img[i][j] - δij + P_txt[j][i] - δij) / (2B)
    let p_img = crate::numerics::rowwise_softmax(&lp.image_logits)?;
    let p_txt = crate::numerics::rowwise_softmax(&lp.text_logits)?;
    let half_inv_b = 0.5 / b as f64;
    let mut g_logits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 2.0 } else { 0.0 };
            g_logits[i * b + j] = half_inv_b * (p_img.get(i, j) + p_txt.get(j, i) - delta);
        }
    }

    let mut grad = vec![0.0; p.parameter_count()];
    let (gw1, rest) = grad.split_at_mut(d * d);
    let (gb1, rest) = rest.split_at_mut(d);
    let (gw2, gb2) = rest.split_at_mut(d * d);

    let mut d_img = vec![0.0; d];
    let mut d_adapted = vec![0.0; d];
    let mut d_z = vec![0.0; d];
    let mut d_pre = vec![0.0; d];
    for i in 0..b {
        // back through the scaled cosine product
        d_img.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..b {
            let g = s * g_logits[i * b + j];
            for (acc, t) in d_img.iter_mut().zip(txt.row(j)) {
                *acc += g * t;
            }
        }
        // back through the row normalisation
        let u_hat = img.row(i);
        if norms[i] > NORM_EPS {
            let proj = dot(u_hat, &d_img);
            for k in 0..d {
                d_adapted[k] = (d_img[k] - u_hat[k] * proj) / norms[i];
            }
        } else {
            for k in 0..d {
                d_adapted[k] = d_img[k] / NORM_EPS;
            }
        }
        // adapted = attention ⊙ x, then softmax
        let x = features.row(i);
        let att = fwd.attention.row(i);
        let mut weighted = 0.0;
        for k in 0..d {
            d_z[k] = d_adapted[k] * x[k];
            weighted += att[k] * d_z[k];
        }
        for k in 0..d {
            d_z[k] = att[k] * (d_z[k] - weighted);
        }
        // z = W2 h + b2
        let h = fwd.hidden.row(i);
        for k in 0..d {
            gb2[k] += d_z[k];
            let row = &mut gw2[k * d..(k + 1) * d];
            for (w, hl) in row.iter_mut().zip(h) {
                *w += d_z[k] * hl;
            }
        }
        // dh = W2ᵀ dz, then through tanh
        d_pre.iter_mut().for_each(|v| *v = 0.0);
        for (k, &dz) in d_z.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            for (acc, w) in d_pre.iter_mut().zip(p.w2.row(k)) {
                *acc += dz * w;
            }
        }
        for (dp, hl) in d_pre.iter_mut().zip(h) {
            *dp *= 1.0 - hl * hl;
        }
        // pre = W1 x + b1
        for k in 0..d {
            gb1[k] += d_pre[k];
            let row = &mut gw1[k * d..(k + 1) * d];
            for (w, xl) in row.iter_mut().zip(x) {
                *w += d_pre[k] * xl;
            }
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient is not finite".into()));
    }
    Ok(LossGrad { loss, grad })
}

/// Text rows for a batch: the class text feature of each sample's label.
pub fn gather_text_batch(class_text: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_text.rows()) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {} classes",
            class_text.rows()
        )));
    }
    Ok(class_text.select_rows(labels))
}

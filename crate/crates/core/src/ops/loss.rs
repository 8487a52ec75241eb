use crate::error::{arg_err, Result};

/// Mean softmax cross-entropy over the batch. Returns `(loss, probabilities)`.
pub fn softmax_xent(logits: &[f32], labels: &[usize], classes: usize) -> Result<(f32, Vec<f32>)> {
    let batch = labels.len();
    if batch == 0 {
        return arg_err("cross-entropy over an empty batch");
    }
    if logits.len() != batch * classes {
        return arg_err(format!(
            "{} logits for batch {batch} x {classes} classes",
            logits.len()
        ));
    }
    let mut probs = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return arg_err(format!("label {label} outside 0..{classes}"));
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for &v in row {
            z += ((v - max) as f64).exp();
        }
        let log_z = z.ln() + max as f64;
        for (c, &v) in row.iter().enumerate() {
            probs[b * classes + c] = (v as f64 - log_z).exp() as f32;
        }
        total += log_z - row[label] as f64;
    }
    Ok(((total / batch as f64) as f32, probs))
}

pub fn softmax_xent_backward(
    upstream: f32,
    probs: &[f32],
    labels: &[usize],
    classes: usize,
) -> Vec<f32> {
    let scale = upstream / labels.len() as f32;
    let mut g: Vec<f32> = probs.iter().map(|p| p * scale).collect();
    for (b, &label) in labels.iter().enumerate() {
        g[b * classes + label] -= scale;
    }
    g
}

/// Index of the largest logit in each row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

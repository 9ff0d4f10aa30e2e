use super::data::Samples;
use super::model::{sigmoid, ModelKind, ModelParams};
use super::FlError;

fn check_dims(model: &ModelParams, data: &Samples) -> Result<(), FlError> {
    if model.dim() != data.dim() + 1 {
        return Err(FlError::DimensionMismatch {
            model: model.dim(),
            data: data.dim() + 1,
        });
    }
    Ok(())
}

/// Mean squared error (linear) or mean binary cross-entropy (logistic).
pub fn loss(model: &ModelParams, data: &Samples) -> Result<f64, FlError> {
    check_dims(model, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, &y) in data.rows() {
        total += match model.kind {
            ModelKind::LinearRegression => (model.margin(x) - y).powi(2),
            ModelKind::LogisticRegression => {
                let p = sigmoid(model.margin(x)).clamp(1e-12, 1.0 - 1e-12);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            }
        };
    }
    Ok(total / data.len() as f64)
}

/// Loss over the union of several datasets.
pub fn pooled_loss<'a>(
    model: &ModelParams,
    parts: impl IntoIterator<Item = &'a Samples>,
) -> Result<f64, FlError> {
    let (mut total, mut n) = (0.0, 0usize);
    for s in parts {
        total += loss(model, s)? * s.len() as f64;
        n += s.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Full-batch gradient of [`loss`].
pub fn gradient(model: &ModelParams, data: &Samples) -> Result<Vec<f64>, FlError> {
    check_dims(model, data)?;
    let mut g = vec![0.0; model.dim()];
    if data.is_empty() {
        return Ok(g);
    }
    let bias = g.len() - 1;
    for (x, &y) in data.rows() {
        let residual = match model.kind {
            ModelKind::LinearRegression => 2.0 * (model.margin(x) - y),
            ModelKind::LogisticRegression => sigmoid(model.margin(x)) - y,
        };
        for (gi, xi) in g[..bias].iter_mut().zip(x) {
            *gi += residual * xi;
        }
        g[bias] += residual;
    }
    let n = data.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// `epochs` steps of full-batch gradient descent.
pub fn local_train(
    model: &ModelParams,
    data: &Samples,
    epochs: usize,
    learning_rate: f64,
) -> Result<ModelParams, FlError> {
    check_dims(model, data)?;
    let mut out = model.clone();
    for _ in 0..epochs {
        let g = gradient(&out, data)?;
        for (w, gi) in out.weights.iter_mut().zip(&g) {
            *w -= learning_rate * gi;
        }
        if !out.is_finite() {
            return Err(FlError::NonFinite("local training"));
        }
    }
    Ok(out)
}

//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The `wasm_bindgen` exports are thin wrappers over the plain functions in
//! [`ops`], which the native tests call directly.

use wasm_bindgen::prelude::*;

pub mod ops {
    use std::cell::OnceCell;

    use multitrain::autograd::Graph;
    use multitrain::config::RunConfig;
    use multitrain::data::{Split, Suite};
    use multitrain::losses::{covariance_loss, total_loss, variance_loss, LossTerms, VarianceFormula};
    use multitrain::tensor::Tensor;
    use multitrain::{Error, Result};

    thread_local! {
        static SUITE: OnceCell<Suite> = const { OnceCell::new() };
    }

    /// Runs `f` against the default synthetic suite, built on first use.
    pub fn with_suite<T>(f: impl FnOnce(&Suite) -> Result<T>) -> Result<T> {
        SUITE.with(|cell| {
            if cell.get().is_none() {
                let suite = RunConfig::parse("", &[])?.suite()?;
                let _ = cell.set(suite);
            }
            f(cell.get().expect("suite initialized"))
        })
    }

    /// Pixel values of one clip, frame-major, with its caption.
    pub fn render_clip(dataset: usize, sample: usize) -> Result<(Vec<f32>, String)> {
        with_suite(|s| {
            let spec = s.registry.get(dataset)?;
            let clip = s.clip::<f32>(dataset, sample)?;
            let split = if s.split_range(dataset, Split::Train)?.contains(&sample) {
                "train"
            } else {
                "test"
            };
            let caption = format!(
                "{}/{sample}: {} ({}, motion {})",
                spec.name, spec.class_names[clip.label], split, s.concepts[clip.concept].name
            );
            Ok((clip.tensor.data().to_vec(), caption))
        })
    }

    /// Variance and covariance penalties of `points`, read as rows of `dim`.
    pub fn regularizers(points: &[f64], dim: usize, eps: f64) -> Result<[f64; 2]> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of {dim}",
                points.len()
            )));
        }
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Tensor::from_f64(vec![points.len() / dim, dim], points)?);
        let v = variance_loss(&mut g, z, eps, VarianceFormula::Vicreg)?;
        let c = covariance_loss(&mut g, z)?;
        Ok([g.item(v), g.item(c)])
    }

    /// `L / (2σ²) + ln σ` and its derivative in σ, for each σ.
    pub fn sigma_objective(loss: f64, sigmas: &[f64]) -> Result<Vec<[f64; 2]>> {
        sigmas
            .iter()
            .map(|&sigma| {
                let mut g: Graph<f64> = Graph::new();
                let lk = g.constant(Tensor::scalar(loss));
                let ls = g.param(Tensor::from_f64(vec![1], &[sigma.ln()])?);
                let terms = LossTerms {
                    variance: None,
                    covariance: None,
                    dataset: &[Some(lk)],
                    counts: &[1],
                };
                let (t, _) = total_loss(&mut g, &terms, ls, false)?;
                g.backward(t)?;
                let d_log_sigma = g.grad(ls).map(|d| d[0]).unwrap_or(0.0);
                Ok([g.item(t), d_log_sigma / sigma])
            })
            .collect()
    }
}

fn js(e: multitrain::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[T, H, W, C, datasets, clips per dataset...]`.
#[wasm_bindgen]
pub fn suite_layout() -> Result<Vec<u32>, JsError> {
    ops::with_suite(|s| {
        let mut out: Vec<u32> = s.clip_shape.iter().map(|&v| v as u32).collect();
        out.push(s.datasets() as u32);
        for d in s.registry.iter() {
            out.push((d.train + d.test) as u32);
        }
        Ok(out)
    })
    .map_err(js)
}

#[wasm_bindgen]
pub fn render_clip(dataset: usize, sample: usize) -> Result<Vec<f32>, JsError> {
    ops::render_clip(dataset, sample).map(|(px, _)| px).map_err(js)
}

#[wasm_bindgen]
pub fn clip_caption(dataset: usize, sample: usize) -> Result<String, JsError> {
    ops::render_clip(dataset, sample).map(|(_, c)| c).map_err(js)
}

/// `[variance, covariance]` for points laid out as rows of `dim`.
#[wasm_bindgen]
pub fn regularizers(points: &[f64], dim: usize, eps: f64) -> Result<Vec<f64>, JsError> {
    ops::regularizers(points, dim, eps).map(|r| r.to_vec()).map_err(js)
}

/// Interleaved `[value, derivative]` pairs of the weighted objective.
#[wasm_bindgen]
pub fn sigma_objective(loss: f64, sigmas: &[f64]) -> Result<Vec<f64>, JsError> {
    ops::sigma_objective(loss, sigmas)
        .map(|v| v.into_iter().flatten().collect())
        .map_err(js)
}

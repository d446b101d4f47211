//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Arrays cross the boundary flattened into `Float64Array`s.

pub mod demo;

use wasm_bindgen::prelude::*;

use demo::KernelChoice;

fn js_err(e: smd_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[xs; exact; gaussian]`, each `points` long.
#[wasm_bindgen(js_name = stepCurves)]
pub fn step_curves(lambda: f64, beta: f64, x_t: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let c = demo::step_curves(lambda, beta, x_t, points).map_err(js_err)?;
    Ok([c.xs, c.exact, c.gaussian].concat())
}

/// Four numbers per lambda: `lambda, bound, error, std_err`.
#[wasm_bindgen(js_name = boundTable)]
pub fn bound_table(beta: f64, lambdas: Vec<f64>, n_outer: usize, n_inner: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let rows = demo::bound_table(beta, &lambdas, n_outer, n_inner, seed.into()).map_err(js_err)?;
    Ok(rows.concat())
}

#[wasm_bindgen]
pub struct SampleCloud {
    xy: Vec<f64>,
    recall: f64,
}

#[wasm_bindgen]
impl SampleCloud {
    /// Interleaved `x, y` pairs.
    #[wasm_bindgen(getter)]
    pub fn xy(&self) -> Vec<f64> {
        self.xy.clone()
    }

    #[wasm_bindgen(getter, js_name = modeRecall)]
    pub fn mode_recall(&self) -> f64 {
        self.recall
    }
}

#[wasm_bindgen(js_name = gridSamples)]
pub fn grid_samples(
    grid_size: usize,
    spacing: f64,
    std: f64,
    t_used: usize,
    n: usize,
    exact: bool,
    seed: u32,
) -> Result<SampleCloud, JsError> {
    let kernel = if exact { KernelChoice::Exact } else { KernelChoice::Gaussian };
    let c = demo::grid_cloud(grid_size, spacing, std, t_used, n, kernel, seed.into()).map_err(js_err)?;
    Ok(SampleCloud { xy: c.points.iter().flat_map(|p| [p[0], p[1]]).collect(), recall: c.mode_recall })
}

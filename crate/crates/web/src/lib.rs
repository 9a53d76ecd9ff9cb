//! WebAssembly bindings for the static demo page in `www/`. Each export
//! returns a JSON string the page plots on a canvas.

pub mod demo;

use wasm_bindgen::prelude::*;

fn to_js(r: mobiclr::Result<serde_json::Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn synth_city(n_regions: usize, noise_level: f64, concentration: f64, seed: u32) -> Result<String, JsError> {
    to_js(demo::synth_city(n_regions, noise_level, concentration, seed.into()))
}

#[wasm_bindgen]
pub fn augment_views(kinds: &str, strength: f64, seed: u32) -> Result<String, JsError> {
    to_js(demo::augment_views(kinds, strength, seed.into()))
}

#[wasm_bindgen]
pub fn ntxent_curve(temperature: f64, batch: usize, seed: u32) -> Result<String, JsError> {
    to_js(demo::ntxent_curve(temperature, batch, seed.into()))
}

//! WebAssembly bindings behind `www/index.html`.
//!
//! Every entry point takes plain numbers and returns a JSON string, so the page
//! needs nothing beyond `JSON.parse`.

mod scenes;

use wasm_bindgen::prelude::*;

pub use scenes::{barycenter_scene, defense_scene, transport_scene, BarycenterScene, DefenseScene, TransportScene};

fn to_js<T: serde::Serialize>(r: raid::Result<T>) -> Result<String, JsValue> {
    let value = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Entropic plan between two random clouds, next to the exact optimum.
#[wasm_bindgen]
pub fn transport(n: usize, m: usize, epsilon: f64, seed: u64) -> Result<String, JsValue> {
    to_js(transport_scene(n, m, epsilon, seed))
}

/// Barycenter of two planar classes on a fixed grid.
#[wasm_bindgen]
pub fn barycenter(tau: f64, separation: f64, seed: u64) -> Result<String, JsValue> {
    to_js(barycenter_scene(tau, separation, seed))
}

/// Defense-only epochs on two planar classes, with the attacker's accuracy before and after.
#[wasm_bindgen]
pub fn defend(epochs: usize, step: f64, seed: u64) -> Result<String, JsValue> {
    to_js(defense_scene(epochs, step, seed))
}

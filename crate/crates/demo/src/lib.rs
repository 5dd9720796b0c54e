//! Small wasm exports for the static page in `www/`.

use std::collections::BTreeMap;

use qtgvqa::awmtl::{AwmtlSign, TypeState};
use qtgvqa::data::sample_frames;
use qtgvqa::metrics::{ewaa, ifwaa};
use wasm_bindgen::prelude::*;

fn js_err(e: qtgvqa::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Difficulty followed by weights for each type: `[P_0.., w_0..]`.
pub fn type_weights(losses: &[f64], accs: &[f64], alpha: f64, flipped: bool) -> qtgvqa::Result<Vec<f64>> {
    if losses.len() != accs.len() {
        return Err(qtgvqa::Error::Contract("one accuracy per loss".into()));
    }
    let sign = if flipped { AwmtlSign::Flipped } else { AwmtlSign::AsWritten };
    let mut s = TypeState::new(losses.len(), alpha, 0.0, 1.0, sign, false)?;
    for (q, (&l, &a)) in losses.iter().zip(accs).enumerate() {
        s.update_stats(q, l, a)?;
    }
    s.refresh();
    let mut out = s.difficulty.clone();
    out.extend(&s.weights);
    Ok(out)
}

/// `[IFWAA, EWAA, micro accuracy]` for per-type accuracies and frequencies.
pub fn averages(accs: &[f64], freqs: &[f64]) -> qtgvqa::Result<Vec<f64>> {
    if accs.len() != freqs.len() {
        return Err(qtgvqa::Error::Contract("one frequency per accuracy".into()));
    }
    let total: f64 = freqs.iter().sum();
    let a: BTreeMap<usize, f64> = accs.iter().copied().enumerate().collect();
    let f: BTreeMap<usize, f64> = freqs.iter().map(|x| x / total).enumerate().collect();
    let micro = a.iter().map(|(q, x)| f[q] * x).sum();
    Ok(vec![ifwaa(&a, &f)?, ewaa(&a)?, micro])
}

#[wasm_bindgen(js_name = typeWeights)]
pub fn type_weights_js(losses: &[f64], accs: &[f64], alpha: f64, flipped: bool) -> Result<Vec<f64>, JsValue> {
    type_weights(losses, accs, alpha, flipped).map_err(js_err)
}

#[wasm_bindgen(js_name = averages)]
pub fn averages_js(accs: &[f64], freqs: &[f64]) -> Result<Vec<f64>, JsValue> {
    averages(accs, freqs).map_err(js_err)
}

/// Selected frame indices; the last entry is 1 when the clip was padded.
#[wasm_bindgen(js_name = sampleFrames)]
pub fn sample_frames_js(total: u32, keys: u32, window: u32) -> Result<Vec<u32>, JsValue> {
    let s = sample_frames(total as usize, keys as usize, window as usize).map_err(js_err)?;
    let mut out: Vec<u32> = s.indices.iter().map(|&i| i as u32).collect();
    out.push(u32::from(s.padded));
    Ok(out)
}

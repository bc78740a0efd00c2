//! WebAssembly bindings for the browser demo.
//!
//! Each export has a plain Rust twin so the logic is testable natively.

use incgan::datagen::{generate_sample, GeneratorConfig, Origin, SampleKey, Split};
use incgan::diffcore::Tensor;
use incgan::losses::{distillation_loss, eval_scalar, tempered_softmax};
use incgan::memory::{class_mean, classify_nme, select_exemplars};
use wasm_bindgen::prelude::*;

/// One synthetic image as `size × size` RGBA bytes.
pub fn sample_rgba(arch: usize, gan: bool, index: usize, seed: u64, amplitude: f64, size: usize) -> Result<Vec<u8>, String> {
    if !(4..=256).contains(&size) || size % 4 != 0 {
        return Err(format!("size must be a multiple of 4 in 4..=256, got {size}"));
    }
    if !(0.0..=1.0).contains(&amplitude) {
        return Err(format!("amplitude must lie in [0, 1], got {amplitude}"));
    }
    let cfg = GeneratorConfig {
        image_size: size,
        amplitude,
        seed,
        ..GeneratorConfig::default()
    };
    let key = SampleKey {
        arch,
        origin: if gan { Origin::Gan } else { Origin::Real },
        split: Split::Test,
        index,
    };
    let image = generate_sample(&cfg.spec(arch), &cfg, key).image;
    let data = image.data();
    let plane = size * size;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push(((data[c * plane + p] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
        out.push(255);
    }
    Ok(out)
}

/// Tempered distributions of both logit vectors followed by the
/// distillation loss: `[p_old.., p_new.., loss]`.
pub fn distillation(old: &[f64], new: &[f64], temperature: f64) -> Result<Vec<f64>, String> {
    if old.is_empty() || old.len() != new.len() {
        return Err(format!("logit vectors must be non-empty and equal length ({} vs {})", old.len(), new.len()));
    }
    let k = old.len();
    let old_t = Tensor::from_f64(&[1, k], old).map_err(|e| e.to_string())?;
    let new_t = Tensor::from_f64(&[1, k], new).map_err(|e| e.to_string())?;
    let loss = eval_scalar(|t| {
        let n = t.input(new_t.clone());
        distillation_loss(t, n, &old_t, temperature)
    })
    .map_err(|e| e.to_string())?;
    let mut out = tempered_softmax(old, temperature);
    out.extend(tempered_softmax(new, temperature));
    out.push(loss);
    Ok(out)
}

fn pairs(flat: &[f32]) -> Result<Vec<Vec<f32>>, String> {
    if flat.len() % 2 != 0 {
        return Err("points must be flattened (x, y) pairs".into());
    }
    Ok(flat.chunks(2).map(<[f32]>::to_vec).collect())
}

/// Exemplars of a 2-D point cloud: the `m` points nearest its mean,
/// nearest first.
pub fn exemplars_2d(points: &[f32], m: usize) -> Result<Vec<u32>, String> {
    let pts = pairs(points)?;
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    let idx = select_exemplars(&pts, m).map_err(|e| e.to_string())?;
    Ok(idx.into_iter().map(|i| i as u32).collect())
}

/// Mean of the listed points of a 2-D cloud.
pub fn template_2d(points: &[f32], chosen: &[u32]) -> Result<Vec<f32>, String> {
    let pts = pairs(points)?;
    let sel: Vec<Vec<f32>> = chosen
        .iter()
        .map(|&i| pts.get(i as usize).cloned().ok_or(format!("index {i} out of range")))
        .collect::<Result<_, _>>()?;
    class_mean(&sel).map_err(|e| e.to_string())
}

/// Nearest-template class of every cell of a `width × height` grid spanning
/// `[-extent, extent]²`, row-major from the top-left corner.
pub fn nme_map(templates: &[f32], width: usize, height: usize, extent: f32) -> Result<Vec<u8>, String> {
    let labelled: Vec<(usize, Vec<f32>)> = pairs(templates)?.into_iter().enumerate().collect();
    if labelled.is_empty() || labelled.len() > 255 {
        return Err("between 1 and 255 templates are needed".into());
    }
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let x = -extent + 2.0 * extent * (col as f32 + 0.5) / width as f32;
            let y = extent - 2.0 * extent * (row as f32 + 0.5) / height as f32;
            out.push(classify_nme(&[x, y], &labelled).unwrap_or(0) as u8);
        }
    }
    Ok(out)
}

#[wasm_bindgen(js_name = sampleRgba)]
pub fn js_sample_rgba(arch: usize, gan: bool, index: usize, seed: u32, amplitude: f64, size: usize) -> Result<Vec<u8>, JsError> {
    sample_rgba(arch, gan, index, seed as u64, amplitude, size).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = distillation)]
pub fn js_distillation(old: &[f64], new: &[f64], temperature: f64) -> Result<Vec<f64>, JsError> {
    distillation(old, new, temperature).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = exemplars2d)]
pub fn js_exemplars_2d(points: &[f32], m: usize) -> Result<Vec<u32>, JsError> {
    exemplars_2d(points, m).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = template2d)]
pub fn js_template_2d(points: &[f32], chosen: &[u32]) -> Result<Vec<f32>, JsError> {
    template_2d(points, chosen).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = nmeMap)]
pub fn js_nme_map(templates: &[f32], width: usize, height: usize, extent: f32) -> Result<Vec<u8>, JsError> {
    nme_map(templates, width, height, extent).map_err(|e| JsError::new(&e))
}

//! WebAssembly bindings for the static demo page in `www/`. Every export
//! returns JSON text; the page parses it.

use consistent_attention::consistency::{
    consistency_penalty, project_consistent_oracle, reparameterized_pair, solve_witness, DualWitness,
};
use consistent_attention::eval::{average_precision, iou_at_quantile, perturb, IOU_QUANTILES};
use consistent_attention::grid::{NeighborhoodMap, ProbabilityMap, SpatialGrid};
use consistent_attention::synth::{generate, DatasetSpec};
use consistent_attention::Error;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn square_side(len: usize) -> Option<usize> {
    let side = (len as f64).sqrt().round() as usize;
    (side * side == len).then_some(side)
}

/// Square grids when both lengths are perfect squares, single rows otherwise.
fn grids_for(fine: usize, coarse: usize) -> Result<(SpatialGrid, SpatialGrid), Error> {
    match (square_side(fine), square_side(coarse)) {
        (Some(f), Some(c)) => Ok((SpatialGrid::square(f)?, SpatialGrid::square(c)?)),
        _ => Ok((SpatialGrid::line(fine)?, SpatialGrid::line(coarse)?)),
    }
}

#[derive(Debug, Serialize)]
pub struct Projection {
    pub tau_fine: Vec<f64>,
    pub tau_coarse: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu_fine: Vec<f64>,
    pub mu_coarse: Vec<f64>,
    pub objective: f64,
    pub oracle_objective: f64,
    pub oracle_iterations: usize,
    /// Penalty with all multipliers at zero; 0 only for already consistent maps.
    pub penalty_at_zero: f64,
    pub penalty_at_witness: f64,
}

/// Normalizes two nonnegative weight vectors and projects them onto the
/// consistent set both by the closed-form witness and by the oracle.
pub fn projection(fine_weights: &[f64], coarse_weights: &[f64]) -> Result<Projection, Error> {
    let (gf, gc) = grids_for(fine_weights.len(), coarse_weights.len())?;
    let tf = ProbabilityMap::from_weights(gf, fine_weights.to_vec())?;
    let tc = ProbabilityMap::from_weights(gc, coarse_weights.to_vec())?;
    let nmap = NeighborhoodMap::blocks(tf.grid(), tc.grid())?;
    let w = solve_witness(&tf, &tc, &nmap)?;
    let pair = reparameterized_pair(&tf, &tc, &w, &nmap)?;
    let oracle = project_consistent_oracle(&tf.smoothed(1e-12), &tc.smoothed(1e-12), &nmap, 1e-12)?;
    Ok(Projection {
        penalty_at_zero: consistency_penalty(&tf, &tc, &DualWitness::zeros(tc.len()), &nmap)?,
        penalty_at_witness: consistency_penalty(&tf, &tc, &w, &nmap)?,
        tau_fine: tf.values().to_vec(),
        tau_coarse: tc.values().to_vec(),
        lambda: w.lambda().to_vec(),
        mu_fine: pair.mu_fine.values().to_vec(),
        mu_coarse: pair.mu_coarse.values().to_vec(),
        objective: pair.objective,
        oracle_objective: oracle.objective,
        oracle_iterations: oracle.iterations,
    })
}

#[derive(Debug, Serialize)]
pub struct Sample {
    pub side: usize,
    pub label: u8,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    /// Scores of the raw intensities used as an attribution map.
    pub intensity_ap: Option<f64>,
    pub intensity_iou: Option<[f64; 3]>,
}

/// One synthetic image drawn with the given blob and background settings.
pub fn sample(seed: u64, positive: bool, intensity: f64, radius: f64, texture: f64, noise: f64) -> Result<Sample, Error> {
    let spec = DatasetSpec {
        count: 2,
        pos_frac: 0.5,
        intensity_min: intensity,
        intensity_max: intensity,
        radius_min: radius,
        radius_max: radius,
        texture_amplitude: texture,
        noise_std: noise,
        seed,
    };
    let ds = generate(&spec)?;
    let s = ds.samples.into_iter().find(|s| (s.label == 1) == positive).expect("one sample per class");
    let side = (s.image.len() as f64).sqrt() as usize;
    let attr: Vec<f64> = s.image.iter().map(|&v| f64::from(v)).collect();
    let (intensity_ap, intensity_iou) = if s.mask.contains(&1) {
        let mut iou = [0.0; 3];
        for (slot, q) in iou.iter_mut().zip(IOU_QUANTILES) {
            *slot = iou_at_quantile(&attr, &s.mask, q)?;
        }
        (Some(average_precision(&attr, &s.mask)?), Some(iou))
    } else {
        (None, None)
    };
    Ok(Sample { side, label: s.label, image: s.image, mask: s.mask, intensity_ap, intensity_iou })
}

fn json<T: Serialize>(r: Result<T, Error>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON [`Projection`] of two weight vectors (square or single-row grids).
#[wasm_bindgen]
pub fn project_pair(fine_weights: &[f64], coarse_weights: &[f64]) -> Result<String, JsError> {
    json(projection(fine_weights, coarse_weights))
}

/// JSON [`Sample`].
#[wasm_bindgen]
pub fn synth_sample(seed: u32, positive: bool, intensity: f64, radius: f64, texture: f64, noise: f64) -> Result<String, JsError> {
    json(sample(u64::from(seed), positive, intensity, radius, texture, noise))
}

/// The image with the `fraction` of pixels ranked lowest by `attribution`
/// set to zero.
#[wasm_bindgen]
pub fn remove_pixels(image: &[f32], attribution: &[f64], fraction: f64) -> Result<Vec<f32>, JsError> {
    perturb(image, attribution, fraction).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_two_example() {
        let p = projection(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0]).unwrap();
        assert!((p.lambda[0] + 0.2554128).abs() < 1e-6);
        assert!((p.objective - p.oracle_objective).abs() < 1e-8);
        assert!(p.penalty_at_witness < 1e-12 && p.penalty_at_zero > 0.08);
    }

    #[test]
    fn square_grids_are_inferred() {
        let p = projection(&[1.0; 16], &[1.0; 4]).unwrap();
        assert!(p.mu_fine.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(projection(&[1.0; 16], &[1.0; 3]).is_err());
    }

    #[test]
    fn samples_follow_the_requested_class() {
        let pos = sample(3, true, 0.8, 6.0, 0.2, 0.02).unwrap();
        assert_eq!(pos.label, 1);
        assert!(pos.intensity_ap.unwrap() > 0.5);
        let neg = sample(3, false, 0.8, 6.0, 0.2, 0.02).unwrap();
        assert!(neg.label == 0 && neg.intensity_ap.is_none());
        assert!(sample(3, true, 0.8, 2.0, 0.2, 0.02).is_err());
    }
}

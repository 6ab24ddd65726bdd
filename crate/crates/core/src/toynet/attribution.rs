use super::{Site, ToyNet, COARSE_SIDE, FINE_SIDE, INPUT_SIDE};
use crate::consistency::{project_consistent_oracle, SMOOTHING_FLOOR};
use crate::error::{invalid, shape_err, Result};
use crate::grid::{build_neighborhood, ProbabilityMap, SpatialGrid};

const CHUNK: usize = 50;

/// Nearest-neighbor upsampling of a `side×side` map to `64×64`, renormalized
/// to sum to one.
pub fn upsample(values: &[f64], side: usize) -> Result<Vec<f64>> {
    if side == 0 || values.len() != side * side || INPUT_SIDE % side != 0 {
        return Err(shape_err!("cannot upsample {} values on a {side}x{side} grid", values.len()));
    }
    let f = INPUT_SIDE / side;
    let mut out: Vec<f64> =
        (0..INPUT_SIDE * INPUT_SIDE).map(|p| values[(p / INPUT_SIDE / f) * side + (p % INPUT_SIDE) / f]).collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(invalid!("attribution mass must be positive and finite"));
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

fn site_maps(model: &ToyNet, images: &[&[f32]], site: Site) -> Result<Vec<Vec<f64>>> {
    if !model.variant().has_gate(site) {
        return Err(invalid!("variant {} has no {site:?} gate", model.variant()));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let f = model.forward(chunk)?;
        out.extend(match site {
            Site::Fine => f.tau_fine,
            Site::Coarse => f.tau_coarse,
        }
        .expect("gated site"));
    }
    Ok(out)
}

/// Attention at `site` as a `64×64` attribution map per image.
pub fn attributions(model: &ToyNet, images: &[&[f32]], site: Site) -> Result<Vec<Vec<f64>>> {
    site_maps(model, images, site)?.iter().map(|t| upsample(t, site.side())).collect()
}

/// Post-hoc consistent attributions: both attention maps (floored at the
/// smoothing floor) are KL-projected onto the consistent set, and the
/// projected map at `site` is upsampled.
pub fn projected_attributions(model: &ToyNet, images: &[&[f32]], site: Site, tol: f64) -> Result<Vec<Vec<f64>>> {
    let fine = site_maps(model, images, Site::Fine)?;
    let coarse = site_maps(model, images, Site::Coarse)?;
    let nmap = build_neighborhood(FINE_SIDE, COARSE_SIDE)?;
    fine.into_iter()
        .zip(coarse)
        .map(|(tf, tc)| {
            let tf = ProbabilityMap::new(SpatialGrid::square(FINE_SIDE)?, tf)?.smoothed(SMOOTHING_FLOOR);
            let tc = ProbabilityMap::new(SpatialGrid::square(COARSE_SIDE)?, tc)?.smoothed(SMOOTHING_FLOOR);
            let pair = project_consistent_oracle(&tf, &tc, &nmap, tol)?;
            match site {
                Site::Fine => upsample(pair.mu_fine.values(), FINE_SIDE),
                Site::Coarse => upsample(pair.mu_coarse.values(), COARSE_SIDE),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::{TrainConfig, Variant};

    #[test]
    fn uniform_stays_uniform() {
        let up = upsample(&[1.0 / 64.0; 64], 8).unwrap();
        assert!(up.iter().all(|v| (v - 1.0 / 4096.0).abs() < 1e-18));
    }

    #[test]
    fn delta_fills_its_block() {
        let mut tau = vec![0.0; 256];
        tau[17] = 1.0; // row 1, column 1
        let up = upsample(&tau, 16).unwrap();
        for (p, v) in up.iter().enumerate() {
            let (r, c) = (p / 64, p % 64);
            let inside = (4..8).contains(&r) && (4..8).contains(&c);
            assert_eq!(*v, if inside { 1.0 / 16.0 } else { 0.0 });
        }
    }

    #[test]
    fn missing_site_rejected() {
        let model = ToyNet::new(TrainConfig { variant: Variant::TauK, ..TrainConfig::default() }).unwrap();
        let img = vec![0.5f32; 4096];
        assert!(attributions(&model, &[&img], Site::Coarse).is_err());
        assert_eq!(attributions(&model, &[&img], Site::Fine).unwrap()[0].len(), 4096);
        assert!(upsample(&[1.0; 9], 3).is_err());
    }

    #[test]
    fn projected_maps_are_consistent() {
        let model = ToyNet::new(TrainConfig { variant: Variant::Unconstrained, ..TrainConfig::default() }).unwrap();
        let img: Vec<f32> = (0..4096).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let fine = projected_attributions(&model, &[&img], Site::Fine, 1e-10).unwrap();
        let coarse = projected_attributions(&model, &[&img], Site::Coarse, 1e-10).unwrap();
        // Mass of each 8×8 input block agrees between the two sites.
        for br in 0..8 {
            for bc in 0..8 {
                let block = |a: &[f64]| -> f64 {
                    (0..64).map(|k| a[(br * 8 + k / 8) * 64 + bc * 8 + k % 8]).sum()
                };
                assert!((block(&fine[0]) - block(&coarse[0])).abs() < 1e-9);
            }
        }
    }
}

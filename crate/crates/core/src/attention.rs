//! Attention gates over convolutional feature maps.
//!
//! A gate maps every cell vector `v_i` to a potential
//! `φ_i = ⟨u_i, relu(U v_i / max(‖U v_i‖, ε))⟩`; the softmax of the potentials
//! is the attention distribution `τ`, and the attended map is `τ_i · v_i`.
//!
//! These are plain `f64` evaluations. The trainable versions used by the toy
//! network are built on the autodiff tape in [`crate::toynet`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Result};
use crate::grid::{ProbabilityMap, SpatialGrid};

/// Denominator guard for the unit-normalization inside the potential.
pub const NORM_EPSILON: f64 = 1e-12;

/// One `channels`-dimensional vector per grid cell, stored cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: SpatialGrid,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: SpatialGrid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid!("feature maps need at least one channel"));
        }
        if data.len() != grid.cells() * channels {
            return Err(shape_err!(
                "{} values for {} cells x {} channels",
                data.len(),
                grid.cells(),
                channels
            ));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn zeros(grid: SpatialGrid, channels: usize) -> Self {
        Self { grid, channels, data: vec![0.0; grid.cells() * channels] }
    }

    pub fn grid(&self) -> SpatialGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Parameters of a single potential gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGate {
    channels: usize,
    cells: usize,
    /// `channels × channels`, row-major.
    transform: Vec<f64>,
    /// One key per cell, `cells × channels`, row-major.
    keys: Vec<f64>,
    epsilon: f64,
}

impl AttentionGate {
    pub fn new(channels: usize, cells: usize, transform: Vec<f64>, keys: Vec<f64>) -> Result<Self> {
        if transform.len() != channels * channels {
            return Err(shape_err!("transform must be {channels}x{channels}"));
        }
        if keys.len() != cells * channels {
            return Err(shape_err!("expected {cells} keys of length {channels}"));
        }
        Ok(Self { channels, cells, transform, keys, epsilon: NORM_EPSILON })
    }

    /// Identity transform with all-zero keys. Produces uniform attention.
    pub fn zero_keyed(channels: usize, cells: usize) -> Self {
        let mut transform = vec![0.0; channels * channels];
        for c in 0..channels {
            transform[c * channels + c] = 1.0;
        }
        Self { channels, cells, transform, keys: vec![0.0; cells * channels], epsilon: NORM_EPSILON }
    }

    /// Identity transform plus small noise, keys drawn from `N(0, key_scale²)`.
    pub fn random<R: Rng + ?Sized>(channels: usize, cells: usize, key_scale: f64, rng: &mut R) -> Self {
        let mut gate = Self::zero_keyed(channels, cells);
        for t in gate.transform.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *t += 0.01 * z;
        }
        for k in gate.keys.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *k = key_scale * z;
        }
        gate
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn transform(&self) -> &[f64] {
        &self.transform
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if fm.channels() != self.channels || fm.grid().cells() != self.cells {
            return Err(shape_err!(
                "gate expects {} cells x {} channels, feature map has {} x {}",
                self.cells,
                self.channels,
                fm.grid().cells(),
                fm.channels()
            ));
        }
        Ok(())
    }
}

/// Per-cell potentials of `gate` over `fm`.
pub fn potential(gate: &AttentionGate, fm: &FeatureMap) -> Result<Vec<f64>> {
    gate.check(fm)?;
    let d = gate.channels;
    let mut projected = vec![0.0; d];
    let out = (0..gate.cells)
        .map(|i| {
            let v = fm.cell(i);
            for (r, p) in projected.iter_mut().enumerate() {
                *p = gate.transform[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum();
            }
            let norm = projected.iter().map(|x| x * x).sum::<f64>().sqrt().max(gate.epsilon);
            let key = &gate.keys[i * d..(i + 1) * d];
            key.iter().zip(&projected).map(|(k, p)| k * (p / norm).max(0.0)).sum()
        })
        .collect();
    Ok(out)
}

/// Max-shifted softmax of the potentials.
pub fn attention_softmax(grid: SpatialGrid, potentials: &[f64]) -> Result<ProbabilityMap> {
    if potentials.len() != grid.cells() {
        return Err(shape_err!("{} potentials for grid {}", potentials.len(), grid));
    }
    if potentials.iter().any(|p| !p.is_finite()) {
        return Err(invalid!("potentials must be finite"));
    }
    let max = potentials.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = potentials.iter().map(|p| (p - max).exp()).collect();
    ProbabilityMap::from_weights(grid, weights)
}

/// Attended embedding `τ_i · v_i`.
pub fn attend(tau: &ProbabilityMap, fm: &FeatureMap) -> Result<FeatureMap> {
    if tau.grid() != fm.grid() {
        return Err(shape_err!("attention on {} but features on {}", tau.grid(), fm.grid()));
    }
    let d = fm.channels();
    let data = fm
        .data()
        .chunks(d)
        .zip(tau.values())
        .flat_map(|(v, &t)| v.iter().map(move |x| t * x))
        .collect();
    Ok(FeatureMap { grid: fm.grid(), channels: d, data })
}

/// Two gates in sequence: gate → softmax → attend, then the second gate on the
/// attended output. Returns the second attention map and the final attended map.
pub fn cascade(
    gate_a: &AttentionGate,
    gate_b: &AttentionGate,
    fm: &FeatureMap,
) -> Result<(ProbabilityMap, FeatureMap)> {
    let tau_a = attention_softmax(fm.grid(), &potential(gate_a, fm)?)?;
    let first = attend(&tau_a, fm)?;
    let tau_b = attention_softmax(fm.grid(), &potential(gate_b, &first)?)?;
    let attended = attend(&tau_b, &first)?;
    Ok((tau_b, attended))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_cell(v: &[f64]) -> FeatureMap {
        FeatureMap::new(SpatialGrid::square(1).unwrap(), v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_keys_give_zero_potential() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = SpatialGrid::square(3).unwrap();
        let data = (0..9 * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let fm = FeatureMap::new(g, 4, data).unwrap();
        let gate = AttentionGate::zero_keyed(4, 9);
        assert!(potential(&gate, &fm).unwrap().iter().all(|p| *p == 0.0));
    }

    #[test]
    fn unit_normalized_potential() {
        let gate = AttentionGate::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(potential(&gate, &one_cell(&[2.0, 0.0])).unwrap(), vec![1.0]);
        let gate = AttentionGate::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.7, 2.0]).unwrap();
        assert_eq!(potential(&gate, &one_cell(&[-3.0, -4.0])).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_vector_is_guarded() {
        let gate = AttentionGate::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(potential(&gate, &one_cell(&[0.0, 0.0])).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let gate = AttentionGate::zero_keyed(3, 1);
        assert!(potential(&gate, &one_cell(&[1.0, 2.0])).is_err());
        let gate = AttentionGate::zero_keyed(2, 4);
        assert!(potential(&gate, &one_cell(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let g = SpatialGrid::square(2).unwrap();
        assert_eq!(attention_softmax(g, &[0.0; 4]).unwrap().values(), &[0.25; 4]);
        let phi: Vec<f64> = [1.0f64, 2.0, 3.0, 4.0].iter().map(|x| x.ln()).collect();
        let tau = attention_softmax(g, &phi).unwrap();
        for (t, e) in tau.values().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((t - e).abs() < 1e-15);
        }
        assert!(attention_softmax(g, &[0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(attention_softmax(g, &[0.0, f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn attend_examples() {
        let g = SpatialGrid::square(2).unwrap();
        let fm = FeatureMap::new(g, 2, (1..=8).map(f64::from).collect()).unwrap();
        let uniform = attend(&ProbabilityMap::uniform(g), &fm).unwrap();
        assert_eq!(uniform, fm.scaled(0.25));

        let delta = attend(&ProbabilityMap::delta(g, 2).unwrap(), &fm).unwrap();
        assert_eq!(delta.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]);

        let other = ProbabilityMap::uniform(SpatialGrid::square(3).unwrap());
        assert!(attend(&other, &fm).is_err());
    }

    #[test]
    fn cascade_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = SpatialGrid::square(2).unwrap();
        let data: Vec<f64> = (0..4 * 3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let fm = FeatureMap::new(g, 3, data).unwrap();
        let a = AttentionGate::random(3, 4, 1.0, &mut rng);
        let zero = AttentionGate::zero_keyed(3, 4);

        let (tau, _) = cascade(&a, &zero, &fm).unwrap();
        assert_eq!(tau.values(), &[0.25; 4]);

        let (tau, attended) = cascade(&zero, &zero, &fm).unwrap();
        assert_eq!(tau.values(), &[0.25; 4]);
        for (x, y) in attended.data().iter().zip(fm.scaled(1.0 / 16.0).data()) {
            assert!((x - y).abs() < 1e-15);
        }

        let single = one_cell(&[1.0, -2.0, 0.5]);
        let a1 = AttentionGate::random(3, 1, 1.0, &mut rng);
        let b1 = AttentionGate::random(3, 1, 1.0, &mut rng);
        let (tau, attended) = cascade(&a1, &b1, &single).unwrap();
        assert_eq!(tau.values(), &[1.0]);
        assert_eq!(attended, single);
    }

    proptest! {
        #[test]
        fn softmax_valid_for_large_potentials(phi in prop::collection::vec(-1e3f64..1e3, 16)) {
            let tau = attention_softmax(SpatialGrid::square(4).unwrap(), &phi).unwrap();
            prop_assert!((tau.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(tau.values().iter().all(|t| *t >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(phi in prop::collection::vec(-5f64..5.0, 9), c in -50f64..50.0) {
            let g = SpatialGrid::square(3).unwrap();
            let a = attention_softmax(g, &phi).unwrap();
            let shifted: Vec<f64> = phi.iter().map(|p| p + c).collect();
            let b = attention_softmax(g, &shifted).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn potential_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = SpatialGrid::square(2).unwrap();
            let data: Vec<f64> = (0..4 * 5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let fm = FeatureMap::new(g, 5, data).unwrap();
            let gate = AttentionGate::random(5, 4, 2.0, &mut rng);
            let a = potential(&gate, &fm).unwrap();
            let b = potential(&gate, &fm.scaled(c)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn attend_preserves_sign_pattern(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = SpatialGrid::square(3).unwrap();
            let data: Vec<f64> = (0..9 * 2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let fm = FeatureMap::new(g, 2, data).unwrap();
            let phi: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tau = attention_softmax(g, &phi).unwrap();
            let out = attend(&tau, &fm).unwrap();
            for (x, y) in fm.data().iter().zip(out.data()) {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }
    }
}

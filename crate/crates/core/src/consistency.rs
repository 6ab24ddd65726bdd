//! Consistent attention between a fine and a coarse attention map.
//!
//! The consistent pair `(μ^k, μ^l)` is the KL projection of `(τ^k, τ^l)` onto
//! the set of distribution pairs whose coarse map is the block marginal of the
//! fine map. Two independent routes produce it:
//!
//! * [`project_consistent_oracle`] solves the primal problem directly by
//!   exponentiated-gradient descent on the fine map (the coarse map is
//!   eliminated through the constraint);
//! * the dual route reparameterizes `τ` by per-coarse-cell multipliers `λ`
//!   ([`reparam_coarse`], [`reparam_fine`]). Whenever the two reparameterized
//!   maps agree on their marginals ([`marginal_residual`] vanishes) they are
//!   the primal optimum. [`solve_witness`] returns such a `λ` in closed form.
//!
//! [`consistency_penalty`] measures how far a given `λ` is from certifying
//! optimality and is the training-time regularizer.

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{kl_values, Divergence, NeighborhoodMap, ProbabilityMap};

/// Floor applied to distributions before they enter a KL term.
pub const SMOOTHING_FLOOR: f64 = 1e-12;

/// Iteration cap of the primal oracle.
pub const ORACLE_MAX_ITER: usize = 100_000;

/// Both KL terms of the reduced objective are 1-smooth relative to the
/// entropy, so steps above `1/2` are never needed (and a step of 1 cycles).
const ORACLE_MAX_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WitnessOrigin {
    ClosedForm,
    FixedPoint,
    LearnedShallow,
    /// One free multiplier per coarse cell, shared by every input.
    LearnedFree,
}

/// Lagrange multipliers, one per coarse cell.
///
/// Multipliers are only defined up to an additive constant. The canonical
/// representative is the *balanced* one, for which the coarse and fine
/// partition functions `Σ_s τ^l_s e^{λ_s}` and `Σ_t Σ_{s∈N(t)} τ^k_s e^{-λ_t}`
/// coincide; the closed form `½ ln(T_i / τ^l_i)` is already balanced.
#[derive(Debug, Clone, PartialEq)]
pub struct DualWitness {
    lambda: Vec<f64>,
    origin: WitnessOrigin,
}

impl DualWitness {
    pub fn new(lambda: Vec<f64>, origin: WitnessOrigin) -> Result<Self> {
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("dual witness entries must be finite".into()));
        }
        Ok(Self { lambda, origin })
    }

    pub fn zeros(len: usize) -> Self {
        Self { lambda: vec![0.0; len], origin: WitnessOrigin::LearnedShallow }
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn origin(&self) -> WitnessOrigin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self { lambda: self.lambda.iter().map(|l| l + c).collect(), origin: self.origin }
    }

    /// Representative with zero mean.
    pub fn mean_zero(&self) -> Self {
        let mean = self.lambda.iter().sum::<f64>() / self.lambda.len().max(1) as f64;
        self.shifted(-mean)
    }

    /// Balanced representative for the given pair (see type docs).
    pub fn balanced(
        &self,
        tau_fine: &ProbabilityMap,
        tau_coarse: &ProbabilityMap,
        nmap: &NeighborhoodMap,
    ) -> Result<Self> {
        check_shapes(tau_fine, tau_coarse, self, nmap)?;
        let totals = nmap.aggregate(tau_fine.values())?;
        let shift = self.lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z_coarse: f64 =
            tau_coarse.values().iter().zip(&self.lambda).map(|(t, l)| t * (l - shift).exp()).sum();
        let z_fine: f64 = totals.iter().zip(&self.lambda).map(|(t, l)| t * (shift - l).exp()).sum();
        // e^{2c} = Z_fine / Z_coarse, written in the shifted frame.
        let c = 0.5 * (z_fine.ln() - z_coarse.ln()) - shift;
        Ok(self.shifted(c))
    }
}

/// A primal solution of the consistency program.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistentPair {
    pub mu_fine: ProbabilityMap,
    pub mu_coarse: ProbabilityMap,
    /// `KL(μ^k ‖ τ^k) + KL(μ^l ‖ τ^l)`.
    pub objective: f64,
    /// `max_i |μ^l_i − Σ_{j∈N(i)} μ^k_j|`.
    pub residual: f64,
    /// Iterations spent by the solver that produced the pair (0 for closed forms).
    pub iterations: usize,
}

fn check_pair(tau_fine: &ProbabilityMap, tau_coarse: &ProbabilityMap, nmap: &NeighborhoodMap) -> Result<()> {
    if tau_fine.grid() != nmap.fine() {
        return Err(shape_err!("fine map on {} but neighborhood expects {}", tau_fine.grid(), nmap.fine()));
    }
    if tau_coarse.grid() != nmap.coarse() {
        return Err(shape_err!(
            "coarse map on {} but neighborhood expects {}",
            tau_coarse.grid(),
            nmap.coarse()
        ));
    }
    Ok(())
}

fn check_shapes(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    w: &DualWitness,
    nmap: &NeighborhoodMap,
) -> Result<()> {
    check_pair(tau_fine, tau_coarse, nmap)?;
    if w.len() != nmap.coarse().cells() {
        return Err(shape_err!("{} multipliers for {} coarse cells", w.len(), nmap.coarse().cells()));
    }
    Ok(())
}

fn finite_kl(p: &[f64], q: &[f64]) -> f64 {
    match kl_values(p, q) {
        Divergence::Finite(v) => v,
        Divergence::Infinite => f64::INFINITY,
    }
}

/// Objective of the consistency program for an arbitrary pair.
pub fn consistency_objective(
    mu_fine: &ProbabilityMap,
    mu_coarse: &ProbabilityMap,
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
) -> Result<f64> {
    if mu_fine.grid() != tau_fine.grid() || mu_coarse.grid() != tau_coarse.grid() {
        return Err(shape_err!("objective over mismatched grids"));
    }
    Ok(finite_kl(mu_fine.values(), tau_fine.values()) + finite_kl(mu_coarse.values(), tau_coarse.values()))
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Assembles a [`ConsistentPair`] from candidate maps.
pub fn evaluate_pair(
    mu_fine: ProbabilityMap,
    mu_coarse: ProbabilityMap,
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    nmap: &NeighborhoodMap,
    iterations: usize,
) -> Result<ConsistentPair> {
    let objective = consistency_objective(&mu_fine, &mu_coarse, tau_fine, tau_coarse)?;
    let residual = max_gap(mu_coarse.values(), &nmap.aggregate(mu_fine.values())?);
    Ok(ConsistentPair { mu_fine, mu_coarse, objective, residual, iterations })
}

/// Reduced objective `F(x) = KL(x ‖ τ^k) + KL(Mx ‖ τ^l)` and its gradient.
struct ReducedProblem<'a> {
    tau_fine: &'a [f64],
    tau_coarse: &'a [f64],
    nmap: &'a NeighborhoodMap,
}

impl ReducedProblem<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let m = self.nmap.aggregate(x).expect("shape checked");
        finite_kl(x, self.tau_fine) + finite_kl(&m, self.tau_coarse)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let m = self.nmap.aggregate(x).expect("shape checked");
        let coarse_term: Vec<f64> =
            m.iter().zip(self.tau_coarse).map(|(mi, ti)| (mi / ti).ln() + 1.0).collect();
        for (j, g) in grad.iter_mut().enumerate() {
            *g = (x[j] / self.tau_fine[j]).ln() + 1.0 + coarse_term[self.nmap.parent(j)];
        }
    }
}

/// Primal solver for the consistency program.
///
/// Minimizes the reduced objective over the simplex by exponentiated-gradient
/// steps with Bregman backtracking, starting from the uniform map. Stops when
/// the Frank–Wolfe gap `⟨∇F(x), x⟩ − min_j ∂_j F(x)`, an upper bound on the
/// suboptimality, drops to `tol`.
pub fn project_consistent_oracle(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    nmap: &NeighborhoodMap,
    tol: f64,
) -> Result<ConsistentPair> {
    project_consistent_oracle_capped(tau_fine, tau_coarse, nmap, tol, ORACLE_MAX_ITER)
}

pub fn project_consistent_oracle_capped(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    nmap: &NeighborhoodMap,
    tol: f64,
    max_iter: usize,
) -> Result<ConsistentPair> {
    check_pair(tau_fine, tau_coarse, nmap)?;
    if !tau_fine.is_strictly_positive() || !tau_coarse.is_strictly_positive() {
        return Err(invalid!("the primal oracle needs strictly positive attention maps; smooth them first"));
    }
    if !(tol > 0.0) {
        return Err(invalid!("tolerance must be positive"));
    }
    let problem = ReducedProblem { tau_fine: tau_fine.values(), tau_coarse: tau_coarse.values(), nmap };
    let n = tau_fine.len();
    let mut x = vec![1.0 / n as f64; n];
    let mut grad = vec![0.0; n];
    let mut candidate = vec![0.0; n];
    let mut value = problem.value(&x);
    let mut step: f64 = ORACLE_MAX_STEP;
    let mut gap = f64::INFINITY;

    for iter in 0..max_iter {
        problem.gradient(&x, &mut grad);
        let gmin = grad.iter().copied().fold(f64::INFINITY, f64::min);
        gap = x.iter().zip(&grad).map(|(xi, gi)| xi * (gi - gmin)).sum();
        if gap <= tol {
            let mu_fine = ProbabilityMap::new(tau_fine.grid(), x)?;
            let mu_coarse = ProbabilityMap::new(nmap.coarse(), nmap.aggregate(mu_fine.values())?)?;
            return evaluate_pair(mu_fine, mu_coarse, tau_fine, tau_coarse, nmap, iter);
        }

        step = (2.0 * step).min(ORACLE_MAX_STEP);
        loop {
            for ((c, xi), gi) in candidate.iter_mut().zip(&x).zip(&grad) {
                *c = xi * (-step * (gi - gmin)).exp();
            }
            let total: f64 = candidate.iter().sum();
            candidate.iter_mut().for_each(|c| *c /= total);
            let next = problem.value(&candidate);
            let linear: f64 = grad.iter().zip(candidate.iter().zip(&x)).map(|(g, (c, xi))| g * (c - xi)).sum();
            let bregman = finite_kl(&candidate, &x);
            let slack = 1e-15 * (1.0 + value.abs());
            if next <= value + linear + bregman / step + slack {
                value = next;
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(Error::NoConvergence { iterations: iter, last_gap: gap });
            }
        }
        std::mem::swap(&mut x, &mut candidate);
    }
    Err(Error::NoConvergence { iterations: max_iter, last_gap: gap })
}

/// `μ^l_i = τ^l_i e^{λ_i} / Σ_s τ^l_s e^{λ_s}`.
pub fn reparam_coarse(tau_coarse: &ProbabilityMap, w: &DualWitness) -> Result<ProbabilityMap> {
    if w.len() != tau_coarse.len() {
        return Err(shape_err!("{} multipliers for {} coarse cells", w.len(), tau_coarse.len()));
    }
    let shift = w.lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = tau_coarse.values().iter().zip(&w.lambda).map(|(t, l)| t * (l - shift).exp()).collect();
    ProbabilityMap::from_weights(tau_coarse.grid(), weights)
}

/// `μ^k_j ∝ τ^k_j e^{-λ_{parent(j)}}`, normalized over the whole fine grid.
pub fn reparam_fine(tau_fine: &ProbabilityMap, w: &DualWitness, nmap: &NeighborhoodMap) -> Result<ProbabilityMap> {
    if tau_fine.grid() != nmap.fine() {
        return Err(shape_err!("fine map on {} but neighborhood expects {}", tau_fine.grid(), nmap.fine()));
    }
    if w.len() != nmap.coarse().cells() {
        return Err(shape_err!("{} multipliers for {} coarse cells", w.len(), nmap.coarse().cells()));
    }
    let shift = w.lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let weights = tau_fine
        .values()
        .iter()
        .enumerate()
        .map(|(j, t)| t * (shift - w.lambda[nmap.parent(j)]).exp())
        .collect();
    ProbabilityMap::from_weights(tau_fine.grid(), weights)
}

/// `marginalize(reparam_fine)_i − reparam_coarse_i` for every coarse cell.
pub fn marginal_residual(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    w: &DualWitness,
    nmap: &NeighborhoodMap,
) -> Result<Vec<f64>> {
    check_shapes(tau_fine, tau_coarse, w, nmap)?;
    let fine = nmap.aggregate(reparam_fine(tau_fine, w, nmap)?.values())?;
    let coarse = reparam_coarse(tau_coarse, w)?;
    Ok(fine.iter().zip(coarse.values()).map(|(f, c)| f - c).collect())
}

/// Closed-form witness `λ_i = ½ ln(T_i / τ^l_i)` with `T_i = Σ_{j∈N(i)} τ^k_j`.
///
/// With this `λ` both reparameterized maps reduce to the normalized geometric
/// mean `√(τ^l_i T_i)` on the coarse grid, so their marginals agree.
pub fn solve_witness(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    nmap: &NeighborhoodMap,
) -> Result<DualWitness> {
    check_pair(tau_fine, tau_coarse, nmap)?;
    let totals = nmap.aggregate(tau_fine.values())?;
    let lambda = totals
        .iter()
        .zip(tau_coarse.values())
        .enumerate()
        .map(|(i, (&t, &c))| match (t > 0.0, c > 0.0) {
            (true, true) => Ok(0.5 * (t / c).ln()),
            (false, false) => Ok(0.0),
            (true, false) => Err(Error::InfeasibleSupport(format!(
                "coarse cell {i} has zero attention but its block carries fine mass {t}"
            ))),
            (false, true) => Err(Error::InfeasibleSupport(format!(
                "block of coarse cell {i} has no fine mass; the multiplier is unbounded"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    DualWitness::new(lambda, WitnessOrigin::ClosedForm)
}

/// Witness by fixed-point iteration on the reparameterized condition,
/// `λ ← λ + ½ (ln marginal(μ^k(λ)) − ln μ^l(λ))`, from `λ = 0`.
pub fn solve_witness_fixed_point(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    nmap: &NeighborhoodMap,
    tol: f64,
    max_iter: usize,
) -> Result<DualWitness> {
    check_pair(tau_fine, tau_coarse, nmap)?;
    if !tau_fine.is_strictly_positive() || !tau_coarse.is_strictly_positive() {
        return Err(invalid!("fixed-point witness needs strictly positive attention maps"));
    }
    let mut w = DualWitness { lambda: vec![0.0; nmap.coarse().cells()], origin: WitnessOrigin::FixedPoint };
    let mut worst = f64::INFINITY;
    for _ in 0..max_iter {
        let fine = nmap.aggregate(reparam_fine(tau_fine, &w, nmap)?.values())?;
        let coarse = reparam_coarse(tau_coarse, &w)?;
        worst = max_gap(&fine, coarse.values());
        if worst <= tol {
            return w.balanced(tau_fine, tau_coarse, nmap);
        }
        for ((l, f), c) in w.lambda.iter_mut().zip(&fine).zip(coarse.values()) {
            *l += 0.5 * (f.ln() - c.ln());
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, last_gap: worst })
}

/// Primal pair induced by a witness.
pub fn reparameterized_pair(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    w: &DualWitness,
    nmap: &NeighborhoodMap,
) -> Result<ConsistentPair> {
    check_shapes(tau_fine, tau_coarse, w, nmap)?;
    let mu_fine = reparam_fine(tau_fine, w, nmap)?;
    let mu_coarse = reparam_coarse(tau_coarse, w)?;
    evaluate_pair(mu_fine, mu_coarse, tau_fine, tau_coarse, nmap, 0)
}

/// `KL(reparam_coarse(τ^l, λ) ‖ marginalize(reparam_fine(τ^k, λ)))` with both
/// sides floored at [`SMOOTHING_FLOOR`] and renormalized.
pub fn consistency_penalty(
    tau_fine: &ProbabilityMap,
    tau_coarse: &ProbabilityMap,
    w: &DualWitness,
    nmap: &NeighborhoodMap,
) -> Result<f64> {
    check_shapes(tau_fine, tau_coarse, w, nmap)?;
    let coarse = reparam_coarse(tau_coarse, w)?.smoothed(SMOOTHING_FLOOR);
    let fine = nmap.aggregate(reparam_fine(tau_fine, w, nmap)?.values())?;
    let fine = ProbabilityMap::from_weights(nmap.coarse(), fine)?.smoothed(SMOOTHING_FLOOR);
    Ok(finite_kl(coarse.values(), fine.values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_neighborhood, SpatialGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA_EXAMPLE: [f64; 2] = [-0.255_412_811_882_995_36, 0.168_236_118_310_606_45];
    // Normalized geometric means √(τ^l_i T_i), evaluated independently.
    const MU_COARSE_EXAMPLE: [f64; 2] = [0.395_643_923_738_96, 0.604_356_076_261_039_9];
    const MU_FINE_EXAMPLE: [f64; 4] =
        [0.131_881_307_912_986_7, 0.263_762_615_825_973_4, 0.259_009_746_969_017_13, 0.345_346_329_292_022_9];

    fn line(values: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(SpatialGrid::line(values.len()).unwrap(), values.to_vec()).unwrap()
    }

    fn example() -> (ProbabilityMap, ProbabilityMap, NeighborhoodMap) {
        (line(&[0.1, 0.2, 0.3, 0.4]), line(&[0.5, 0.5]), NeighborhoodMap::line(4, 2).unwrap())
    }

    fn random_map<R: Rng>(grid: SpatialGrid, scale: f64, rng: &mut R) -> ProbabilityMap {
        let w = (0..grid.cells()).map(|_| (scale * rng.gen_range(-1.0..1.0)).exp()).collect();
        ProbabilityMap::from_weights(grid, w).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn oracle_keeps_consistent_pair() {
        let (fine, _, nmap) = example();
        let coarse = line(&[0.3, 0.7]);
        let pair = project_consistent_oracle(&fine, &coarse, &nmap, 1e-12).unwrap();
        assert_close(pair.mu_fine.values(), fine.values(), 1e-7);
        assert_close(pair.mu_coarse.values(), coarse.values(), 1e-7);
        assert!(pair.objective < 1e-12);
    }

    #[test]
    fn oracle_example_values() {
        let (fine, coarse, nmap) = example();
        let pair = project_consistent_oracle(&fine, &coarse, &nmap, 1e-10).unwrap();
        assert_close(pair.mu_coarse.values(), &[0.3956435, 0.6043565], 1e-6);
        assert_close(pair.mu_fine.values(), &[0.1318812, 0.2637623, 0.2590099, 0.3453466], 1e-6);
        assert_close(pair.mu_fine.values(), &MU_FINE_EXAMPLE, 1e-8);
        assert_eq!(pair.residual, 0.0);
    }

    #[test]
    fn oracle_uniform_is_fixed() {
        let nmap = build_neighborhood(4, 2).unwrap();
        let pair = project_consistent_oracle(
            &ProbabilityMap::uniform(nmap.fine()),
            &ProbabilityMap::uniform(nmap.coarse()),
            &nmap,
            1e-12,
        )
        .unwrap();
        assert_close(pair.mu_fine.values(), &[1.0 / 16.0; 16], 1e-12);
        assert!(pair.objective < 1e-15);
    }

    #[test]
    fn oracle_rejects_zero_support_and_reports_cap() {
        let (_, coarse, nmap) = example();
        let zero = line(&[0.0, 0.2, 0.3, 0.5]);
        assert!(matches!(project_consistent_oracle(&zero, &coarse, &nmap, 1e-10), Err(Error::InvalidInput(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nmap = build_neighborhood(8, 4).unwrap();
        let f = random_map(nmap.fine(), 3.0, &mut rng);
        let c = random_map(nmap.coarse(), 3.0, &mut rng);
        match project_consistent_oracle_capped(&f, &c, &nmap, 1e-14, 2) {
            Err(Error::NoConvergence { iterations, last_gap }) => {
                assert_eq!(iterations, 2);
                assert!(last_gap > 1e-14);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn reparam_coarse_examples() {
        let (_, coarse, _) = example();
        let tau = line(&[0.2, 0.8]);
        assert_eq!(reparam_coarse(&tau, &DualWitness::zeros(2)).unwrap(), tau);
        let shifted = reparam_coarse(&tau, &DualWitness::new(vec![3.0, 3.0], WitnessOrigin::ClosedForm).unwrap());
        assert_close(shifted.unwrap().values(), tau.values(), 1e-15);
        let w = DualWitness::new(LAMBDA_EXAMPLE.to_vec(), WitnessOrigin::ClosedForm).unwrap();
        assert_close(reparam_coarse(&coarse, &w).unwrap().values(), &MU_COARSE_EXAMPLE, 1e-12);
        assert!(reparam_coarse(&coarse, &DualWitness::zeros(3)).is_err());
    }

    #[test]
    fn reparam_fine_examples() {
        let (fine, _, nmap) = example();
        assert_eq!(reparam_fine(&fine, &DualWitness::zeros(2), &nmap).unwrap(), fine);
        let w = DualWitness::new(LAMBDA_EXAMPLE.to_vec(), WitnessOrigin::ClosedForm).unwrap();
        assert_close(
            reparam_fine(&fine, &w, &nmap).unwrap().values(),
            &MU_FINE_EXAMPLE,
            1e-12,
        );
        let delta = ProbabilityMap::delta(nmap.fine(), 2).unwrap();
        let w = DualWitness::new(vec![-4.0, 9.0], WitnessOrigin::ClosedForm).unwrap();
        assert_eq!(reparam_fine(&delta, &w, &nmap).unwrap(), delta);
    }

    #[test]
    fn residual_examples() {
        let (fine, coarse, nmap) = example();
        let consistent = line(&[0.3, 0.7]);
        let r = marginal_residual(&fine, &consistent, &DualWitness::zeros(2), &nmap).unwrap();
        assert_close(&r, &[0.0, 0.0], 1e-15);

        let w = solve_witness(&fine, &coarse, &nmap).unwrap();
        let r = marginal_residual(&fine, &coarse, &w, &nmap).unwrap();
        assert!(r.iter().all(|x| x.abs() <= 1e-12));

        let r = marginal_residual(&fine, &coarse, &DualWitness::zeros(2), &nmap).unwrap();
        assert_close(&r, &[-0.2, 0.2], 1e-15);
    }

    #[test]
    fn witness_examples() {
        let (fine, coarse, nmap) = example();
        let w = solve_witness(&fine, &line(&[0.3, 0.7]), &nmap).unwrap();
        assert_close(w.lambda(), &[0.0, 0.0], 1e-15);

        let w = solve_witness(&fine, &coarse, &nmap).unwrap();
        assert_close(w.lambda(), &LAMBDA_EXAMPLE, 1e-7);
        assert_eq!(w.origin(), WitnessOrigin::ClosedForm);

        // Confirmed against the primal oracle.
        let oracle = project_consistent_oracle(&fine, &coarse, &nmap, 1e-12).unwrap();
        let dual = reparameterized_pair(&fine, &coarse, &w, &nmap).unwrap();
        assert_close(dual.mu_fine.values(), oracle.mu_fine.values(), 1e-8);
        assert!((dual.objective - oracle.objective).abs() < 1e-8);
    }

    #[test]
    fn witness_depends_on_tau_only() {
        let nmap = build_neighborhood(4, 2).unwrap();
        let phi: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let tau = |shift: f64| crate::attention::attention_softmax(nmap.fine(), &phi.iter().map(|p| p + shift).collect::<Vec<_>>()).unwrap();
        let coarse = ProbabilityMap::from_weights(nmap.coarse(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = solve_witness(&tau(0.0), &coarse, &nmap).unwrap();
        let b = solve_witness(&tau(17.5), &coarse, &nmap).unwrap();
        assert_close(a.lambda(), b.lambda(), 1e-12);
    }

    #[test]
    fn witness_support_errors() {
        let (fine, _, nmap) = example();
        let zero_coarse = line(&[0.0, 1.0]);
        assert!(matches!(solve_witness(&fine, &zero_coarse, &nmap), Err(Error::InfeasibleSupport(_))));
        let empty_block = line(&[0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(
            solve_witness(&empty_block, &line(&[0.5, 0.5]), &nmap),
            Err(Error::InfeasibleSupport(_))
        ));
        let w = solve_witness(&empty_block, &zero_coarse, &nmap).unwrap();
        assert!(w.lambda().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn fixed_point_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nmap = build_neighborhood(8, 4).unwrap();
        let f = random_map(nmap.fine(), 2.0, &mut rng);
        let c = random_map(nmap.coarse(), 2.0, &mut rng);
        let fp = solve_witness_fixed_point(&f, &c, &nmap, 1e-14, 50).unwrap();
        let cf = solve_witness(&f, &c, &nmap).unwrap();
        assert_eq!(fp.origin(), WitnessOrigin::FixedPoint);
        assert_close(fp.lambda(), cf.lambda(), 1e-10);
    }

    #[test]
    fn balanced_recovers_closed_form_representative() {
        let (fine, coarse, nmap) = example();
        let w = solve_witness(&fine, &coarse, &nmap).unwrap();
        let b = w.shifted(2.5).balanced(&fine, &coarse, &nmap).unwrap();
        assert_close(b.lambda(), w.lambda(), 1e-14);
        let m = w.mean_zero();
        assert!(m.lambda().iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn penalty_examples() {
        let (fine, coarse, nmap) = example();
        let w = solve_witness(&fine, &coarse, &nmap).unwrap();
        assert!(consistency_penalty(&fine, &coarse, &w, &nmap).unwrap() <= 1e-12);

        let consistent = line(&[0.3, 0.7]);
        assert!(consistency_penalty(&fine, &consistent, &DualWitness::zeros(2), &nmap).unwrap() < 1e-15);

        // Direct evaluation of 0.5 ln(0.5/0.3) + 0.5 ln(0.5/0.7).
        let hand = 0.5 * (0.5f64 / 0.3).ln() + 0.5 * (0.5f64 / 0.7).ln();
        let p = consistency_penalty(&fine, &coarse, &DualWitness::zeros(2), &nmap).unwrap();
        assert!((p - hand).abs() < 1e-12);
        assert!((p - 0.087_176_693_572_388_91).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn oracle_and_dual_agree(seed in any::<u64>(), coarse_side in 1usize..5, ratio in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nmap = build_neighborhood(coarse_side * ratio, coarse_side).unwrap();
            let f = random_map(nmap.fine(), 2.0, &mut rng);
            let c = random_map(nmap.coarse(), 2.0, &mut rng);
            let oracle = project_consistent_oracle(&f, &c, &nmap, 1e-13).unwrap();
            let w = solve_witness(&f, &c, &nmap).unwrap();
            let dual = reparameterized_pair(&f, &c, &w, &nmap).unwrap();
            for (a, b) in dual.mu_fine.values().iter().zip(oracle.mu_fine.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            for (a, b) in dual.mu_coarse.values().iter().zip(oracle.mu_coarse.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert!((dual.objective - oracle.objective).abs() <= 1e-8);
            prop_assert!(dual.residual <= 1e-10);
        }

        #[test]
        fn reparam_shift_invariant(seed in any::<u64>(), c in -20f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nmap = build_neighborhood(6, 3).unwrap();
            let f = random_map(nmap.fine(), 2.0, &mut rng);
            let t = random_map(nmap.coarse(), 2.0, &mut rng);
            let lambda: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = DualWitness::new(lambda, WitnessOrigin::LearnedShallow).unwrap();
            let ws = w.shifted(c);
            let a = reparam_fine(&f, &w, &nmap).unwrap();
            let b = reparam_fine(&f, &ws, &nmap).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) { prop_assert!((x - y).abs() < 1e-12); }
            let a = reparam_coarse(&t, &w).unwrap();
            let b = reparam_coarse(&t, &ws).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) { prop_assert!((x - y).abs() < 1e-12); }
        }

        #[test]
        fn penalty_zero_iff_residual_zero(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nmap = build_neighborhood(4, 2).unwrap();
            let f = random_map(nmap.fine(), 2.0, &mut rng);
            let t = random_map(nmap.coarse(), 2.0, &mut rng);
            let lambda: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = DualWitness::new(lambda, WitnessOrigin::LearnedShallow).unwrap();
            let p = consistency_penalty(&f, &t, &w, &nmap).unwrap();
            let r = marginal_residual(&f, &t, &w, &nmap).unwrap();
            let rmax = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            prop_assert!(p >= 0.0);
            prop_assert!(rmax > 1e-6 && p > 0.0 || rmax <= 1e-6);
            let ws = solve_witness(&f, &t, &nmap).unwrap();
            prop_assert!(consistency_penalty(&f, &t, &ws, &nmap).unwrap() <= 1e-12);
        }
    }
}

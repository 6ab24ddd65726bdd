//! Spatial grids, probability maps over grids, coarse/fine neighborhood
//! partitions and the KL divergence shared by every other module.
//!
//! All flat indices are row-major and zero-based.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{invalid, shape_err, Error, Result};

/// Normalization tolerance for probability maps.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A rectangular grid of cells. Attention sites use square grids; a single-row
/// grid (`rows == 1`) is used for flat, one-dimensional layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpatialGrid {
    rows: usize,
    cols: usize,
}

impl SpatialGrid {
    /// Square `side × side` grid.
    pub fn square(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(invalid!("grid side must be positive"));
        }
        Ok(Self { rows: side, cols: side })
    }

    /// One-dimensional grid of `len` cells laid out as a single row.
    pub fn line(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(invalid!("grid length must be positive"));
        }
        Ok(Self { rows: 1, cols: len })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Side length of a square grid.
    pub fn side(&self) -> Option<usize> {
        (self.rows == self.cols).then_some(self.rows)
    }

    pub fn is_line(&self) -> bool {
        self.rows == 1
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn flat(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.cells());
        (index / self.cols, index % self.cols)
    }
}

impl fmt::Display for SpatialGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// A nonnegative distribution over the cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    grid: SpatialGrid,
    values: Vec<f64>,
}

impl ProbabilityMap {
    /// Validates `values` as a distribution. Sums within
    /// [`NORMALIZATION_TOL`] of one are renormalized, anything else is rejected.
    pub fn new(grid: SpatialGrid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(shape_err!("{} values for a {} grid", values.len(), grid));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid!("probability entries must be finite and nonnegative, got {bad}"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(invalid!("probabilities sum to {total}, expected 1"));
        }
        values.iter_mut().for_each(|v| *v /= total);
        Ok(Self { grid, values })
    }

    /// Normalizes arbitrary nonnegative weights into a distribution.
    pub fn from_weights(grid: SpatialGrid, mut weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.cells() {
            return Err(shape_err!("{} weights for a {} grid", weights.len(), grid));
        }
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid!("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid!("weights have zero total mass"));
        }
        weights.iter_mut().for_each(|v| *v /= total);
        Ok(Self { grid, values: weights })
    }

    pub fn uniform(grid: SpatialGrid) -> Self {
        let n = grid.cells();
        Self { grid, values: vec![1.0 / n as f64; n] }
    }

    pub fn delta(grid: SpatialGrid, index: usize) -> Result<Self> {
        if index >= grid.cells() {
            return Err(invalid!("delta index {index} outside {grid}"));
        }
        let mut values = vec![0.0; grid.cells()];
        values[index] = 1.0;
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> SpatialGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.values.iter().all(|v| *v > 0.0)
    }

    /// Floors every entry at `floor` and renormalizes.
    pub fn smoothed(&self, floor: f64) -> Self {
        let floored: Vec<f64> = self.values.iter().map(|v| v.max(floor)).collect();
        let total: f64 = floored.iter().sum();
        Self { grid: self.grid, values: floored.into_iter().map(|v| v / total).collect() }
    }

    /// Writes the map as CSV, one line per grid row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.values.chunks(self.grid.cols()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Reads a CSV map. The grid is inferred from the row structure: a single
    /// row is a line grid, otherwise the rows must form a square.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| {
                        Error::Format(format!("line {}: bad number {s:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let grid = match rows.len() {
            0 => return Err(Error::Format("empty probability map".into())),
            1 => SpatialGrid::line(rows[0].len())?,
            n => {
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Format(format!("expected a square {n}x{n} map")));
                }
                SpatialGrid::square(n)?
            }
        };
        Self::new(grid, rows.concat())
    }
}

/// Partition of fine cells into groups indexed by coarse cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodMap {
    fine: SpatialGrid,
    coarse: SpatialGrid,
    groups: Vec<Vec<usize>>,
    parent: Vec<usize>,
}

/// Block partition of a square `fine_side` grid under a `coarse_side` grid.
pub fn build_neighborhood(fine_side: usize, coarse_side: usize) -> Result<NeighborhoodMap> {
    NeighborhoodMap::blocks(SpatialGrid::square(fine_side)?, SpatialGrid::square(coarse_side)?)
}

impl NeighborhoodMap {
    /// Each coarse cell owns the block of fine cells it spatially covers.
    /// Both dimensions of `fine` must be multiples of those of `coarse`.
    pub fn blocks(fine: SpatialGrid, coarse: SpatialGrid) -> Result<Self> {
        if fine.rows() % coarse.rows() != 0 || fine.cols() % coarse.cols() != 0 {
            return Err(invalid!("coarse grid {coarse} does not divide fine grid {fine}"));
        }
        let rr = fine.rows() / coarse.rows();
        let rc = fine.cols() / coarse.cols();
        let mut groups = vec![Vec::with_capacity(rr * rc); coarse.cells()];
        let mut parent = vec![0; fine.cells()];
        for j in 0..fine.cells() {
            let (r, c) = fine.coords(j);
            let i = coarse.flat(r / rr, c / rc);
            groups[i].push(j);
            parent[j] = i;
        }
        Ok(Self { fine, coarse, groups, parent })
    }

    /// Contiguous grouping of a flat layout: `fine_len` cells split into
    /// `coarse_len` runs of equal length.
    pub fn line(fine_len: usize, coarse_len: usize) -> Result<Self> {
        Self::blocks(SpatialGrid::line(fine_len)?, SpatialGrid::line(coarse_len)?)
    }

    pub fn fine(&self) -> SpatialGrid {
        self.fine
    }

    pub fn coarse(&self) -> SpatialGrid {
        self.coarse
    }

    pub fn group(&self, coarse_index: usize) -> &[usize] {
        &self.groups[coarse_index]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Coarse cell owning fine cell `fine_index`.
    pub fn parent(&self, fine_index: usize) -> usize {
        self.parent[fine_index]
    }

    /// Per-group sums of arbitrary fine values.
    pub fn aggregate(&self, fine_values: &[f64]) -> Result<Vec<f64>> {
        if fine_values.len() != self.fine.cells() {
            return Err(shape_err!(
                "{} values for fine grid {}",
                fine_values.len(),
                self.fine
            ));
        }
        Ok(self.groups.iter().map(|g| g.iter().map(|&j| fine_values[j]).sum()).collect())
    }

    /// Copies each coarse value onto every fine cell of its group.
    pub fn replicate(&self, coarse_values: &[f64]) -> Result<Vec<f64>> {
        if coarse_values.len() != self.coarse.cells() {
            return Err(shape_err!(
                "{} values for coarse grid {}",
                coarse_values.len(),
                self.coarse
            ));
        }
        Ok(self.parent.iter().map(|&i| coarse_values[i]).collect())
    }
}

/// Coarse marginal `out_i = Σ_{j∈N(i)} p_j`.
pub fn marginalize(p: &ProbabilityMap, nmap: &NeighborhoodMap) -> Result<ProbabilityMap> {
    if p.grid() != nmap.fine() {
        return Err(shape_err!("map on {} but neighborhood fine grid is {}", p.grid(), nmap.fine()));
    }
    let sums = nmap.aggregate(p.values())?;
    ProbabilityMap::new(nmap.coarse(), sums)
}

/// Result of a KL evaluation. Support violations are reported as
/// [`Divergence::Infinite`] rather than as a floating-point infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn finite(self) -> Option<f64> {
        match self {
            Divergence::Finite(v) => Some(v),
            Divergence::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Divergence::Infinite)
    }
}

/// `Σ_i p_i ln(p_i / q_i)` on raw slices, with `0 · ln(0/q) = 0`.
pub fn kl_values(p: &[f64], q: &[f64]) -> Divergence {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Divergence::Infinite;
        }
        total += pi * (pi / qi).ln();
    }
    // Round-off can leave tiny negative totals for p ≈ q.
    Divergence::Finite(total.max(0.0))
}

/// KL divergence `D(p ‖ q)` between maps on the same grid.
pub fn kl_divergence(p: &ProbabilityMap, q: &ProbabilityMap) -> Result<Divergence> {
    if p.grid() != q.grid() {
        return Err(shape_err!("KL between maps on {} and {}", p.grid(), q.grid()));
    }
    Ok(kl_values(p.values(), q.values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_map(values: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(SpatialGrid::line(values.len()).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn identity_partition() {
        let n = build_neighborhood(2, 2).unwrap();
        for i in 0..4 {
            assert_eq!(n.group(i), &[i]);
        }
    }

    #[test]
    fn four_to_two_blocks() {
        let n = build_neighborhood(4, 2).unwrap();
        assert_eq!(n.groups().len(), 4);
        assert_eq!(n.group(0), &[0, 1, 4, 5]);
        assert_eq!(n.group(3), &[10, 11, 14, 15]);
        assert!(n.groups().iter().all(|g| g.len() == 4));
    }

    #[test]
    fn non_divisible_sides_rejected() {
        assert!(matches!(build_neighborhood(3, 2), Err(Error::InvalidInput(_))));
        assert!(build_neighborhood(0, 1).is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = SpatialGrid::square(7).unwrap();
        for i in 0..g.cells() {
            let (r, c) = g.coords(i);
            assert_eq!(g.flat(r, c), i);
        }
    }

    #[test]
    fn marginalize_examples() {
        let n = build_neighborhood(4, 2).unwrap();
        let uniform = ProbabilityMap::uniform(n.fine());
        assert_eq!(marginalize(&uniform, &n).unwrap().values(), &[0.25; 4]);

        let line = NeighborhoodMap::line(4, 2).unwrap();
        let m = marginalize(&line_map(&[0.1, 0.2, 0.3, 0.4]), &line).unwrap();
        assert!((m.values()[0] - 0.3).abs() < 1e-15);
        assert!((m.values()[1] - 0.7).abs() < 1e-15);

        let delta = ProbabilityMap::delta(n.fine(), 0).unwrap();
        assert_eq!(marginalize(&delta, &n).unwrap().values(), &[1.0, 0.0, 0.0, 0.0]);

        let wrong = ProbabilityMap::uniform(SpatialGrid::square(3).unwrap());
        assert!(matches!(marginalize(&wrong, &n), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_examples() {
        let half = line_map(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&half, &half).unwrap(), Divergence::Finite(0.0));

        let q = line_map(&[0.25, 0.75]);
        let d = kl_divergence(&half, &q).unwrap().finite().unwrap();
        assert!((d - 0.1438410362258904).abs() < 1e-12);

        let p = line_map(&[1.0, 0.0]);
        let d = kl_divergence(&p, &half).unwrap().finite().unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-15);

        assert!(kl_divergence(&half, &p).unwrap().is_infinite());
    }

    #[test]
    fn constructor_tolerance() {
        let g = SpatialGrid::line(2).unwrap();
        let m = ProbabilityMap::new(g, vec![0.5, 0.5 + 5e-10]).unwrap();
        assert!((m.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ProbabilityMap::new(g, vec![0.5, 0.51]).is_err());
        assert!(ProbabilityMap::new(g, vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityMap::new(g, vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_square_and_line() {
        let g = SpatialGrid::square(3).unwrap();
        let m = ProbabilityMap::from_weights(g, (1..=9).map(f64::from).collect()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 3);
        let back = ProbabilityMap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let line = ProbabilityMap::read_csv("0.1,0.2,0.3,0.4\n".as_bytes()).unwrap();
        assert!(line.grid().is_line());
        assert_eq!(line.len(), 4);

        assert!(ProbabilityMap::read_csv("0.5,0.5\n0.0\n".as_bytes()).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn partition_covers_disjointly(coarse in 1usize..6, ratio in 1usize..5) {
            let n = build_neighborhood(coarse * ratio, coarse).unwrap();
            let mut seen = vec![0u32; n.fine().cells()];
            for g in n.groups() {
                prop_assert_eq!(g.len(), ratio * ratio);
                for &j in g { seen[j] += 1; }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }

        #[test]
        fn aggregation_conserves_mass(values in prop::collection::vec(0.0f64..10.0, 36)) {
            let n = build_neighborhood(6, 3).unwrap();
            let out = n.aggregate(&values).unwrap();
            let lhs: f64 = out.iter().sum();
            let rhs: f64 = values.iter().sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        #[test]
        fn aggregation_ignores_within_group_permutation(
            values in prop::collection::vec(0.0f64..1.0, 16),
            seed in any::<u64>(),
        ) {
            let n = build_neighborhood(4, 2).unwrap();
            let mut permuted = values.clone();
            let g = n.group((seed % 4) as usize).to_vec();
            let rot = (seed / 4) as usize % g.len();
            for (k, &j) in g.iter().enumerate() {
                permuted[j] = values[g[(k + rot) % g.len()]];
            }
            let a = n.aggregate(&values).unwrap();
            let b = n.aggregate(&permuted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }

        #[test]
        fn kl_nonnegative_zero_iff_equal(p in simplex(8), q in simplex(8)) {
            let d = kl_values(&p, &q).finite().unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(kl_values(&p, &p), Divergence::Finite(0.0));
            let max_gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if max_gap > 1e-3 {
                prop_assert!(d > 0.0);
            }
        }
    }
}

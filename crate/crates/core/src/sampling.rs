//! Per-slot sample selection and verdicts for validator (rows/columns),
//! regular (random cells) and k-of-n sampling, plus the analytic
//! withholding-detection probability.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BlobGeometry, CellCoordinate, NodeId};

/// Cells a regular node samples per slot.
pub const REGULAR_SAMPLE_COUNT: usize = 75;
/// Rows and columns a validator samples per slot.
pub const VALIDATOR_LINES: usize = 2;
pub const DEFAULT_KOFN_N: usize = 80;
pub const DEFAULT_KOFN_K: usize = 75;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplingError {
    #[error("cannot draw {requested} distinct cells from {available}")]
    TooManyCells { requested: u64, available: u64 },
    #[error("extended matrix needs at least {VALIDATOR_LINES} rows and columns")]
    TooFewLines,
    #[error("k-of-n requires n > {REGULAR_SAMPLE_COUNT} and k <= n (got n = {n}, k = {k})")]
    KofN { n: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleMode {
    ValidatorLines,
    RegularCells,
    KofN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Line {
    Row(u32),
    Col(u32),
}

impl Line {
    pub fn contains(&self, c: CellCoordinate) -> bool {
        match *self {
            Line::Row(r) => c.row == r,
            Line::Col(col) => c.col == col,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleAssignment {
    pub node: NodeId,
    pub mode: SampleMode,
    pub rows: BTreeSet<u32>,
    pub cols: BTreeSet<u32>,
    pub cells: BTreeSet<CellCoordinate>,
    /// Cells needed for success in k-of-n mode; `cells.len()` otherwise.
    pub k_required: usize,
    pub n_requested: usize,
    /// Regular-sample cells a validator fetches on top of its lines; every
    /// one must arrive. Also contained in `cells`.
    pub extra_cells: BTreeSet<CellCoordinate>,
}

impl SampleAssignment {
    pub fn lines(&self) -> impl Iterator<Item = Line> + '_ {
        self.rows
            .iter()
            .map(|&r| Line::Row(r))
            .chain(self.cols.iter().map(|&c| Line::Col(c)))
    }

    pub fn bytes(&self, geometry: &BlobGeometry) -> u64 {
        self.cells.len() as u64 * geometry.cell_wire_bytes()
    }

    /// Adds `regular`'s cells as a second, all-required sample.
    pub fn with_regular_sample(mut self, regular: &SampleAssignment) -> Self {
        self.extra_cells.extend(regular.cells.iter().copied());
        self.cells.extend(regular.cells.iter().copied());
        self
    }

    /// Cells fetched individually rather than through line subscriptions.
    pub fn pull_cells(&self) -> &BTreeSet<CellCoordinate> {
        match self.mode {
            SampleMode::ValidatorLines => &self.extra_cells,
            _ => &self.cells,
        }
    }
}

/// Number of distinct cells covered by 2 rows and 2 columns of a `rows x cols`
/// extended matrix.
pub fn validator_cell_count(geometry: &BlobGeometry) -> u64 {
    let (r, c) = (geometry.extended_rows() as u64, geometry.extended_cols() as u64);
    2 * c + 2 * r - 4
}

pub fn select_validator_sample<R: RngCore + ?Sized>(
    rng: &mut R,
    geometry: &BlobGeometry,
    node: NodeId,
) -> Result<SampleAssignment, SamplingError> {
    let (er, ec) = (geometry.extended_rows(), geometry.extended_cols());
    if (er as usize) < VALIDATOR_LINES || (ec as usize) < VALIDATOR_LINES {
        return Err(SamplingError::TooFewLines);
    }
    let rows: BTreeSet<u32> = index::sample(rng, er as usize, VALIDATOR_LINES)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    let cols: BTreeSet<u32> = index::sample(rng, ec as usize, VALIDATOR_LINES)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    let mut cells = BTreeSet::new();
    for &row in &rows {
        cells.extend((0..ec).map(|col| CellCoordinate { row, col }));
    }
    for &col in &cols {
        cells.extend((0..er).map(|row| CellCoordinate { row, col }));
    }
    let n = cells.len();
    Ok(SampleAssignment {
        node,
        mode: SampleMode::ValidatorLines,
        rows,
        cols,
        cells,
        k_required: n,
        n_requested: n,
        extra_cells: BTreeSet::new(),
    })
}

fn draw_cells<R: RngCore + ?Sized>(
    rng: &mut R,
    geometry: &BlobGeometry,
    count: usize,
) -> Result<BTreeSet<CellCoordinate>, SamplingError> {
    let total = geometry.total_cells();
    if count as u64 > total {
        return Err(SamplingError::TooManyCells {
            requested: count as u64,
            available: total,
        });
    }
    Ok(index::sample(rng, total as usize, count)
        .into_iter()
        .map(|i| geometry.coordinate_at(i as u64).expect("index in range"))
        .collect())
}

/// `count` distinct cells drawn uniformly without replacement.
pub fn select_regular_sample<R: RngCore + ?Sized>(
    rng: &mut R,
    geometry: &BlobGeometry,
    count: usize,
    node: NodeId,
) -> Result<SampleAssignment, SamplingError> {
    let cells = draw_cells(rng, geometry, count)?;
    Ok(SampleAssignment {
        node,
        mode: SampleMode::RegularCells,
        rows: BTreeSet::new(),
        cols: BTreeSet::new(),
        cells,
        k_required: count,
        n_requested: count,
        extra_cells: BTreeSet::new(),
    })
}

/// Requests `n` cells; success needs any `k` of them.
pub fn select_k_of_n_sample<R: RngCore + ?Sized>(
    rng: &mut R,
    geometry: &BlobGeometry,
    n: usize,
    k: usize,
    node: NodeId,
) -> Result<SampleAssignment, SamplingError> {
    if n <= REGULAR_SAMPLE_COUNT || k > n {
        return Err(SamplingError::KofN { n, k });
    }
    let cells = draw_cells(rng, geometry, n)?;
    Ok(SampleAssignment {
        node,
        mode: SampleMode::KofN,
        rows: BTreeSet::new(),
        cols: BTreeSet::new(),
        cells,
        k_required: k,
        n_requested: n,
        extra_cells: BTreeSet::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingVerdict {
    pub node: NodeId,
    pub success: bool,
    pub received_count: usize,
    pub per_line_received: BTreeMap<Line, usize>,
    /// Set by the caller from completion timing; equals `success` until then.
    pub deadline_met: bool,
    pub bytes_downloaded: u64,
}

impl SamplingVerdict {
    /// Marks the verdict against a strict deadline: completion must happen
    /// before `deadline_us`.
    pub fn with_completion(mut self, completion_us: Option<u64>, deadline_us: u64) -> Self {
        self.deadline_met = self.success && completion_us.is_some_and(|t| t < deadline_us);
        self
    }
}

fn received_in<'a>(
    assignment: &'a SampleAssignment,
    received: impl IntoIterator<Item = &'a CellCoordinate>,
) -> BTreeSet<CellCoordinate> {
    received
        .into_iter()
        .filter(|c| assignment.cells.contains(c))
        .copied()
        .collect()
}

/// Success iff every chosen row and column has at least half of its
/// extended length received, plus every extra regular-sample cell.
pub fn evaluate_validator_sampling<'a>(
    assignment: &'a SampleAssignment,
    received: impl IntoIterator<Item = &'a CellCoordinate>,
    geometry: &BlobGeometry,
) -> SamplingVerdict {
    let got = received_in(assignment, received);
    let mut per_line = BTreeMap::new();
    let mut success = true;
    for line in assignment.lines() {
        let n = got.iter().filter(|c| line.contains(**c)).count();
        let need = match line {
            Line::Row(_) => geometry.extended_cols() as usize,
            Line::Col(_) => geometry.extended_rows() as usize,
        }
        .div_ceil(2);
        success &= n >= need;
        per_line.insert(line, n);
    }
    success &= assignment.extra_cells.iter().all(|c| got.contains(c));
    SamplingVerdict {
        node: assignment.node,
        success,
        received_count: got.len(),
        per_line_received: per_line,
        deadline_met: success,
        bytes_downloaded: got.len() as u64 * geometry.cell_wire_bytes(),
    }
}

/// Success iff every assigned cell was received.
pub fn evaluate_regular_sampling<'a>(
    assignment: &'a SampleAssignment,
    received: impl IntoIterator<Item = &'a CellCoordinate>,
    geometry: &BlobGeometry,
) -> SamplingVerdict {
    let got = received_in(assignment, received);
    let success = got.len() == assignment.cells.len();
    SamplingVerdict {
        node: assignment.node,
        success,
        received_count: got.len(),
        per_line_received: BTreeMap::new(),
        deadline_met: success,
        bytes_downloaded: got.len() as u64 * geometry.cell_wire_bytes(),
    }
}

/// Success iff at least `k_required` assigned cells were received.
pub fn evaluate_k_of_n<'a>(
    assignment: &'a SampleAssignment,
    received: impl IntoIterator<Item = &'a CellCoordinate>,
    geometry: &BlobGeometry,
) -> SamplingVerdict {
    let got = received_in(assignment, received);
    let success = got.len() >= assignment.k_required;
    SamplingVerdict {
        node: assignment.node,
        success,
        received_count: got.len(),
        per_line_received: BTreeMap::new(),
        deadline_met: success,
        bytes_downloaded: got.len() as u64 * geometry.cell_wire_bytes(),
    }
}

/// Dispatches on the assignment mode.
pub fn evaluate<'a>(
    assignment: &'a SampleAssignment,
    received: impl IntoIterator<Item = &'a CellCoordinate>,
    geometry: &BlobGeometry,
) -> SamplingVerdict {
    match assignment.mode {
        SampleMode::ValidatorLines => evaluate_validator_sampling(assignment, received, geometry),
        SampleMode::RegularCells => evaluate_regular_sampling(assignment, received, geometry),
        SampleMode::KofN => evaluate_k_of_n(assignment, received, geometry),
    }
}

/// Number of cells withheld for a fraction `f` of `total_cells`: `ceil(f * N)`.
pub fn withheld_count(f: f64, total_cells: u64) -> u64 {
    let f = f.clamp(0.0, 1.0);
    ((f * total_cells as f64).ceil() as u64).min(total_cells)
}

/// Probability that `n` cells drawn without replacement from `total_cells`
/// hit at least one of the `ceil(f * N)` withheld cells.
///
/// Exact hypergeometric form `1 - C(N - W, n) / C(N, n)`, evaluated as a
/// log-space product.
pub fn detection_probability(f: f64, samples: u64, total_cells: u64) -> f64 {
    let withheld = withheld_count(f, total_cells);
    if withheld == 0 || samples == 0 {
        return 0.0;
    }
    let available = total_cells - withheld;
    if available < samples {
        return 1.0;
    }
    let log_miss: f64 = (0..samples)
        .map(|i| ((available - i) as f64).ln() - ((total_cells - i) as f64).ln())
        .sum();
    -log_miss.exp_m1()
}

/// Sampling-with-replacement approximation `1 - (1 - f)^n`.
pub fn detection_probability_binomial(f: f64, samples: u64) -> f64 {
    let f = f.clamp(0.0, 1.0);
    1.0 - (1.0 - f).powf(samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeterministicRng;
    use rand::Rng;

    fn node() -> NodeId {
        NodeId::ZERO
    }

    #[test]
    fn mainnet_validator_sample_has_2044_cells() {
        let g = BlobGeometry::mainnet();
        let mut rng = DeterministicRng::new(1, 1);
        let a = select_validator_sample(&mut rng, &g, node()).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.cols.len(), 2);
        assert_eq!(a.cells.len(), 2044);
        assert_eq!(a.bytes(&g), 1_144_640);
        assert_eq!(validator_cell_count(&g), 2044);
    }

    #[test]
    fn tiny_geometry_validator_takes_everything() {
        let g = BlobGeometry::square(1);
        let mut rng = DeterministicRng::new(1, 2);
        let a = select_validator_sample(&mut rng, &g, node()).unwrap();
        assert_eq!(a.cells.len(), 4);
    }

    #[test]
    fn validator_count_formula_small_geometries() {
        let mut rng = DeterministicRng::new(1, 3);
        for r in 1..6 {
            for c in 1..6 {
                let g = BlobGeometry::new(r, c, 2, 48).unwrap();
                let a = select_validator_sample(&mut rng, &g, node()).unwrap();
                assert_eq!(a.cells.len() as u64, validator_cell_count(&g));
            }
        }
    }

    #[test]
    fn selection_is_deterministic() {
        let g = BlobGeometry::mainnet();
        let a = select_validator_sample(&mut DeterministicRng::new(9, 9), &g, node()).unwrap();
        let b = select_validator_sample(&mut DeterministicRng::new(9, 9), &g, node()).unwrap();
        assert_eq!(a, b);
        let a = select_regular_sample(&mut DeterministicRng::new(9, 9), &g, 75, node()).unwrap();
        let b = select_regular_sample(&mut DeterministicRng::new(9, 9), &g, 75, node()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regular_sample_sizes() {
        let g = BlobGeometry::mainnet();
        let mut rng = DeterministicRng::new(2, 0);
        let a = select_regular_sample(&mut rng, &g, REGULAR_SAMPLE_COUNT, node()).unwrap();
        assert_eq!(a.cells.len(), 75);
        assert_eq!(a.bytes(&g), 42_000);
        let small = BlobGeometry::square(1);
        assert_eq!(select_regular_sample(&mut rng, &small, 4, node()).unwrap().cells.len(), 4);
        assert!(matches!(
            select_regular_sample(&mut rng, &small, 5, node()),
            Err(SamplingError::TooManyCells { .. })
        ));
    }

    #[test]
    fn regular_sample_is_uniform_on_8x8() {
        let g = BlobGeometry::square(4);
        let mut rng = DeterministicRng::new(3, 0);
        let draws = 100_000;
        let count = 10;
        let mut freq = [0u32; 64];
        for _ in 0..draws {
            let a = select_regular_sample(&mut rng, &g, count, node()).unwrap();
            assert_eq!(a.cells.len(), count);
            for c in &a.cells {
                freq[g.coordinate_index(*c).unwrap() as usize] += 1;
            }
        }
        let p = count as f64 / 64.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        // a handful of cells may sit out past 3 sigma by chance (~0.27% each)
        let outliers = freq.iter().filter(|&&f| (f as f64 - mean).abs() > 3.0 * sigma).count();
        assert!(outliers <= 2, "{outliers} cells outside 3 sigma");
        assert!(freq.iter().all(|&f| (f as f64 - mean).abs() < 4.5 * sigma));
    }

    #[test]
    fn validator_verdict_thresholds() {
        let g = BlobGeometry::mainnet();
        let a = select_validator_sample(&mut DeterministicRng::new(4, 0), &g, node()).unwrap();
        let rows: Vec<u32> = a.rows.iter().copied().collect();
        let cols: Vec<u32> = a.cols.iter().copied().collect();
        // first 256 cells of every line, skipping intersections with other lines
        // so each line count is exactly what we intend
        let mut got: BTreeSet<CellCoordinate> = BTreeSet::new();
        for &r in &rows {
            got.extend((0..512).filter(|c| !cols.contains(c)).take(256).map(|c| CellCoordinate::new(r, c)));
        }
        for &c in &cols {
            got.extend((0..512).filter(|r| !rows.contains(r)).take(256).map(|r| CellCoordinate::new(r, c)));
        }
        let v = evaluate_validator_sampling(&a, &got, &g);
        assert!(v.success);
        assert!(v.per_line_received.values().all(|&n| n == 256));

        let mut all: BTreeSet<_> = a.cells.clone();
        let row0 = rows[0];
        let drop: Vec<_> = all.iter().filter(|c| c.row == row0).copied().take(257).collect();
        for c in drop {
            all.remove(&c);
        }
        let v = evaluate_validator_sampling(&a, &all, &g);
        assert_eq!(v.per_line_received[&Line::Row(row0)], 255);
        assert!(!v.success);

        let v = evaluate_validator_sampling(&a, &a.cells, &g);
        assert!(v.success);
        assert_eq!(v.received_count, 2044);
        assert_eq!(v.bytes_downloaded, 1_144_640);
    }

    #[test]
    fn regular_verdicts() {
        let g = BlobGeometry::mainnet();
        let a = select_regular_sample(&mut DeterministicRng::new(5, 0), &g, 75, node()).unwrap();
        assert!(evaluate_regular_sampling(&a, &a.cells, &g).success);
        let most: Vec<_> = a.cells.iter().copied().skip(1).collect();
        let v = evaluate_regular_sampling(&a, &most, &g);
        assert!(!v.success);
        assert_eq!(v.received_count, 74);
        assert!(!evaluate_regular_sampling(&a, &[], &g).success);
    }

    #[test]
    fn k_of_n_thresholds() {
        let g = BlobGeometry::mainnet();
        let a = select_k_of_n_sample(&mut DeterministicRng::new(6, 0), &g, 80, 75, node()).unwrap();
        let cells: Vec<_> = a.cells.iter().copied().collect();
        assert!(evaluate_k_of_n(&a, &cells[..75], &g).success);
        assert!(!evaluate_k_of_n(&a, &cells[..74], &g).success);
        assert!(select_k_of_n_sample(&mut DeterministicRng::new(6, 0), &g, 75, 70, node()).is_err());
        assert!(select_k_of_n_sample(&mut DeterministicRng::new(6, 0), &g, 80, 81, node()).is_err());
    }

    /// Exact `P[Binomial(n, p) >= k]` by direct summation.
    fn binomial_tail(n: u64, p: f64, k: u64) -> f64 {
        (k..=n)
            .map(|i| {
                let ln_choose: f64 =
                    (1..=i).map(|j| ((n - i + j) as f64).ln() - (j as f64).ln()).sum();
                (ln_choose + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp()
            })
            .sum()
    }

    #[test]
    fn k_of_n_under_uniform_loss_matches_binomial() {
        let g = BlobGeometry::mainnet();
        let mut rng = DeterministicRng::new(7, 0);
        let a = select_k_of_n_sample(&mut rng, &g, 80, 75, node()).unwrap();
        let trials = 100_000;
        let mut ok = 0;
        for _ in 0..trials {
            let got: Vec<_> = a.cells.iter().filter(|_| rng.gen::<f64>() >= 0.02).copied().collect();
            if evaluate_k_of_n(&a, &got, &g).success {
                ok += 1;
            }
        }
        let p = binomial_tail(80, 0.98, 75);
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let est = ok as f64 / trials as f64;
        assert!((est - p).abs() < 3.0 * sigma, "est {est} exact {p}");
    }

    #[test]
    fn verdicts_are_monotone() {
        let g = BlobGeometry::square(4);
        let mut rng = DeterministicRng::new(8, 0);
        for _ in 0..200 {
            let a = if rng.gen_bool(0.5) {
                select_validator_sample(&mut rng, &g, node()).unwrap()
            } else {
                select_regular_sample(&mut rng, &g, 10, node()).unwrap()
            };
            let order: Vec<_> = a.cells.iter().copied().collect();
            let mut was_success = false;
            for i in 0..=order.len() {
                let s = evaluate(&a, &order[..i], &g).success;
                assert!(!was_success || s);
                was_success = s;
            }
            assert!(was_success);
        }
    }

    #[test]
    fn strict_deadline() {
        let g = BlobGeometry::square(1);
        let a = select_regular_sample(&mut DeterministicRng::new(1, 1), &g, 1, node()).unwrap();
        let v = evaluate_regular_sampling(&a, &a.cells, &g);
        assert!(v.clone().with_completion(Some(3_999_999), 4_000_000).deadline_met);
        assert!(!v.clone().with_completion(Some(4_000_000), 4_000_000).deadline_met);
        assert!(!v.with_completion(None, 4_000_000).deadline_met);
    }

    #[test]
    fn detection_probability_edges() {
        let n = 262_144;
        assert_eq!(detection_probability(0.0, 75, n), 0.0);
        assert_eq!(detection_probability(1.0, 1, n), 1.0);
        let p = detection_probability(0.05, 75, n);
        let approx = detection_probability_binomial(0.05, 75);
        assert!((p - approx).abs() < 1e-3, "{p} vs {approx}");
    }

    #[test]
    fn detection_probability_matches_monte_carlo() {
        let n_cells = 262_144u64;
        let f = 0.05;
        let w = withheld_count(f, n_cells);
        let p = detection_probability(f, 75, n_cells);
        let mut rng = DeterministicRng::new(10, 0);
        let trials = 1_000_000;
        let mut detected = 0u64;
        for _ in 0..trials {
            // indices [0, w) are the withheld cells
            if index::sample(&mut rng, n_cells as usize, 75).iter().any(|i| (i as u64) < w) {
                detected += 1;
            }
        }
        let est = detected as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((est - p).abs() < 3.0 * sigma, "est {est} exact {p}");
    }

    #[test]
    fn detection_probability_is_monotone() {
        let n_cells = 262_144;
        for &n in &[1u64, 75, 2044] {
            let mut prev = 0.0;
            for step in 0..=100 {
                let p = detection_probability(step as f64 / 100.0, n, n_cells);
                assert!(p + 1e-15 >= prev, "f = {step}%, n = {n}");
                prev = p;
            }
        }
        for step in 0..=100 {
            let f = step as f64 / 100.0;
            let a = detection_probability(f, 1, n_cells);
            let b = detection_probability(f, 75, n_cells);
            let c = detection_probability(f, 2044, n_cells);
            assert!(a <= b + 1e-15 && b <= c + 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn assignments_have_their_exact_size(
            rows in 2u32..=32,
            cols in 2u32..=32,
            count in 1usize..=75,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let g = BlobGeometry::new(rows, cols, 16, 48).unwrap();
            let mut rng = DeterministicRng::new(seed, 0);
            let count = count.min(g.total_cells() as usize);
            let id = crate::model::NodeId::random(&mut rng);
            let r = select_regular_sample(&mut rng, &g, count, id).unwrap();
            proptest::prop_assert_eq!(r.cells.len(), count);
            proptest::prop_assert!(r.cells.iter().all(|c| c.row < g.extended_rows() && c.col < g.extended_cols()));
            let v = select_validator_sample(&mut rng, &g, id).unwrap();
            proptest::prop_assert_eq!(v.cells.len() as u64, validator_cell_count(&g));
            proptest::prop_assert!(evaluate(&v, v.cells.iter(), &g).success);
            proptest::prop_assert!(evaluate(&r, r.cells.iter(), &g).success);
        }

        #[test]
        fn detection_is_monotone(f in 0.0f64..1.0, df in 0.0f64..0.1, n in 1u64..2044) {
            let total = 512 * 512;
            let p = detection_probability(f, n, total);
            proptest::prop_assert!((0.0..=1.0).contains(&p));
            proptest::prop_assert!(p <= detection_probability((f + df).min(1.0), n, total) + 1e-12);
            proptest::prop_assert!(p <= detection_probability(f, n + 1, total) + 1e-12);
        }
    }
}

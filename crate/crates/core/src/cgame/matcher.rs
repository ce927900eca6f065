//! The graph matcher: a structure matching matrix `M` (`n_f × n_s`) whose
//! columns are per-feature weightings ("structures"), and a structure value
//! row `V` (`1 × n_s`) scoring each structure. Together they form a
//! per-feature gate applied to the embedded features of both directions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CgameError, Result};
use crate::numcore::{batch_cosine, structure_cosine, CosineMode, Matrix, DEFAULT_EPS};

/// How the `n_s` structures are collapsed into one gate value per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAggregation {
    /// `gate = (M · Vᵀ) / n_s`
    #[default]
    Mean,
    /// `gate = M · Vᵀ`
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherHyper {
    /// Number of structures (columns of `M`).
    pub n_s: usize,
    /// Structures replaced per matcher step.
    pub p: usize,
    /// Value-refresh sub-steps per matcher step.
    pub q: usize,
    /// Discount factor of the value accumulation.
    pub lambda: f64,
    /// Gradient iterations between matcher steps.
    pub update_interval: usize,
    #[serde(default)]
    pub aggregation: GateAggregation,
    #[serde(default)]
    pub cosine: CosineMode,
}

impl Default for MatcherHyper {
    fn default() -> Self {
        Self {
            n_s: 64,
            p: 8,
            q: 4,
            lambda: 0.9,
            update_interval: 50,
            aggregation: GateAggregation::Mean,
            cosine: CosineMode::Proper,
        }
    }
}

impl MatcherHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CgameError::InvalidConfig(m));
        if self.n_s == 0 || self.p == 0 || self.q == 0 || self.update_interval == 0 {
            return bad("n_s, p, q and update_interval must be positive".into());
        }
        if self.p >= self.n_s {
            return bad(format!(
                "structures replaced per step (p = {}) must be below n_s = {}",
                self.p, self.n_s
            ));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1), got {}", self.lambda));
        }
        Ok(())
    }

    /// Largest `|V|` reachable right after a value refresh:
    /// `λ^q + (1 − λ^q) / (1 − λ)`.
    pub fn value_bound(&self) -> f64 {
        let lq = self.lambda.powi(self.q as i32);
        lq + (1.0 - lq) / (1.0 - self.lambda)
    }
}

/// A pair of embedded batches from the two directions: `(h_x, h_y)`.
pub type EmbeddingPair = (Matrix, Matrix);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMatcherState {
    m: Matrix,
    v: Matrix,
    hyper: MatcherHyper,
}

impl GraphMatcherState {
    /// All-ones `M` and `V`: every feature passes unchanged.
    pub fn new(n_f: usize, hyper: MatcherHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            m: Matrix::ones(n_f, hyper.n_s),
            v: Matrix::ones(1, hyper.n_s),
            hyper,
        })
    }

    pub fn from_parts(m: Matrix, v: Matrix, hyper: MatcherHyper) -> Result<Self> {
        hyper.validate()?;
        if m.cols() != hyper.n_s || v.shape() != (1, hyper.n_s) {
            return Err(CgameError::Shape(format!(
                "matcher expects M[_x{n}] and V[1x{n}], got M[{}x{}], V[{}x{}]",
                m.rows(),
                m.cols(),
                v.rows(),
                v.cols(),
                n = hyper.n_s
            )));
        }
        Ok(Self { m, v, hyper })
    }

    pub fn m(&self) -> &Matrix {
        &self.m
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn hyper(&self) -> &MatcherHyper {
        &self.hyper
    }

    pub fn n_features(&self) -> usize {
        self.m.rows()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.m, &mut self.v)
    }

    pub fn is_all_ones(&self) -> bool {
        self.m.as_slice().iter().chain(self.v.as_slice()).all(|&x| x == 1.0)
    }

    /// Per-feature pass rate.
    pub fn gate(&self) -> Vec<f64> {
        let v = self.v.as_slice();
        let n_s = self.hyper.n_s as f64;
        (0..self.m.rows())
            .map(|f| {
                let s: f64 = self.m.row(f).iter().zip(v).map(|(m, v)| m * v).sum();
                match self.hyper.aggregation {
                    GateAggregation::Mean => s / n_s,
                    GateAggregation::Sum => s,
                }
            })
            .collect()
    }

    /// `g[β, f] = h[β, f] · gate[f]`.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        self.check_width(h)?;
        let mut g = h.clone();
        g.scale_columns(&self.gate());
        Ok(g)
    }

    fn check_width(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.m.rows() {
            return Err(CgameError::Shape(format!(
                "matcher has {} features, embedding has {} columns",
                self.m.rows(),
                h.cols()
            )));
        }
        Ok(())
    }

    fn check_pairs(&self, pairs: &[EmbeddingPair], want: usize, what: &str) -> Result<()> {
        if pairs.len() != want {
            return Err(CgameError::InvalidConfig(format!(
                "{what} needs {want} batch pairs, got {}",
                pairs.len()
            )));
        }
        for (hx, hy) in pairs {
            self.check_width(hx)?;
            self.check_width(hy)?;
        }
        Ok(())
    }

    /// Candidate structures: column `i` is the batch cosine of pair `i`.
    pub fn candidates(&self, pairs: &[EmbeddingPair]) -> Result<Matrix> {
        if pairs.is_empty() {
            return Err(CgameError::InvalidConfig(
                "candidate generation needs at least one batch pair".into(),
            ));
        }
        let mut out = Matrix::zeros(self.m.rows(), pairs.len());
        for (i, (hx, hy)) in pairs.iter().enumerate() {
            self.check_width(hx)?;
            out.set_col(i, &batch_cosine(hx, hy, DEFAULT_EPS)?);
        }
        Ok(out)
    }

    fn accumulate_value(&mut self, hx: &Matrix, hy: &Matrix) -> Result<()> {
        let cos = structure_cosine(hx, hy, &self.m, DEFAULT_EPS, self.hyper.cosine)?;
        let lambda = self.hyper.lambda;
        for (v, c) in self.v.as_mut_slice().iter_mut().zip(cos.as_slice()) {
            *v = lambda * *v + c;
        }
        Ok(())
    }

    /// Resets `V` to ones, then applies `q` discounted accumulations:
    /// `V = λ^q + Σ_i λ^(q−i) · cos_i`.
    pub fn value_refresh(&mut self, pairs: &[EmbeddingPair]) -> Result<()> {
        self.check_pairs(pairs, self.hyper.q, "value refresh")?;
        self.v = Matrix::ones(1, self.hyper.n_s);
        for (hx, hy) in pairs {
            self.accumulate_value(hx, hy)?;
        }
        Ok(())
    }

    /// One structure update:
    /// 1. build `p` candidate columns from `candidate_pairs`, accumulating
    ///    the same pairs into the current `V`;
    /// 2. shuffle the candidate columns;
    /// 3. keep the `n_s − p` columns of `M` with the highest `V` (ties go to
    ///    the lower index), ordered by rank, and append the candidates;
    /// 4. refresh `V` on `value_pairs`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        candidate_pairs: &[EmbeddingPair],
        value_pairs: &[EmbeddingPair],
        rng: &mut R,
    ) -> Result<()> {
        let (n_s, p) = (self.hyper.n_s, self.hyper.p);
        self.check_pairs(candidate_pairs, p, "matcher step")?;
        self.check_pairs(value_pairs, self.hyper.q, "value refresh")?;

        let fresh = self.candidates(candidate_pairs)?;
        for (hx, hy) in candidate_pairs {
            self.accumulate_value(hx, hy)?;
        }
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(rng);

        let keep = retained_columns(self.v.as_slice(), n_s - p);
        let mut m = Matrix::zeros(self.m.rows(), n_s);
        for (dst, &src) in keep.iter().enumerate() {
            m.set_col(dst, &self.m.col(src));
        }
        for (i, &src) in order.iter().enumerate() {
            m.set_col(n_s - p + i, &fresh.col(src));
        }
        self.m = m;
        self.value_refresh(value_pairs)
    }
}

/// Indices of the `keep` highest values, descending; equal values keep
/// their original relative order. NaN ranks last.
pub fn retained_columns(values: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let (va, vb) = (values[a], values[b]);
        match (va.is_nan(), vb.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => vb.partial_cmp(&va).unwrap(),
        }
    });
    idx.truncate(keep);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyper(n_s: usize, p: usize, q: usize, lambda: f64) -> MatcherHyper {
        MatcherHyper {
            n_s,
            p,
            q,
            lambda,
            ..MatcherHyper::default()
        }
    }

    fn rows(r: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    #[test]
    fn fresh_matcher_is_identity() {
        let m = GraphMatcherState::new(3, MatcherHyper::default()).unwrap();
        let h = rows(&[vec![1.5, -2.0, 0.3], vec![0.0, 7.0, -1e-3]]);
        assert_eq!(m.apply(&h).unwrap(), h);
        assert!(m.gate().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_values_close_the_gate() {
        let mut m = GraphMatcherState::new(2, hyper(4, 1, 1, 0.5)).unwrap();
        m.v = Matrix::zeros(1, 4);
        let h = rows(&[vec![1.0, 2.0]]);
        assert_eq!(m.apply(&h).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn gate_hand_example() {
        let m = rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]);
        let v = rows(&[vec![1.0, 0.5]]);
        let state = GraphMatcherState::from_parts(m, v, hyper(2, 1, 1, 0.5)).unwrap();
        assert_eq!(state.gate(), vec![0.25, 0.25]);
        let h = rows(&[vec![4.0, -8.0]]);
        assert_eq!(state.apply(&h).unwrap(), rows(&[vec![1.0, -2.0]]));
    }

    #[test]
    fn sum_aggregation() {
        let mut hy = hyper(2, 1, 1, 0.5);
        hy.aggregation = GateAggregation::Sum;
        let state = GraphMatcherState::new(2, hy).unwrap();
        assert_eq!(state.gate(), vec![2.0, 2.0]);
    }

    #[test]
    fn candidates_examples() {
        let state = GraphMatcherState::new(3, hyper(4, 2, 1, 0.5)).unwrap();
        let hx = rows(&[vec![1.0, 2.0, -3.0], vec![0.5, -1.0, 2.0]]);
        let c = state.candidates(&[(hx.clone(), hx.clone())]).unwrap();
        assert_eq!(c.shape(), (3, 1));
        for v in c.as_slice() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let c = state
            .candidates(&[(hx.clone(), hx.clone()), (hx.clone(), hx.map(|v| -v))])
            .unwrap();
        for f in 0..3 {
            assert!((c.get(f, 0) - 1.0).abs() < 1e-15);
            assert!((c.get(f, 1) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn refresh_pure_cosine() {
        let mut state = GraphMatcherState::new(2, hyper(3, 1, 1, 0.0)).unwrap();
        let hx = rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        state.value_refresh(&[(hx.clone(), hx)]).unwrap();
        for v in state.v().as_slice() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn refresh_discounted_hand_iteration() {
        // a single-feature batch makes every structure cosine exactly c = 1 or -1
        for (hy_sign, c) in [(1.0, 1.0), (-1.0, -1.0)] {
            let mut state = GraphMatcherState::new(1, hyper(2, 1, 2, 0.5)).unwrap();
            let hx = rows(&[vec![2.0]]);
            let hy = rows(&[vec![3.0 * hy_sign]]);
            state
                .value_refresh(&[(hx.clone(), hy.clone()), (hx, hy)])
                .unwrap();
            for v in state.v().as_slice() {
                assert!((v - (0.25 + 1.5 * c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn step_retains_top_columns_in_rank_order() {
        assert_eq!(retained_columns(&[0.9, 0.1, 0.5], 2), vec![0, 2]);

        let mut state = GraphMatcherState::new(2, hyper(3, 1, 1, 0.5)).unwrap();
        let (m, v) = state.parts_mut();
        *m = rows(&[vec![1.0, 0.0, 2.0], vec![1.0, 0.0, 2.0]]);
        *v = rows(&[vec![0.9, 0.1, 0.5]]);
        // hx = hy: uniform columns score 1, the zero column 0, so the
        // in-step accumulation gives V = (1.45, 0.05, 1.25).
        let hx = rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        state
            .step(&[(hx.clone(), hx.clone())], &[(hx.clone(), hx.clone())], &mut rng)
            .unwrap();
        assert_eq!(state.m().col(0), vec![1.0, 1.0]);
        assert_eq!(state.m().col(1), vec![2.0, 2.0]);
        assert!(state.m().col(2).iter().all(|c| (c - 1.0).abs() < 1e-15));
    }

    #[test]
    fn retention_ties_prefer_lower_index() {
        assert_eq!(retained_columns(&[0.5, 0.7, 0.5, 0.7], 3), vec![1, 3, 0]);
        assert_eq!(retained_columns(&[f64::NAN, 0.1], 1), vec![1]);
    }

    #[test]
    fn repeated_steps_with_same_batches_give_same_values() {
        let hx = rows(&[vec![1.0, 0.5], vec![0.2, 2.0], vec![1.5, 1.0]]);
        let hy = rows(&[vec![0.8, 0.7], vec![0.1, 1.5], vec![1.0, 1.4]]);
        let mut state = GraphMatcherState::new(2, hyper(2, 1, 1, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = [(hx.clone(), hy.clone())];
        state.step(&pairs, &pairs, &mut rng).unwrap();
        let first = state.clone();
        state.step(&pairs, &pairs, &mut rng).unwrap();
        // the new column is identical, so M and V are unchanged
        assert_eq!(state.v(), first.v());
        let c = batch_cosine(&hx, &hy, DEFAULT_EPS).unwrap();
        assert_eq!(state.m().col(1), c);
    }

    #[test]
    fn ones_columns_are_evicted_after_enough_steps() {
        let hyper = hyper(6, 2, 2, 0.9);
        let mut state = GraphMatcherState::new(3, hyper).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = |rng: &mut ChaCha8Rng| {
            let v = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix::from_vec(4, 3, v).unwrap()
        };
        for _ in 0..3 {
            let cand: Vec<_> = (0..2).map(|_| (batch(&mut rng), batch(&mut rng))).collect();
            let val: Vec<_> = (0..2).map(|_| (batch(&mut rng), batch(&mut rng))).collect();
            state.step(&cand, &val, &mut rng).unwrap();
            assert!(state.v().as_slice().iter().all(|v| v.abs() <= hyper.value_bound() + 1e-12));
        }
        assert!(state.m().as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn config_errors() {
        assert!(GraphMatcherState::new(3, hyper(4, 4, 1, 0.5)).is_err());
        assert!(GraphMatcherState::new(3, hyper(4, 1, 1, 1.0)).is_err());
        assert!(GraphMatcherState::new(3, hyper(4, 1, 0, 0.5)).is_err());
        let mut state = GraphMatcherState::new(3, hyper(4, 2, 1, 0.5)).unwrap();
        let h = Matrix::ones(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(state
            .step(&[(h.clone(), h.clone())], &[(h.clone(), h.clone())], &mut rng)
            .is_err());
        assert!(state.apply(&Matrix::ones(2, 4)).is_err());
    }
}

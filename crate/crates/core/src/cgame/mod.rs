//! Bidirectional encoder–decoder with a shared graph matcher.
//!
//! The forward direction maps flattened link counts `F` to the OD matrix
//! `D`; the inverse direction maps `D` back to `F`. Both encoders embed
//! into the same `n_f`-wide feature space, where the matcher gate is
//! applied before decoding.

mod matcher;
mod store;
mod train;

use serde::{Deserialize, Serialize};

use crate::numcore::{mlp2_backward, mlp2_forward, Matrix, Mlp2Grads, Mlp2Params, NumError, DEFAULT_SLOPE};
use crate::simkit::{OdMatrix, SimError, TrafficCounts};

pub use matcher::{retained_columns, EmbeddingPair, GateAggregation, GraphMatcherState, MatcherHyper};
pub use store::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use train::{
    loss_and_grad, train, train_ablation, LossCurve, LossKind, TrainConfig, TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum CgameError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at iteration {iter}: {detail}")]
    NonFinite {
        what: &'static str,
        iter: usize,
        detail: String,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model manifest: {0}")]
    Manifest(String),
    #[error("unsupported model format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("model blob shape mismatch: expected {expected} bytes, found {found}")]
    BlobShape { expected: usize, found: usize },
    #[error("model blob checksum mismatch: manifest {expected}, blob {found}")]
    Checksum { expected: String, found: String },
}

pub type Result<T, E = CgameError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_l: usize,
    pub n_t: usize,
    pub n_p: usize,
    pub n_f: usize,
    pub n_h: usize,
}

impl ModelDims {
    /// Width of the flattened link counts.
    pub fn n_counts(&self) -> usize {
        self.n_l * self.n_t
    }

    /// Width of the flattened OD matrix.
    pub fn n_od(&self) -> usize {
        self.n_p * self.n_p
    }
}

/// Architecture settings that are not dictated by the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_f: usize,
    pub n_h: usize,
    pub slope: f64,
    pub matcher: MatcherHyper,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_f: 256,
            n_h: 512,
            slope: DEFAULT_SLOPE,
            matcher: MatcherHyper::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 || self.n_h == 0 {
            return Err(CgameError::InvalidConfig("n_f and n_h must be positive".into()));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(CgameError::InvalidConfig(format!(
                "LeakyReLU slope must lie in (0, 1), got {}",
                self.slope
            )));
        }
        self.matcher.validate()
    }
}

/// Per-dimension standardization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// `(v − mean) / std`
    #[default]
    ZScore,
    /// `v / std`, no centering; nonnegative data stays nonnegative.
    ScaleOnly,
    /// Identity.
    None,
}

/// Dimensions whose spread falls below this are not rescaled.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub policy: NormPolicy,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Self {
            policy: NormPolicy::None,
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    /// Fits per-dimension statistics (population std) over `rows`.
    pub fn fit<'a>(policy: NormPolicy, width: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        if policy == NormPolicy::None {
            return Self::identity(width);
        }
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let rows: Vec<&[f64]> = rows.collect();
        for r in &rows {
            n += 1;
            for (i, v) in r.iter().enumerate() {
                sum[i] += v;
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        for r in &rows {
            for (i, v) in r.iter().enumerate() {
                sq[i] += (v - mean[i]).powi(2);
            }
        }
        let scale = sq
            .iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd < MIN_SCALE {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        let mean = match policy {
            NormPolicy::ZScore => mean,
            _ => vec![0.0; width],
        };
        Self { policy, mean, scale }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

/// Row-major (link-major) flattening of `F`.
pub fn flatten_counts(f: &TrafficCounts) -> Vec<f64> {
    f.as_slice().to_vec()
}

pub fn flatten_od(d: &OdMatrix) -> Vec<f64> {
    d.as_slice().to_vec()
}

pub fn unflatten_od(n_p: usize, values: Vec<f64>) -> Result<OdMatrix> {
    Ok(OdMatrix::from_values(n_p, values)?)
}

pub fn unflatten_counts(n_l: usize, n_t: usize, values: Vec<f64>) -> Result<TrafficCounts> {
    Ok(TrafficCounts::from_values(n_l, n_t, values)?)
}

/// `encode`: two-layer perceptron into the shared feature space.
pub fn encode(enc: &Mlp2Params, x: &Matrix) -> Result<Matrix> {
    Ok(mlp2_forward(enc, x)?.0)
}

pub fn decode(dec: &Mlp2Params, g: &Matrix) -> Result<Matrix> {
    Ok(mlp2_forward(dec, g)?.0)
}

/// Loss and gradients of one direction, `loss(dec(gate ⊙ enc(x)), target)`,
/// with the gate held constant.
#[derive(Debug, Clone)]
pub struct DirectionGrads {
    pub loss: f64,
    pub enc: Mlp2Grads,
    pub dec: Mlp2Grads,
    pub input: Matrix,
}

pub fn direction_grads(
    enc: &Mlp2Params,
    dec: &Mlp2Params,
    gate: &[f64],
    x: &Matrix,
    target: &Matrix,
    loss: LossKind,
) -> Result<DirectionGrads> {
    let (h, enc_cache) = mlp2_forward(enc, x)?;
    if h.cols() != gate.len() {
        return Err(CgameError::Shape(format!(
            "gate width {} vs embedding width {}",
            gate.len(),
            h.cols()
        )));
    }
    let mut g = h;
    g.scale_columns(gate);
    let (y, dec_cache) = mlp2_forward(dec, &g)?;
    let (value, dy) = loss_and_grad(&y, target, loss)?;
    let (dec_grads, mut dg) = mlp2_backward(dec, &dec_cache, &dy)?;
    dg.scale_columns(gate);
    let (enc_grads, dx) = mlp2_backward(enc, &enc_cache, &dg)?;
    Ok(DirectionGrads {
        loss: value,
        enc: enc_grads,
        dec: dec_grads,
        input: dx,
    })
}

/// Trained model: both directions, the shared matcher and the
/// standardization statistics of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct CGameModel {
    pub dims: ModelDims,
    pub config: ModelConfig,
    pub fwd_enc: Mlp2Params,
    pub fwd_dec: Mlp2Params,
    pub inv_enc: Mlp2Params,
    pub inv_dec: Mlp2Params,
    pub matcher: GraphMatcherState,
    pub counts_norm: Standardizer,
    pub od_norm: Standardizer,
    /// True when the matcher was frozen at all-ones during training.
    pub matcher_frozen: bool,
}

impl CGameModel {
    pub fn init<R: rand::Rng + ?Sized>(
        dims: ModelDims,
        config: ModelConfig,
        counts_norm: Standardizer,
        od_norm: Standardizer,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if dims.n_f != config.n_f || dims.n_h != config.n_h {
            return Err(CgameError::InvalidConfig(
                "model dims disagree with model config".into(),
            ));
        }
        if counts_norm.width() != dims.n_counts() || od_norm.width() != dims.n_od() {
            return Err(CgameError::Shape(
                "standardizer widths disagree with model dims".into(),
            ));
        }
        let (n_in, n_out, n_f, n_h, s) = (dims.n_counts(), dims.n_od(), dims.n_f, dims.n_h, config.slope);
        Ok(Self {
            dims,
            config,
            fwd_enc: Mlp2Params::init(n_in, n_h, n_f, s, rng),
            fwd_dec: Mlp2Params::init(n_f, n_h, n_out, s, rng),
            inv_enc: Mlp2Params::init(n_out, n_h, n_f, s, rng),
            inv_dec: Mlp2Params::init(n_f, n_h, n_in, s, rng),
            matcher: GraphMatcherState::new(n_f, config.matcher)?,
            counts_norm,
            od_norm,
            matcher_frozen: false,
        })
    }

    pub fn round_to_f32(&mut self) {
        for p in [&mut self.fwd_enc, &mut self.fwd_dec, &mut self.inv_enc, &mut self.inv_dec] {
            p.round_to_f32();
        }
        let (m, v) = self.matcher.parts_mut();
        m.round_to_f32();
        v.round_to_f32();
        for s in [&mut self.counts_norm, &mut self.od_norm] {
            for x in s.mean.iter_mut().chain(s.scale.iter_mut()) {
                *x = *x as f32 as f64;
            }
        }
    }

    fn check_counts(&self, f: &TrafficCounts) -> Result<()> {
        if (f.n_links(), f.n_slices()) != (self.dims.n_l, self.dims.n_t) {
            return Err(CgameError::Shape(format!(
                "model expects F of {}x{}, got {}x{}",
                self.dims.n_l,
                self.dims.n_t,
                f.n_links(),
                f.n_slices()
            )));
        }
        Ok(())
    }

    fn check_od(&self, d: &OdMatrix) -> Result<()> {
        if d.n_spots() != self.dims.n_p {
            return Err(CgameError::Shape(format!(
                "model expects D of {n}x{n}, got {m}x{m}",
                n = self.dims.n_p,
                m = d.n_spots()
            )));
        }
        Ok(())
    }

    /// Flattened and standardized `F` batch, one row per item.
    pub fn counts_batch<'a>(&self, items: impl IntoIterator<Item = &'a TrafficCounts>) -> Result<Matrix> {
        let mut values = Vec::new();
        let mut rows = 0;
        for f in items {
            self.check_counts(f)?;
            values.extend(self.counts_norm.forward(&flatten_counts(f)));
            rows += 1;
        }
        Ok(Matrix::from_vec(rows, self.dims.n_counts(), values)?)
    }

    pub fn od_batch<'a>(&self, items: impl IntoIterator<Item = &'a OdMatrix>) -> Result<Matrix> {
        let mut values = Vec::new();
        let mut rows = 0;
        for d in items {
            self.check_od(d)?;
            values.extend(self.od_norm.forward(&flatten_od(d)));
            rows += 1;
        }
        Ok(Matrix::from_vec(rows, self.dims.n_od(), values)?)
    }

    /// Standardized forward pass `F → D`.
    pub fn forward_standardized(&self, x: &Matrix) -> Result<Matrix> {
        decode(&self.fwd_dec, &self.matcher.apply(&encode(&self.fwd_enc, x)?)?)
    }

    /// Standardized inverse pass `D → F`.
    pub fn inverse_standardized(&self, y: &Matrix) -> Result<Matrix> {
        decode(&self.inv_dec, &self.matcher.apply(&encode(&self.inv_enc, y)?)?)
    }

    pub fn predict_od_batch(&self, counts: &[&TrafficCounts]) -> Result<Vec<OdMatrix>> {
        if counts.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.forward_standardized(&self.counts_batch(counts.iter().copied())?)?;
        (0..z.rows())
            .map(|r| {
                let v = self.od_norm.inverse(z.row(r)).into_iter().map(|v| v.max(0.0)).collect();
                unflatten_od(self.dims.n_p, v)
            })
            .collect()
    }

    pub fn predict_counts_batch(&self, ods: &[&OdMatrix]) -> Result<Vec<TrafficCounts>> {
        if ods.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.inverse_standardized(&self.od_batch(ods.iter().copied())?)?;
        (0..z.rows())
            .map(|r| {
                let v = self.counts_norm.inverse(z.row(r)).into_iter().map(|v| v.max(0.0)).collect();
                unflatten_counts(self.dims.n_l, self.dims.n_t, v)
            })
            .collect()
    }

    /// Estimated OD matrix for one observation of link counts.
    pub fn predict_od(&self, f: &TrafficCounts) -> Result<OdMatrix> {
        Ok(self.predict_od_batch(&[f])?.remove(0))
    }

    /// Estimated link counts for one OD matrix.
    pub fn predict_counts(&self, d: &OdMatrix) -> Result<TrafficCounts> {
        Ok(self.predict_counts_batch(&[d])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_is_link_major() {
        let f = TrafficCounts::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten_counts(&f), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.get(1, 0), 3.0);
        let d = OdMatrix::from_values(2, vec![0.0, 5.0, 6.0, 0.0]).unwrap();
        assert_eq!(unflatten_od(2, flatten_od(&d)).unwrap(), d);
    }

    #[test]
    fn degenerate_statistics_pass_through() {
        let zero = vec![0.0; 4];
        let s = Standardizer::fit(NormPolicy::ZScore, 4, [zero.as_slice(), zero.as_slice()].into_iter());
        assert_eq!(s.scale, vec![1.0; 4]);
        assert_eq!(s.forward(&zero), zero);
    }

    #[test]
    fn standardizer_roundtrip_and_policies() {
        let a = [1.0, 10.0];
        let b = [3.0, 30.0];
        let z = Standardizer::fit(NormPolicy::ZScore, 2, [&a[..], &b[..]].into_iter());
        assert_eq!(z.mean, vec![2.0, 20.0]);
        assert_eq!(z.scale, vec![1.0, 10.0]);
        assert_eq!(z.forward(&a), vec![-1.0, -1.0]);
        assert_eq!(z.inverse(&z.forward(&b)), b.to_vec());
        let s = Standardizer::fit(NormPolicy::ScaleOnly, 2, [&a[..], &b[..]].into_iter());
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.forward(&b), vec![3.0, 3.0]);
    }

    #[test]
    fn identity_encoder_and_decoder() {
        let p = Mlp2Params::identity(3, DEFAULT_SLOPE);
        let x = Matrix::from_rows(&[vec![0.0, 1.0, 2.0]]).unwrap();
        assert_eq!(encode(&p, &x).unwrap(), x);
        assert_eq!(decode(&p, &x).unwrap(), x);
    }

    fn toy_model(seed: u64) -> CGameModel {
        let dims = ModelDims { n_l: 3, n_t: 2, n_p: 2, n_f: 5, n_h: 7 };
        let config = ModelConfig {
            n_f: 5,
            n_h: 7,
            matcher: MatcherHyper { n_s: 4, p: 1, q: 1, ..MatcherHyper::default() },
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CGameModel::init(dims, config, Standardizer::identity(6), Standardizer::identity(4), &mut rng)
            .unwrap()
    }

    #[test]
    fn encoder_width_is_n_f() {
        let model = toy_model(1);
        let x = Matrix::ones(3, 6);
        assert_eq!(encode(&model.fwd_enc, &x).unwrap().shape(), (3, 5));
        assert_eq!(encode(&model.inv_enc, &Matrix::ones(3, 4)).unwrap().shape(), (3, 5));
    }

    #[test]
    fn prediction_is_composition_of_stages() {
        let mut model = toy_model(2);
        let (m, v) = model.matcher.parts_mut();
        m.set(0, 0, -0.5);
        v.set(0, 1, 2.0);
        let f = TrafficCounts::from_values(3, 2, vec![1.0, 0.0, 2.0, 5.0, 1.0, 3.0]).unwrap();
        let d = model.predict_od(&f).unwrap();
        let x = Matrix::from_vec(1, 6, flatten_counts(&f)).unwrap();
        let h = encode(&model.fwd_enc, &x).unwrap();
        let g = model.matcher.apply(&h).unwrap();
        let y = decode(&model.fwd_dec, &g).unwrap();
        let want: Vec<f64> = y.as_slice().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(d.as_slice(), want.as_slice());
        assert_eq!(d.n_spots(), 2);
        assert_eq!(model.predict_counts(&d).unwrap().n_links(), 3);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let mut model = toy_model(3);
        model.fwd_enc = Mlp2Params::identity(6, DEFAULT_SLOPE);
        model.fwd_enc.w2 = Matrix::identity(6).select_rows(&[0, 1, 2, 3, 4]);
        model.fwd_enc.b2 = vec![0.0; 5];
        assert!(model.fwd_dec.b1.iter().chain(&model.fwd_dec.b2).all(|b| *b == 0.0));
        let d = model.predict_od(&TrafficCounts::zeros(3, 2)).unwrap();
        assert_eq!(d, OdMatrix::zeros(2));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = toy_model(4);
        assert!(model.predict_od(&TrafficCounts::zeros(4, 2)).is_err());
        assert!(model.predict_counts(&OdMatrix::zeros(3)).is_err());
    }

    #[test]
    fn direction_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let model = toy_model(10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_vec(3, 6, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let t = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let gate: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..2.0)).collect();
            let g = direction_grads(&model.fwd_enc, &model.fwd_dec, &gate, &x, &t, LossKind::Mse).unwrap();
            let point = model.fwd_enc.w1.as_slice().to_vec();
            let fd = finite_diff_grad(
                |w| {
                    let mut enc = model.fwd_enc.clone();
                    enc.w1.as_mut_slice().copy_from_slice(w);
                    direction_grads(&enc, &model.fwd_dec, &gate, &x, &t, LossKind::Mse).unwrap().loss
                },
                &point,
                1e-5,
            )
            .unwrap();
            for (a, b) in g.enc.w1.as_slice().iter().zip(&fd) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel < 1e-4, "{a} vs {b}");
            }
        }
    }
}

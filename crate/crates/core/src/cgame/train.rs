//! Alternating training: gradient iterations on both directions with the
//! matcher held constant, and a matcher step every `update_interval`
//! iterations on freshly drawn batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    direction_grads, encode, flatten_counts, flatten_od, CGameModel, CgameError, EmbeddingPair,
    ModelConfig, ModelDims, NormPolicy, Result, Standardizer,
};
use crate::numcore::{sgd_step, Matrix, Mlp2Grads, Mlp2Params, NumError};
use crate::simkit::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    #[default]
    Mse,
}

/// Mean loss over all entries and its gradient w.r.t. `pred`.
pub fn loss_and_grad(pred: &Matrix, target: &Matrix, kind: LossKind) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(CgameError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.as_slice().len().max(1) as f64;
    let mut grad = pred.clone();
    let mut total = 0.0;
    for (g, t) in grad.as_mut_slice().iter_mut().zip(target.as_slice()) {
        let d = *g - t;
        match kind {
            LossKind::Mse => {
                total += d * d;
                *g = 2.0 * d / n;
            }
            LossKind::L1 => {
                total += d.abs();
                *g = if d > 0.0 {
                    1.0 / n
                } else if d < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                };
            }
        }
    }
    Ok((total / n, grad))
}

fn loss_only(pred: &Matrix, target: &Matrix, kind: LossKind) -> Result<f64> {
    Ok(loss_and_grad(pred, target, kind)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub loss_kind: LossKind,
    pub norm_policy: NormPolicy,
    /// Iterations between validation checkpoints.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            max_iters: 10_000,
            loss_kind: LossKind::Mse,
            norm_policy: NormPolicy::ZScore,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CgameError::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_iters == 0 || self.eval_interval == 0 {
            return bad("max_iters and eval_interval must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    /// Summed two-direction training loss, one entry per iteration.
    pub train: Vec<f64>,
    /// `(iteration, summed validation loss)` at each checkpoint.
    pub validation: Vec<(usize, f64)>,
    pub matcher_steps: usize,
    /// Iteration whose parameters were returned.
    pub best_iter: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CGameModel,
    pub curve: LossCurve,
}

pub fn train(dataset: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    run(dataset, model, config, true)
}

/// Same schedule and batches as [`train`], but the matcher stays at
/// all-ones, so the gate is the identity throughout.
pub fn train_ablation(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run(dataset, model, config, false)
}

/// Standardized train/validation matrices for both directions.
struct Tensors {
    x_train: Matrix,
    y_train: Matrix,
    x_val: Matrix,
    y_val: Matrix,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Result<Matrix> {
    let mut values = Vec::new();
    let mut n = 0;
    for r in rows {
        values.extend(r);
        n += 1;
    }
    Ok(Matrix::from_vec(n, width, values)?)
}

/// Draws batches by walking seeded permutations of the training indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

struct Velocity([Vec<Vec<f64>>; 4]);

impl Velocity {
    fn new(model: &CGameModel) -> Self {
        let zeros = |p: &Mlp2Params| p.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self([
            zeros(&model.fwd_enc),
            zeros(&model.fwd_dec),
            zeros(&model.inv_enc),
            zeros(&model.inv_dec),
        ])
    }
}

fn apply_sgd(
    params: &mut Mlp2Params,
    grads: &Mlp2Grads,
    velocity: &mut [Vec<f64>],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    for ((p, g), v) in params.blocks_mut().into_iter().zip(grads.blocks()).zip(velocity) {
        sgd_step(p, g, v, cfg.lr, cfg.momentum).map_err(|e| match e {
            NumError::NonFinite { context } => CgameError::NonFinite {
                what: "gradient",
                iter,
                detail: context,
            },
            other => other.into(),
        })?;
    }
    Ok(())
}

fn embedding_pair(model: &CGameModel, t: &Tensors, idx: &[usize]) -> Result<EmbeddingPair> {
    Ok((
        encode(&model.fwd_enc, &t.x_train.select_rows(idx))?,
        encode(&model.inv_enc, &t.y_train.select_rows(idx))?,
    ))
}

fn validation_loss(model: &CGameModel, t: &Tensors, kind: LossKind) -> Result<Option<f64>> {
    if t.x_val.rows() == 0 {
        return Ok(None);
    }
    let fwd = loss_only(&model.forward_standardized(&t.x_val)?, &t.y_val, kind)?;
    let inv = loss_only(&model.inverse_standardized(&t.y_val)?, &t.x_val, kind)?;
    Ok(Some(fwd + inv))
}

fn run(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    matcher_enabled: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.split.train.is_empty() {
        return Err(CgameError::InvalidConfig("training split is empty".into()));
    }
    let meta = &dataset.meta;
    let dims = ModelDims {
        n_l: meta.n_l,
        n_t: meta.n_t,
        n_p: meta.n_p,
        n_f: model_cfg.n_f,
        n_h: model_cfg.n_h,
    };
    let train_f: Vec<Vec<f64>> = dataset.train_items().map(|i| flatten_counts(&i.counts)).collect();
    let train_d: Vec<Vec<f64>> = dataset.train_items().map(|i| flatten_od(&i.od)).collect();
    let counts_norm =
        Standardizer::fit(cfg.norm_policy, dims.n_counts(), train_f.iter().map(Vec::as_slice));
    let od_norm = Standardizer::fit(cfg.norm_policy, dims.n_od(), train_d.iter().map(Vec::as_slice));

    let tensors = Tensors {
        x_train: stack(train_f.iter().map(|r| counts_norm.forward(r)), dims.n_counts())?,
        y_train: stack(train_d.iter().map(|r| od_norm.forward(r)), dims.n_od())?,
        x_val: stack(
            dataset.validation_items().map(|i| counts_norm.forward(&flatten_counts(&i.counts))),
            dims.n_counts(),
        )?,
        y_val: stack(
            dataset.validation_items().map(|i| od_norm.forward(&flatten_od(&i.od))),
            dims.n_od(),
        )?,
    };

    // Stream 0 drives initialization and gradient batches, stream 1 the
    // matcher, so the ablation sees exactly the same gradient batches.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut matcher_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    matcher_rng.set_stream(1);

    let mut model = CGameModel::init(dims, *model_cfg, counts_norm, od_norm, &mut rng)?;
    model.matcher_frozen = !matcher_enabled;
    let mut velocity = Velocity::new(&model);
    let n_train = tensors.x_train.rows();
    let mut sampler = BatchSampler::new(n_train, &mut rng);
    let mut matcher_sampler = BatchSampler::new(n_train, &mut matcher_rng);
    let hyper = model_cfg.matcher;

    let mut curve = LossCurve::default();
    let mut best: Option<(f64, CGameModel)> = None;

    for iter in 0..cfg.max_iters {
        let gate = model.matcher.gate();
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let xb = tensors.x_train.select_rows(&idx);
        let yb = tensors.y_train.select_rows(&idx);
        let fwd = direction_grads(&model.fwd_enc, &model.fwd_dec, &gate, &xb, &yb, cfg.loss_kind)?;
        let inv = direction_grads(&model.inv_enc, &model.inv_dec, &gate, &yb, &xb, cfg.loss_kind)?;
        let loss = fwd.loss + inv.loss;
        if !loss.is_finite() {
            return Err(CgameError::NonFinite {
                what: "training loss",
                iter,
                detail: format!("forward {} + inverse {}", fwd.loss, inv.loss),
            });
        }
        curve.train.push(loss);

        let [v_fe, v_fd, v_ie, v_id] = &mut velocity.0;
        apply_sgd(&mut model.fwd_enc, &fwd.enc, v_fe, cfg, iter)?;
        apply_sgd(&mut model.fwd_dec, &fwd.dec, v_fd, cfg, iter)?;
        apply_sgd(&mut model.inv_enc, &inv.enc, v_ie, cfg, iter)?;
        apply_sgd(&mut model.inv_dec, &inv.dec, v_id, cfg, iter)?;

        let done = iter + 1;
        if matcher_enabled && done % hyper.update_interval == 0 {
            let mut draw = |k: usize| -> Result<Vec<EmbeddingPair>> {
                (0..k)
                    .map(|_| {
                        let idx = matcher_sampler.next(cfg.batch_size, &mut matcher_rng);
                        embedding_pair(&model, &tensors, &idx)
                    })
                    .collect()
            };
            let candidates = draw(hyper.p)?;
            let values = draw(hyper.q)?;
            model.matcher.step(&candidates, &values, &mut matcher_rng)?;
            if !model.matcher.gate().iter().all(|g| g.is_finite()) {
                return Err(CgameError::NonFinite {
                    what: "matcher gate",
                    iter,
                    detail: "gate contains NaN or infinity".into(),
                });
            }
            curve.matcher_steps += 1;
        }

        if done % cfg.eval_interval == 0 || done == cfg.max_iters {
            if let Some(v) = validation_loss(&model, &tensors, cfg.loss_kind)? {
                if !v.is_finite() {
                    return Err(CgameError::NonFinite {
                        what: "validation loss",
                        iter,
                        detail: v.to_string(),
                    });
                }
                curve.validation.push((done, v));
                if best.as_ref().map_or(true, |(b, _)| v < *b) {
                    curve.best_iter = done;
                    best = Some((v, model.clone()));
                }
            }
        }
    }

    let mut model = match best {
        Some((_, m)) => m,
        None => {
            curve.best_iter = cfg.max_iters;
            model
        }
    };
    model.round_to_f32();
    Ok(TrainOutcome { model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgame::MatcherHyper;
    use crate::simkit::{generate_dataset, NetworkConfig, SimConfig};

    #[test]
    fn loss_values() {
        let p = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.0, 5.0]]).unwrap();
        let (mse, g) = loss_and_grad(&p, &t, LossKind::Mse).unwrap();
        assert_eq!(mse, 2.5);
        assert_eq!(g.as_slice(), &[1.0, -2.0]);
        let (l1, g) = loss_and_grad(&p, &t, LossKind::L1).unwrap();
        assert_eq!(l1, 1.5);
        assert_eq!(g.as_slice(), &[0.5, -0.5]);
        assert!(loss_and_grad(&p, &Matrix::zeros(2, 1), LossKind::Mse).is_err());
    }

    fn toy_dataset() -> Dataset {
        let cfg = SimConfig {
            network: NetworkConfig {
                rows: 2,
                cols: 2,
                link_length_m: 1000.0,
            },
            n_items: 60,
            n_t: 4,
            slice_s: 900.0,
            trips_min: 200,
            trips_max: 300,
            ..SimConfig::default()
        };
        generate_dataset(&cfg, 5).unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            n_f: 8,
            n_h: 16,
            matcher: MatcherHyper {
                n_s: 6,
                p: 2,
                q: 2,
                update_interval: 10,
                ..MatcherHyper::default()
            },
            ..ModelConfig::default()
        }
    }

    fn small_train(seed: u64, iters: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch_size: 8,
            max_iters: iters,
            eval_interval: 20,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_and_determinism() {
        let ds = toy_dataset();
        let a = train(&ds, &small_model(), &small_train(1, 95)).unwrap();
        let b = train(&ds, &small_model(), &small_train(1, 95)).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve.train.len(), 95);
        assert_eq!(a.curve.matcher_steps, 9);
        assert!(!a.model.matcher.is_all_ones());
    }

    #[test]
    fn ablation_keeps_identity_gate() {
        let ds = toy_dataset();
        let out = train_ablation(&ds, &small_model(), &small_train(2, 60)).unwrap();
        assert!(out.model.matcher.is_all_ones());
        assert!(out.model.matcher_frozen);
        assert_eq!(out.curve.matcher_steps, 0);
        let again = train_ablation(&ds, &small_model(), &small_train(2, 60)).unwrap();
        assert_eq!(out.curve, again.curve);
    }

    #[test]
    fn first_interval_matches_ablation() {
        // identical gradient batches until the first matcher step
        let ds = toy_dataset();
        let a = train(&ds, &small_model(), &small_train(3, 10)).unwrap();
        let b = train_ablation(&ds, &small_model(), &small_train(3, 10)).unwrap();
        assert_eq!(a.curve.train, b.curve.train);
    }

    #[test]
    fn training_loss_decreases() {
        let ds = toy_dataset();
        for seed in 0..3 {
            for matcher in [true, false] {
                let out = run(&ds, &small_model(), &small_train(seed, 200), matcher).unwrap();
                let t = &out.curve.train;
                let head: f64 = t[..50].iter().sum::<f64>() / 50.0;
                let tail: f64 = t[150..].iter().sum::<f64>() / 50.0;
                assert!(tail < head, "seed {seed} matcher {matcher}: {head} -> {tail}");
            }
        }
    }

    #[test]
    fn config_errors() {
        let ds = toy_dataset();
        let mut cfg = small_train(0, 10);
        cfg.batch_size = 1;
        assert!(matches!(train(&ds, &small_model(), &cfg), Err(CgameError::InvalidConfig(_))));
        let mut empty = ds.clone();
        empty.split.train.clear();
        assert!(train(&empty, &small_model(), &small_train(0, 10)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = toy_dataset();
        let mut cfg = small_train(0, 200);
        cfg.lr = 1e6;
        match train(&ds, &small_model(), &cfg) {
            Err(CgameError::NonFinite { .. }) => {}
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}

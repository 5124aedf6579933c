//! AdaDelta with a fixed unit learning rate, global-norm gradient clipping,
//! the epoch loop and checkpoint averaging.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, Header, Model, Session};
use crate::tensor::{round_to_mode, Tensor};

/// The only learning rate this optimizer ever uses.
pub const LEARNING_RATE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub rho: f64,
    pub eps: f64,
    /// Global gradient norm ceiling.
    pub clip: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Checkpoints kept for averaging.
    pub average_last: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            rho: 0.95,
            eps: 1e-6,
            clip: 10.0,
            batch_size: 4,
            shuffle: true,
            average_last: 30,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("optim.rho", "must lie in (0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::config("optim.clip", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be >= 1"));
        }
        if self.average_last == 0 {
            return Err(Error::config("optim.average_last", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient by `threshold / norm` when the global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, threshold: f64) -> Result<f64> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Contract(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.values_mut().flat_map(|t| t.data_mut()) {
            *g *= s;
        }
    }
    Ok(norm)
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState {
    pub rho: f64,
    pub eps: f64,
    lr: f64,
    pub sq_grad: BTreeMap<String, Vec<f64>>,
    pub sq_update: BTreeMap<String, Vec<f64>>,
}

impl AdaDeltaState {
    pub fn new(rho: f64, eps: f64) -> Self {
        AdaDeltaState {
            rho,
            eps,
            lr: LEARNING_RATE,
            sq_grad: BTreeMap::new(),
            sq_update: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

/// One update over named parameters:
/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δx = −√(E[Δx²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δx²] ← ρE[Δx²] + (1−ρ)Δx²`, `x ← x + lr·Δx`.
pub fn adadelta_step<'a>(
    params: impl Iterator<Item = (&'a String, &'a mut [f64])>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdaDeltaState,
) -> Result<()> {
    let (rho, eps, lr) = (state.rho, state.eps, state.lr);
    for (name, x) in params {
        let g = grads.get(name).ok_or_else(|| Error::ParamMismatch {
            name: name.clone(),
            msg: "no gradient".into(),
        })?;
        if g.numel() != x.len() {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                msg: format!("{} gradient values for {} parameters", g.numel(), x.len()),
            });
        }
        let eg = state
            .sq_grad
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; x.len()]);
        let ed = state
            .sq_update
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; x.len()]);
        if eg.len() != x.len() || ed.len() != x.len() {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                msg: "optimizer state has a different size".into(),
            });
        }
        for (((xi, &gi), egi), edi) in x
            .iter_mut()
            .zip(g.data())
            .zip(eg.iter_mut())
            .zip(ed.iter_mut())
        {
            *egi = rho * *egi + (1.0 - rho) * gi * gi;
            let dx = -((*edi + eps).sqrt() / (*egi + eps).sqrt()) * gi;
            *edi = rho * *edi + (1.0 - rho) * dx * dx;
            *xi += lr * dx;
        }
        round_to_mode(x);
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    pub tokens: usize,
    /// Mean of the per-batch losses.
    pub mean_loss: f64,
    /// Pre-clip global gradient norms: median, 90th percentile, max.
    pub grad_p50: f64,
    pub grad_p90: f64,
    pub grad_max: f64,
    pub clipped: usize,
}

impl EpochStats {
    /// One metrics-log record.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} batches={} tokens={} loss={:.6} grad_p50={:.4} grad_p90={:.4} grad_max={:.4} clipped={}",
            self.epoch,
            self.batches,
            self.tokens,
            self.mean_loss,
            self.grad_p50,
            self.grad_p90,
            self.grad_max,
            self.clipped
        )
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i]
}

/// splitmix64, for deriving independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// forward → backward → clip → AdaDelta for every batch. `on_end` sees the
/// model after the last batch (not called for an empty batch list).
pub fn train_epoch(
    model: &mut Model,
    batches: &[Batch],
    state: &mut AdaDeltaState,
    clip: f64,
    epoch: usize,
    seed: u64,
    on_end: &mut dyn FnMut(&Model, &EpochStats) -> Result<()>,
) -> Result<EpochStats> {
    let mut stats = EpochStats {
        epoch,
        ..Default::default()
    };
    if batches.is_empty() {
        return Ok(stats);
    }
    let mut norms = Vec::with_capacity(batches.len());
    let mut loss_sum = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        let (loss, mut grads, tokens) = {
            let mut sess =
                Session::training(model, mix_seed(seed, (epoch as u64) << 32 | i as u64));
            let (loss, tokens) = sess.batch_loss(batch)?;
            let value = sess.tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    batch: i,
                    loss: value,
                    grad_norm: f64::NAN,
                });
            }
            sess.tape.backward(loss)?;
            (value, sess.grads(), tokens)
        };
        let norm = clip_gradients(&mut grads, clip)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                batch: i,
                loss,
                grad_norm: norm,
            });
        }
        stats.clipped += usize::from(norm > clip);
        norms.push(norm);
        loss_sum += loss;
        stats.tokens += tokens;
        adadelta_step(model.values_mut(), &grads, state)?;
    }
    norms.sort_by(f64::total_cmp);
    stats.batches = batches.len();
    stats.mean_loss = loss_sum / batches.len() as f64;
    stats.grad_p50 = percentile(&norms, 0.5);
    stats.grad_p90 = percentile(&norms, 0.9);
    stats.grad_max = *norms.last().expect("nonempty");
    on_end(model, &stats)?;
    Ok(stats)
}

/// Token sequences paired with their features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

/// Groups examples into batches in the given order.
pub fn make_batches(
    examples: &[Example],
    order: &[usize],
    batch_size: usize,
) -> Result<Vec<Batch>> {
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let items: Vec<(&Tensor, &[usize])> = chunk
                .iter()
                .map(|&i| (&examples[i].features, examples[i].tokens.as_slice()))
                .collect();
            Batch::from_utterances(&items)
        })
        .collect()
}

/// Model, optimizer state and epoch counter of a training run.
pub struct Trainer {
    pub model: Model,
    pub state: AdaDeltaState,
    pub config: RunConfig,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let state = AdaDeltaState::new(config.optim.rho, config.optim.eps);
        Ok(Trainer {
            model,
            state,
            config,
            epoch: 0,
        })
    }

    /// Batches for the next epoch, shuffled from the run seed.
    pub fn batches(&self, examples: &[Example]) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        if self.config.optim.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                self.config.seed,
                0x5348_5546 + self.epoch as u64,
            ));
            order.shuffle(&mut rng);
        }
        make_batches(examples, &order, self.config.optim.batch_size)
    }

    /// Runs one epoch; `on_end` receives the epoch's checkpoint.
    pub fn run_epoch(
        &mut self,
        examples: &[Example],
        on_end: &mut dyn FnMut(Checkpoint, &EpochStats) -> Result<()>,
    ) -> Result<EpochStats> {
        let _precision = crate::tensor::PrecisionGuard::new(self.config.precision);
        let batches = self.batches(examples)?;
        self.epoch += 1;
        let epoch = self.epoch;
        let header = self.header();
        let stats = train_epoch(
            &mut self.model,
            &batches,
            &mut self.state,
            self.config.optim.clip,
            epoch,
            self.config.seed,
            &mut |model, stats| {
                let mut h = header.clone();
                h.set("checkpoint.epoch", epoch.to_string());
                h.set("checkpoint.mean_loss", format!("{:e}", stats.mean_loss));
                on_end(Checkpoint::from_model(model, h), stats)
            },
        )?;
        assert_eq!(
            self.state.lr(),
            LEARNING_RATE,
            "learning rate must never change"
        );
        Ok(stats)
    }

    pub fn header(&self) -> Header {
        let mut entries = vec![(
            "format.version".to_string(),
            crate::model::CHECKPOINT_VERSION.to_string(),
        )];
        entries.extend(self.config.echo());
        entries.push(("optim.lr".into(), format!("{LEARNING_RATE:?}")));
        Header::new(entries)
    }
}

/// Per-parameter arithmetic mean accumulated in double precision. Values
/// are summed in sorted order, so the result does not depend on the order
/// of the inputs. The header is taken from the last checkpoint.
pub fn average_checkpoints(set: &[Checkpoint]) -> Result<Checkpoint> {
    let last = set
        .last()
        .ok_or_else(|| Error::Input("no checkpoints to average".into()))?;
    for (i, ck) in set.iter().enumerate() {
        for (name, t) in &last.params {
            let other = ck.params.get(name).ok_or_else(|| Error::ParamMismatch {
                name: name.clone(),
                msg: format!("missing from checkpoint {i}"),
            })?;
            if other.shape() != t.shape() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    msg: format!(
                        "shape {:?} in checkpoint {i}, {:?} elsewhere",
                        other.shape(),
                        t.shape()
                    ),
                });
            }
        }
        if let Some(extra) = ck.params.keys().find(|k| !last.params.contains_key(*k)) {
            return Err(Error::ParamMismatch {
                name: extra.clone(),
                msg: format!("only present in checkpoint {i}"),
            });
        }
    }
    let n = set.len() as f64;
    let mut params = BTreeMap::new();
    let mut vals = Vec::with_capacity(set.len());
    for (name, t) in &last.params {
        let sources: Vec<&[f64]> = set.iter().map(|c| c.params[name].data()).collect();
        let data = (0..t.numel())
            .map(|j| {
                vals.clear();
                vals.extend(sources.iter().map(|s| s[j]));
                vals.sort_by(f64::total_cmp);
                vals.iter().sum::<f64>() / n
            })
            .collect();
        params.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    let mut header = last.header.clone();
    header.set("checkpoint.averaged_count", set.len().to_string());
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn map(entries: &[(&str, Vec<f64>)]) -> BTreeMap<String, Tensor> {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new([v.len()], v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn clip_leaves_small_norms_alone() {
        let mut g = map(&[("a", vec![2.4, 0.0]), ("b", vec![0.0, 3.2])]);
        let before = g.clone();
        let norm = clip_gradients(&mut g, 10.0).unwrap();
        assert!((norm - 4.0).abs() < 1e-12);
        assert_eq!(g, before);
    }

    #[test]
    fn clip_scales_to_threshold() {
        let mut g = map(&[("a", vec![20.0, 0.0])]);
        clip_gradients(&mut g, 10.0).unwrap();
        assert_eq!(g["a"].data(), &[10.0, 0.0]);
        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    #[test]
    fn clip_random_norm_25() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = 25.0 / raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = raw.iter().map(|x| x * s).collect();
        let mut g = map(&[("a", v[..20].to_vec()), ("b", v[20..].to_vec())]);
        let before = g.clone();
        let norm = clip_gradients(&mut g, 10.0).unwrap();
        assert!((norm - 25.0).abs() < 1e-9);
        assert!((global_norm(&g) - 10.0).abs() < 1e-9);
        let dot: f64 = before
            .values()
            .zip(g.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| x * y)
            .sum();
        let cos = dot / (global_norm(&before) * global_norm(&g));
        assert!((cos - 1.0).abs() < 1e-12);
    }

    fn run_steps(x0: f64, gs: &[f64], rho: f64, eps: f64) -> (f64, AdaDeltaState) {
        let mut params = map(&[("x", vec![x0])]);
        let mut state = AdaDeltaState::new(rho, eps);
        for &g in gs {
            let grads = map(&[("x", vec![g])]);
            adadelta_step(
                params.iter_mut().map(|(k, t)| (k, t.data_mut())),
                &grads,
                &mut state,
            )
            .unwrap();
        }
        (params["x"].data()[0], state)
    }

    #[test]
    fn adadelta_matches_scalar_oracle() {
        let (rho, eps) = (0.95, 1e-6);
        // hand-rolled, written out per step
        let (mut x, mut eg, mut ed) = (0.5f64, 0.0f64, 0.0f64);
        for _ in 0..3 {
            let g = 1.0;
            eg = rho * eg + (1.0 - rho) * g * g;
            let dx = -(ed + eps).sqrt() / (eg + eps).sqrt() * g;
            ed = rho * ed + (1.0 - rho) * dx * dx;
            x += dx;
        }
        let (got, state) = run_steps(0.5, &[1.0, 1.0, 1.0], rho, eps);
        assert!((got - x).abs() < 1e-12);
        assert!((state.sq_grad["x"][0] - eg).abs() < 1e-12);
        assert!((state.sq_update["x"][0] - ed).abs() < 1e-12);
    }

    #[test]
    fn adadelta_first_step_and_zero_gradient() {
        let (rho, eps) = (0.95, 1e-6);
        let g = 3.0;
        let (x, _) = run_steps(0.0, &[g], rho, eps);
        let want = -(eps.sqrt() / ((1.0 - rho) * g * g + eps).sqrt()) * g;
        assert!((x - want).abs() < 1e-15);
        assert!(x < 0.0);

        let (x, state) = run_steps(1.0, &[1.0, 0.0], rho, eps);
        let (x1, s1) = run_steps(1.0, &[1.0], rho, eps);
        assert_eq!(x, x1);
        assert!((state.sq_grad["x"][0] - rho * s1.sq_grad["x"][0]).abs() < 1e-15);
        assert!((state.sq_update["x"][0] - rho * s1.sq_update["x"][0]).abs() < 1e-15);
    }

    #[test]
    fn adadelta_rejects_shape_mismatch() {
        let mut params = map(&[("x", vec![0.0, 0.0])]);
        let mut state = AdaDeltaState::new(0.95, 1e-6);
        let grads = map(&[("x", vec![1.0])]);
        let r = adadelta_step(
            params.iter_mut().map(|(k, t)| (k, t.data_mut())),
            &grads,
            &mut state,
        );
        assert!(matches!(r, Err(Error::ParamMismatch { name, .. }) if name == "x"));
    }

    proptest! {
        #[test]
        fn adadelta_moves_against_gradient(gs in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let mut params = map(&[("x", vec![0.0])]);
            let mut state = AdaDeltaState::new(0.95, 1e-6);
            for &g in &gs {
                let before = params["x"].data()[0];
                let grads = map(&[("x", vec![g])]);
                adadelta_step(params.iter_mut().map(|(k, t)| (k, t.data_mut())), &grads, &mut state).unwrap();
                let moved = params["x"].data()[0] - before;
                if g != 0.0 {
                    prop_assert!(moved * g < 0.0);
                }
                prop_assert!(state.sq_grad["x"][0] >= 0.0 && state.sq_update["x"][0] >= 0.0);
                prop_assert_eq!(state.lr(), 1.0);
            }
        }

        #[test]
        fn clip_caps_norm_and_keeps_direction(v in prop::collection::vec(-100.0f64..100.0, 1..30), th in 0.1f64..50.0) {
            let mut g = map(&[("a", v.clone())]);
            clip_gradients(&mut g, th).unwrap();
            prop_assert!(global_norm(&g) <= th * (1.0 + 1e-12));
            for (a, b) in v.iter().zip(g["a"].data()) {
                prop_assert!(a * b >= 0.0);
            }
        }
    }

    fn ck(vals: &[(&str, Vec<f64>)]) -> Checkpoint {
        Checkpoint {
            header: Header::default(),
            params: map(vals),
        }
    }

    #[test]
    fn averaging_basics() {
        let a = ck(&[("w", vec![1.0]), ("b", vec![0.25, -1.0])]);
        let same = average_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same.params, a.params);
        let b = ck(&[("w", vec![3.0]), ("b", vec![0.25, -1.0])]);
        assert_eq!(
            average_checkpoints(&[a.clone(), b]).unwrap().params["w"].data(),
            &[2.0]
        );
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn averaging_names_the_bad_parameter() {
        let a = ck(&[("w", vec![1.0]), ("b", vec![0.0])]);
        let shape = ck(&[("w", vec![1.0, 2.0]), ("b", vec![0.0])]);
        let missing = ck(&[("w", vec![1.0])]);
        let extra = ck(&[("w", vec![1.0]), ("b", vec![0.0]), ("z", vec![0.0])]);
        for (other, bad) in [(shape, "w"), (missing, "b"), (extra, "z")] {
            let err = average_checkpoints(&[other, a.clone()]).unwrap_err();
            assert!(
                matches!(&err, Error::ParamMismatch { name, .. } if name == bad),
                "{err}"
            );
        }
    }

    #[test]
    fn averaging_five_random_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set: Vec<Checkpoint> = (0..5)
            .map(|_| {
                let w: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                ck(&[("w", w), ("b", b)])
            })
            .collect();
        let avg = average_checkpoints(&set).unwrap();
        for name in ["w", "b"] {
            for j in 0..set[0].params[name].numel() {
                let oracle = set.iter().map(|c| c.params[name].data()[j]).sum::<f64>() / 5.0;
                assert!((avg.params[name].data()[j] - oracle).abs() < 1e-12);
            }
        }
        let mut rev = set.clone();
        rev.reverse();
        rev.rotate_left(2);
        assert_eq!(average_checkpoints(&rev).unwrap().params, avg.params);
    }
}

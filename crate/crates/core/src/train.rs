//! Training loop: adaptive-moment optimization over voxelized shape
//! batches with the masked segmentation loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::loss::{softmax_cross_entropy_masked, voxel_accuracy};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamStore, Tape};
use crate::tensor::Tensor;
use crate::voxel::{normalize_cloud, rotate_cloud, voxelize, LabeledPointCloud};

/// Shape rotations the augmentation draws from: twelfths of a full turn.
pub const NUM_ROTATIONS: usize = 12;

/// How training augments each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    /// Shapes are used as generated.
    Off,
    /// One rotation drawn uniformly per shape per epoch.
    Random,
    /// Every shape appears at all twelve rotations each epoch.
    Expand,
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: Augment,
    pub seed: u64,
    /// Stop once epoch loss falls to or below this value.
    pub target_loss: Option<f64>,
    /// Stop once epoch voxel accuracy reaches this value (a fraction).
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 1,
            augment: Augment::Off,
            seed: 0,
            target_loss: None,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "moment decays must satisfy 0 < beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epoch count must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers plus the step counter, one slot per
/// parameter in store order.
pub struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()).expect("parameter shapes are nonempty"))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    pub(crate) fn restore(
        store: &ParamStore<T>,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        t: u64,
    ) -> Result<Self> {
        let count = store.ids().count();
        if m.len() != count || v.len() != count {
            return Err(Error::InvalidConfig(
                "optimizer state holds a different parameter count than the store".into(),
            ));
        }
        for (id, buffers) in store.ids().zip(m.iter().zip(&v)) {
            let want = store.get(id).shape();
            if buffers.0.shape() != want || buffers.1.shape() != want {
                return Err(Error::InvalidConfig(format!(
                    "optimizer state for '{}' does not match the parameter shape {want:?}",
                    store.name(id)
                )));
            }
        }
        Ok(Self { m, v, t })
    }

    /// One bias-corrected update of every trainable parameter. Every
    /// trainable parameter must have a finite gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        config: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let corr1 = 1.0 - config.beta1.powi(t);
        let corr2 = 1.0 - config.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = grads
                .iter()
                .find(|(gid, _)| *gid == id)
                .map(|(_, g)| g)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no gradient for trainable parameter '{}'",
                        store.name(id)
                    ))
                })?;
            if let Some(bad) = grad.data().iter().find(|g| !g.as_f64().is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite gradient {} for parameter '{}'",
                    bad.as_f64(),
                    store.name(id)
                )));
            }
            if grad.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    grad.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            let idx = id.index();
            let theta = store.get_mut(id);
            for (((x, g), m), v) in theta
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(self.m[idx].data_mut())
                .zip(self.v[idx].data_mut())
            {
                let gf = g.as_f64();
                let mf = config.beta1 * m.as_f64() + (1.0 - config.beta1) * gf;
                let vf = config.beta2 * v.as_f64() + (1.0 - config.beta2) * gf * gf;
                *m = T::from_f64(mf);
                *v = T::from_f64(vf);
                let m_hat = mf / corr1;
                let v_hat = vf / corr2;
                *x = T::from_f64(
                    x.as_f64() - config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon),
                );
            }
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub voxel_acc: f64,
}

fn batch_ids(dataset: &[LabeledPointCloud], batch: &[(usize, usize)]) -> String {
    batch
        .iter()
        .map(|&(i, _)| {
            dataset[i]
                .shape_id
                .clone()
                .unwrap_or_else(|| format!("#{i}"))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains a model in place. Per epoch: seeded shuffle, optional rotation
/// augmentation, voxelization, batched forward/backward, one optimizer step
/// per batch. The loss logged for an epoch is the mean over all occupied
/// voxels the epoch saw. `on_epoch` runs after each epoch, before the
/// early-stop check.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[LabeledPointCloud],
    config: &TrainConfig,
    state: &mut AdamState<T>,
    mut on_epoch: impl FnMut(&EpochLog, &Model<T>, &AdamState<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let category = &dataset[0].category;
    if let Some(other) = dataset.iter().find(|c| &c.category != category) {
        return Err(Error::InvalidArgument(format!(
            "training mixes categories '{category}' and '{}'",
            other.category
        )));
    }
    let parts = model.spec().labels;
    let resolution = model.spec().resolution;
    let mut prepared = Vec::with_capacity(dataset.len());
    for cloud in dataset {
        let cloud = normalize_cloud(cloud.clone())?;
        if cloud.max_label() as usize > parts {
            return Err(Error::InvalidArgument(format!(
                "shape {} uses label {} but the model has {parts} parts",
                cloud.shape_id.as_deref().unwrap_or("?"),
                cloud.max_label()
            )));
        }
        prepared.push(cloud);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<(usize, usize)> = match config.augment {
            Augment::Expand => (0..prepared.len())
                .flat_map(|i| (0..NUM_ROTATIONS).map(move |n| (i, n)))
                .collect(),
            _ => (0..prepared.len()).map(|i| (i, 0)).collect(),
        };
        order.shuffle(&mut rng);
        if config.augment == Augment::Random {
            for entry in &mut order {
                entry.1 = rng.gen_range(0..NUM_ROTATIONS);
            }
        }

        let vol = resolution * resolution * resolution;
        let mut loss_weighted = 0.0f64;
        let mut correct_total = 0usize;
        let mut occupied_total = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut occupancy = Vec::with_capacity(batch.len() * vol);
            let mut labels = Vec::with_capacity(batch.len() * vol);
            for &(i, rot) in batch {
                let rotated = rotate_cloud(prepared[i].clone(), rot)?;
                let grid = voxelize(&rotated, resolution)?;
                occupancy.extend(grid.occupancy_tensor::<T>().data().iter().copied());
                labels.extend_from_slice(grid.labels.as_ref().expect("labeled input"));
            }
            let input =
                Tensor::from_vec(&[batch.len(), 1, resolution, resolution, resolution], occupancy)?;

            let mut tape = Tape::new();
            let x = tape.constant(input);
            let pass = model.forward(&mut tape, x, Mode::Train)?;
            let loss = softmax_cross_entropy_masked(&mut tape, pass.logits, &labels, parts)?;
            let loss_value = tape.value(loss)?.item()?.as_f64();
            if !loss_value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite loss {loss_value} on shapes [{}]",
                    batch_ids(dataset, batch)
                )));
            }
            let (correct, occupied) = voxel_accuracy(tape.value(pass.logits)?, &labels)?;
            tape.backward(loss)?;
            let grads = tape.collect_param_grads(model.store())?;
            state.step(model.store_mut(), &grads, config)?;

            loss_weighted += loss_value * occupied as f64;
            correct_total += correct;
            occupied_total += occupied;
        }

        let log = EpochLog {
            epoch,
            loss: loss_weighted / occupied_total as f64,
            voxel_acc: correct_total as f64 / occupied_total as f64,
        };
        on_epoch(&log, model, state)?;
        logs.push(log);

        let loss_met = config.target_loss.is_none_or(|t| log.loss <= t);
        let acc_met = config.target_accuracy.is_none_or(|t| log.voxel_acc >= t);
        let any_target = config.target_loss.is_some() || config.target_accuracy.is_some();
        if any_target && loss_met && acc_met {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureSpec, Variant};
    use crate::synth::generate_shape;
    use approx::assert_abs_diff_eq;

    fn tiny_model(seed: u64) -> Model<f64> {
        let mut spec = ArchitectureSpec::for_variant(Variant::Voxsegnet, 16, 2);
        spec.channels = 4;
        spec.bottleneck = 2;
        Model::build(spec, seed).unwrap()
    }

    fn scalar_store(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::from_vec(&[1], vec![value]).unwrap(), true)
            .unwrap();
        (store, id)
    }

    #[test]
    fn config_bounds_are_enforced() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                beta1: 0.999,
                beta2: 0.9,
                ..ok.clone()
            },
            TrainConfig {
                beta2: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                epsilon: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(0.37);
        let mut state = AdamState::new(&store);
        let grads = vec![(id, Tensor::zeros(&[1]).unwrap())];
        state.step(&mut store, &grads, &TrainConfig::default()).unwrap();
        assert_eq!(store.get(id).data(), &[0.37]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_the_hand_computation() {
        let (mut store, id) = scalar_store(0.0);
        let mut state = AdamState::new(&store);
        let grads = vec![(id, Tensor::from_vec(&[1], vec![1.0]).unwrap())];
        state.step(&mut store, &grads, &TrainConfig::default()).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert_abs_diff_eq!(store.get(id).data()[0], expected, epsilon = 1e-18);
        assert_abs_diff_eq!(store.get(id).data()[0], -0.000999999990, epsilon = 1e-12);
    }

    #[test]
    fn repeated_steps_match_an_independent_transcription() {
        let config = TrainConfig::default();
        let (mut store, id) = scalar_store(0.5);
        let mut state = AdamState::new(&store);
        let g = 0.3f64;
        let grads = vec![(id, Tensor::from_vec(&[1], vec![g]).unwrap())];
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=2 {
            state.step(&mut store, &grads, &config).unwrap();
            m = config.beta1 * m + (1.0 - config.beta1) * g;
            v = config.beta2 * v + (1.0 - config.beta2) * g * g;
            let m_hat = m / (1.0 - config.beta1.powi(t));
            let v_hat = v / (1.0 - config.beta2.powi(t));
            theta -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            assert_abs_diff_eq!(store.get(id).data()[0], theta, epsilon = 1e-15);
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn missing_and_non_finite_gradients_are_named() {
        let (mut store, id) = scalar_store(0.0);
        let mut state = AdamState::new(&store);
        let err = state
            .step(&mut store, &[], &TrainConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("'w'"), "{err}");
        let grads = vec![(id, Tensor::from_vec(&[1], vec![f64::NAN]).unwrap())];
        let err = state
            .step(&mut store, &grads, &TrainConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("non-finite") && err.contains("'w'"), "{err}");
    }

    #[test]
    fn one_small_step_usually_decreases_the_loss() {
        let shape = generate_shape("table", 2).unwrap();
        let cloud = normalize_cloud(shape).unwrap();
        let grid = voxelize(&cloud, 16).unwrap();
        let labels = grid.labels.clone().unwrap();
        let mut decreased = 0;
        for seed in 0..10 {
            let mut model = tiny_model(seed);
            let run = |model: &mut Model<f64>, want_grads: bool| {
                let mut tape = Tape::new();
                let x = tape.constant(grid.occupancy_tensor::<f64>());
                let pass = model.forward(&mut tape, x, Mode::Train).unwrap();
                let loss =
                    softmax_cross_entropy_masked(&mut tape, pass.logits, &labels, 2).unwrap();
                let value = tape.value(loss).unwrap().item().unwrap();
                if !want_grads {
                    return (value, Vec::new());
                }
                tape.backward(loss).unwrap();
                (value, tape.collect_param_grads(model.store()).unwrap())
            };
            let (before, grads) = run(&mut model, true);
            let config = TrainConfig {
                learning_rate: 1e-4,
                ..TrainConfig::default()
            };
            let mut state = AdamState::new(model.store());
            state.step(model.store_mut(), &grads, &config).unwrap();
            let (after, _) = run(&mut model, false);
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 9, "loss decreased in only {decreased}/10 runs");
    }

    #[test]
    fn batched_loss_matches_per_shape_oracles_on_the_same_logits() {
        let clouds: Vec<_> = (0..4)
            .map(|s| normalize_cloud(generate_shape("table", s).unwrap()).unwrap())
            .collect();
        let mut model = tiny_model(3);
        let r = 16;
        let vol = r * r * r;
        let mut occupancy = Vec::new();
        let mut labels = Vec::new();
        for cloud in &clouds {
            let grid = voxelize(cloud, r).unwrap();
            occupancy.extend(grid.occupancy_tensor::<f64>().data().iter().copied());
            labels.extend_from_slice(grid.labels.as_ref().unwrap());
        }
        let input = Tensor::from_vec(&[4, 1, r, r, r], occupancy).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let pass = model.forward(&mut tape, x, Mode::Train).unwrap();
        let loss = softmax_cross_entropy_masked(&mut tape, pass.logits, &labels, 2).unwrap();
        let batched = tape.value(loss).unwrap().item().unwrap();
        let logits = tape.value(pass.logits).unwrap().clone();

        let mut weighted = 0.0;
        let mut occupied = 0usize;
        for s in 0..4 {
            let lx = logits.data();
            let mut shape_sum = 0.0;
            let mut shape_m = 0usize;
            for voxel in 0..vol {
                let label = labels[s * vol + voxel];
                if label == 0 {
                    continue;
                }
                let base = s * 2 * vol + voxel;
                let (a, b) = (lx[base], lx[base + vol]);
                let mx = a.max(b);
                let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
                let picked = if label == 1 { a } else { b };
                shape_sum += lse - picked;
                shape_m += 1;
            }
            weighted += shape_sum;
            occupied += shape_m;
            let _per_shape = shape_sum / shape_m as f64;
        }
        assert_abs_diff_eq!(batched, weighted / occupied as f64, epsilon = 1e-12);
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let dataset: Vec<_> = (0..3).map(|s| generate_shape("table", s).unwrap()).collect();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut curves = Vec::new();
        for _ in 0..2 {
            let mut model = tiny_model(1);
            let mut state = AdamState::new(model.store());
            let logs = train(&mut model, &dataset, &config, &mut state, |_, _, _| Ok(()))
                .unwrap();
            curves.push(logs);
        }
        assert_eq!(curves[0], curves[1]);
        assert_eq!(curves[0].len(), 2);
    }

    #[test]
    fn rotation_augmentation_changes_the_curve_but_stays_finite() {
        let dataset: Vec<_> = (0..2).map(|s| generate_shape("table", s).unwrap()).collect();
        let base = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = |augment: Augment| {
            let config = TrainConfig { augment, ..base.clone() };
            let mut model = tiny_model(1);
            let mut state = AdamState::new(model.store());
            train(&mut model, &dataset, &config, &mut state, |_, _, _| Ok(())).unwrap()
        };
        let plain = run(Augment::Off);
        let rotated = run(Augment::Random);
        assert_ne!(plain, rotated);
        for log in plain.iter().chain(&rotated) {
            assert!(log.loss.is_finite());
        }
    }

    #[test]
    fn expansion_mode_visits_every_rotation() {
        let dataset = vec![generate_shape("table", 0).unwrap()];
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            augment: Augment::Expand,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(1);
        let mut state = AdamState::new(model.store());
        train(&mut model, &dataset, &config, &mut state, |_, _, _| Ok(())).unwrap();
        assert_eq!(state.step_count(), 3, "12 samples in batches of 4");
    }

    #[test]
    fn mixed_categories_are_rejected() {
        let dataset = vec![
            generate_shape("table", 0).unwrap(),
            generate_shape("lamp", 0).unwrap(),
        ];
        let mut model = tiny_model(1);
        let mut state = AdamState::new(model.store());
        let err = train(
            &mut model,
            &dataset,
            &TrainConfig::default(),
            &mut state,
            |_, _, _| Ok(()),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("categories"), "{err}");
    }

    #[test]
    fn poisoned_weights_abort_with_the_shape_ids() {
        let dataset = vec![generate_shape("table", 5).unwrap()];
        let mut model = tiny_model(1);
        let id = model.store().find("stem.weight").unwrap();
        model.store_mut().get_mut(id).data_mut()[0] = f64::INFINITY;
        let mut state = AdamState::new(model.store());
        let err = train(
            &mut model,
            &dataset,
            &TrainConfig::default(),
            &mut state,
            |_, _, _| Ok(()),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("table_000005"), "{err}");
    }

    #[test]
    fn single_shape_overfits_at_toy_scale() {
        let dataset = vec![generate_shape("table", 1).unwrap()];
        let config = TrainConfig {
            epochs: 250,
            batch_size: 1,
            seed: 7,
            target_loss: Some(0.05),
            ..TrainConfig::default()
        };
        let mut model = tiny_model(7);
        let mut state = AdamState::new(model.store());
        let logs = train(&mut model, &dataset, &config, &mut state, |_, _, _| Ok(()))
            .unwrap();
        let last = logs.last().unwrap();
        assert!(
            last.loss < 0.05,
            "loss only reached {} after {} epochs",
            last.loss,
            logs.len()
        );
        assert!(last.loss < logs[0].loss);
    }
}

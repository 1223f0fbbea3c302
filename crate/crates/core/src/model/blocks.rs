//! Composite blocks shared by the model variants.

use rand::Rng;

use crate::dilation::DilationSchedule;
use crate::error::{Error, Result};
use crate::nn::activation::{relu, sigmoid};
use crate::nn::conv::{Conv3dCfg, ConvTranspose3dCfg};
use crate::nn::layers::{BatchNorm3d, Conv3d, ConvTranspose3d, Linear};
use crate::nn::ops::{concat_channels, scale_channels};
use crate::nn::pool::{global_avg_pool, max_pool3d};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tape::{ParamStore, Tape, Var};

/// Bottlenecked residual block around one dilated convolution: a 1x1x1
/// reduction, the 3x3x3 atrous convolution, and a 1x1x1 expansion back to
/// the input width, added to the input and rectified. Batch norm follows
/// the first two convolutions only.
pub struct Arb {
    reduce: Conv3d,
    reduce_bn: BatchNorm3d,
    atrous: Conv3d,
    atrous_bn: BatchNorm3d,
    expand: Conv3d,
}

impl Arb {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        bottleneck: usize,
        kernel: usize,
        rate: usize,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Conv3d::new(
                store,
                rng,
                &format!("{name}.reduce"),
                Conv3dCfg::new(channels, bottleneck, 1),
            )?,
            reduce_bn: BatchNorm3d::new(store, &format!("{name}.reduce_bn"), bottleneck)?,
            atrous: Conv3d::new(
                store,
                rng,
                &format!("{name}.atrous"),
                Conv3dCfg::new(bottleneck, bottleneck, kernel).with_dilation(rate),
            )?,
            atrous_bn: BatchNorm3d::new(store, &format!("{name}.atrous_bn"), bottleneck)?,
            expand: Conv3d::new(
                store,
                rng,
                &format!("{name}.expand"),
                Conv3dCfg::new(bottleneck, channels, 1),
            )?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.reduce.apply(store, tape, x)?;
        let h = self.reduce_bn.apply(store, tape, h, mode)?;
        let h = relu(tape, h)?;
        let h = self.atrous.apply(store, tape, h)?;
        let h = self.atrous_bn.apply(store, tape, h, mode)?;
        let h = relu(tape, h)?;
        let h = self.expand.apply(store, tape, h)?;
        let s = tape.add(h, x)?;
        relu(tape, s)
    }
}

/// A stack of residual blocks, one per dilation rate of a feasible
/// schedule. Spatial resolution passes through unchanged.
pub struct Sde {
    blocks: Vec<Arb>,
}

impl Sde {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        schedule: &DilationSchedule,
        channels: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        if !schedule.feasible {
            return Err(Error::InvalidConfig(format!(
                "stage '{name}' dilation schedule {:?} is infeasible: {}",
                schedule.rates,
                schedule.reason.as_deref().unwrap_or("no reason recorded")
            )));
        }
        let mut blocks = Vec::with_capacity(schedule.rates.len());
        for (i, &rate) in schedule.rates.iter().enumerate() {
            blocks.push(Arb::new(
                store,
                rng,
                &format!("{name}.block{}", i + 1),
                channels,
                bottleneck,
                schedule.kernel,
                rate,
            )?);
        }
        Ok(Self { blocks })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        mut x: Var,
        mode: Mode,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.apply(store, tape, x, mode)?;
        }
        Ok(x)
    }
}

/// Attentive fusion of a low-stage and a high-stage feature volume: global
/// mean of their channel concatenation, a two-layer bottleneck producing one
/// sigmoid gate per low-stage channel, and the gated low-stage features
/// added to the high-stage ones.
pub struct Afa {
    fc1: Linear,
    fc2: Linear,
}

impl Afa {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), 2 * channels, channels)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), channels, channels)?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        f_lo: Var,
        f_hi: Var,
    ) -> Result<Var> {
        let lo_shape = tape.value(f_lo)?.shape().to_vec();
        let hi_shape = tape.value(f_hi)?.shape().to_vec();
        if lo_shape != hi_shape {
            return Err(Error::ShapeMismatch(format!(
                "attentive fusion requires matching stages, got {lo_shape:?} and {hi_shape:?}"
            )));
        }
        let z = concat_channels(tape, f_lo, f_hi)?;
        let z = global_avg_pool(tape, z)?;
        let u = self.fc1.apply(store, tape, z)?;
        let u = relu(tape, u)?;
        let u = self.fc2.apply(store, tape, u)?;
        let a = sigmoid(tape, u)?;
        let scaled = scale_channels(tape, f_lo, a)?;
        tape.add(scaled, f_hi)
    }
}

/// Per-voxel classifier: two 1x1x1 convolutions with batch norm and
/// rectification, then a final 1x1x1 projection to raw label logits.
pub struct Head {
    c1: Conv3d,
    bn1: BatchNorm3d,
    c2: Conv3d,
    bn2: BatchNorm3d,
    c3: Conv3d,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        mid: usize,
        labels: usize,
    ) -> Result<Self> {
        Ok(Self {
            c1: Conv3d::new(store, rng, &format!("{name}.fc1"), Conv3dCfg::new(in_ch, mid, 1))?,
            bn1: BatchNorm3d::new(store, &format!("{name}.fc1_bn"), mid)?,
            c2: Conv3d::new(store, rng, &format!("{name}.fc2"), Conv3dCfg::new(mid, mid, 1))?,
            bn2: BatchNorm3d::new(store, &format!("{name}.fc2_bn"), mid)?,
            c3: Conv3d::new(store, rng, &format!("{name}.logits"), Conv3dCfg::new(mid, labels, 1))?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.c1.apply(store, tape, x)?;
        let h = self.bn1.apply(store, tape, h, mode)?;
        let h = relu(tape, h)?;
        let h = self.c2.apply(store, tape, h)?;
        let h = self.bn2.apply(store, tape, h, mode)?;
        let h = relu(tape, h)?;
        self.c3.apply(store, tape, h)
    }
}

/// Fusion step of the plain-atrous baseline: mixes a skip concatenation
/// back to the trunk width, then refines it with a dense residual block.
pub struct FuseBlock {
    mix: Conv3d,
    mix_bn: BatchNorm3d,
    refine: Arb,
}

impl FuseBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        Ok(Self {
            mix: Conv3d::new(
                store,
                rng,
                &format!("{name}.mix"),
                Conv3dCfg::new(2 * channels, channels, 1),
            )?,
            mix_bn: BatchNorm3d::new(store, &format!("{name}.mix_bn"), channels)?,
            refine: Arb::new(store, rng, &format!("{name}.refine"), channels, bottleneck, 3, 1)?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        trunk: Var,
        skip: Var,
        mode: Mode,
    ) -> Result<Var> {
        let cat = concat_channels(tape, trunk, skip)?;
        let h = self.mix.apply(store, tape, cat)?;
        let h = self.mix_bn.apply(store, tape, h, mode)?;
        let h = relu(tape, h)?;
        self.refine.apply(store, tape, h, mode)
    }
}

/// Encoder block of the downsampling baseline: convolution, batch norm,
/// rectification. The caller pools afterwards so the pre-pool feature stays
/// available for the skip connection.
pub struct EncBlock {
    conv: Conv3d,
    bn: BatchNorm3d,
}

impl EncBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv3d::new(store, rng, &format!("{name}.conv"), Conv3dCfg::new(in_ch, out_ch, 3))?,
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.conv.apply(store, tape, x)?;
        let h = self.bn.apply(store, tape, h, mode)?;
        relu(tape, h)
    }

    pub fn pool<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        max_pool3d(tape, x)
    }
}

/// Decoder block: strided transpose convolution doubling each extent, batch
/// norm, rectification.
pub struct DecBlock {
    up: ConvTranspose3d,
    bn: BatchNorm3d,
}

impl DecBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: ConvTranspose3d::new(
                store,
                rng,
                &format!("{name}.up"),
                ConvTranspose3dCfg::new(in_ch, out_ch, 3, 2),
            )?,
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.up.apply(store, tape, x)?;
        let h = self.bn.apply(store, tape, h, mode)?;
        relu(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dilation::validate_schedule;
    use crate::tape::finite_difference_check;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_input(shape: &[usize]) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|i| ((i * 23 + 7) % 19) as f64 / 9.0 - 1.0)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn residual_block_preserves_shape_for_any_rate() {
        for rate in [1, 2, 5] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let arb = Arb::new(&mut store, &mut rng, "arb", 3, 2, 3, rate).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(seeded_input(&[2, 3, 4, 4, 4]));
            let y = arb.apply(&mut store, &mut tape, x, Mode::Train).unwrap();
            assert_eq!(tape.value(y).unwrap().shape(), &[2, 3, 4, 4, 4]);
        }
    }

    #[test]
    fn zeroed_expansion_turns_the_block_into_plain_rectification() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arb = Arb::new(&mut store, &mut rng, "arb", 2, 2, 3, 2).unwrap();
        for name in ["arb.expand.weight", "arb.expand.bias"] {
            let id = store.find(name).unwrap();
            let zero = Tensor::zeros(store.get(id).shape()).unwrap();
            *store.get_mut(id) = zero;
        }
        let mut tape = Tape::new();
        let input = seeded_input(&[1, 2, 3, 3, 3]);
        let x = tape.constant(input.clone());
        let y = arb.apply(&mut store, &mut tape, x, Mode::Train).unwrap();
        for (o, i) in tape.value(y).unwrap().data().iter().zip(input.data()) {
            assert_abs_diff_eq!(*o, i.max(0.0), epsilon = 0.0);
        }
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let x0 = seeded_input(&[1, 2, 4, 4, 4]);
        let run = |x: &Tensor<f64>| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let arb = Arb::new(&mut store, &mut rng, "arb", 2, 2, 3, 2)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = arb.apply(&mut store, &mut tape, xv, Mode::Train)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum(sq)?;
            let value = tape.value(s)?.item()?;
            tape.backward(s)?;
            Ok((value, tape.grad(xv)?.clone()))
        };
        let (_, analytic) = run(&x0).unwrap();
        let mut probe = x0.clone();
        let err = finite_difference_check(
            &mut |p: &Tensor<f64>| run(p).map(|t| t.0),
            &mut probe,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input gradient error {err}");
    }

    #[test]
    fn stack_rejects_infeasible_schedules() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bad = validate_schedule(&[2, 4, 8], 3).unwrap();
        let err = Sde::new(&mut store, &mut rng, "s", &bad, 4, 2);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stack_applies_blocks_in_order_and_keeps_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sched = validate_schedule(&[1, 3, 5], 3).unwrap();
        let sde = Sde::new(&mut store, &mut rng, "s", &sched, 2, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(seeded_input(&[1, 2, 6, 6, 6]));
        let y = sde.apply(&mut store, &mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 2, 6, 6, 6]);
        assert_eq!(store.ids().count(), 3 * (3 * 2 + 2 * 5));
    }

    fn afa_fixture() -> (ParamStore<f64>, Afa, Tensor<f64>, Tensor<f64>) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let afa = Afa::new(&mut store, &mut rng, "afa", 3).unwrap();
        let lo = seeded_input(&[2, 3, 2, 2, 2]);
        let hi_data: Vec<f64> = lo.data().iter().map(|v| v * 0.5 + 0.3).collect();
        let hi = Tensor::from_vec(&[2, 3, 2, 2, 2], hi_data).unwrap();
        (store, afa, lo, hi)
    }

    #[test]
    fn zeroed_attention_weights_halve_the_low_stage() {
        let (mut store, afa, lo, hi) = afa_fixture();
        for id in store.ids().collect::<Vec<_>>() {
            let zero = Tensor::zeros(store.get(id).shape()).unwrap();
            *store.get_mut(id) = zero;
        }
        let mut tape = Tape::new();
        let lo_v = tape.constant(lo.clone());
        let hi_v = tape.constant(hi.clone());
        let y = afa.apply(&store, &mut tape, lo_v, hi_v).unwrap();
        for ((o, l), h) in tape.value(y).unwrap().data().iter().zip(lo.data()).zip(hi.data()) {
            assert_abs_diff_eq!(*o, 0.5 * l + h, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_low_stage_passes_the_high_stage_through() {
        let (store, afa, lo, hi) = afa_fixture();
        let zero = Tensor::zeros(lo.shape()).unwrap();
        let mut tape = Tape::new();
        let lo_v = tape.constant(zero);
        let hi_v = tape.constant(hi.clone());
        let y = afa.apply(&store, &mut tape, lo_v, hi_v).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), hi.data());
    }

    #[test]
    fn saturated_gates_reduce_to_sum_or_passthrough() {
        for (bias, expect_sum) in [(40.0, true), (-40.0, false)] {
            let (mut store, afa, lo, hi) = afa_fixture();
            let b2 = store.find("afa.fc2.bias").unwrap();
            let saturate = Tensor::filled(store.get(b2).shape(), bias).unwrap();
            *store.get_mut(b2) = saturate;
            let mut tape = Tape::new();
            let lo_v = tape.constant(lo.clone());
            let hi_v = tape.constant(hi.clone());
            let y = afa.apply(&store, &mut tape, lo_v, hi_v).unwrap();
            for ((o, l), h) in
                tape.value(y).unwrap().data().iter().zip(lo.data()).zip(hi.data())
            {
                let expect = if expect_sum { l + h } else { *h };
                assert_abs_diff_eq!(*o, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_stage_shapes_are_rejected() {
        let (store, afa, lo, _) = afa_fixture();
        let mut tape = Tape::new();
        let lo_v = tape.constant(lo);
        let hi_v = tape.constant(seeded_input(&[2, 3, 2, 2, 4]));
        assert!(afa.apply(&store, &mut tape, lo_v, hi_v).is_err());
    }

    #[test]
    fn fusion_block_mixes_skip_back_to_trunk_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fuse = FuseBlock::new(&mut store, &mut rng, "fuse", 2, 2).unwrap();
        let mut tape = Tape::new();
        let trunk = tape.constant(seeded_input(&[1, 2, 4, 4, 4]));
        let skip = tape.constant(seeded_input(&[1, 2, 4, 4, 4]));
        let y = fuse.apply(&mut store, &mut tape, trunk, skip, Mode::Train).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 2, 4, 4, 4]);
    }

    #[test]
    fn encoder_halves_and_decoder_doubles() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = EncBlock::new(&mut store, &mut rng, "enc", 1, 3).unwrap();
        let dec = DecBlock::new(&mut store, &mut rng, "dec", 3, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(seeded_input(&[2, 1, 4, 4, 4]));
        let e = enc.apply(&mut store, &mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(e).unwrap().shape(), &[2, 3, 4, 4, 4]);
        let p = enc.pool(&mut tape, e).unwrap();
        assert_eq!(tape.value(p).unwrap().shape(), &[2, 3, 2, 2, 2]);
        let d = dec.apply(&mut store, &mut tape, p, Mode::Train).unwrap();
        assert_eq!(tape.value(d).unwrap().shape(), &[2, 2, 4, 4, 4]);
    }
}

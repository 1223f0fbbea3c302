//! Declarative model zoo: the attentive multi-stage segmentation network
//! and its ablation baselines, built from an [`ArchitectureSpec`].

pub mod blocks;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dilation::{receptive_field, validate_schedule, DilationSchedule, LayerRf};
use crate::error::{Error, Result};
use crate::nn::conv::Conv3dCfg;
use crate::nn::layers::Conv3d;
use crate::nn::loss::predict_parts;
use crate::nn::ops::concat_channels;
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{as_batched, Tensor};
use crate::voxel::VoxelGrid;

use blocks::{Afa, Arb, DecBlock, EncBlock, FuseBlock, Head, Sde};

/// Network topology selector.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full network: stem, three dilation stages, progressive attentive fusion.
    Voxsegnet,
    /// Two dilation stages fused by a single attention unit.
    SdeAfa2,
    /// Two dilation stages fused by channel concatenation.
    SdeConcat,
    /// Plain atrous trunk with rates 2, 3, 4 and skip-concat refinement.
    Atrous3dcnn,
    /// Encoder/decoder baseline with three poolings and skip concatenations.
    Unet3d,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Voxsegnet,
        Variant::SdeAfa2,
        Variant::SdeConcat,
        Variant::Atrous3dcnn,
        Variant::Unet3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Voxsegnet => "voxsegnet",
            Variant::SdeAfa2 => "sde_afa2",
            Variant::SdeConcat => "sde_concat",
            Variant::Atrous3dcnn => "atrous3dcnn",
            Variant::Unet3d => "unet3d",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown variant '{s}', expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

fn default_kernel() -> usize {
    3
}

fn default_channels() -> usize {
    64
}

fn default_bottleneck() -> usize {
    32
}

/// Dilation schedule of one stage.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub rates: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl StageSpec {
    pub fn new(rates: &[usize]) -> Self {
        Self {
            rates: rates.to_vec(),
            kernel: default_kernel(),
        }
    }
}

/// Complete declarative description of a model instance.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub resolution: usize,
    pub labels: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

impl ArchitectureSpec {
    /// Spec with the canonical stage layout for a variant.
    pub fn for_variant(variant: Variant, resolution: usize, labels: usize) -> Self {
        let stages = match variant {
            Variant::Voxsegnet => vec![
                StageSpec::new(&[1, 1, 1]),
                StageSpec::new(&[1, 3, 5]),
                StageSpec::new(&[1, 3, 5]),
            ],
            Variant::SdeAfa2 | Variant::SdeConcat => {
                vec![StageSpec::new(&[1, 1, 1]), StageSpec::new(&[1, 3, 5])]
            }
            Variant::Atrous3dcnn | Variant::Unet3d => Vec::new(),
        };
        Self {
            variant,
            resolution,
            labels,
            channels: default_channels(),
            bottleneck: default_bottleneck(),
            stages,
        }
    }

    fn uses_stage_schedules(&self) -> bool {
        matches!(
            self.variant,
            Variant::Voxsegnet | Variant::SdeAfa2 | Variant::SdeConcat
        )
    }

    /// Checks every structural invariant and returns the validated dilation
    /// schedule of each stage (empty for the fixed-topology baselines).
    pub fn validate(&self) -> Result<Vec<DilationSchedule>> {
        if self.resolution == 0 {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        if self.labels == 0 || self.labels > u8::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "label count must be in 1..=255, got {}",
                self.labels
            )));
        }
        if self.channels == 0 || self.bottleneck == 0 {
            return Err(Error::InvalidConfig(
                "channel and bottleneck widths must be positive".into(),
            ));
        }
        if !self.uses_stage_schedules() {
            if !self.stages.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "variant '{}' has a fixed topology and takes no stage schedules",
                    self.variant
                )));
            }
            if self.variant == Variant::Unet3d && self.resolution % 8 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "variant 'unet3d' needs a resolution divisible by 8, got {}",
                    self.resolution
                )));
            }
            return Ok(Vec::new());
        }
        if self.stages.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "variant '{}' fuses adjacent stages and needs at least two, got {}",
                self.variant,
                self.stages.len()
            )));
        }
        let mut schedules = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let schedule = validate_schedule(&stage.rates, stage.kernel)?;
            if !schedule.feasible {
                return Err(Error::InvalidConfig(format!(
                    "stage {} schedule {:?} is infeasible: {}",
                    i + 1,
                    stage.rates,
                    schedule.reason.as_deref().unwrap_or("no reason recorded")
                )));
            }
            schedules.push(schedule);
        }
        Ok(schedules)
    }

    /// Layer descriptions entering the receptive-field computation. The stem
    /// and the pointwise prediction head are excluded; for the dilation-stage
    /// variants only the atrous convolutions count, matching the convention
    /// that bottleneck reductions and expansions are pointwise.
    pub fn rf_layers(&self) -> Vec<LayerRf> {
        match self.variant {
            Variant::Voxsegnet | Variant::SdeAfa2 | Variant::SdeConcat => self
                .stages
                .iter()
                .flat_map(|s| s.rates.iter().map(|&r| LayerRf::new(s.kernel, r, 1)))
                .collect(),
            Variant::Atrous3dcnn => vec![
                LayerRf::new(3, 2, 1),
                LayerRf::new(3, 3, 1),
                LayerRf::new(3, 4, 1),
                LayerRf::new(3, 1, 1),
                LayerRf::new(3, 1, 1),
                LayerRf::new(3, 1, 1),
            ],
            Variant::Unet3d => vec![
                LayerRf::new(3, 1, 1),
                LayerRf::new(2, 1, 2),
                LayerRf::new(3, 1, 1),
                LayerRf::new(2, 1, 2),
                LayerRf::new(3, 1, 1),
                LayerRf::new(2, 1, 2),
            ],
        }
    }

    /// Receptive-field side length at the deepest feature map, in voxels.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.rf_layers())
    }
}

enum Net {
    SdeAfa {
        stem: Conv3d,
        stages: Vec<Sde>,
        afas: Vec<Afa>,
        head: Head,
    },
    SdeConcat {
        stem: Conv3d,
        stages: Vec<Sde>,
        head: Head,
    },
    Atrous {
        stem: Conv3d,
        atrous: Vec<Arb>,
        fuses: Vec<FuseBlock>,
        head: Head,
    },
    Unet {
        enc: Vec<EncBlock>,
        dec: Vec<DecBlock>,
        head: Head,
    },
}

/// One forward pass: the logits node plus every named intermediate stage,
/// in computation order.
pub struct ForwardPass {
    pub logits: Var,
    pub stages: Vec<(String, Var)>,
}

/// A built network: its spec, its parameter store, and the layer graph.
pub struct Model<T: Scalar> {
    spec: ArchitectureSpec,
    store: ParamStore<T>,
    net: Net,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized network. The same spec and seed always
    /// produce bitwise identical parameters.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let schedules = spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.channels;
        let bn = spec.bottleneck;
        let k = spec.labels;
        let net = match spec.variant {
            Variant::Voxsegnet | Variant::SdeAfa2 => {
                let stem = Conv3d::new(&mut store, &mut rng, "stem", Conv3dCfg::new(1, c, 3))?;
                let mut stages = Vec::with_capacity(schedules.len());
                for (i, schedule) in schedules.iter().enumerate() {
                    stages.push(Sde::new(
                        &mut store,
                        &mut rng,
                        &format!("stage{}", i + 1),
                        schedule,
                        c,
                        bn,
                    )?);
                }
                let mut afas = Vec::with_capacity(stages.len() - 1);
                for low in (1..stages.len()).rev() {
                    afas.push(Afa::new(&mut store, &mut rng, &format!("afa{low}"), c)?);
                }
                let head = Head::new(&mut store, &mut rng, "head", c, c, k)?;
                Net::SdeAfa {
                    stem,
                    stages,
                    afas,
                    head,
                }
            }
            Variant::SdeConcat => {
                let stem = Conv3d::new(&mut store, &mut rng, "stem", Conv3dCfg::new(1, c, 3))?;
                let mut stages = Vec::with_capacity(schedules.len());
                for (i, schedule) in schedules.iter().enumerate() {
                    stages.push(Sde::new(
                        &mut store,
                        &mut rng,
                        &format!("stage{}", i + 1),
                        schedule,
                        c,
                        bn,
                    )?);
                }
                let head = Head::new(&mut store, &mut rng, "head", schedules.len() * c, c, k)?;
                Net::SdeConcat { stem, stages, head }
            }
            Variant::Atrous3dcnn => {
                let stem = Conv3d::new(&mut store, &mut rng, "stem", Conv3dCfg::new(1, c, 3))?;
                let mut atrous = Vec::new();
                for (i, rate) in [2usize, 3, 4].into_iter().enumerate() {
                    atrous.push(Arb::new(
                        &mut store,
                        &mut rng,
                        &format!("atrous{}", i + 1),
                        c,
                        bn,
                        3,
                        rate,
                    )?);
                }
                let mut fuses = Vec::new();
                for i in 1..=3 {
                    fuses.push(FuseBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("fuse{i}"),
                        c,
                        bn,
                    )?);
                }
                let head = Head::new(&mut store, &mut rng, "head", c, c, k)?;
                Net::Atrous {
                    stem,
                    atrous,
                    fuses,
                    head,
                }
            }
            Variant::Unet3d => {
                let enc = vec![
                    EncBlock::new(&mut store, &mut rng, "enc1", 1, c)?,
                    EncBlock::new(&mut store, &mut rng, "enc2", c, c)?,
                    EncBlock::new(&mut store, &mut rng, "enc3", c, c)?,
                ];
                let dec = vec![
                    DecBlock::new(&mut store, &mut rng, "dec3", c, c)?,
                    DecBlock::new(&mut store, &mut rng, "dec2", 2 * c, c)?,
                    DecBlock::new(&mut store, &mut rng, "dec1", 2 * c, c)?,
                ];
                let head = Head::new(&mut store, &mut rng, "head", 2 * c, c, k)?;
                Net::Unet { enc, dec, head }
            }
        };
        Ok(Self { spec, store, net })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Runs the network on an occupancy volume of shape `(N, 1, R, R, R)`
    /// or `(1, R, R, R)` and records every named stage output.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardPass> {
        let shape = tape.value(input)?.shape().to_vec();
        let (_n, c_in, d, h, w, _batched) = as_batched(&shape)?;
        let r = self.spec.resolution;
        if c_in != 1 || d != r || h != r || w != r {
            return Err(Error::ShapeMismatch(format!(
                "expected a single-channel {r}^3 occupancy volume, got {shape:?}"
            )));
        }
        let store = &mut self.store;
        let mut stages: Vec<(String, Var)> = Vec::new();
        fn record(name: String, var: Var, stages: &mut Vec<(String, Var)>) {
            stages.push((name, var));
        }
        let logits = match &self.net {
            Net::SdeAfa {
                stem,
                stages: sdes,
                afas,
                head,
            } => {
                let s = stem.apply(store, tape, input)?;
                record("stem".into(), s, &mut stages);
                let mut feats = Vec::with_capacity(sdes.len());
                let mut cur = s;
                for (i, sde) in sdes.iter().enumerate() {
                    cur = sde.apply(store, tape, cur, mode)?;
                    record(format!("stage{}", i + 1), cur, &mut stages);
                    feats.push(cur);
                }
                let mut fused = feats[feats.len() - 1];
                for (afa, low) in afas.iter().zip((1..feats.len()).rev()) {
                    fused = afa.apply(store, tape, feats[low - 1], fused)?;
                    record(format!("fuse{low}"), fused, &mut stages);
                }
                head.apply(store, tape, fused, mode)?
            }
            Net::SdeConcat {
                stem,
                stages: sdes,
                head,
            } => {
                let s = stem.apply(store, tape, input)?;
                record("stem".into(), s, &mut stages);
                let mut feats = Vec::with_capacity(sdes.len());
                let mut cur = s;
                for (i, sde) in sdes.iter().enumerate() {
                    cur = sde.apply(store, tape, cur, mode)?;
                    record(format!("stage{}", i + 1), cur, &mut stages);
                    feats.push(cur);
                }
                let mut cat = feats[0];
                for &f in &feats[1..] {
                    cat = concat_channels(tape, cat, f)?;
                }
                record("concat".into(), cat, &mut stages);
                head.apply(store, tape, cat, mode)?
            }
            Net::Atrous {
                stem,
                atrous,
                fuses,
                head,
            } => {
                let s = stem.apply(store, tape, input)?;
                record("stem".into(), s, &mut stages);
                let mut trunk = s;
                let mut skips = vec![s];
                for (i, arb) in atrous.iter().enumerate() {
                    trunk = arb.apply(store, tape, trunk, mode)?;
                    record(format!("atrous{}", i + 1), trunk, &mut stages);
                    skips.push(trunk);
                }
                for (i, fuse) in fuses.iter().enumerate() {
                    let skip = skips[skips.len() - 2 - i];
                    trunk = fuse.apply(store, tape, trunk, skip, mode)?;
                    record(format!("fuse{}", i + 1), trunk, &mut stages);
                }
                head.apply(store, tape, trunk, mode)?
            }
            Net::Unet { enc, dec, head } => {
                let mut cur = input;
                let mut pre_pool = Vec::with_capacity(enc.len());
                for (i, block) in enc.iter().enumerate() {
                    let e = block.apply(store, tape, cur, mode)?;
                    record(format!("enc{}", i + 1), e, &mut stages);
                    pre_pool.push(e);
                    cur = block.pool(tape, e)?;
                }
                record("bottleneck".into(), cur, &mut stages);
                for (i, block) in dec.iter().enumerate() {
                    let level = enc.len() - i;
                    let d = block.apply(store, tape, cur, mode)?;
                    record(format!("dec{level}"), d, &mut stages);
                    cur = concat_channels(tape, d, pre_pool[level - 1])?;
                }
                head.apply(store, tape, cur, mode)?
            }
        };
        Ok(ForwardPass { logits, stages })
    }

    /// Eval-mode segmentation of one grid: raw logits of shape
    /// `(labels, R, R, R)` and one predicted label per voxel, zero at
    /// unoccupied voxels.
    pub fn forward_segment(&mut self, grid: &VoxelGrid) -> Result<(Tensor<T>, Vec<u8>)> {
        if grid.resolution != self.spec.resolution {
            return Err(Error::InvalidConfig(format!(
                "grid resolution {} does not match the model's {}",
                grid.resolution, self.spec.resolution
            )));
        }
        let mut tape = Tape::new();
        let input = tape.constant(grid.occupancy_tensor::<T>());
        let pass = self.forward(&mut tape, input, Mode::Eval)?;
        let logits = tape.value(pass.logits)?.clone();
        let mut labels = predict_parts(&logits)?;
        for (label, &occ) in labels.iter_mut().zip(&grid.occupancy) {
            if !occ {
                *label = 0;
            }
        }
        Ok((logits, labels))
    }

    /// Stage names `forward` records for this architecture, in order.
    pub fn stage_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.net {
            Net::SdeAfa { stages, .. } => {
                names.push("stem".to_string());
                for i in 1..=stages.len() {
                    names.push(format!("stage{i}"));
                }
                for low in (1..stages.len()).rev() {
                    names.push(format!("fuse{low}"));
                }
            }
            Net::SdeConcat { stages, .. } => {
                names.push("stem".to_string());
                for i in 1..=stages.len() {
                    names.push(format!("stage{i}"));
                }
                names.push("concat".to_string());
            }
            Net::Atrous { .. } => {
                names.push("stem".to_string());
                for i in 1..=3 {
                    names.push(format!("atrous{i}"));
                }
                for i in 1..=3 {
                    names.push(format!("fuse{i}"));
                }
            }
            Net::Unet { .. } => {
                for i in 1..=3 {
                    names.push(format!("enc{i}"));
                }
                names.push("bottleneck".to_string());
                for i in (1..=3).rev() {
                    names.push(format!("dec{i}"));
                }
            }
        }
        names
    }

    /// Eval-mode forward pass that exports one scalar volume per channel of
    /// the selected stage. Downsampled stages export at their own extent.
    pub fn export_activations(&mut self, grid: &VoxelGrid, stage: &str) -> Result<Vec<VoxelGrid>> {
        if grid.resolution != self.spec.resolution {
            return Err(Error::InvalidConfig(format!(
                "grid resolution {} does not match the model's {}",
                grid.resolution, self.spec.resolution
            )));
        }
        let mut tape = Tape::new();
        let input = tape.constant(grid.occupancy_tensor::<T>());
        let pass = self.forward(&mut tape, input, Mode::Eval)?;
        let var = pass
            .stages
            .iter()
            .find(|(name, _)| name == stage)
            .map(|&(_, var)| var)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown stage '{stage}', expected one of {}",
                    self.stage_names().join(", ")
                ))
            })?;
        let value = tape.value(var)?;
        let (_n, c, d, h, w, _batched) = as_batched(value.shape())?;
        if d != h || h != w {
            return Err(Error::InvalidConfig(format!(
                "stage '{stage}' output {:?} is not cubic",
                value.shape()
            )));
        }
        let vol = d * h * w;
        let data = value.data();
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let field: Vec<f32> = data[ch * vol..(ch + 1) * vol]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect();
            out.push(VoxelGrid {
                resolution: d,
                occupancy: vec![true; vol],
                labels: None,
                field: Some(field),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::softmax_cross_entropy_masked;
    use crate::tape::finite_difference_check;
    use approx::assert_abs_diff_eq;

    fn tiny_spec(variant: Variant) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::for_variant(variant, 8, 2);
        spec.channels = 4;
        spec.bottleneck = 2;
        spec
    }

    fn ball_grid(resolution: usize) -> VoxelGrid {
        let r = resolution as f64;
        let mut occupancy = vec![false; resolution * resolution * resolution];
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    let dx = (x as f64 + 0.5) / r - 0.5;
                    let dy = (y as f64 + 0.5) / r - 0.5;
                    let dz = (z as f64 + 0.5) / r - 0.5;
                    if dx * dx + dy * dy + dz * dz <= 0.16 {
                        occupancy[(z * resolution + y) * resolution + x] = true;
                    }
                }
            }
        }
        VoxelGrid {
            resolution,
            occupancy,
            labels: None,
            field: None,
        }
    }

    #[test]
    fn canonical_spec_round_trips_through_json() {
        let spec = ArchitectureSpec::for_variant(Variant::Voxsegnet, 48, 4);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"variant\":\"voxsegnet\""));
        let back: ArchitectureSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_defaults_fill_in_when_absent() {
        let text = r#"{"variant":"sde_concat","resolution":16,"labels":3,
                       "stages":[{"rates":[1,1,1]},{"rates":[1,3,5]}]}"#;
        let spec: ArchitectureSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.channels, 64);
        assert_eq!(spec.bottleneck, 32);
        assert_eq!(spec.stages[0].kernel, 3);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn canonical_network_has_the_published_receptive_field() {
        let spec = ArchitectureSpec::for_variant(Variant::Voxsegnet, 48, 4);
        assert_eq!(spec.receptive_field(), 43);
    }

    #[test]
    fn baseline_receptive_fields_are_fixed() {
        let atrous = ArchitectureSpec::for_variant(Variant::Atrous3dcnn, 16, 2);
        assert_eq!(atrous.receptive_field(), 25);
        let unet = ArchitectureSpec::for_variant(Variant::Unet3d, 16, 2);
        assert_eq!(unet.receptive_field(), 22);
    }

    #[test]
    fn infeasible_stage_schedules_are_rejected_with_the_planner_reason() {
        let mut spec = tiny_spec(Variant::Voxsegnet);
        spec.stages[1] = StageSpec::new(&[2, 4, 8]);
        let msg = match Model::<f64>::build(spec, 1) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("infeasible schedule was accepted"),
        };
        assert!(msg.contains("infeasible"), "{msg}");
    }

    #[test]
    fn fixed_topology_variants_reject_stage_schedules() {
        let mut spec = tiny_spec(Variant::Unet3d);
        spec.stages = vec![StageSpec::new(&[1, 2, 3])];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unet_requires_resolution_divisible_by_eight() {
        let mut spec = tiny_spec(Variant::Unet3d);
        spec.resolution = 12;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_stage_fusion_variants_are_rejected() {
        let mut spec = tiny_spec(Variant::SdeAfa2);
        spec.stages.truncate(1);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn every_variant_builds_and_runs_at_toy_size() {
        for variant in Variant::ALL {
            let mut model = Model::<f32>::build(tiny_spec(variant), 11).unwrap();
            let grid = ball_grid(8);
            let mut tape = Tape::new();
            let input = tape.constant(grid.occupancy_tensor::<f32>());
            let pass = model.forward(&mut tape, input, Mode::Train).unwrap();
            let logits = tape.value(pass.logits).unwrap();
            assert_eq!(logits.shape(), &[2, 8, 8, 8], "variant {variant}");
            assert_eq!(
                pass.stages.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
                model.stage_names(),
                "variant {variant}"
            );
            for v in logits.data() {
                assert!(v.is_finite(), "variant {variant} produced {v}");
            }
        }
    }

    #[test]
    fn unet_bottleneck_extent_is_an_eighth_of_the_input() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Unet3d), 3).unwrap();
        let grid = ball_grid(8);
        let mut tape = Tape::new();
        let input = tape.constant(grid.occupancy_tensor::<f32>());
        let pass = model.forward(&mut tape, input, Mode::Train).unwrap();
        let (name, var) = pass.stages.iter().find(|(n, _)| n == "bottleneck").unwrap();
        assert_eq!(name, "bottleneck");
        assert_eq!(tape.value(*var).unwrap().shape(), &[4, 1, 1, 1]);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 5).unwrap();
        let b = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 5).unwrap();
        assert_eq!(a.store.num_scalars(), b.store.num_scalars());
        for id in a.store.ids() {
            let other = b.store.find(a.store.name(id)).unwrap();
            assert_eq!(a.store.get(id).data(), b.store.get(other).data());
        }
        let c = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 6).unwrap();
        let id = a.store.find("stem.weight").unwrap();
        let other = c.store.find("stem.weight").unwrap();
        assert_ne!(a.store.get(id).data(), c.store.get(other).data());
    }

    #[test]
    fn segmentation_labels_cover_exactly_the_occupied_set() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 9).unwrap();
        let grid = ball_grid(8);
        {
            let mut tape = Tape::new();
            let input = tape.constant(grid.occupancy_tensor::<f32>());
            model.forward(&mut tape, input, Mode::Train).unwrap();
        }
        let (logits, labels) = model.forward_segment(&grid).unwrap();
        assert_eq!(logits.shape(), &[2, 8, 8, 8]);
        for (label, occ) in labels.iter().zip(&grid.occupancy) {
            if *occ {
                assert!((1..=2).contains(label));
            } else {
                assert_eq!(*label, 0);
            }
        }
        let (again, labels2) = model.forward_segment(&grid).unwrap();
        assert_eq!(again.data(), logits.data());
        assert_eq!(labels2, labels);
    }

    #[test]
    fn segmentation_requires_trained_normalization_stats() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 9).unwrap();
        assert!(model.forward_segment(&ball_grid(8)).is_err());
    }

    #[test]
    fn segmentation_rejects_mismatched_resolution() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 9).unwrap();
        assert!(model.forward_segment(&ball_grid(16)).is_err());
    }

    #[test]
    fn argmax_labels_ignore_constant_logit_shifts() {
        let logits = Tensor::<f64>::from_vec(
            &[2, 2, 1, 1],
            vec![0.3, -0.1, 0.7, 0.9],
        )
        .unwrap();
        let shifted = Tensor::<f64>::from_vec(
            &[2, 2, 1, 1],
            vec![0.3 + 5.0, -0.1 + 5.0, 0.7 + 5.0, 0.9 + 5.0],
        )
        .unwrap();
        assert_eq!(
            predict_parts(&logits).unwrap(),
            predict_parts(&shifted).unwrap()
        );
    }

    #[test]
    fn activation_export_matches_stage_channels_and_extent() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 13).unwrap();
        let grid = ball_grid(8);
        {
            let mut tape = Tape::new();
            let input = tape.constant(grid.occupancy_tensor::<f32>());
            model.forward(&mut tape, input, Mode::Train).unwrap();
        }
        let volumes = model.export_activations(&grid, "stage1").unwrap();
        assert_eq!(volumes.len(), 4);
        for v in &volumes {
            assert_eq!(v.resolution, 8);
            assert!(v.occupancy.iter().all(|&o| o));
            assert_eq!(v.field.as_ref().unwrap().len(), 512);
        }
        assert!(model.export_activations(&grid, "nope").is_err());
    }

    #[test]
    fn unet_stage_exports_use_native_extents() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Unet3d), 13).unwrap();
        let grid = ball_grid(8);
        {
            let mut tape = Tape::new();
            let input = tape.constant(grid.occupancy_tensor::<f32>());
            model.forward(&mut tape, input, Mode::Train).unwrap();
        }
        let volumes = model.export_activations(&grid, "enc2").unwrap();
        assert_eq!(volumes[0].resolution, 4);
    }

    #[test]
    fn zero_input_yields_spatially_constant_stage_activations() {
        let mut model = Model::<f32>::build(tiny_spec(Variant::Voxsegnet), 17).unwrap();
        let empty = VoxelGrid {
            resolution: 8,
            occupancy: vec![false; 512],
            labels: None,
            field: None,
        };
        {
            let mut tape = Tape::new();
            let input = tape.constant(empty.occupancy_tensor::<f32>());
            model.forward(&mut tape, input, Mode::Train).unwrap();
        }
        for stage in model.stage_names() {
            let volumes = model.export_activations(&empty, &stage).unwrap();
            for v in &volumes {
                let field = v.field.as_ref().unwrap();
                for x in field {
                    assert_abs_diff_eq!(*x, field[0], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let spec = tiny_spec(Variant::Voxsegnet);
        let grid = ball_grid(8);
        let labels: Vec<u8> = grid
            .occupancy
            .iter()
            .enumerate()
            .map(|(i, &o)| if o { (i % 2) as u8 + 1 } else { 0 })
            .collect();
        let mut model = Model::<f64>::build(spec, 21).unwrap();
        let probe_id = model.store.find("stage2.block2.atrous.weight").unwrap();
        let start = model.store.get(probe_id).clone();
        let mut run = |probe: &Tensor<f64>| -> crate::error::Result<(f64, Tensor<f64>)> {
            *model.store.get_mut(probe_id) = probe.clone();
            let mut tape = Tape::new();
            let input = tape.constant(grid.occupancy_tensor::<f64>());
            let pass = model.forward(&mut tape, input, Mode::Train)?;
            let loss = softmax_cross_entropy_masked(&mut tape, pass.logits, &labels, 2)?;
            let value = tape.value(loss)?.item()?;
            tape.backward(loss)?;
            let grads = tape.collect_param_grads(&model.store)?;
            let grad = grads
                .into_iter()
                .find(|(id, _)| *id == probe_id)
                .map(|(_, g)| g)
                .expect("probe parameter is on the path to the loss");
            Ok((value, grad))
        };
        let (_, analytic) = run(&start).unwrap();
        let mut probe = start.clone();
        let err = finite_difference_check(
            &mut |p: &Tensor<f64>| run(p).map(|t| t.0),
            &mut probe,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }
}

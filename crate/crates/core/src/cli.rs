//! Command-line front end: every pipeline stage as one subcommand.
//!
//! Output goes to standard output. Lines meant for scripts carry
//! `KEY=VALUE` pairs (`FEASIBLE=true M=1,3,5`, `RF=43`, per-epoch
//! `EPOCH=.. LOSS=.. ACC=..`), and every run opens with a `CONFIG` line
//! echoing its resolved settings. `main` maps any error onto a single
//! `ERROR: <message>` diagnostic and exit code 1; command-line misuse exits
//! 2 through clap.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Once;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::categories::{self, Category};
use crate::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint};
use crate::dilation::validate_schedule;
use crate::error::{Error, Result};
use crate::features::{extract_part_feature, kmeans, load_features, save_features};
use crate::metrics::{aggregate, precision_recall, shape_iou, EmptyUnionRule, ShapeEval};
use crate::model::{ArchitectureSpec, Model, Variant};
use crate::scalar::{Dtype, Scalar};
use crate::synth::{make_dataset, DatasetManifest, Split};
use crate::train::{train, AdamState, Augment, TrainConfig};
use crate::voxel::{
    normalize_cloud, project_labels_to_points, quantization_upper_bound, voxelize,
    LabeledPointCloud, VoxelGrid,
};

#[derive(Parser, Debug)]
#[command(
    name = "voxseg",
    version,
    about = "Volumetric part segmentation: data generation, training, evaluation"
)]
pub struct Cli {
    /// Worker threads for data-parallel sections; 0 uses every core. The
    /// pool is sized once per process.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled dataset with train/test splits.
    GenData(GenDataArgs),
    /// Voxelize one point cloud file into a binary occupancy grid.
    Voxelize(VoxelizeArgs),
    /// Check a dilation-rate schedule for gap-free support coverage.
    ValidateDilations(ValidateDilationsArgs),
    /// Compute the receptive field of an architecture.
    Rf(RfArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and write a CSV report.
    Eval(EvalArgs),
    /// Segment one point cloud and write the labeled voxel grid.
    Segment(SegmentArgs),
    /// Export one stage's activation volumes, one file per channel.
    Activations(ActivationsArgs),
    /// Extract part-based shape descriptors into a CSV.
    Features(FeaturesArgs),
    /// Cluster exported shape descriptors with k-means.
    Cluster(ClusterArgs),
    /// Measure the best IoU any method could reach at given resolutions.
    UpperBound(UpperBoundArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Synthetic category: table, chair, or lamp.
    #[arg(long)]
    pub category: String,
    /// Number of training shapes.
    #[arg(long)]
    pub train: usize,
    /// Number of test shapes.
    #[arg(long)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    /// Point cloud text file, one `x y z label` line per point.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Grid resolution per axis.
    #[arg(long)]
    pub res: usize,
    /// Output grid file.
    #[arg(long)]
    pub out: PathBuf,
    /// Category name recorded on the cloud while processing.
    #[arg(long, default_value = "shape")]
    pub category: String,
}

#[derive(Args, Debug)]
pub struct ValidateDilationsArgs {
    /// Comma-separated dilation rates, innermost layer first.
    #[arg(long, value_delimiter = ',', required = true)]
    pub rates: Vec<usize>,
    /// Kernel size of every layer in the stack.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct RfArgs {
    /// Architecture JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Builtin variant name instead of a file.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.json, train/, and test/.
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture JSON file, or one of the builtin variant names
    /// voxsegnet, sde_afa2, sde_concat, atrous3dcnn, unet3d.
    #[arg(long)]
    pub arch: String,
    /// Grid resolution, used when --arch names a builtin variant.
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    /// Parameter precision of the new model.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Shapes per optimization step.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seed for initialization, shuffling, and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rotate each sample by a random multiple of 30 degrees per epoch.
    #[arg(long, conflicts_with = "expand_rotations")]
    pub augment: bool,
    /// Expand every shape into all twelve rotations each epoch.
    #[arg(long)]
    pub expand_rotations: bool,
    /// Stop early once the epoch loss falls to this value.
    #[arg(long)]
    pub target_loss: Option<f64>,
    /// Stop early once the epoch voxel accuracy reaches this value.
    #[arg(long)]
    pub target_acc: Option<f64>,
    /// Write the per-epoch `epoch,loss,voxel_acc` CSV here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also overwrite the checkpoint every N epochs.
    #[arg(long)]
    pub save_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Expected grid resolution; must match the checkpoint when given.
    #[arg(long)]
    pub res: Option<usize>,
    /// CSV report output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Leave parts absent from prediction and ground truth out of the IoU
    /// mean instead of scoring them 1.
    #[arg(long)]
    pub strict_iou: bool,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Point cloud text file to segment.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output grid file with predicted labels.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the cloud with predicted point labels here.
    #[arg(long)]
    pub points_out: Option<PathBuf>,
    #[arg(long, default_value = "shape")]
    pub category: String,
}

#[derive(Args, Debug)]
pub struct ActivationsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Point cloud text file to run the network on.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Stage to export; see --list-stages.
    #[arg(long)]
    pub stage: Option<String>,
    /// Print the checkpoint's stage names and exit.
    #[arg(long)]
    pub list_stages: bool,
    /// Output directory, one grid file per channel.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "shape")]
    pub category: String,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Feature CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Feature CSV written by the features command.
    #[arg(long)]
    pub features: PathBuf,
    /// Number of clusters.
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `shape_id,cluster` rows here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UpperBoundArgs {
    /// Dataset directory; both splits enter the measurement.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated grid resolutions to test.
    #[arg(long, value_delimiter = ',', required = true)]
    pub res: Vec<usize>,
    /// CSV output path with one `resolution,mean_iou` row per resolution.
    #[arg(long)]
    pub out: PathBuf,
}

/// Sizes the global worker pool. Best effort: when some earlier code in the
/// process already touched rayon the existing pool keeps its size. The
/// binary calls this before any parallel section, so sizing always lands
/// there.
fn init_threads(threads: usize) {
    static POOL: Once = Once::new();
    POOL.call_once(|| {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    });
}

fn print_config(cmd: &str, fields: &[(&str, String)]) {
    let mut line = format!("CONFIG cmd={cmd}");
    for (key, value) in fields {
        let _ = write!(line, " {key}={value}");
    }
    println!("{line}");
}

fn category_by_name(name: &str) -> Result<Category> {
    categories::synthetic(name)
        .or_else(|| categories::benchmark(name))
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown category '{name}'")))
}

fn load_cloud(path: &Path, category: &str) -> Result<LabeledPointCloud> {
    let text = fs::read_to_string(path)?;
    let shape_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned());
    LabeledPointCloud::from_text(&text, category, shape_id)
}

/// Reads an architecture from a JSON file, or builds the canonical spec of
/// a builtin variant at the given resolution and label count.
fn resolve_spec(arch: &str, resolution: usize, labels: usize) -> Result<ArchitectureSpec> {
    let path = Path::new(arch);
    let spec = if path.is_file() {
        serde_json::from_str(&fs::read_to_string(path)?)?
    } else if let Ok(variant) = arch.parse::<Variant>() {
        ArchitectureSpec::for_variant(variant, resolution, labels)
    } else {
        return Err(Error::InvalidArgument(format!(
            "--arch '{arch}' is neither a readable file nor a builtin variant name"
        )));
    };
    spec.validate()?;
    Ok(spec)
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads(cli.threads);
    match &cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Voxelize(args) => voxelize_cmd(args),
        Command::ValidateDilations(args) => validate_dilations(args),
        Command::Rf(args) => rf(args),
        Command::Train(args) => match args.precision {
            PrecisionArg::F32 => train_cmd::<f32>(args),
            PrecisionArg::F64 => train_cmd::<f64>(args),
        },
        Command::Eval(args) => match checkpoint_dtype(&args.ckpt)? {
            Dtype::F32 => eval_cmd::<f32>(args),
            Dtype::F64 => eval_cmd::<f64>(args),
        },
        Command::Segment(args) => match checkpoint_dtype(&args.ckpt)? {
            Dtype::F32 => segment_cmd::<f32>(args),
            Dtype::F64 => segment_cmd::<f64>(args),
        },
        Command::Activations(args) => match checkpoint_dtype(&args.ckpt)? {
            Dtype::F32 => activations_cmd::<f32>(args),
            Dtype::F64 => activations_cmd::<f64>(args),
        },
        Command::Features(args) => match checkpoint_dtype(&args.ckpt)? {
            Dtype::F32 => features_cmd::<f32>(args),
            Dtype::F64 => features_cmd::<f64>(args),
        },
        Command::Cluster(args) => cluster_cmd(args),
        Command::UpperBound(args) => upper_bound_cmd(args),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    print_config(
        "gen-data",
        &[
            ("category", args.category.clone()),
            ("train", args.train.to_string()),
            ("test", args.test.to_string()),
            ("seed", args.seed.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    let manifest = make_dataset(&args.category, args.train, args.test, args.seed, &args.out)?;
    println!(
        "wrote {} shapes to {}",
        manifest.train.len() + manifest.test.len(),
        args.out.display()
    );
    println!("TRAIN={}", manifest.train.len());
    println!("TEST={}", manifest.test.len());
    Ok(())
}

fn voxelize_cmd(args: &VoxelizeArgs) -> Result<()> {
    print_config(
        "voxelize",
        &[
            ("in", args.input.display().to_string()),
            ("res", args.res.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    let cloud = normalize_cloud(load_cloud(&args.input, &args.category)?)?;
    let grid = voxelize(&cloud, args.res)?;
    grid.write_file(&args.out)?;
    println!(
        "{} points into a {}^3 grid, {} voxels occupied",
        cloud.points.len(),
        args.res,
        grid.occupied()
    );
    println!("OCCUPIED={}", grid.occupied());
    Ok(())
}

fn validate_dilations(args: &ValidateDilationsArgs) -> Result<()> {
    let rates: Vec<String> = args.rates.iter().map(|r| r.to_string()).collect();
    print_config(
        "validate-dilations",
        &[
            ("rates", rates.join(",")),
            ("kernel", args.kernel.to_string()),
        ],
    );
    let schedule = validate_schedule(&args.rates, args.kernel)?;
    match &schedule.reason {
        None => println!("schedule covers its receptive field without gaps"),
        Some(reason) => println!("schedule rejected: {reason}"),
    }
    let dists: Vec<String> = schedule.max_dist.iter().map(|m| m.to_string()).collect();
    println!("FEASIBLE={} M={}", schedule.feasible, dists.join(","));
    Ok(())
}

fn rf(args: &RfArgs) -> Result<()> {
    let (spec, origin) = match (&args.spec, args.variant) {
        (Some(path), None) => {
            let spec: ArchitectureSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
            (spec, path.display().to_string())
        }
        (None, Some(variant)) => {
            // Resolution and label count do not enter the receptive field.
            (ArchitectureSpec::for_variant(variant, 32, 2), variant.to_string())
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    print_config("rf", &[("spec", origin), ("variant", spec.variant.to_string())]);
    spec.validate()?;
    println!("LAYERS={}", spec.rf_layers().len());
    println!("RF={}", spec.receptive_field());
    Ok(())
}

fn train_cmd<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let category = category_by_name(&manifest.category)?;
    let spec = resolve_spec(&args.arch, args.res, category.part_count())?;
    let augment = if args.expand_rotations {
        Augment::Expand
    } else if args.augment {
        Augment::Random
    } else {
        Augment::Off
    };
    print_config(
        "train",
        &[
            ("data", args.data.display().to_string()),
            ("variant", spec.variant.to_string()),
            ("res", spec.resolution.to_string()),
            ("labels", spec.labels.to_string()),
            ("precision", format!("{:?}", T::DTYPE).to_lowercase()),
            ("epochs", args.epochs.to_string()),
            ("batch", args.batch.to_string()),
            ("lr", args.lr.to_string()),
            ("seed", args.seed.to_string()),
            ("augment", format!("{augment:?}").to_lowercase()),
            ("out", args.out.display().to_string()),
        ],
    );

    let dataset = manifest.read_split(&args.data, Split::Train)?;
    let mut model = Model::<T>::build(spec, args.seed)?;
    let mut state = AdamState::new(model.store());
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        augment,
        seed: args.seed,
        target_loss: args.target_loss,
        target_accuracy: args.target_acc,
        ..TrainConfig::default()
    };

    let mut csv = String::from("epoch,loss,voxel_acc\n");
    let logs = train(&mut model, &dataset, &config, &mut state, |log, model, state| {
        println!(
            "EPOCH={} LOSS={:.6} ACC={:.4}",
            log.epoch, log.loss, log.voxel_acc
        );
        let _ = writeln!(csv, "{},{},{}", log.epoch, log.loss, log.voxel_acc);
        if args.save_every.is_some_and(|every| log.epoch % every == 0) {
            save_checkpoint(model, state, &args.out)?;
        }
        Ok(())
    })?;
    save_checkpoint(&model, &state, &args.out)?;
    if let Some(path) = &args.log {
        fs::write(path, &csv)?;
    }

    let last = logs.last().expect("at least one epoch runs");
    println!("EPOCHS_RUN={}", logs.len());
    println!("FINAL_LOSS={}", last.loss);
    println!("FINAL_ACC={}", last.voxel_acc);
    Ok(())
}

fn eval_cmd<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let (mut model, _state) = load_checkpoint::<T>(&args.ckpt)?;
    let resolution = model.spec().resolution;
    if args.res.is_some_and(|r| r != resolution) {
        return Err(Error::InvalidConfig(format!(
            "--res {} does not match the checkpoint's resolution {resolution}",
            args.res.unwrap()
        )));
    }
    let manifest = DatasetManifest::load(&args.data)?;
    let category = category_by_name(&manifest.category)?;
    let parts = category.part_count();
    if model.spec().labels != parts {
        return Err(Error::InvalidConfig(format!(
            "checkpoint predicts {} parts but category '{}' has {parts}",
            model.spec().labels,
            category.name
        )));
    }
    print_config(
        "eval",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("data", args.data.display().to_string()),
            ("split", args.split.name().to_string()),
            ("res", resolution.to_string()),
            ("strict_iou", args.strict_iou.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    let rule = if args.strict_iou {
        EmptyUnionRule::Exclude
    } else {
        EmptyUnionRule::ScoreOne
    };

    let mut shapes = Vec::new();
    for cloud in manifest.read_split(&args.data, args.split.split())? {
        let cloud = normalize_cloud(cloud)?;
        let grid = voxelize(&cloud, resolution)?;
        let (_logits, predicted) = model.forward_segment(&grid)?;
        let pred_grid = VoxelGrid {
            resolution,
            occupancy: grid.occupancy.clone(),
            labels: Some(predicted),
            field: None,
        };
        let point_pred = project_labels_to_points(&pred_grid, &cloud)?;
        let iou = shape_iou(&point_pred, &cloud.labels, parts, rule)?;
        let (_, precision, recall) = precision_recall(&point_pred, &cloud.labels, parts)?;
        shapes.push(ShapeEval {
            category: cloud.category.clone(),
            iou,
            precision: Some(precision),
            recall: Some(recall),
        });
    }
    let report = aggregate(&shapes)?;
    fs::write(&args.out, report.to_csv())?;
    print!("{}", report.to_csv());
    println!("SHAPES={}", report.total_shapes);
    println!("MIOU={:.4}", report.overall_iou);
    Ok(())
}

fn segment_cmd<T: Scalar>(args: &SegmentArgs) -> Result<()> {
    let (mut model, _state) = load_checkpoint::<T>(&args.ckpt)?;
    let resolution = model.spec().resolution;
    print_config(
        "segment",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("in", args.input.display().to_string()),
            ("res", resolution.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    let cloud = normalize_cloud(load_cloud(&args.input, &args.category)?)?;
    let grid = voxelize(&cloud, resolution)?;
    let (_logits, predicted) = model.forward_segment(&grid)?;
    let out_grid = VoxelGrid {
        resolution,
        occupancy: grid.occupancy.clone(),
        labels: Some(predicted),
        field: None,
    };
    out_grid.write_file(&args.out)?;
    println!(
        "segmented {} occupied voxels into {} parts",
        out_grid.occupied(),
        model.spec().labels
    );
    println!("OCCUPIED={}", out_grid.occupied());
    if let Some(path) = &args.points_out {
        let point_labels = project_labels_to_points(&out_grid, &cloud)?;
        let labeled =
            LabeledPointCloud::new(cloud.points.clone(), point_labels, cloud.category.clone())?;
        fs::write(path, labeled.to_text())?;
        println!("POINTS={}", labeled.points.len());
    }
    Ok(())
}

fn activations_cmd<T: Scalar>(args: &ActivationsArgs) -> Result<()> {
    let (mut model, _state) = load_checkpoint::<T>(&args.ckpt)?;
    if args.list_stages {
        print_config("activations", &[("ckpt", args.ckpt.display().to_string())]);
        println!("STAGES={}", model.stage_names().join(","));
        return Ok(());
    }
    let (input, stage, out) = match (&args.input, &args.stage, &args.out) {
        (Some(input), Some(stage), Some(out)) => (input, stage, out),
        _ => {
            return Err(Error::InvalidArgument(
                "--in, --stage, and --out are required unless --list-stages is given".into(),
            ))
        }
    };
    print_config(
        "activations",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("in", input.display().to_string()),
            ("stage", stage.clone()),
            ("out", out.display().to_string()),
        ],
    );
    let cloud = normalize_cloud(load_cloud(input, &args.category)?)?;
    let grid = voxelize(&cloud, model.spec().resolution)?;
    let volumes = model.export_activations(&grid, stage)?;
    fs::create_dir_all(out)?;
    for (ch, volume) in volumes.iter().enumerate() {
        volume.write_file(out.join(format!("{stage}_c{ch:03}.vsgv")))?;
    }
    println!("CHANNELS={}", volumes.len());
    println!("EXTENT={}", volumes[0].resolution);
    Ok(())
}

fn features_cmd<T: Scalar>(args: &FeaturesArgs) -> Result<()> {
    let (mut model, _state) = load_checkpoint::<T>(&args.ckpt)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let category = category_by_name(&manifest.category)?;
    print_config(
        "features",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("data", args.data.display().to_string()),
            ("split", args.split.name().to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    let resolution = model.spec().resolution;
    let mut records = Vec::new();
    for (i, cloud) in manifest
        .read_split(&args.data, args.split.split())?
        .into_iter()
        .enumerate()
    {
        let cloud = normalize_cloud(cloud)?;
        let grid = voxelize(&cloud, resolution)?;
        let feature = extract_part_feature(&mut model, &grid, &category)?;
        let shape_id = cloud
            .shape_id
            .clone()
            .unwrap_or_else(|| format!("shape_{i:06}"));
        records.push(feature.into_record(shape_id));
    }
    save_features(&args.out, &records)?;
    println!("SHAPES={}", records.len());
    println!("DIM={}", records[0].feature.len());
    Ok(())
}

fn cluster_cmd(args: &ClusterArgs) -> Result<()> {
    print_config(
        "cluster",
        &[
            ("features", args.features.display().to_string()),
            ("k", args.k.to_string()),
            ("seed", args.seed.to_string()),
        ],
    );
    let records = load_features(&args.features)?;
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.feature.clone()).collect();
    let clustering = kmeans(&vectors, args.k, args.seed)?;

    let mut table = String::from("shape_id,cluster\n");
    let mut sizes = vec![0usize; args.k];
    for (record, &cluster) in records.iter().zip(&clustering.assignments) {
        let _ = writeln!(table, "{},{cluster}", record.shape_id);
        sizes[cluster] += 1;
    }
    match &args.out {
        Some(path) => fs::write(path, &table)?,
        None => print!("{table}"),
    }
    println!("K={}", args.k);
    for (cluster, size) in sizes.iter().enumerate() {
        println!("SIZE{cluster}={size}");
    }
    Ok(())
}

fn upper_bound_cmd(args: &UpperBoundArgs) -> Result<()> {
    let resolutions: Vec<String> = args.res.iter().map(|r| r.to_string()).collect();
    print_config(
        "upper-bound",
        &[
            ("in", args.input.display().to_string()),
            ("res", resolutions.join(",")),
            ("out", args.out.display().to_string()),
        ],
    );
    let manifest = DatasetManifest::load(&args.input)?;
    let category = category_by_name(&manifest.category)?;
    let parts = category.part_count();
    let mut clouds = manifest.read_split(&args.input, Split::Train)?;
    clouds.extend(manifest.read_split(&args.input, Split::Test)?);
    let clouds: Vec<LabeledPointCloud> = clouds
        .into_iter()
        .map(normalize_cloud)
        .collect::<Result<_>>()?;

    let mut csv = String::from("resolution,mean_iou\n");
    for &resolution in &args.res {
        let mut total = 0.0;
        for cloud in &clouds {
            total += quantization_upper_bound(cloud, resolution, parts)?;
        }
        let mean = total / clouds.len() as f64;
        let _ = writeln!(csv, "{resolution},{mean:.4}");
        println!("UB{resolution}={mean:.4}");
    }
    fs::write(&args.out, csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(argv: &[&str]) -> Cli {
        Cli::try_parse_from(argv).expect("argv parses")
    }

    #[test]
    fn rates_flag_splits_on_commas() {
        let cli = parse(&["voxseg", "validate-dilations", "--rates", "1,3,5"]);
        match cli.command {
            Command::ValidateDilations(args) => {
                assert_eq!(args.rates, vec![1, 3, 5]);
                assert_eq!(args.kernel, 3);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["voxseg", "rf", "--variant", "voxsegnet", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["voxseg"]).is_err());
        assert!(Cli::try_parse_from(["voxseg", "no-such-command"]).is_err());
    }

    #[test]
    fn rf_needs_exactly_one_source() {
        assert!(Cli::try_parse_from(["voxseg", "rf"]).is_err());
        assert!(Cli::try_parse_from([
            "voxseg", "rf", "--variant", "voxsegnet", "--spec", "a.json"
        ])
        .is_err());
        let cli = parse(&["voxseg", "rf", "--variant", "unet3d"]);
        match cli.command {
            Command::Rf(args) => assert_eq!(args.variant, Some(Variant::Unet3d)),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn augmentation_flags_conflict() {
        assert!(Cli::try_parse_from([
            "voxseg",
            "train",
            "--data",
            "d",
            "--arch",
            "voxsegnet",
            "--out",
            "c.vsgc",
            "--augment",
            "--expand-rotations",
        ])
        .is_err());
    }

    #[test]
    fn resolve_spec_accepts_variant_names_and_files() {
        let spec = resolve_spec("sde_concat", 16, 3).unwrap();
        assert_eq!(spec.variant, Variant::SdeConcat);
        assert_eq!(spec.resolution, 16);
        assert_eq!(spec.labels, 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.json");
        fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
        let loaded = resolve_spec(path.to_str().unwrap(), 999, 999).unwrap();
        assert_eq!(loaded, spec);

        let err = resolve_spec("not_a_variant", 16, 3).unwrap_err();
        assert!(err.to_string().contains("neither"), "{err}");
    }

    #[test]
    fn categories_resolve_synthetic_before_benchmark() {
        assert_eq!(category_by_name("table").unwrap().part_count(), 2);
        assert_eq!(category_by_name("airplane").unwrap().part_count(), 4);
        assert!(category_by_name("boat").is_err());
    }

    #[test]
    fn gen_data_and_voxelize_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cli = parse(&[
            "voxseg",
            "gen-data",
            "--category",
            "table",
            "--train",
            "2",
            "--test",
            "1",
            "--seed",
            "5",
            "--out",
            data.to_str().unwrap(),
        ]);
        run(&cli).unwrap();
        let manifest = DatasetManifest::load(&data).unwrap();
        assert_eq!(manifest.train.len(), 2);

        let cloud_path = data.join("train").join(format!("{}.txt", manifest.train[0]));
        let grid_path = dir.path().join("grid.vsgv");
        let cli = parse(&[
            "voxseg",
            "voxelize",
            "--in",
            cloud_path.to_str().unwrap(),
            "--res",
            "16",
            "--out",
            grid_path.to_str().unwrap(),
        ]);
        run(&cli).unwrap();
        let grid = VoxelGrid::read_file(&grid_path).unwrap();
        assert_eq!(grid.resolution, 16);
        assert!(grid.labels.is_some());
        assert!(grid.occupied() > 0);
    }

    #[test]
    fn upper_bound_writes_one_row_per_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        make_dataset("table", 2, 1, 3, &data).unwrap();
        let out = dir.path().join("ub.csv");
        let cli = parse(&[
            "voxseg",
            "upper-bound",
            "--in",
            data.to_str().unwrap(),
            "--res",
            "8,24",
            "--out",
            out.to_str().unwrap(),
        ]);
        run(&cli).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "resolution,mean_iou");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("8,"));
        assert!(lines[2].starts_with("24,"));
        let low: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        let high: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert!(high >= low);
    }
}

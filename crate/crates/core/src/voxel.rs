//! Point-cloud voxelization and the reverse projection.
//!
//! Clouds are normalized into the unit sphere, quantized onto an axis-aligned
//! lattice with majority-vote labels, and predictions are projected back onto
//! the points for evaluation. Quantization loss is measured by the
//! upper-bound experiment: voxelize the ground truth, project it straight
//! back, and score it. Grids serialize to the VSGV1 binary layout and clouds
//! to a plain `x y z label` text table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{shape_iou, EmptyUnionRule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest dense grid resolution. Beyond this a single grid would outgrow
/// memory; the sparse helpers (`occupied_voxel_count`,
/// `quantization_upper_bound`) have no such limit.
pub const MAX_DENSE_RESOLUTION: usize = 512;

/// Points with 1-based part labels belonging to one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
    pub category: String,
    pub shape_id: Option<String>,
}

/// A cubic occupancy lattice in x-fastest raster order, optionally carrying
/// per-voxel part labels (nonzero exactly on occupied voxels) or a scalar
/// field (activation exports).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub occupancy: Vec<bool>,
    pub labels: Option<Vec<u8>>,
    pub field: Option<Vec<f32>>,
}

impl LabeledPointCloud {
    pub fn new(
        points: Vec<[f64; 3]>,
        labels: Vec<u8>,
        category: impl Into<String>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if points.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l == 0) {
            return Err(Error::InvalidArgument(
                "point labels are 1-based; found 0".into(),
            ));
        }
        Ok(Self { points, labels, category: category.into(), shape_id: None })
    }

    /// Parses the `x y z label` text table, one point per line. Blank lines
    /// are skipped.
    pub fn from_text(
        text: &str,
        category: impl Into<String>,
        shape_id: Option<String>,
    ) -> Result<Self> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    "point cloud",
                    format!("line {}: expected `x y z label`, got {fields:?}", ln + 1),
                ));
            }
            let mut coord = [0.0f64; 3];
            for (axis, f) in fields[..3].iter().enumerate() {
                coord[axis] = f.parse::<f64>().map_err(|e| {
                    Error::format("point cloud", format!("line {}: {e}", ln + 1))
                })?;
            }
            let label: u8 = fields[3].parse().map_err(|e| {
                Error::format("point cloud", format!("line {}: {e}", ln + 1))
            })?;
            if label == 0 {
                return Err(Error::format(
                    "point cloud",
                    format!("line {}: labels are 1-based", ln + 1),
                ));
            }
            points.push(coord);
            labels.push(label);
        }
        let mut cloud = Self::new(points, labels, category)?;
        cloud.shape_id = shape_id;
        Ok(cloud)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, l) in self.points.iter().zip(&self.labels) {
            let _ = writeln!(out, "{} {} {} {}", p[0], p[1], p[2], l);
        }
        out
    }

    /// Largest label, i.e. the number of parts the shape itself exercises.
    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Translates the centroid to the origin and scales the farthest point onto
/// the unit sphere. Fails when all points coincide.
pub fn normalize_cloud(mut cloud: LabeledPointCloud) -> Result<LabeledPointCloud> {
    let n = cloud.points.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &cloud.points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for a in 0..3 {
        centroid[a] /= n;
    }
    let mut max_norm = 0.0f64;
    for p in &cloud.points {
        let d2: f64 = (0..3).map(|a| (p[a] - centroid[a]).powi(2)).sum();
        max_norm = max_norm.max(d2.sqrt());
    }
    if max_norm <= 1e-9 {
        return Err(Error::InvalidArgument(
            "cannot normalize a degenerate cloud (all points coincide)".into(),
        ));
    }
    for p in &mut cloud.points {
        for a in 0..3 {
            p[a] = (p[a] - centroid[a]) / max_norm;
        }
    }
    Ok(cloud)
}

/// Rotates the cloud by `n * pi / 6` about the upright (+y) axis.
pub fn rotate_cloud(mut cloud: LabeledPointCloud, n: usize) -> Result<LabeledPointCloud> {
    if n > 11 {
        return Err(Error::InvalidArgument(format!(
            "rotation step must be in 0..=11, got {n}"
        )));
    }
    let theta = n as f64 * std::f64::consts::PI / 6.0;
    let (sin, cos) = theta.sin_cos();
    for p in &mut cloud.points {
        let (x, z) = (p[0], p[2]);
        p[0] = cos * x + sin * z;
        p[2] = -sin * x + cos * z;
    }
    Ok(cloud)
}

/// Maps a normalized coordinate to its axis index:
/// `clamp(floor((c + 1) / 2 * R), 0, R - 1)`.
fn axis_index(coord: f64, resolution: usize) -> usize {
    let raw = ((coord + 1.0) / 2.0 * resolution as f64).floor();
    (raw.max(0.0) as usize).min(resolution - 1)
}

fn check_normalized(cloud: &LabeledPointCloud) -> Result<()> {
    for (i, p) in cloud.points.iter().enumerate() {
        if p.iter().any(|c| c.abs() > 1.0 + 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "point {i} at {p:?} lies outside the unit cube; normalize first"
            )));
        }
    }
    Ok(())
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be at least 2, got {resolution}"
        )));
    }
    Ok(())
}

/// Flat voxel index of a point, x varying fastest.
fn voxel_index(p: &[f64; 3], resolution: usize) -> usize {
    let x = axis_index(p[0], resolution);
    let y = axis_index(p[1], resolution);
    let z = axis_index(p[2], resolution);
    (z * resolution + y) * resolution + x
}

/// Per-voxel majority labels of a cloud, as sorted `(voxel_index, label)`
/// pairs. Ties break toward the smaller label id.
fn majority_labels(cloud: &LabeledPointCloud, resolution: usize) -> Vec<(usize, u8)> {
    let mut pairs: Vec<(usize, u8)> = cloud
        .points
        .iter()
        .zip(&cloud.labels)
        .map(|(p, &l)| (voxel_index(p, resolution), l))
        .collect();
    pairs.sort_unstable();
    let mut out = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let voxel = pairs[i].0;
        let mut best_label = pairs[i].1;
        let mut best_count = 0usize;
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == voxel {
            let label = pairs[j].1;
            let mut count = 0;
            while j < pairs.len() && pairs[j].0 == voxel && pairs[j].1 == label {
                count += 1;
                j += 1;
            }
            // Strict comparison keeps the smallest label on ties because
            // labels arrive in ascending order within a voxel.
            if count > best_count {
                best_count = count;
                best_label = label;
            }
        }
        out.push((voxel, best_label));
        i = j;
    }
    out
}

/// Quantizes a normalized cloud onto an `R^3` lattice with majority-vote
/// labels.
pub fn voxelize(cloud: &LabeledPointCloud, resolution: usize) -> Result<VoxelGrid> {
    check_resolution(resolution)?;
    if resolution > MAX_DENSE_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "dense grids are capped at {MAX_DENSE_RESOLUTION}^3, got {resolution}"
        )));
    }
    check_normalized(cloud)?;
    let numel = resolution * resolution * resolution;
    let mut occupancy = vec![false; numel];
    let mut labels = vec![0u8; numel];
    for (voxel, label) in majority_labels(cloud, resolution) {
        occupancy[voxel] = true;
        labels[voxel] = label;
    }
    Ok(VoxelGrid { resolution, occupancy, labels: Some(labels), field: None })
}

/// Number of distinct voxels the cloud's points fall into. Sparse: usable at
/// resolutions far beyond the dense cap.
pub fn occupied_voxel_count(cloud: &LabeledPointCloud, resolution: usize) -> Result<usize> {
    check_resolution(resolution)?;
    check_normalized(cloud)?;
    let mut indices: Vec<usize> = cloud
        .points
        .iter()
        .map(|p| voxel_index(p, resolution))
        .collect();
    indices.sort_unstable();
    indices.dedup();
    Ok(indices.len())
}

/// Reads each point's label out of the grid. Points whose voxel is
/// unoccupied take the label of the nearest occupied voxel by center
/// distance, ties toward the smaller linear index.
pub fn project_labels_to_points(
    grid: &VoxelGrid,
    cloud: &LabeledPointCloud,
) -> Result<Vec<u8>> {
    let r = grid.resolution;
    check_normalized(cloud)?;
    let labels = grid.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("grid carries no labels to project".into())
    })?;
    let occupied: Vec<usize> = (0..grid.occupancy.len())
        .filter(|&i| grid.occupancy[i])
        .collect();
    if occupied.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot project labels from an entirely empty grid".into(),
        ));
    }
    let center = |i: usize| -> [f64; 3] {
        let x = i % r;
        let y = (i / r) % r;
        let z = i / (r * r);
        let c = |v: usize| (v as f64 + 0.5) * 2.0 / r as f64 - 1.0;
        [c(x), c(y), c(z)]
    };
    let mut out = Vec::with_capacity(cloud.points.len());
    for p in &cloud.points {
        let own = voxel_index(p, r);
        if grid.occupancy[own] {
            out.push(labels[own]);
            continue;
        }
        let mut best = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        for &cand in &occupied {
            let c = center(cand);
            let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            if d2 < best_d2 {
                best_d2 = d2;
                best = cand;
            }
        }
        out.push(labels[best]);
    }
    Ok(out)
}

/// Best mean-IoU percentage any method working at this resolution could
/// reach: quantize the ground truth, project it straight back, and score it
/// against the original labels. Sparse; no dense grid is built.
pub fn quantization_upper_bound(
    cloud: &LabeledPointCloud,
    resolution: usize,
    num_parts: usize,
) -> Result<f64> {
    check_resolution(resolution)?;
    check_normalized(cloud)?;
    let majority: HashMap<usize, u8> =
        majority_labels(cloud, resolution).into_iter().collect();
    let projected: Vec<u8> = cloud
        .points
        .iter()
        .map(|p| majority[&voxel_index(p, resolution)])
        .collect();
    shape_iou(&projected, &cloud.labels, num_parts, EmptyUnionRule::ScoreOne)
}

const VSGV_MAGIC: &[u8; 5] = b"VSGV1";
const FLAG_LABELS: u8 = 1;
const FLAG_FIELD: u8 = 2;

impl VoxelGrid {
    pub fn numel(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }

    /// Number of occupied voxels.
    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Occupancy as a `(1, R, R, R)` tensor of zeros and ones, the network's
    /// input layout (z maps to depth, x varies fastest).
    pub fn occupancy_tensor<T: Scalar>(&self) -> Tensor<T> {
        let r = self.resolution;
        let data: Vec<T> = self
            .occupancy
            .iter()
            .map(|&o| if o { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(&[1, r, r, r], data).expect("occupancy length matches R^3")
    }

    fn validate(&self) -> Result<()> {
        let numel = self.numel();
        if self.occupancy.len() != numel {
            return Err(Error::InvalidArgument(format!(
                "occupancy holds {} entries for resolution {}",
                self.occupancy.len(),
                self.resolution
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != numel {
                return Err(Error::InvalidArgument(
                    "label volume does not match the resolution".into(),
                ));
            }
            for i in 0..numel {
                if self.occupancy[i] == (labels[i] == 0) {
                    return Err(Error::InvalidArgument(format!(
                        "voxel {i}: labels must be nonzero exactly on occupied voxels"
                    )));
                }
            }
        }
        if let Some(field) = &self.field {
            if field.len() != numel {
                return Err(Error::InvalidArgument(
                    "scalar field does not match the resolution".into(),
                ));
            }
        }
        Ok(())
    }

    /// Serializes to the VSGV1 byte layout.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut flags = 0u8;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.field.is_some() {
            flags |= FLAG_FIELD;
        }
        let mut out = Vec::with_capacity(10 + self.numel() * 2);
        out.extend_from_slice(VSGV_MAGIC);
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.push(flags);
        out.extend(self.occupancy.iter().map(|&o| o as u8));
        if let Some(labels) = &self.labels {
            out.extend_from_slice(labels);
        }
        if let Some(field) = &self.field {
            for v in field {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the VSGV1 byte layout, rejecting truncated or trailing data.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |detail: String| Error::format("VSGV1", detail);
        if bytes.len() < 10 {
            return Err(fail("file shorter than the fixed header".into()));
        }
        if &bytes[..5] != VSGV_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let resolution = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        if resolution < 2 || resolution > MAX_DENSE_RESOLUTION {
            return Err(fail(format!("resolution {resolution} out of range")));
        }
        let flags = bytes[9];
        if flags & !(FLAG_LABELS | FLAG_FIELD) != 0 {
            return Err(fail(format!("unknown flag bits {flags:#04x}")));
        }
        let numel = resolution * resolution * resolution;
        let mut expected = 10 + numel;
        if flags & FLAG_LABELS != 0 {
            expected += numel;
        }
        if flags & FLAG_FIELD != 0 {
            expected += 4 * numel;
        }
        if bytes.len() != expected {
            return Err(fail(format!(
                "expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let mut at = 10;
        let mut occupancy = Vec::with_capacity(numel);
        for &b in &bytes[at..at + numel] {
            match b {
                0 => occupancy.push(false),
                1 => occupancy.push(true),
                _ => return Err(fail(format!("occupancy byte {b} is not 0 or 1"))),
            }
        }
        at += numel;
        let labels = if flags & FLAG_LABELS != 0 {
            let l = bytes[at..at + numel].to_vec();
            at += numel;
            Some(l)
        } else {
            None
        };
        let field = if flags & FLAG_FIELD != 0 {
            let mut f = Vec::with_capacity(numel);
            for chunk in bytes[at..at + 4 * numel].chunks_exact(4) {
                f.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            Some(f)
        } else {
            None
        };
        let grid = VoxelGrid { resolution, occupancy, labels, field };
        grid.validate()?;
        Ok(grid)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.encode()?)?)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

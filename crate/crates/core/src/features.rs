//! Part-based shape descriptors and clustering utilities.
//!
//! After a shape is segmented, the feature volume feeding the prediction
//! head is averaged over each predicted part's voxels, one channel-width
//! block per part. The blocks concatenate in the category's canonical part
//! order into a fixed-length descriptor, with all-zero blocks standing in
//! for parts the prediction never used. Euclidean k-nearest-neighbor and
//! k-means helpers operate on the exported vectors.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::categories::Category;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::loss::predict_parts;
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::as_batched;
use crate::voxel::VoxelGrid;

/// Descriptor of one segmented shape: per-part spatial averages of the
/// network's final feature volume, concatenated in part order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeature {
    /// Category whose part order the blocks follow.
    pub category: String,
    /// Whether any voxel was predicted as each part.
    pub presence: Vec<bool>,
    /// Concatenated per-part channel means, zero for absent parts.
    pub vector: Vec<f64>,
}

impl PartFeature {
    pub fn part_count(&self) -> usize {
        self.presence.len()
    }

    /// Channels per part block.
    pub fn width(&self) -> usize {
        self.vector.len() / self.presence.len()
    }

    /// Channel-mean block of one part, indexed zero-based in the
    /// category's part order.
    pub fn block(&self, part: usize) -> &[f64] {
        let w = self.width();
        &self.vector[part * w..(part + 1) * w]
    }

    /// Pairs the descriptor with the shape it came from for export.
    pub fn into_record(self, shape_id: impl Into<String>) -> FeatureRecord {
        FeatureRecord {
            shape_id: shape_id.into(),
            presence: self.presence,
            feature: self.vector,
        }
    }
}

/// Averages each channel of `data` (channel-major over a flat volume) over
/// the voxels carrying each part label. Parts with no voxels get a zero
/// block and a false presence flag.
fn masked_part_means(
    data: &[f64],
    channels: usize,
    labels: &[u8],
    parts: usize,
) -> (Vec<f64>, Vec<bool>) {
    let vol = labels.len();
    let mut blocks = vec![0.0f64; parts * channels];
    let mut counts = vec![0usize; parts];
    for (v, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let p = label as usize - 1;
        counts[p] += 1;
        for ch in 0..channels {
            blocks[p * channels + ch] += data[ch * vol + v];
        }
    }
    for (p, &count) in counts.iter().enumerate() {
        if count > 0 {
            for value in &mut blocks[p * channels..(p + 1) * channels] {
                *value /= count as f64;
            }
        }
    }
    let presence = counts.iter().map(|&c| c > 0).collect();
    (blocks, presence)
}

/// Segments `grid` with the model and averages the head's input features
/// over each predicted part. Unoccupied voxels never contribute.
pub fn extract_part_feature<T: Scalar>(
    model: &mut Model<T>,
    grid: &VoxelGrid,
    category: &Category,
) -> Result<PartFeature> {
    let spec = model.spec();
    if category.part_count() != spec.labels {
        return Err(Error::InvalidConfig(format!(
            "model predicts {} parts but category '{}' has {}",
            spec.labels,
            category.name,
            category.part_count()
        )));
    }
    if grid.resolution != spec.resolution {
        return Err(Error::InvalidConfig(format!(
            "grid resolution {} does not match the model's {}",
            grid.resolution, spec.resolution
        )));
    }
    let parts = spec.labels;

    let mut tape = Tape::new();
    let input = tape.constant(grid.occupancy_tensor::<T>());
    let pass = model.forward(&mut tape, input, Mode::Eval)?;
    let logits = tape.value(pass.logits)?;
    let mut labels = predict_parts(logits)?;
    for (label, &occ) in labels.iter_mut().zip(&grid.occupancy) {
        if !occ {
            *label = 0;
        }
    }

    let (name, var) = pass.stages.last().expect("every architecture records stages");
    let value = tape.value(*var)?;
    let (_n, channels, d, h, w, _batched) = as_batched(value.shape())?;
    if d * h * w != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "stage '{name}' output {:?} does not cover the {}^3 label grid",
            value.shape(),
            grid.resolution
        )));
    }
    let data: Vec<f64> = value.data().iter().map(|v| v.as_f64()).collect();
    let (vector, presence) = masked_part_means(&data, channels, &labels, parts);
    Ok(PartFeature {
        category: category.name.to_string(),
        presence,
        vector,
    })
}

/// One row of a feature export.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub shape_id: String,
    pub presence: Vec<bool>,
    pub feature: Vec<f64>,
}

fn csv_err(detail: impl Into<String>) -> Error {
    Error::format("feature csv", detail)
}

/// Writes records as CSV with header
/// `shape_id,part_presence_bits,f_0,...,f_{D-1}`. Presence flags are packed
/// into one 0/1 string in part order.
pub fn save_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no feature records to write".into()))?;
    let dim = first.feature.len();
    let parts = first.presence.len();
    let mut out = String::from("shape_id,part_presence_bits");
    for i in 0..dim {
        let _ = write!(out, ",f_{i}");
    }
    out.push('\n');
    for record in records {
        if record.feature.len() != dim || record.presence.len() != parts {
            return Err(Error::ShapeMismatch(format!(
                "record '{}' has {} parts and {} values, expected {} and {}",
                record.shape_id,
                record.presence.len(),
                record.feature.len(),
                parts,
                dim
            )));
        }
        out.push_str(&record.shape_id);
        out.push(',');
        for &p in &record.presence {
            out.push(if p { '1' } else { '0' });
        }
        for value in &record.feature {
            let _ = write!(out, ",{value}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a feature CSV written by [`save_features`].
pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| csv_err("empty file"))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[0] != "shape_id" || columns[1] != "part_presence_bits" {
        return Err(csv_err(format!("unexpected header '{header}'")));
    }
    let dim = columns.len() - 2;
    for (i, col) in columns[2..].iter().enumerate() {
        if *col != format!("f_{i}") {
            return Err(csv_err(format!("feature column {i} is named '{col}'")));
        }
    }

    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(csv_err(format!(
                "row {row} has {} fields, expected {}",
                fields.len(),
                dim + 2
            )));
        }
        let mut presence = Vec::with_capacity(fields[1].len());
        for bit in fields[1].chars() {
            match bit {
                '0' => presence.push(false),
                '1' => presence.push(true),
                other => {
                    return Err(csv_err(format!("row {row} has presence bit '{other}'")));
                }
            }
        }
        if presence.is_empty() || dim % presence.len() != 0 {
            return Err(csv_err(format!(
                "row {row} has {} presence bits for {dim} values",
                presence.len()
            )));
        }
        let mut feature = Vec::with_capacity(dim);
        for field in &fields[2..] {
            let value: f64 = field
                .parse()
                .map_err(|_| csv_err(format!("row {row} has non-numeric value '{field}'")))?;
            feature.push(value);
        }
        records.push(FeatureRecord {
            shape_id: fields[0].to_string(),
            presence,
            feature,
        });
    }
    Ok(records)
}

fn check_same_length(features: &[Vec<f64>]) -> Result<()> {
    if let Some(first) = features.first() {
        for (i, f) in features.iter().enumerate() {
            if f.len() != first.len() {
                return Err(Error::ShapeMismatch(format!(
                    "feature {i} has length {} but feature 0 has {}",
                    f.len(),
                    first.len()
                )));
            }
        }
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Dense symmetric matrix of Euclidean distances, zero on the diagonal.
pub fn pairwise_distances(features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_same_length(features)?;
    let n = features.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&features[i], &features[j]).sqrt();
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(matrix)
}

/// Indices of the `k` features nearest to `query`, closest first. Distance
/// ties resolve toward the smaller index.
pub fn knn(features: &[Vec<f64>], query: &[f64], k: usize) -> Result<Vec<usize>> {
    check_same_length(features)?;
    if k > features.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} available features",
            features.len()
        )));
    }
    if let Some(first) = features.first() {
        if query.len() != first.len() {
            return Err(Error::ShapeMismatch(format!(
                "query has length {} but the features have {}",
                query.len(),
                first.len()
            )));
        }
    }
    let mut order: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (squared_distance(f, query), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

/// K-means output: one cluster index per input feature plus the final
/// centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

const MAX_KMEANS_ROUNDS: usize = 100;

fn nearest_centroid(feature: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d = squared_distance(feature, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(feature, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn lloyd(features: &[Vec<f64>], k: usize, seed: u64, rounds: usize) -> Result<Clustering> {
    check_same_length(features)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut distinct: Vec<usize> = Vec::new();
    for (i, f) in features.iter().enumerate() {
        if !distinct.iter().any(|&j| features[j] == *f) {
            distinct.push(i);
        }
    }
    if distinct.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} clusters need {k} distinct features, found {}",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, distinct.len(), k)
        .iter()
        .map(|i| features[distinct[i]].clone())
        .collect();
    let dim = features[0].len();
    let mut assignments = vec![usize::MAX; features.len()];
    for _ in 0..rounds {
        let next: Vec<usize> = features
            .iter()
            .map(|f| nearest_centroid(f, &centroids))
            .collect();
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *centroid = sum.iter().map(|s| s / count as f64).collect();
            }
        }
    }
    Ok(Clustering {
        assignments,
        centroids,
    })
}

/// Lloyd's algorithm seeded by `k` distinct random samples. Stops when the
/// assignments stabilize or after 100 rounds. Clusters that lose all
/// members keep their previous centroid.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    lloyd(features, k, seed, MAX_KMEANS_ROUNDS)
}

//! Procedural generator of labeled point clouds: tables, chairs, and lamps
//! assembled from boxes and cylinders, sampled uniformly by surface area.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::categories;
use crate::error::{Error, Result};
use crate::voxel::LabeledPointCloud;

/// Points sampled per unit of surface area.
pub const DEFAULT_DENSITY: f64 = 600.0;

/// Smallest share of a shape's points any recipe part may hold; recipes
/// producing less are resampled.
const MIN_PART_FRACTION: f64 = 0.01;

const MAX_RESAMPLES: usize = 64;

/// An axis-aligned surface primitive positioned in the model frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// Y-axis cylinder with closed end caps.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
    },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half: [x, y, z], .. } => 8.0 * (x * y + y * z + z * x),
            Primitive::Cylinder {
                radius,
                half_height,
                ..
            } => 4.0 * PI * radius * half_height + 2.0 * PI * radius * radius,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        match *self {
            Primitive::Box { center, half } => {
                let [hx, hy, hz] = half;
                let faces = [hy * hz, hy * hz, hz * hx, hz * hx, hx * hy, hx * hy];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 0;
                for (i, &a) in faces.iter().enumerate() {
                    if pick < a || i == faces.len() - 1 {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.gen_range(-1.0..1.0);
                let v = rng.gen_range(-1.0..1.0);
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let local = match face / 2 {
                    0 => [sign * hx, u * hy, v * hz],
                    1 => [u * hx, sign * hy, v * hz],
                    _ => [u * hx, v * hy, sign * hz],
                };
                [
                    center[0] + local[0],
                    center[1] + local[1],
                    center[2] + local[2],
                ]
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let side = 4.0 * PI * radius * half_height;
                let caps = 2.0 * PI * radius * radius;
                if rng.gen_range(0.0..side + caps) < side {
                    let theta = rng.gen_range(0.0..2.0 * PI);
                    let y = rng.gen_range(-half_height..half_height);
                    [
                        center[0] + radius * theta.cos(),
                        center[1] + y,
                        center[2] + radius * theta.sin(),
                    ]
                } else {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let rho = radius * rng.gen_range(0.0f64..1.0).sqrt();
                    let theta = rng.gen_range(0.0..2.0 * PI);
                    [
                        center[0] + rho * theta.cos(),
                        center[1] + sign * half_height,
                        center[2] + rho * theta.sin(),
                    ]
                }
            }
        }
    }

    /// Distance from a point to the primitive's surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Box { center, half } => {
                let d: Vec<f64> = (0..3)
                    .map(|i| (p[i] - center[i]).abs() - half[i])
                    .collect();
                let outside: f64 = d
                    .iter()
                    .map(|&v| v.max(0.0).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if outside > 0.0 {
                    outside
                } else {
                    d.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).abs()
                }
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let dx = p[0] - center[0];
                let dz = p[2] - center[2];
                let dr = (dx * dx + dz * dz).sqrt() - radius;
                let dy = (p[1] - center[1]).abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                if outside > 0.0 {
                    outside
                } else {
                    dr.abs().min(dy.abs())
                }
            }
        }
    }
}

/// One labeled part of a recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePart {
    pub label: u8,
    pub primitive: Primitive,
}

/// A fully positioned shape: its parts and the sampling density.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecipe {
    pub category: &'static str,
    pub parts: Vec<ShapePart>,
    pub density: f64,
}

impl ShapeRecipe {
    pub fn total_area(&self) -> f64 {
        self.parts.iter().map(|p| p.primitive.area()).sum()
    }

    pub fn point_count(&self) -> usize {
        ((self.total_area() * self.density).ceil() as usize).max(500)
    }
}

fn table_recipe<R: Rng>(rng: &mut R) -> ShapeRecipe {
    let leg_height = rng.gen_range(0.5..0.8);
    let top_half_x = rng.gen_range(0.55..0.8);
    let top_half_z = rng.gen_range(0.4..0.7);
    let top_half_y = rng.gen_range(0.03..0.06);
    let leg_radius = rng.gen_range(0.07..0.1);
    let mut parts = vec![ShapePart {
        label: 1,
        primitive: Primitive::Box {
            center: [0.0, leg_height + top_half_y, 0.0],
            half: [top_half_x, top_half_y, top_half_z],
        },
    }];
    let inset = leg_radius + 0.04;
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            parts.push(ShapePart {
                label: 2,
                primitive: Primitive::Cylinder {
                    center: [
                        sx * (top_half_x - inset),
                        leg_height / 2.0,
                        sz * (top_half_z - inset),
                    ],
                    radius: leg_radius,
                    half_height: leg_height / 2.0,
                },
            });
        }
    }
    ShapeRecipe {
        category: "table",
        parts,
        density: DEFAULT_DENSITY,
    }
}

fn chair_recipe<R: Rng>(rng: &mut R) -> ShapeRecipe {
    let seat_height = rng.gen_range(0.45..0.6);
    let seat_half_x = rng.gen_range(0.4..0.55);
    let seat_half_z = rng.gen_range(0.35..0.5);
    let seat_half_y = rng.gen_range(0.04..0.06);
    let back_height = rng.gen_range(0.5..0.7);
    let back_half_z = rng.gen_range(0.035..0.05);
    let leg_radius = rng.gen_range(0.07..0.09);
    let with_arms = rng.gen_bool(0.5);
    let mut parts = vec![
        ShapePart {
            label: 1,
            primitive: Primitive::Box {
                center: [
                    0.0,
                    seat_height + seat_half_y + back_height / 2.0,
                    -(seat_half_z - back_half_z),
                ],
                half: [seat_half_x, back_height / 2.0, back_half_z],
            },
        },
        ShapePart {
            label: 2,
            primitive: Primitive::Box {
                center: [0.0, seat_height, 0.0],
                half: [seat_half_x, seat_half_y, seat_half_z],
            },
        },
    ];
    let inset = leg_radius + 0.03;
    let leg_top = seat_height - seat_half_y;
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            parts.push(ShapePart {
                label: 3,
                primitive: Primitive::Cylinder {
                    center: [
                        sx * (seat_half_x - inset),
                        leg_top / 2.0,
                        sz * (seat_half_z - inset),
                    ],
                    radius: leg_radius,
                    half_height: leg_top / 2.0,
                },
            });
        }
    }
    if with_arms {
        let arm_half_y = rng.gen_range(0.08..0.12);
        let arm_half_x = rng.gen_range(0.05..0.07);
        for sx in [-1.0, 1.0] {
            parts.push(ShapePart {
                label: 4,
                primitive: Primitive::Box {
                    center: [
                        sx * (seat_half_x + arm_half_x),
                        seat_height + seat_half_y + arm_half_y,
                        0.0,
                    ],
                    half: [arm_half_x, arm_half_y, seat_half_z * 0.8],
                },
            });
        }
    }
    ShapeRecipe {
        category: "chair",
        parts,
        density: DEFAULT_DENSITY,
    }
}

fn lamp_recipe<R: Rng>(rng: &mut R) -> ShapeRecipe {
    let base_radius = rng.gen_range(0.3..0.45);
    let base_half_y = rng.gen_range(0.03..0.05);
    let column_radius = rng.gen_range(0.07..0.09);
    let column_height = rng.gen_range(0.7..1.0);
    let head_radius = rng.gen_range(0.2..0.3);
    let head_half_y = rng.gen_range(0.1..0.15);
    let parts = vec![
        ShapePart {
            label: 1,
            primitive: Primitive::Cylinder {
                center: [0.0, base_half_y, 0.0],
                radius: base_radius,
                half_height: base_half_y,
            },
        },
        ShapePart {
            label: 2,
            primitive: Primitive::Cylinder {
                center: [0.0, 2.0 * base_half_y + column_height / 2.0, 0.0],
                radius: column_radius,
                half_height: column_height / 2.0,
            },
        },
        ShapePart {
            label: 3,
            primitive: Primitive::Cylinder {
                center: [0.0, 2.0 * base_half_y + column_height + head_half_y * 0.6, 0.0],
                radius: head_radius,
                half_height: head_half_y,
            },
        },
    ];
    ShapeRecipe {
        category: "lamp",
        parts,
        density: DEFAULT_DENSITY,
    }
}

fn build_recipe<R: Rng>(category: &str, rng: &mut R) -> Result<ShapeRecipe> {
    match category {
        "table" => Ok(table_recipe(rng)),
        "chair" => Ok(chair_recipe(rng)),
        "lamp" => Ok(lamp_recipe(rng)),
        _ => Err(Error::InvalidArgument(format!(
            "unknown synthetic category '{category}', expected table, chair, or lamp"
        ))),
    }
}

fn sample_recipe<R: Rng>(recipe: &ShapeRecipe, rng: &mut R) -> (Vec<[f64; 3]>, Vec<u8>) {
    let n = recipe.point_count();
    let areas: Vec<f64> = recipe.parts.iter().map(|p| p.primitive.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut idx = recipe.parts.len() - 1;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let part = &recipe.parts[idx];
        points.push(part.primitive.sample(rng));
        labels.push(part.label);
    }
    (points, labels)
}

fn part_counts_ok(recipe: &ShapeRecipe, labels: &[u8]) -> bool {
    let floor = (labels.len() as f64 * MIN_PART_FRACTION).ceil() as usize;
    recipe.parts.iter().all(|part| {
        labels.iter().filter(|&&l| l == part.label).count() >= floor
    })
}

/// Generates one shape along with the recipe that produced it. Resamples
/// until every recipe part holds at least 1% of the points.
pub fn generate_with_recipe(
    category: &str,
    seed: u64,
) -> Result<(ShapeRecipe, LabeledPointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLES {
        let recipe = build_recipe(category, &mut rng)?;
        let (points, labels) = sample_recipe(&recipe, &mut rng);
        if !part_counts_ok(&recipe, &labels) {
            continue;
        }
        let mut cloud = LabeledPointCloud::new(points, labels, category)?;
        cloud.shape_id = Some(format!("{category}_{seed:06}"));
        return Ok((recipe, cloud));
    }
    Err(Error::InvalidConfig(format!(
        "category '{category}' seed {seed} kept producing starved parts"
    )))
}

/// Generates one labeled cloud; the same seed always yields the same cloud.
pub fn generate_shape(category: &str, seed: u64) -> Result<LabeledPointCloud> {
    generate_with_recipe(category, seed).map(|(_, cloud)| cloud)
}

/// Index of one generated dataset directory.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub category: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Reads every cloud of a split back from disk, in manifest order.
    pub fn read_split(&self, dir: &Path, split: Split) -> Result<Vec<LabeledPointCloud>> {
        let sub = dir.join(split.dir_name());
        self.ids(split)
            .iter()
            .map(|id| {
                let text = fs::read_to_string(sub.join(format!("{id}.txt")))?;
                LabeledPointCloud::from_text(&text, &self.category, Some(id.clone()))
            })
            .collect()
    }
}

/// Generates a seeded train/test split under `out`: one text file per shape
/// plus `manifest.json`. Train and test draw from disjoint seed ranges, so
/// regenerating with the same arguments reproduces every byte.
pub fn make_dataset(
    category: &str,
    n_train: usize,
    n_test: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "both splits need at least one shape".into(),
        ));
    }
    categories::synthetic(category).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown synthetic category '{category}', expected table, chair, or lamp"
        ))
    })?;
    let mut manifest = DatasetManifest {
        category: category.to_string(),
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(n_test),
    };
    for (split, count, offset) in [
        (Split::Train, n_train, 0),
        (Split::Test, n_test, n_train as u64),
    ] {
        let sub = out.join(split.dir_name());
        fs::create_dir_all(&sub)?;
        for i in 0..count {
            let cloud = generate_shape(category, seed + offset + i as u64)?;
            let id = cloud.shape_id.clone().expect("generator sets the id");
            fs::write(sub.join(format!("{id}.txt")), cloud.to_text())?;
            match split {
                Split::Train => manifest.train.push(id),
                Split::Test => manifest.test.push(id),
            }
        }
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join("manifest.json"), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::normalize_cloud;
    use std::collections::BTreeSet;

    #[test]
    fn table_has_two_parts_and_enough_points() {
        let cloud = generate_shape("table", 1).unwrap();
        assert!(cloud.points.len() >= 500);
        let labels: BTreeSet<u8> = cloud.labels.iter().copied().collect();
        assert_eq!(labels, BTreeSet::from([1, 2]));
    }

    #[test]
    fn lamp_uses_exactly_its_declared_label_range() {
        for seed in 0..5 {
            let cloud = generate_shape("lamp", seed).unwrap();
            let labels: BTreeSet<u8> = cloud.labels.iter().copied().collect();
            assert_eq!(labels, BTreeSet::from([1, 2, 3]));
        }
    }

    #[test]
    fn same_seed_reproduces_the_cloud_bitwise() {
        let a = generate_shape("chair", 42).unwrap();
        let b = generate_shape("chair", 42).unwrap();
        assert_eq!(a, b);
        let c = generate_shape("chair", 43).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn points_lie_on_their_part_surface() {
        for category in ["table", "chair", "lamp"] {
            let (recipe, cloud) = generate_with_recipe(category, 7).unwrap();
            for (p, &label) in cloud.points.iter().zip(&cloud.labels) {
                let dist = recipe
                    .parts
                    .iter()
                    .filter(|part| part.label == label)
                    .map(|part| part.primitive.surface_distance(*p))
                    .fold(f64::INFINITY, f64::min);
                assert!(dist <= 1e-9, "{category} point {p:?} off-surface by {dist}");
            }
        }
    }

    #[test]
    fn every_part_keeps_at_least_one_percent_of_points() {
        for seed in 0..10 {
            let (recipe, cloud) = generate_with_recipe("chair", seed).unwrap();
            let floor = (cloud.points.len() as f64 * 0.01).ceil() as usize;
            for part in &recipe.parts {
                let count = cloud.labels.iter().filter(|&&l| l == part.label).count();
                assert!(count >= floor, "label {} has {count} points", part.label);
            }
        }
    }

    #[test]
    fn chair_arms_appear_on_roughly_half_the_seeds() {
        let mut with_arms = 0;
        for seed in 0..40 {
            let cloud = generate_shape("chair", seed).unwrap();
            if cloud.labels.contains(&4) {
                with_arms += 1;
            }
        }
        assert!((8..=32).contains(&with_arms), "{with_arms} of 40 had arms");
    }

    #[test]
    fn generated_clouds_survive_normalization() {
        for category in ["table", "chair", "lamp"] {
            let cloud = generate_shape(category, 3).unwrap();
            let normalized = normalize_cloud(cloud).unwrap();
            for p in &normalized.points {
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!(norm <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn unknown_category_is_rejected() {
        assert!(generate_shape("boat", 1).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(make_dataset("boat", 1, 1, 0, dir.path()).is_err());
    }

    #[test]
    fn dataset_writes_split_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset("table", 3, 2, 10, dir.path()).unwrap();
        assert_eq!(manifest.train.len(), 3);
        assert_eq!(manifest.test.len(), 2);
        let mut all: BTreeSet<&String> = manifest.train.iter().collect();
        all.extend(manifest.test.iter());
        assert_eq!(all.len(), 5, "split ids overlap");
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        let train = loaded.read_split(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(train[0], generate_shape("table", 10).unwrap());
        let test = loaded.read_split(dir.path(), Split::Test).unwrap();
        assert_eq!(test[0].shape_id.as_deref(), Some("table_000013"));
    }

    #[test]
    fn regenerating_a_dataset_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_dataset("lamp", 2, 1, 5, a.path()).unwrap();
        make_dataset("lamp", 2, 1, 5, b.path()).unwrap();
        for rel in ["manifest.json", "train/lamp_000005.txt", "test/lamp_000007.txt"] {
            let left = std::fs::read(a.path().join(rel)).unwrap();
            let right = std::fs::read(b.path().join(rel)).unwrap();
            assert_eq!(left, right, "{rel} differs");
        }
    }
}

//! Category tables: the part structure of the synthetic shape recipes and
//! the 16-category, 50-part global labeling used when ingesting real
//! benchmark data.

use crate::error::{Error, Result};

/// A shape category and its canonical part order. Local labels are
/// one-based indexes into `parts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Category {
    pub name: &'static str,
    pub parts: &'static [&'static str],
}

impl Category {
    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn part_name(&self, local: u8) -> Result<&'static str> {
        self.parts
            .get(local as usize - 1)
            .copied()
            .ok_or_else(|| label_range_error(self, local))
    }
}

fn label_range_error(category: &Category, local: u8) -> Error {
    Error::InvalidArgument(format!(
        "label {} outside category '{}' part range 1..={}",
        local,
        category.name,
        category.part_count()
    ))
}

/// Categories the procedural generator can produce.
pub const SYNTHETIC: [Category; 3] = [
    Category {
        name: "table",
        parts: &["top", "leg"],
    },
    Category {
        name: "chair",
        parts: &["back", "seat", "leg", "arm"],
    },
    Category {
        name: "lamp",
        parts: &["base", "column", "head"],
    },
];

/// The benchmark's 16 categories in their fixed global order; the 50 parts
/// are numbered consecutively across this list.
pub const BENCHMARK: [Category; 16] = [
    Category {
        name: "airplane",
        parts: &["body", "wing", "tail", "engine"],
    },
    Category {
        name: "bag",
        parts: &["handle", "body"],
    },
    Category {
        name: "cap",
        parts: &["crown", "peak"],
    },
    Category {
        name: "car",
        parts: &["roof", "hood", "wheel", "body"],
    },
    Category {
        name: "chair",
        parts: &["back", "seat", "leg", "arm"],
    },
    Category {
        name: "earphone",
        parts: &["cup", "headband", "wire"],
    },
    Category {
        name: "guitar",
        parts: &["head", "neck", "body"],
    },
    Category {
        name: "knife",
        parts: &["blade", "handle"],
    },
    Category {
        name: "lamp",
        parts: &["base", "shade", "tube", "canopy"],
    },
    Category {
        name: "laptop",
        parts: &["keyboard", "screen"],
    },
    Category {
        name: "motorbike",
        parts: &["wheel", "handle", "gas_tank", "light", "seat", "frame"],
    },
    Category {
        name: "mug",
        parts: &["handle", "body"],
    },
    Category {
        name: "pistol",
        parts: &["barrel", "handle", "trigger_guard"],
    },
    Category {
        name: "rocket",
        parts: &["body", "fin", "nose"],
    },
    Category {
        name: "skateboard",
        parts: &["deck", "wheel", "truck"],
    },
    Category {
        name: "table",
        parts: &["top", "leg", "support"],
    },
];

pub fn synthetic(name: &str) -> Option<&'static Category> {
    SYNTHETIC.iter().find(|c| c.name == name)
}

pub fn benchmark(name: &str) -> Option<&'static Category> {
    BENCHMARK.iter().find(|c| c.name == name)
}

/// Part count for a category name. Synthetic recipes shadow the benchmark
/// table where the names collide (the synthetic table has 2 parts, the
/// benchmark table 3), since generated data is the toolkit's native input.
pub fn part_count(name: &str) -> Result<usize> {
    synthetic(name)
        .or_else(|| benchmark(name))
        .map(Category::part_count)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown category '{name}'")))
}

/// Number of global labels preceding a benchmark category's block.
pub fn global_offset(name: &str) -> Result<usize> {
    let mut offset = 0;
    for c in &BENCHMARK {
        if c.name == name {
            return Ok(offset);
        }
        offset += c.part_count();
    }
    Err(Error::InvalidArgument(format!(
        "category '{name}' is not in the benchmark table"
    )))
}

/// Converts a category-local label (one-based) to its global label.
pub fn to_global_label(name: &str, local: u8) -> Result<u8> {
    let category = benchmark(name)
        .ok_or_else(|| Error::InvalidArgument(format!("category '{name}' is not in the benchmark table")))?;
    if local == 0 || local as usize > category.part_count() {
        return Err(label_range_error(category, local));
    }
    Ok((global_offset(name)? + local as usize) as u8)
}

/// Converts a global label back to a category-local one, checking that it
/// falls inside the category's block.
pub fn to_local_label(name: &str, global: u8) -> Result<u8> {
    let category = benchmark(name)
        .ok_or_else(|| Error::InvalidArgument(format!("category '{name}' is not in the benchmark table")))?;
    let offset = global_offset(name)?;
    let g = global as usize;
    if g <= offset || g > offset + category.part_count() {
        return Err(Error::InvalidArgument(format!(
            "global label {global} outside category '{name}' block {}..={}",
            offset + 1,
            offset + category.part_count()
        )));
    }
    Ok((g - offset) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_table_covers_fifty_parts() {
        let total: usize = BENCHMARK.iter().map(Category::part_count).sum();
        assert_eq!(total, 50);
        assert_eq!(BENCHMARK.len(), 16);
    }

    #[test]
    fn offsets_partition_the_global_range() {
        let mut next = 0;
        for c in &BENCHMARK {
            assert_eq!(global_offset(c.name).unwrap(), next);
            next += c.part_count();
        }
        assert_eq!(next, 50);
    }

    #[test]
    fn chair_has_the_four_canonical_parts() {
        let chair = synthetic("chair").unwrap();
        assert_eq!(chair.parts, &["back", "seat", "leg", "arm"]);
        assert_eq!(part_count("chair").unwrap(), 4);
    }

    #[test]
    fn synthetic_recipes_shadow_benchmark_names() {
        assert_eq!(part_count("table").unwrap(), 2);
        assert_eq!(benchmark("table").unwrap().part_count(), 3);
    }

    #[test]
    fn global_labels_round_trip() {
        for c in &BENCHMARK {
            for local in 1..=c.part_count() as u8 {
                let global = to_global_label(c.name, local).unwrap();
                assert_eq!(to_local_label(c.name, global).unwrap(), local);
            }
        }
        assert_eq!(to_global_label("airplane", 1).unwrap(), 1);
        assert_eq!(to_global_label("table", 3).unwrap(), 50);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        assert!(to_global_label("chair", 0).is_err());
        assert!(to_global_label("chair", 5).is_err());
        assert!(to_local_label("chair", 1).is_err());
        assert!(part_count("boat").is_err());
        assert!(synthetic("chair").unwrap().part_name(5).is_err());
        assert_eq!(synthetic("chair").unwrap().part_name(4).unwrap(), "arm");
    }
}

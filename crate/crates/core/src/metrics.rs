//! Point-level segmentation metrics.
//!
//! Labels are 1-based part ids within one category. A shape scores the mean
//! over its category's parts of the per-part intersection-over-union, and
//! categories aggregate into a shape-count-weighted overall score. Parts
//! absent from both prediction and ground truth have an empty union; by
//! default they score 1 (the standard part-segmentation convention), and a
//! strict rule that excludes them from the mean is available instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How parts with an empty union (absent from both prediction and ground
/// truth) enter the per-shape mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyUnionRule {
    /// Count the part with a score of 1.
    ScoreOne,
    /// Leave the part out of the mean.
    Exclude,
}

fn check_labels(pred: &[u8], gt: &[u8], num_parts: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} points but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty shape".into()));
    }
    for (name, labels) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > num_parts) {
            return Err(Error::InvalidArgument(format!(
                "{name} contains label {bad} outside the category's 1..={num_parts} range"
            )));
        }
    }
    Ok(())
}

/// Mean per-part IoU of one shape, as a percentage.
pub fn shape_iou(
    pred: &[u8],
    gt: &[u8],
    num_parts: usize,
    rule: EmptyUnionRule,
) -> Result<f64> {
    check_labels(pred, gt, num_parts)?;
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for part in 1..=num_parts as u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            let in_p = p == part;
            let in_g = g == part;
            if in_p && in_g {
                inter += 1;
            }
            if in_p || in_g {
                union += 1;
            }
        }
        if union == 0 {
            if rule == EmptyUnionRule::ScoreOne {
                total += 1.0;
                counted += 1;
            }
        } else {
            total += inter as f64 / union as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "no part has any points under the strict rule".into(),
        ));
    }
    Ok(total / counted as f64 * 100.0)
}

/// Per-part precision and recall as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartPr {
    pub precision: f64,
    pub recall: f64,
}

/// Per-part precision/recall plus their macro averages (percentages).
/// Undefined ratios (no predicted points, or no ground-truth points, for a
/// part) count as 1.
pub fn precision_recall(
    pred: &[u8],
    gt: &[u8],
    num_parts: usize,
) -> Result<(Vec<PartPr>, f64, f64)> {
    check_labels(pred, gt, num_parts)?;
    let mut parts = Vec::with_capacity(num_parts);
    for part in 1..=num_parts as u8 {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fun = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == part, g == part) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fun += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fun == 0 { 1.0 } else { tp as f64 / (tp + fun) as f64 };
        parts.push(PartPr { precision, recall });
    }
    let macro_p =
        parts.iter().map(|p| p.precision).sum::<f64>() / num_parts as f64 * 100.0;
    let macro_r = parts.iter().map(|p| p.recall).sum::<f64>() / num_parts as f64 * 100.0;
    Ok((parts, macro_p, macro_r))
}

/// One evaluated shape, ready for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeEval {
    pub category: String,
    pub iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Aggregated scores for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEval {
    pub category: String,
    pub count: usize,
    pub mean_iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Full evaluation: per-category rows plus the shape-count-weighted overall
/// score.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub categories: Vec<CategoryEval>,
    pub total_shapes: usize,
    pub overall_iou: f64,
    pub overall_precision: Option<f64>,
    pub overall_recall: Option<f64>,
}

/// Sums in ascending value order so the result is independent of input
/// permutation.
fn stable_mean(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum::<f64>() / values.len() as f64
}

/// Groups shapes by category, averages within each, and weights the overall
/// score by shape count. Precision/recall aggregate over the shapes (and
/// categories) that carry them.
pub fn aggregate(shapes: &[ShapeEval]) -> Result<EvalReport> {
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("no shapes to aggregate".into()));
    }
    let mut by_cat: BTreeMap<&str, Vec<&ShapeEval>> = BTreeMap::new();
    for s in shapes {
        by_cat.entry(&s.category).or_default().push(s);
    }
    let mut categories = Vec::with_capacity(by_cat.len());
    for (name, members) in &by_cat {
        let mut ious: Vec<f64> = members.iter().map(|s| s.iou).collect();
        let mean_iou = stable_mean(&mut ious);
        let mut ps: Vec<f64> = members.iter().filter_map(|s| s.precision).collect();
        let mut rs: Vec<f64> = members.iter().filter_map(|s| s.recall).collect();
        categories.push(CategoryEval {
            category: name.to_string(),
            count: members.len(),
            mean_iou,
            precision: if ps.is_empty() { None } else { Some(stable_mean(&mut ps)) },
            recall: if rs.is_empty() { None } else { Some(stable_mean(&mut rs)) },
        });
    }
    let total_shapes = shapes.len();
    let overall_iou = categories
        .iter()
        .map(|c| c.count as f64 * c.mean_iou)
        .sum::<f64>()
        / total_shapes as f64;
    let weighted = |pick: fn(&CategoryEval) -> Option<f64>| {
        let mut num = 0.0f64;
        let mut den = 0usize;
        for c in &categories {
            if let Some(v) = pick(c) {
                num += c.count as f64 * v;
                den += c.count;
            }
        }
        if den == 0 {
            None
        } else {
            Some(num / den as f64)
        }
    };
    Ok(EvalReport {
        overall_precision: weighted(|c| c.precision),
        overall_recall: weighted(|c| c.recall),
        categories,
        total_shapes,
        overall_iou,
    })
}

impl EvalReport {
    /// Renders the `category,count,miou,precision,recall` table with a
    /// trailing TOTAL row. Absent precision/recall cells stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,count,miou,precision,recall\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{},{},{:.4},{},{}",
                c.category,
                c.count,
                c.mean_iou,
                cell(c.precision),
                cell(c.recall)
            );
        }
        let _ = writeln!(
            out,
            "TOTAL,{},{:.4},{},{}",
            self.total_shapes,
            self.overall_iou,
            cell(self.overall_precision),
            cell(self.overall_recall)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_prediction_scores_100() {
        let gt = [1, 2, 3, 1];
        let iou = shape_iou(&gt, &gt, 3, EmptyUnionRule::ScoreOne).unwrap();
        assert_abs_diff_eq!(iou, 100.0, epsilon = 0.0);
    }

    #[test]
    fn mixed_prediction_matches_hand_count() {
        let gt = [1, 1, 2, 2];
        let pred = [1, 2, 2, 2];
        let iou = shape_iou(&pred, &gt, 2, EmptyUnionRule::ScoreOne).unwrap();
        assert_abs_diff_eq!(iou, (0.5 + 2.0 / 3.0) / 2.0 * 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou, 58.333333333333336, epsilon = 1e-9);
    }

    #[test]
    fn absent_part_scores_one_by_default_and_drops_when_strict() {
        let gt = [1, 1, 2];
        let pred = [1, 1, 2];
        let lenient = shape_iou(&pred, &gt, 3, EmptyUnionRule::ScoreOne).unwrap();
        assert_abs_diff_eq!(lenient, 100.0, epsilon = 0.0);
        let imperfect = shape_iou(&[1, 2, 2], &gt, 3, EmptyUnionRule::ScoreOne).unwrap();
        let strict = shape_iou(&[1, 2, 2], &gt, 3, EmptyUnionRule::Exclude).unwrap();
        // Dropping the free-scoring absent part lowers the mean.
        assert!(strict < imperfect);
    }

    #[test]
    fn iou_is_symmetric_and_exact_only_on_agreement() {
        let a = [1, 2, 1, 3];
        let b = [1, 2, 3, 3];
        let ab = shape_iou(&a, &b, 3, EmptyUnionRule::ScoreOne).unwrap();
        let ba = shape_iou(&b, &a, 3, EmptyUnionRule::ScoreOne).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 0.0);
        assert!(ab < 100.0);
    }

    #[test]
    fn relabeling_both_sides_preserves_iou() {
        let gt = [1, 1, 2, 3, 3];
        let pred = [1, 2, 2, 3, 1];
        let perm = |l: u8| [0u8, 3, 1, 2][l as usize];
        let gt2: Vec<u8> = gt.iter().map(|&l| perm(l)).collect();
        let pred2: Vec<u8> = pred.iter().map(|&l| perm(l)).collect();
        let a = shape_iou(&pred, &gt, 3, EmptyUnionRule::ScoreOne).unwrap();
        let b = shape_iou(&pred2, &gt2, 3, EmptyUnionRule::ScoreOne).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn foreign_labels_are_rejected() {
        assert!(shape_iou(&[1, 4], &[1, 2], 3, EmptyUnionRule::ScoreOne).is_err());
        assert!(shape_iou(&[1, 0], &[1, 2], 3, EmptyUnionRule::ScoreOne).is_err());
        assert!(shape_iou(&[1], &[1, 2], 3, EmptyUnionRule::ScoreOne).is_err());
    }

    #[test]
    fn precision_recall_match_hand_count() {
        let gt = [1, 1, 2];
        let pred = [1, 2, 2];
        let (parts, macro_p, macro_r) = precision_recall(&pred, &gt, 2).unwrap();
        assert_abs_diff_eq!(parts[0].precision, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(parts[0].recall, 0.5, epsilon = 0.0);
        assert_abs_diff_eq!(parts[1].precision, 0.5, epsilon = 0.0);
        assert_abs_diff_eq!(parts[1].recall, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(macro_p, 75.0, epsilon = 1e-12);
        assert_abs_diff_eq!(macro_r, 75.0, epsilon = 1e-12);
    }

    #[test]
    fn precision_of_pred_is_recall_of_swapped_arguments() {
        let a = [1, 2, 2, 3, 1];
        let b = [1, 1, 2, 3, 3];
        let (pa, _, _) = precision_recall(&a, &b, 3).unwrap();
        let (pb, _, _) = precision_recall(&b, &a, 3).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_abs_diff_eq!(x.precision, y.recall, epsilon = 0.0);
            assert_abs_diff_eq!(x.recall, y.precision, epsilon = 0.0);
        }
    }

    #[test]
    fn part_absent_everywhere_counts_as_perfect() {
        let gt = [1, 1];
        let pred = [1, 1];
        let (parts, macro_p, macro_r) = precision_recall(&pred, &gt, 4).unwrap();
        for p in &parts[1..] {
            assert_abs_diff_eq!(p.precision, 1.0, epsilon = 0.0);
            assert_abs_diff_eq!(p.recall, 1.0, epsilon = 0.0);
        }
        assert_abs_diff_eq!(macro_p, 100.0, epsilon = 0.0);
        assert_abs_diff_eq!(macro_r, 100.0, epsilon = 0.0);
    }

    fn shape(cat: &str, iou: f64) -> ShapeEval {
        ShapeEval { category: cat.into(), iou, precision: None, recall: None }
    }

    #[test]
    fn single_category_overall_equals_its_mean() {
        let report = aggregate(&[shape("chair", 40.0), shape("chair", 60.0)]).unwrap();
        assert_abs_diff_eq!(report.overall_iou, 50.0, epsilon = 1e-12);
        assert_eq!(report.categories.len(), 1);
        assert_abs_diff_eq!(report.categories[0].mean_iou, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn overall_is_weighted_by_shape_count() {
        let mut shapes = vec![shape("lamp", 50.0), shape("lamp", 50.0)];
        shapes.extend((0..6).map(|_| shape("table", 100.0)));
        let report = aggregate(&shapes).unwrap();
        assert_abs_diff_eq!(report.overall_iou, 87.5, epsilon = 1e-12);
        let check: f64 = report
            .categories
            .iter()
            .map(|c| c.count as f64 * c.mean_iou)
            .sum::<f64>()
            / report.total_shapes as f64;
        assert_abs_diff_eq!(report.overall_iou, check, epsilon = 1e-9);
    }

    #[test]
    fn aggregation_is_order_invariant() {
        let mut shapes = vec![
            shape("a", 10.0),
            shape("b", 90.0),
            shape("a", 30.0),
            shape("b", 70.0),
            shape("a", 20.0),
        ];
        let r1 = aggregate(&shapes).unwrap();
        shapes.reverse();
        let r2 = aggregate(&shapes).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn csv_lists_categories_then_total() {
        let mut s1 = shape("chair", 80.0);
        s1.precision = Some(90.0);
        s1.recall = Some(85.0);
        let report = aggregate(&[s1, shape("lamp", 60.0)]).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "category,count,miou,precision,recall");
        assert_eq!(lines[1], "chair,1,80.0000,90.0000,85.0000");
        assert_eq!(lines[2], "lamp,1,60.0000,,");
        assert_eq!(lines[3], "TOTAL,2,70.0000,90.0000,85.0000");
    }

    #[test]
    fn empty_aggregation_is_rejected() {
        assert!(aggregate(&[]).is_err());
    }
}

//! Dilation-rate planning for stacked atrous convolutions.
//!
//! Stacking dilated kernels samples the input on a sparse lattice; a badly
//! chosen rate schedule leaves gaps that no layer ever reads. This module
//! decides whether a schedule is sound two independent ways: a closed-form
//! recurrence on the maximum distance between active weights, and a
//! brute-force enumeration of every offset the composed kernels can reach.
//! It also computes the receptive field of a layer stack.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// A validated dilation-rate schedule for a stack of convolutions sharing
/// one odd kernel size.
///
/// `max_dist[l]` is the largest gap between active weights that the layers
/// from `l + 1` to the top leave uncovered, folded back through layer `l`:
/// the recurrence runs top-down as `M_n = r_n`,
/// `M_l = max(|M_{l+1} - 2 r_l|, r_l)`. The schedule is accepted when the
/// rates are non-decreasing, start at 1, and `max_dist[1] <= kernel`, so the
/// second layer's gaps fit inside the first layer's dense kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationSchedule {
    pub rates: Vec<usize>,
    pub kernel: usize,
    pub max_dist: Vec<usize>,
    pub feasible: bool,
    /// Set when infeasible; lists every violated condition. Schedules whose
    /// support still covers densely despite a violated ordering are called
    /// out, since the ordering conditions are sufficient but not necessary.
    pub reason: Option<String>,
}

/// The set of integer offsets reachable along one axis by composing the
/// dilated kernels of a schedule. The kernel grid is an axis-aligned
/// product, so dense coverage per axis is equivalent to dense coverage of
/// the full cube, and the enumeration stays one-dimensional.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    pub offsets: BTreeSet<i64>,
    /// Largest reachable offset: `sum of r_l * (K - 1) / 2`.
    pub radius: i64,
}

impl SupportSet {
    /// True when every integer in `[-radius, radius]` is reachable.
    pub fn fully_covered(&self) -> bool {
        self.offsets.len() as i64 == 2 * self.radius + 1
    }
}

fn check_inputs(rates: &[usize], kernel: usize) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::InvalidArgument(
            "dilation schedule needs at least one rate".into(),
        ));
    }
    if let Some(pos) = rates.iter().position(|&r| r == 0) {
        return Err(Error::InvalidArgument(format!(
            "dilation rates must be positive, rate {pos} is zero"
        )));
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and positive, got {kernel}"
        )));
    }
    Ok(())
}

/// Computes the max-distance recurrence and the feasibility verdict for a
/// rate schedule under the given kernel size.
pub fn validate_schedule(rates: &[usize], kernel: usize) -> Result<DilationSchedule> {
    check_inputs(rates, kernel)?;
    let n = rates.len();
    let mut max_dist = vec![0usize; n];
    max_dist[n - 1] = rates[n - 1];
    for l in (0..n - 1).rev() {
        let folded = (max_dist[l + 1] as i64 - 2 * rates[l] as i64).unsigned_abs() as usize;
        max_dist[l] = folded.max(rates[l]);
    }

    let mut violations = Vec::new();
    if let Some(pos) = rates.windows(2).position(|w| w[0] > w[1]) {
        violations.push(format!(
            "rates must be non-decreasing but r_{} = {} > r_{} = {}",
            pos + 1,
            rates[pos],
            pos + 2,
            rates[pos + 1]
        ));
    }
    if rates[0] != 1 {
        violations.push(format!(
            "the first rate must be 1 to fill the gaps of the layers above, got {}",
            rates[0]
        ));
    }
    if n > 1 && max_dist[1] > kernel {
        violations.push(format!(
            "active weights in the layers above layer 1 sit up to {} apart, \
             which the kernel of size {} cannot bridge",
            max_dist[1], kernel
        ));
    }

    let feasible = violations.is_empty();
    let reason = if feasible {
        None
    } else {
        let mut reason = violations.join("; ");
        let (support, _) = support_coverage(rates, kernel)?;
        if support.fully_covered() {
            reason.push_str(
                "; note: the composed support still covers densely, \
                 the ordering conditions are sufficient rather than necessary",
            );
        }
        Some(reason)
    };

    Ok(DilationSchedule {
        rates: rates.to_vec(),
        kernel,
        max_dist,
        feasible,
        reason,
    })
}

/// Enumerates every axis offset `sum of r_l * t_l` with taps
/// `t_l in -(K-1)/2 ..= (K-1)/2` and reports whether the span is gap-free.
pub fn support_coverage(rates: &[usize], kernel: usize) -> Result<(SupportSet, bool)> {
    check_inputs(rates, kernel)?;
    let half = (kernel as i64 - 1) / 2;
    let mut offsets = BTreeSet::new();
    offsets.insert(0i64);
    for &r in rates {
        let mut next = BTreeSet::new();
        for &o in &offsets {
            for t in -half..=half {
                next.insert(o + r as i64 * t);
            }
        }
        offsets = next;
    }
    let radius = rates.iter().map(|&r| r as i64 * half).sum();
    let support = SupportSet { offsets, radius };
    let covered = support.fully_covered();
    Ok((support, covered))
}

/// One convolution in a receptive-field computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRf {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl LayerRf {
    pub fn new(kernel: usize, dilation: usize, stride: usize) -> Self {
        Self { kernel, dilation, stride }
    }
}

/// Receptive field in input voxels of a stack of convolutions, by the
/// standard composition: each layer widens the field by
/// `(K - 1) * dilation * (product of the strides below it)`.
pub fn receptive_field(layers: &[LayerRf]) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for l in layers {
        rf += (l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
    }
    rf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dists_of(schedule: &DilationSchedule) -> Vec<usize> {
        schedule.max_dist.clone()
    }

    #[test]
    fn stage_schedule_one_three_five_is_feasible() {
        let s = validate_schedule(&[1, 3, 5], 3).unwrap();
        assert_eq!(dists_of(&s), vec![1, 3, 5]);
        assert!(s.feasible);
        assert!(s.reason.is_none());
    }

    #[test]
    fn unit_rate_schedule_is_feasible() {
        let s = validate_schedule(&[1, 1, 1], 3).unwrap();
        assert_eq!(dists_of(&s), vec![1, 1, 1]);
        assert!(s.feasible);
    }

    #[test]
    fn doubling_rates_leave_unbridgeable_gaps() {
        let s = validate_schedule(&[2, 4, 8], 3).unwrap();
        assert_eq!(s.max_dist[2], 8);
        assert_eq!(s.max_dist[1], 4);
        assert!(!s.feasible);
        assert!(s.reason.is_some());
    }

    #[test]
    fn equal_rates_above_one_are_infeasible_and_leave_holes() {
        let s = validate_schedule(&[2, 2], 3).unwrap();
        assert!(!s.feasible);
        let (support, covered) = support_coverage(&[2, 2], 3).unwrap();
        assert!(!covered);
        assert!(!support.offsets.contains(&1));
        assert!(!support.offsets.contains(&3));
    }

    #[test]
    fn covering_but_misordered_schedule_is_reported_distinctly() {
        let (_, covered) = support_coverage(&[3, 1], 3).unwrap();
        assert!(covered);
        let s = validate_schedule(&[3, 1], 3).unwrap();
        assert!(!s.feasible);
        assert!(s.reason.unwrap().contains("covers densely"));
    }

    #[test]
    fn single_layer_feasible_only_at_rate_one() {
        assert!(validate_schedule(&[1], 3).unwrap().feasible);
        assert!(!validate_schedule(&[3], 3).unwrap().feasible);
    }

    #[test]
    fn single_dense_kernel_covers_its_span() {
        let (support, covered) = support_coverage(&[1], 3).unwrap();
        assert_eq!(support.offsets.iter().copied().collect::<Vec<_>>(), vec![-1, 0, 1]);
        assert!(covered);
    }

    #[test]
    fn single_sparse_kernel_has_holes() {
        let (support, covered) = support_coverage(&[3], 3).unwrap();
        assert_eq!(support.offsets.iter().copied().collect::<Vec<_>>(), vec![-3, 0, 3]);
        assert!(!covered);
        assert_eq!(support.radius, 3);
    }

    #[test]
    fn stage_schedule_covers_full_span() {
        let (support, covered) = support_coverage(&[1, 3, 5], 3).unwrap();
        assert!(covered);
        assert_eq!(support.radius, 9);
        assert_eq!(support.offsets.len(), 19);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(validate_schedule(&[], 3).is_err());
        assert!(validate_schedule(&[1, 2], 4).is_err());
        assert!(validate_schedule(&[1, 0], 3).is_err());
        assert!(support_coverage(&[1], 2).is_err());
    }

    #[test]
    fn max_dist_is_always_positive() {
        for a in 1..=6 {
            for b in 1..=6 {
                for c in 1..=6 {
                    let s = validate_schedule(&[a, b, c], 3).unwrap();
                    assert!(s.max_dist.iter().all(|&m| m >= 1));
                }
            }
        }
    }

    #[test]
    fn feasibility_and_coverage_agree_on_small_schedules() {
        let mut checked = 0;
        for len in 1..=3usize {
            let mut rates = vec![1usize; len];
            loop {
                let s = validate_schedule(&rates, 3).unwrap();
                let (_, covered) = support_coverage(&rates, 3).unwrap();
                if s.feasible {
                    assert!(covered, "feasible schedule {rates:?} must cover");
                }
                let ordered_from_one =
                    rates[0] == 1 && rates.windows(2).all(|w| w[0] <= w[1]);
                if !s.feasible && ordered_from_one {
                    assert!(!covered, "rejected ordered schedule {rates:?} must have holes");
                }
                checked += 1;
                let mut i = len;
                loop {
                    if i == 0 {
                        break;
                    }
                    i -= 1;
                    rates[i] += 1;
                    if rates[i] <= 6 {
                        break;
                    }
                    rates[i] = 1;
                }
                if rates.iter().all(|&r| r == 1) {
                    break;
                }
            }
        }
        assert_eq!(checked, 6 + 36 + 216);
    }

    #[test]
    fn nine_layer_segmentation_stack_sees_43_voxels() {
        let layers: Vec<LayerRf> = [1, 1, 1, 1, 3, 5, 1, 3, 5]
            .iter()
            .map(|&r| LayerRf::new(3, r, 1))
            .collect();
        assert_eq!(receptive_field(&layers), 43);
    }

    #[test]
    fn receptive_field_matches_hand_values() {
        assert_eq!(receptive_field(&[LayerRf::new(3, 1, 1)]), 3);
        assert_eq!(
            receptive_field(&[LayerRf::new(3, 1, 1), LayerRf::new(3, 2, 1)]),
            7
        );
    }

    #[test]
    fn strides_scale_later_contributions() {
        // 3x3x3 stride 2, then 3x3x3: 1 + 2 + 2*2 = 7.
        let layers = [LayerRf::new(3, 1, 2), LayerRf::new(3, 1, 1)];
        assert_eq!(receptive_field(&layers), 7);
    }

    #[test]
    fn receptive_field_is_monotone() {
        let base = [LayerRf::new(3, 2, 1), LayerRf::new(3, 1, 2), LayerRf::new(5, 3, 1)];
        let rf0 = receptive_field(&base);
        for i in 0..base.len() {
            let mut grown = base;
            grown[i].kernel += 2;
            assert!(receptive_field(&grown) >= rf0);
            let mut grown = base;
            grown[i].dilation += 1;
            assert!(receptive_field(&grown) >= rf0);
            let mut grown = base;
            grown[i].stride += 1;
            assert!(receptive_field(&grown) >= rf0);
        }
    }

    #[test]
    fn support_is_symmetric_about_zero() {
        for rates in [&[1usize, 2][..], &[2, 3, 4][..], &[1, 3, 5][..]] {
            let (support, _) = support_coverage(rates, 3).unwrap();
            for &o in &support.offsets {
                assert!(support.offsets.contains(&-o));
            }
            assert_eq!(*support.offsets.iter().next_back().unwrap(), support.radius);
        }
    }
}

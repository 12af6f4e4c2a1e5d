//! Collapse observation-level records into one row per unit of experimental
//! assignment, producing the (y, w, x) triples every estimator consumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation-level row.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    /// Key of the unit of experimental assignment (customer, shopper, ...).
    pub unit_id: String,
    /// Arm label, when the data comes from a running experiment.
    pub arm: Option<String>,
    /// Numerator contribution of this observation.
    pub y: f64,
    /// Denominator contribution; `None` means the metric counts observations.
    pub w: Option<f64>,
    /// Covariate values, same arity for every record in a dataset.
    pub covariates: Vec<f64>,
}

/// One unit of experimental assignment after aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRow {
    pub unit_id: String,
    pub arm: Option<String>,
    /// Sum of the unit's y contributions.
    pub y: f64,
    /// Sum of the unit's w contributions, or its observation count.
    pub w: f64,
    /// Covariate aggregate, per [`CovMode`].
    pub x: Vec<f64>,
    pub n_events: usize,
}

/// How the denominator column aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    /// w is the sum of per-observation w values.
    Sum,
    /// w is the number of observations in the unit.
    Count,
}

/// How covariates aggregate within a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    Sum,
    Mean,
    First,
}

/// One row per distinct `unit_id`, sorted by `unit_id`.
///
/// Arm labels must agree within a unit and covariate arity must agree across
/// the dataset. In [`WMode::Sum`] every record needs a w value.
pub fn aggregate(
    events: &[EventRecord],
    w_mode: WMode,
    cov_mode: CovMode,
) -> Result<Vec<ClusterRow>> {
    if events.is_empty() {
        return Err(Error::Data("no events to aggregate".into()));
    }
    let arity = events[0].covariates.len();

    struct Acc {
        arm: Option<String>,
        y: f64,
        w: f64,
        x: Vec<f64>,
        n: usize,
    }
    let mut units: BTreeMap<&str, Acc> = BTreeMap::new();

    for ev in events {
        if !ev.y.is_finite() {
            return Err(Error::Data(format!(
                "unit {}: non-finite y value {}",
                ev.unit_id, ev.y
            )));
        }
        if let Some(w) = ev.w {
            if !w.is_finite() {
                return Err(Error::Data(format!(
                    "unit {}: non-finite w value {w}",
                    ev.unit_id
                )));
            }
        }
        if ev.covariates.len() != arity {
            return Err(Error::Schema(format!(
                "unit {}: covariate arity {} differs from {}",
                ev.unit_id,
                ev.covariates.len(),
                arity
            )));
        }
        if ev.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "unit {}: non-finite covariate",
                ev.unit_id
            )));
        }
        let w_contrib = match w_mode {
            WMode::Count => 1.0,
            WMode::Sum => ev.w.ok_or_else(|| {
                Error::Schema(format!("unit {}: w value required in sum mode", ev.unit_id))
            })?,
        };

        match units.get_mut(ev.unit_id.as_str()) {
            None => {
                units.insert(
                    ev.unit_id.as_str(),
                    Acc {
                        arm: ev.arm.clone(),
                        y: ev.y,
                        w: w_contrib,
                        x: ev.covariates.clone(),
                        n: 1,
                    },
                );
            }
            Some(acc) => {
                match (&acc.arm, &ev.arm) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::InconsistentAssignment {
                            unit: ev.unit_id.clone(),
                            first: a.clone(),
                            second: b.clone(),
                        });
                    }
                    (None, Some(b)) => acc.arm = Some(b.clone()),
                    _ => {}
                }
                acc.y += ev.y;
                acc.w += w_contrib;
                match cov_mode {
                    CovMode::Sum | CovMode::Mean => {
                        for (xi, c) in acc.x.iter_mut().zip(&ev.covariates) {
                            *xi += c;
                        }
                    }
                    CovMode::First => {}
                }
                acc.n += 1;
            }
        }
    }

    Ok(units
        .into_iter()
        .map(|(unit_id, mut acc)| {
            if cov_mode == CovMode::Mean {
                for xi in acc.x.iter_mut() {
                    *xi /= acc.n as f64;
                }
            }
            ClusterRow {
                unit_id: unit_id.to_string(),
                arm: acc.arm,
                y: acc.y,
                w: acc.w,
                x: acc.x,
                n_events: acc.n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(unit: &str, y: f64, w: Option<f64>) -> EventRecord {
        EventRecord {
            unit_id: unit.into(),
            arm: None,
            y,
            w,
            covariates: vec![],
        }
    }

    #[test]
    fn count_mode_single_unit() {
        let rows = aggregate(
            &[ev("a", 2.0, None), ev("a", 3.0, None)],
            WMode::Count,
            CovMode::Sum,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].y, 5.0);
        assert_eq!(rows[0].w, 2.0);
        assert_eq!(rows[0].n_events, 2);
    }

    #[test]
    fn sum_mode_single_unit() {
        let rows = aggregate(
            &[ev("a", 2.0, Some(1.5)), ev("a", 3.0, Some(0.5))],
            WMode::Sum,
            CovMode::Sum,
        )
        .unwrap();
        assert_eq!(rows[0].y, 5.0);
        assert_eq!(rows[0].w, 2.0);
    }

    #[test]
    fn singleton_clusters_are_identity() {
        let rows = aggregate(
            &[ev("a", 1.0, Some(2.0)), ev("b", 3.0, Some(4.0))],
            WMode::Sum,
            CovMode::Sum,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.n_events == 1));
        // ratio over the rows equals ybar / wbar
        let ybar = (rows[0].y + rows[1].y) / 2.0;
        let wbar = (rows[0].w + rows[1].w) / 2.0;
        assert_eq!(ybar / wbar, (1.0 + 3.0) / (2.0 + 4.0));
    }

    #[test]
    fn sum_mode_requires_w() {
        let err = aggregate(&[ev("a", 1.0, None)], WMode::Sum, CovMode::Sum).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn conflicting_arms_rejected() {
        let mut e1 = ev("a", 1.0, None);
        e1.arm = Some("C".into());
        let mut e2 = ev("a", 2.0, None);
        e2.arm = Some("T".into());
        let err = aggregate(&[e1, e2], WMode::Count, CovMode::Sum).unwrap_err();
        assert!(matches!(err, Error::InconsistentAssignment { .. }));
    }

    #[test]
    fn mixed_arity_rejected() {
        let mut e1 = ev("a", 1.0, None);
        e1.covariates = vec![1.0];
        let e2 = ev("b", 2.0, None);
        let err = aggregate(&[e1, e2], WMode::Count, CovMode::Sum).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn covariate_modes() {
        let mut e1 = ev("a", 1.0, None);
        e1.covariates = vec![2.0, 10.0];
        let mut e2 = ev("a", 2.0, None);
        e2.covariates = vec![4.0, 30.0];
        let events = [e1, e2];
        let sum = aggregate(&events, WMode::Count, CovMode::Sum).unwrap();
        assert_eq!(sum[0].x, vec![6.0, 40.0]);
        let mean = aggregate(&events, WMode::Count, CovMode::Mean).unwrap();
        assert_eq!(mean[0].x, vec![3.0, 20.0]);
        let first = aggregate(&events, WMode::Count, CovMode::First).unwrap();
        assert_eq!(first[0].x, vec![2.0, 10.0]);
    }

    #[test]
    fn output_sorted_by_unit() {
        let rows = aggregate(
            &[ev("z", 1.0, None), ev("a", 2.0, None), ev("m", 3.0, None)],
            WMode::Count,
            CovMode::Sum,
        )
        .unwrap();
        let ids: Vec<&str> = rows.iter().map(|r| r.unit_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "m", "z"]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            aggregate(&[], WMode::Count, CovMode::Sum),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn totals_preserved_and_permutation_invariant(
            raw in proptest::collection::vec((0u8..6, -1e3f64..1e3, 0.1f64..10.0), 1..60),
            swaps in proptest::collection::vec((0usize..60, 0usize..60), 0..20),
        ) {
            let events: Vec<EventRecord> = raw
                .iter()
                .map(|(u, y, w)| ev(&format!("u{u}"), *y, Some(*w)))
                .collect();
            let rows = aggregate(&events, WMode::Sum, CovMode::Sum).unwrap();

            let total_y: f64 = events.iter().map(|e| e.y).sum();
            let agg_y: f64 = rows.iter().map(|r| r.y).sum();
            prop_assert!((total_y - agg_y).abs() <= 1e-12 * total_y.abs().max(1.0));

            // permute and compare row by row
            let mut permuted = events.clone();
            for &(i, j) in &swaps {
                if i < permuted.len() && j < permuted.len() {
                    permuted.swap(i, j);
                }
            }
            let rows2 = aggregate(&permuted, WMode::Sum, CovMode::Sum).unwrap();
            prop_assert_eq!(rows.len(), rows2.len());
            for (a, b) in rows.iter().zip(&rows2) {
                prop_assert_eq!(&a.unit_id, &b.unit_id);
                prop_assert!((a.y - b.y).abs() <= 1e-12 * a.y.abs().max(1.0));
                prop_assert!((a.w - b.w).abs() <= 1e-12 * a.w.abs().max(1.0));
                prop_assert_eq!(a.n_events, b.n_events);
            }
        }

        #[test]
        fn idempotent_on_singleton_units(
            raw in proptest::collection::vec((-1e3f64..1e3, 0.1f64..10.0), 1..40),
        ) {
            let events: Vec<EventRecord> = raw
                .iter()
                .enumerate()
                .map(|(i, (y, w))| ev(&format!("u{i:03}"), *y, Some(*w)))
                .collect();
            let once = aggregate(&events, WMode::Sum, CovMode::Sum).unwrap();
            let again: Vec<EventRecord> = once
                .iter()
                .map(|r| ev(&r.unit_id, r.y, Some(r.w)))
                .collect();
            let twice = aggregate(&again, WMode::Sum, CovMode::Sum).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}

//! Scoring of a recovered model against synthetic ground truth: label
//! accuracy outside the boundary band, part-count match, and per-joint
//! position errors under a greedy part matching.

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::skeleton::Joint;

use super::model::GroundTruthFile;

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Fraction of scored vertices whose matched predicted part equals
    /// the true part.
    pub label_accuracy: f64,
    pub scored_vertices: usize,
    pub predicted_parts: usize,
    pub truth_parts: usize,
    pub part_count_match: bool,
    /// Distance to each true joint; infinity when no predicted joint
    /// connects the matched part pair.
    pub joint_errors: Vec<f64>,
}

/// Greedy part matching by descending co-occurrence count. Returns, for
/// each truth part, the matched predicted part if any.
fn match_parts(counts: &[Vec<usize>], pred_parts: usize, truth_parts: usize) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (t, row) in counts.iter().enumerate().take(truth_parts) {
        for (p, &c) in row.iter().enumerate().take(pred_parts) {
            if c > 0 {
                pairs.push((c, t, p));
            }
        }
    }
    // Descending count; index tie-breaks keep the matching deterministic.
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_to_pred = vec![None; truth_parts];
    let mut pred_used = vec![false; pred_parts];
    for (_, t, p) in pairs {
        if truth_to_pred[t].is_none() && !pred_used[p] {
            truth_to_pred[t] = Some(p);
            pred_used[p] = true;
        }
    }
    truth_to_pred
}

pub fn evaluate(
    pred_labels: &[usize],
    pred_part_count: usize,
    pred_joints: &[Joint],
    truth: &GroundTruthFile,
) -> Result<EvalReport> {
    if pred_labels.len() != truth.labels.len() {
        return Err(Error::Correspondence(format!(
            "model labels {} vertices but ground truth has {}",
            pred_labels.len(),
            truth.labels.len()
        )));
    }
    let mut excluded = vec![false; truth.labels.len()];
    for &v in &truth.boundary_band {
        if v >= excluded.len() {
            return Err(Error::Structural(format!(
                "boundary band vertex {v} out of range"
            )));
        }
        excluded[v] = true;
    }

    let mut counts = vec![vec![0usize; pred_part_count]; truth.part_count];
    let mut scored = 0usize;
    for (v, (&t, &p)) in truth.labels.iter().zip(pred_labels).enumerate() {
        if excluded[v] {
            continue;
        }
        if t >= truth.part_count || p >= pred_part_count {
            return Err(Error::Structural(format!(
                "label out of range at vertex {v}"
            )));
        }
        counts[t][p] += 1;
        scored += 1;
    }
    let truth_to_pred = match_parts(&counts, pred_part_count, truth.part_count);
    let correct: usize = (0..truth.part_count)
        .map(|t| truth_to_pred[t].map_or(0, |p| counts[t][p]))
        .sum();
    let label_accuracy = if scored == 0 {
        0.0
    } else {
        correct as f64 / scored as f64
    };

    let joint_errors = truth
        .joints
        .iter()
        .map(|tj| {
            let (Some(a), Some(b)) = (truth_to_pred[tj.parts[0]], truth_to_pred[tj.parts[1]])
            else {
                return f64::INFINITY;
            };
            let pair = (a.min(b), a.max(b));
            pred_joints
                .iter()
                .find(|j| j.parts == pair)
                .map_or(f64::INFINITY, |j| {
                    (j.position - Point3::from(tj.position)).norm()
                })
        })
        .collect();

    Ok(EvalReport {
        label_accuracy,
        scored_vertices: scored,
        predicted_parts: pred_part_count,
        truth_parts: truth.part_count,
        part_count_match: pred_part_count == truth.part_count,
        joint_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::TruthJoint;

    fn truth(labels: Vec<usize>, part_count: usize, band: Vec<usize>) -> GroundTruthFile {
        GroundTruthFile {
            labels,
            part_count,
            joints: vec![],
            boundary_band: band,
        }
    }

    #[test]
    fn perfect_labeling_scores_one_under_permutation() {
        // Prediction permutes part ids; matching absorbs it.
        let t = truth(vec![0, 0, 1, 1, 2, 2], 3, vec![]);
        let r = evaluate(&[2, 2, 0, 0, 1, 1], 3, &[], &t).unwrap();
        assert_eq!(r.label_accuracy, 1.0);
        assert!(r.part_count_match);
        assert_eq!(r.scored_vertices, 6);
    }

    #[test]
    fn boundary_band_is_excluded() {
        let t = truth(vec![0, 0, 1, 1], 2, vec![1, 2]);
        // The two banded vertices are wrong but unscored.
        let r = evaluate(&[0, 1, 0, 1], 2, &[], &t).unwrap();
        assert_eq!(r.scored_vertices, 2);
        assert_eq!(r.label_accuracy, 1.0);
    }

    #[test]
    fn oversegmentation_lowers_accuracy() {
        let t = truth(vec![0, 0, 0, 0], 1, vec![]);
        let r = evaluate(&[0, 0, 1, 1], 2, &[], &t).unwrap();
        assert_eq!(r.label_accuracy, 0.5);
        assert!(!r.part_count_match);
    }

    #[test]
    fn joint_errors_follow_part_matching() {
        let mut t = truth(vec![0, 0, 1, 1], 2, vec![]);
        t.joints = vec![TruthJoint {
            parts: [0, 1],
            position: [1.0, 0.0, 0.0],
        }];
        let pred_joints = vec![Joint {
            parts: (0, 1),
            position: Point3::new(1.0, 0.02, 0.0),
            residual: 0.0,
            ambiguous: false,
        }];
        // Prediction swaps part ids 0 and 1.
        let r = evaluate(&[1, 1, 0, 0], 2, &pred_joints, &t).unwrap();
        assert!((r.joint_errors[0] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn missing_joint_is_infinite_error() {
        let mut t = truth(vec![0, 0, 1, 1], 2, vec![]);
        t.joints = vec![TruthJoint {
            parts: [0, 1],
            position: [1.0, 0.0, 0.0],
        }];
        let r = evaluate(&[0, 0, 1, 1], 2, &[], &t).unwrap();
        assert!(r.joint_errors[0].is_infinite());
    }

    #[test]
    fn length_mismatch_is_a_correspondence_error() {
        let t = truth(vec![0, 0], 1, vec![]);
        assert!(matches!(
            evaluate(&[0], 1, &[], &t),
            Err(Error::Correspondence(_))
        ));
    }
}

//! Segmentation metrics against ground-truth labels and a probe for how much
//! the dynamics model depends on its option input.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Trajectory};
use crate::error::{PodnetError, Result};
use crate::planner::OptionDynamics;
use crate::rng::{substream, tags};
use crate::training::Checkpoint;

/// Default boundary tolerance in downsampled steps.
pub const BOUNDARY_TOL: usize = 1;

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(PodnetError::invalid(format!(
            "label sequences differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(PodnetError::invalid("empty label sequence"));
    }
    Ok(())
}

/// Minimum-cost assignment of rows to distinct columns for a rectangular
/// matrix with `rows <= cols`. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) || n > m {
        return Err(PodnetError::invalid("cost matrix must be rectangular with rows <= cols"));
    }
    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Optimal injective mapping from predicted to true label values, as a map.
/// Predicted values left unmatched (more predicted than true values) are absent.
pub fn best_label_mapping(truth: &[usize], pred: &[usize]) -> Result<BTreeMap<usize, usize>> {
    check_pair(truth, pred)?;
    let true_vals: Vec<usize> = distinct(truth);
    let pred_vals: Vec<usize> = distinct(pred);
    let n = true_vals.len().max(pred_vals.len());
    let mut counts = vec![vec![0.0; n]; n];
    for (t, p) in truth.iter().zip(pred) {
        let ti = true_vals.binary_search(t).expect("present");
        let pi = pred_vals.binary_search(p).expect("present");
        counts[pi][ti] -= 1.0;
    }
    let assignment = hungarian(&counts)?;
    Ok(pred_vals
        .iter()
        .enumerate()
        .filter_map(|(pi, &p)| true_vals.get(assignment[pi]).map(|&t| (p, t)))
        .collect())
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Accuracy under the best injective relabeling of predicted ids.
pub fn matched_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let mapping = best_label_mapping(truth, pred)?;
    let hits = truth
        .iter()
        .zip(pred)
        .filter(|(t, p)| mapping.get(p) == Some(t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `I(a;b) / sqrt(H(a) H(b))` in nats; zero when either entropy is zero.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0 / n;
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
    }
    let h = |p: &BTreeMap<usize, f64>| -p.values().map(|&q| q * q.ln()).sum::<f64>();
    let (ha, hb) = (h(&pa), h(&pb));
    if ha <= 1e-12 || hb <= 1e-12 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &pxy)| pxy * (pxy / (pa[&x] * pb[&y])).ln())
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Indices `t` with `labels[t] != labels[t - 1]`.
pub fn boundaries(labels: &[usize]) -> Vec<usize> {
    (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).collect()
}

/// Matched, predicted and true counts for boundary scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub matched: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl BoundaryCounts {
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.actual == 0 {
            return 1.0;
        }
        if self.matched == 0 {
            return 0.0;
        }
        let precision = self.matched as f64 / self.predicted as f64;
        let recall = self.matched as f64 / self.actual as f64;
        2.0 * precision * recall / (precision + recall)
    }

    fn add(&mut self, other: BoundaryCounts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.actual += other.actual;
    }
}

/// Greedy one-to-one matching: predicted boundaries in increasing order each
/// take the earliest unmatched true boundary within `tol`.
pub fn match_boundaries(true_bounds: &[usize], pred_bounds: &[usize], tol: usize) -> BoundaryCounts {
    let mut truth = true_bounds.to_vec();
    truth.sort_unstable();
    truth.dedup();
    let mut pred = pred_bounds.to_vec();
    pred.sort_unstable();
    pred.dedup();
    let mut used = vec![false; truth.len()];
    let mut matched = 0;
    for &p in &pred {
        if let Some(i) = (0..truth.len()).find(|&i| !used[i] && truth[i].abs_diff(p) <= tol) {
            used[i] = true;
            matched += 1;
        }
    }
    BoundaryCounts {
        matched,
        predicted: pred.len(),
        actual: truth.len(),
    }
}

pub fn boundary_f1(true_bounds: &[usize], pred_bounds: &[usize], tol: usize) -> f64 {
    match_boundaries(true_bounds, pred_bounds, tol).f1()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub id: String,
    pub matched_accuracy: f64,
    pub nmi: f64,
    pub boundary_f1: f64,
}

/// Pooled metrics: accuracy and NMI over all steps with one global label
/// mapping, boundary F1 from summed match counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub matched_accuracy: f64,
    pub nmi: f64,
    pub boundary_f1: f64,
    pub boundary_tol: usize,
    pub num_trajectories: usize,
    pub num_steps: usize,
    pub per_trajectory: Vec<TrajectoryReport>,
}

impl SegmentationReport {
    /// `items` are `(id, true labels, predicted labels)`.
    pub fn compute(items: &[(String, Vec<usize>, Vec<usize>)], tol: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(PodnetError::invalid("no labeled trajectories to score"));
        }
        let mut all_true = Vec::new();
        let mut all_pred = Vec::new();
        let mut counts = BoundaryCounts::default();
        let mut per_trajectory = Vec::with_capacity(items.len());
        for (id, truth, pred) in items {
            check_pair(truth, pred)?;
            let c = match_boundaries(&boundaries(truth), &boundaries(pred), tol);
            counts.add(c);
            per_trajectory.push(TrajectoryReport {
                id: id.clone(),
                matched_accuracy: matched_accuracy(truth, pred)?,
                nmi: normalized_mutual_information(truth, pred)?,
                boundary_f1: c.f1(),
            });
            all_true.extend_from_slice(truth);
            all_pred.extend_from_slice(pred);
        }
        Ok(Self {
            matched_accuracy: matched_accuracy(&all_true, &all_pred)?,
            nmi: normalized_mutual_information(&all_true, &all_pred)?,
            boundary_f1: counts.f1(),
            boundary_tol: tol,
            num_trajectories: items.len(),
            num_steps: all_true.len(),
            per_trajectory,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLabels {
    pub id: String,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: Vec<TrajectoryLabels>,
    /// Present when at least one trajectory carries ground truth.
    pub report: Option<SegmentationReport>,
}

impl Segmentation {
    pub fn write_labels<W: Write>(&self, mut writer: W) -> Result<()> {
        for item in &self.labels {
            serde_json::to_writer(&mut writer, item)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Greedy labels for every trajectory after the checkpoint's preprocessing.
/// A `stride` differing from the checkpoint's is rejected.
pub fn segment(checkpoint: &Checkpoint, dataset: &Dataset, stride: Option<usize>) -> Result<Segmentation> {
    if let Some(s) = stride {
        if s != checkpoint.config.stride {
            return Err(PodnetError::invalid(format!(
                "stride {s} differs from the checkpoint's training stride {}",
                checkpoint.config.stride
            )));
        }
    }
    let prepared = checkpoint.prepare(dataset)?;
    let mut labels = Vec::with_capacity(prepared.len());
    let mut scored = Vec::new();
    for traj in &prepared.trajectories {
        let pred = checkpoint.model.greedy_options(&traj.states)?;
        if let Some(truth) = &traj.true_labels {
            scored.push((traj.id.clone(), truth.clone(), pred.clone()));
        }
        labels.push(TrajectoryLabels {
            id: traj.id.clone(),
            labels: pred,
        });
    }
    let report = if scored.is_empty() {
        None
    } else {
        Some(SegmentationReport::compute(&scored, BOUNDARY_TOL)?)
    };
    Ok(Segmentation { labels, report })
}

/// Ratio of mean one-step prediction error with every label replaced by a
/// uniformly drawn option to the error with the given labels. Trajectories
/// are in the model's normalized units; `labels[i][t]` is the option for
/// transition `t` of trajectory `i`.
pub fn option_sensitivity<D: OptionDynamics + ?Sized, R: Rng + ?Sized>(
    dynamics: &D,
    trajectories: &[Trajectory],
    labels: &[Vec<usize>],
    rng: &mut R,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(PodnetError::invalid("empty dataset"));
    }
    if labels.len() != trajectories.len() {
        return Err(PodnetError::invalid("one label sequence per trajectory required"));
    }
    let k = dynamics.num_options();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let (mut inferred, mut shuffled) = (0.0, 0.0);
    for (traj, labs) in trajectories.iter().zip(labels) {
        if labs.len() != traj.len() {
            return Err(PodnetError::invalid(format!("label count mismatch for `{}`", traj.id)));
        }
        for (t, &c) in labs.iter().enumerate() {
            let target = &traj.states[t + 1];
            inferred += sq(&dynamics.predict(&traj.states[t], c)?, target);
            let r = rng.gen_range(0..k);
            shuffled += sq(&dynamics.predict(&traj.states[t], r)?, target);
        }
    }
    if inferred == shuffled {
        return Ok(1.0);
    }
    Ok(shuffled / inferred)
}

/// [`option_sensitivity`] for a checkpoint with its own greedy labels.
pub fn dynamics_option_sensitivity(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(PodnetError::invalid("empty dataset"));
    }
    let prepared = checkpoint.prepare(dataset)?;
    let labels = prepared
        .trajectories
        .iter()
        .map(|t| checkpoint.model.greedy_options(&t.states))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(checkpoint.config.seed, tags::PROBE, 0);
    option_sensitivity(&checkpoint.model, &prepared.trajectories, &labels, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
        let tv = distinct(truth);
        let pv = distinct(pred);
        // Enumerate injective maps pred -> truth ∪ {unmatched}.
        fn go(i: usize, pv: &[usize], tv: &[usize], used: &mut Vec<bool>, map: &mut Vec<Option<usize>>, t: &[usize], p: &[usize], best: &mut usize) {
            if i == pv.len() {
                let hits = t
                    .iter()
                    .zip(p)
                    .filter(|(x, y)| {
                        let idx = pv.binary_search(y).unwrap();
                        map[idx] == Some(**x)
                    })
                    .count();
                *best = (*best).max(hits);
                return;
            }
            map.push(None);
            go(i + 1, pv, tv, used, map, t, p, best);
            map.pop();
            for j in 0..tv.len() {
                if !used[j] {
                    used[j] = true;
                    map.push(Some(tv[j]));
                    go(i + 1, pv, tv, used, map, t, p, best);
                    map.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = 0;
        go(0, &pv, &tv, &mut vec![false; tv.len()], &mut Vec::new(), truth, pred, &mut best);
        best as f64 / truth.len() as f64
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(matched_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(matched_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(matched_accuracy(&[0, 0, 1, 1], &[1, 1, 1, 0]).unwrap(), 0.75);
        assert!(matched_accuracy(&[0], &[0, 1]).is_err());
        assert!(matched_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = crate::rng::seeded(3);
        for _ in 0..300 {
            let n = rng.gen_range(1..30);
            let kt = rng.gen_range(1..5);
            let kp = rng.gen_range(1..6);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kt)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kp) * 7).collect();
            let got = matched_accuracy(&truth, &pred).unwrap();
            assert!((got - brute_force_accuracy(&truth, &pred)).abs() < 1e-12, "{truth:?} {pred:?}");
        }
    }

    #[test]
    fn nmi_examples() {
        assert!((normalized_mutual_information(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!((normalized_mutual_information(&[0, 1, 0, 1], &[5, 3, 5, 3]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_mutual_information(&[2, 2, 2], &[0, 1, 0]).unwrap(), 0.0);
        assert!(normalized_mutual_information(&[0], &[0, 1]).is_err());
        let mut rng = crate::rng::seeded(9);
        let a: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
        let b: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
        assert!(normalized_mutual_information(&a, &b).unwrap() < 0.05);
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(boundaries(&[0, 0, 1, 1, 2, 0]), vec![2, 4, 5]);
        assert_eq!(boundary_f1(&[10, 20], &[10, 20], 0), 1.0);
        let c = match_boundaries(&[10, 20], &[11, 25], 1);
        assert_eq!((c.matched, c.predicted, c.actual), (1, 2, 2));
        assert!((c.f1() - 0.5).abs() < 1e-12);
        assert_eq!(boundary_f1(&[3], &[], 1), 0.0);
        assert_eq!(boundary_f1(&[], &[], 1), 1.0);
        assert_eq!(boundary_f1(&[], &[4], 1), 0.0);
        // One-to-one: two predictions cannot both claim one true boundary.
        let c = match_boundaries(&[5], &[4, 6], 1);
        assert_eq!(c.matched, 1);
    }

    #[test]
    fn report_pools_steps() {
        let items = vec![
            ("a".to_string(), vec![0, 0, 1, 1], vec![2, 2, 0, 0]),
            ("b".to_string(), vec![1, 1, 0, 0], vec![0, 0, 2, 2]),
        ];
        let r = SegmentationReport::compute(&items, 1).unwrap();
        assert_eq!(r.matched_accuracy, 1.0);
        assert_eq!(r.boundary_f1, 1.0);
        assert_eq!(r.num_steps, 8);
        assert_eq!(r.per_trajectory.len(), 2);
        assert!(SegmentationReport::compute(&[], 1).is_err());
    }

    struct Stub {
        k: usize,
        gain: f64,
    }

    impl OptionDynamics for Stub {
        fn num_options(&self) -> usize {
            self.k
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn predict(&self, state: &[f64], option: usize) -> Result<Vec<f64>> {
            Ok(vec![state[0] + 0.5 + self.gain * option as f64])
        }
    }

    fn stub_data() -> (Vec<Trajectory>, Vec<Vec<usize>>) {
        let traj = Trajectory {
            id: "s".into(),
            env_name: "primitive1d".into(),
            states: vec![vec![0.0], vec![0.6], vec![2.1], vec![2.7]],
            actions: vec![vec![0.0]; 3],
            true_labels: None,
        };
        (vec![traj], vec![vec![0, 1, 0]])
    }

    #[test]
    fn sensitivity_is_one_for_option_blind_dynamics() {
        let (trajs, labels) = stub_data();
        let stub = Stub { k: 3, gain: 0.0 };
        let r = option_sensitivity(&stub, &trajs, &labels, &mut crate::rng::seeded(0)).unwrap();
        assert_eq!(r, 1.0);
        let sensitive = Stub { k: 3, gain: 1.0 };
        let r = option_sensitivity(&sensitive, &trajs, &labels, &mut crate::rng::seeded(0)).unwrap();
        assert!(r > 1.0);
        assert!(option_sensitivity(&stub, &[], &[], &mut crate::rng::seeded(0)).is_err());
    }

    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn labels_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..40).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..5, n)))
    }

    proptest! {
        #[test]
        fn accuracy_invariant_under_relabeling((t, p) in labels_pair(), shift in 1usize..9) {
            let base = matched_accuracy(&t, &p).unwrap();
            let perm = |x: &usize| (x * 3 + shift) % 17;
            let p2: Vec<usize> = p.iter().map(perm).collect();
            let t2: Vec<usize> = t.iter().map(perm).collect();
            prop_assert!((matched_accuracy(&t, &p2).unwrap() - base).abs() < 1e-12);
            prop_assert!((matched_accuracy(&t2, &p).unwrap() - base).abs() < 1e-12);
            let identity = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
            prop_assert!(base + 1e-12 >= identity);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn nmi_symmetric_and_bounded((a, b) in labels_pair()) {
            let ab = normalized_mutual_information(&a, &b).unwrap();
            let ba = normalized_mutual_information(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn boundary_f1_perfect_on_identity(labels in prop::collection::vec(0usize..3, 1..50), tol in 0usize..4) {
            let b = boundaries(&labels);
            prop_assert_eq!(boundary_f1(&b, &b, tol), 1.0);
        }
    }
}

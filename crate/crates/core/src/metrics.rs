//! CLEAR-MOT and identity (IDF1) evaluation, detection AP and TPR@FAR.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::association::{solve_assignment, CostMatrix, INFEASIBLE};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Share of its span a trajectory must be tracked to count as mostly tracked.
pub const MOSTLY_TRACKED: f64 = 0.8;
/// Below this share a trajectory is mostly lost.
pub const MOSTLY_LOST: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub frame: u64,
    pub id: i64,
    pub bbox: BBox,
}

/// Tracking output or ground truth for one sequence, sorted by `(frame, id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceResult {
    rows: Vec<TrackRow>,
}

impl SequenceResult {
    pub fn new(mut rows: Vec<TrackRow>) -> Result<Self> {
        rows.sort_by_key(|r| (r.frame, r.id));
        if let Some(w) = rows.windows(2).find(|w| (w[0].frame, w[0].id) == (w[1].frame, w[1].id)) {
            return Err(Error::format(
                0,
                format!("duplicate (frame, id) = ({}, {})", w[0].frame, w[0].id),
            ));
        }
        for r in &rows {
            r.bbox.validate()?;
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[TrackRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn frames(&self) -> BTreeSet<u64> {
        self.rows.iter().map(|r| r.frame).collect()
    }

    pub fn frame_range(&self) -> Option<(u64, u64)> {
        Some((self.rows.first()?.frame, self.rows.last()?.frame))
    }

    /// Rows whose frame lies in `[lo, hi]`.
    pub fn restricted(&self, lo: u64, hi: u64) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .filter(|r| r.frame >= lo && r.frame <= hi)
                .copied()
                .collect(),
        }
    }

    /// Applies `f` to every id.
    pub fn relabeled(&self, f: impl Fn(i64) -> i64) -> Result<Self> {
        Self::new(self.rows.iter().map(|r| TrackRow { id: f(r.id), ..*r }).collect())
    }

    fn by_frame(&self) -> BTreeMap<u64, Vec<&TrackRow>> {
        let mut m: BTreeMap<u64, Vec<&TrackRow>> = BTreeMap::new();
        for r in &self.rows {
            m.entry(r.frame).or_default().push(r);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotReport {
    pub mota: f64,
    pub idf1: f64,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
    pub id_switches: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Total ground-truth boxes.
    pub num_gt: usize,
    pub num_trajectories: usize,
    pub fragmentations: usize,
}

impl MotReport {
    pub const COLUMNS: [&'static str; 7] = ["MOTA", "IDF1", "MT", "ML", "IDs", "FP", "FN"];

    pub fn header() -> String {
        Self::COLUMNS
            .iter()
            .map(|c| format!("{c:>8}"))
            .collect::<Vec<_>>()
            .join("")
    }

    pub fn row(&self) -> String {
        format!(
            "{:>8.3}{:>8.3}{:>8}{:>8}{:>8}{:>8}{:>8}",
            self.mota,
            self.idf1,
            self.mostly_tracked,
            self.mostly_lost,
            self.id_switches,
            self.false_positives,
            self.false_negatives
        )
    }

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{},{}",
            self.mota,
            self.idf1,
            self.mostly_tracked,
            self.mostly_lost,
            self.id_switches,
            self.false_positives,
            self.false_negatives
        )
    }
}

pub(crate) fn mota(fn_: usize, fp: usize, ids: usize, num_gt: usize) -> f64 {
    let errors = (fn_ + fp + ids) as f64;
    if num_gt == 0 {
        // with no ground truth, any false positive is unboundedly bad
        if errors == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - errors / num_gt as f64
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(format!("IOU threshold must lie in (0, 1], got {t}")));
    }
    Ok(())
}

/// CLEAR-MOT evaluation. IDF1 is filled in from [`evaluate_identity`].
pub fn evaluate_clear(gt: &SequenceResult, hyp: &SequenceResult, iou_threshold: f64) -> Result<MotReport> {
    check_threshold(iou_threshold)?;
    let gt_frames = gt.by_frame();
    let hyp_frames = hyp.by_frame();
    let frames: BTreeSet<u64> = gt_frames.keys().chain(hyp_frames.keys()).copied().collect();

    let mut prev_matches: HashMap<i64, i64> = HashMap::new();
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    // per gt id: tracked flag for each frame it appears in, in frame order
    let mut coverage: BTreeMap<i64, Vec<bool>> = BTreeMap::new();
    let (mut fp, mut fn_, mut ids, mut num_gt) = (0usize, 0usize, 0usize, 0usize);
    let empty = Vec::new();

    for f in frames {
        let gts = gt_frames.get(&f).unwrap_or(&empty);
        let hyps = hyp_frames.get(&f).unwrap_or(&empty);
        num_gt += gts.len();

        let mut matches: Vec<(usize, usize)> = Vec::new();
        let mut gt_taken = vec![false; gts.len()];
        let mut hyp_taken = vec![false; hyps.len()];

        for (gi, g) in gts.iter().enumerate() {
            let Some(&hid) = prev_matches.get(&g.id) else { continue };
            if let Some(hi) = hyps.iter().position(|h| h.id == hid) {
                if iou_unchecked(&g.bbox, &hyps[hi].bbox) >= iou_threshold {
                    matches.push((gi, hi));
                    gt_taken[gi] = true;
                    hyp_taken[hi] = true;
                }
            }
        }

        let free_g: Vec<usize> = (0..gts.len()).filter(|&i| !gt_taken[i]).collect();
        let free_h: Vec<usize> = (0..hyps.len()).filter(|&i| !hyp_taken[i]).collect();
        if !free_g.is_empty() && !free_h.is_empty() {
            let mut data = Vec::with_capacity(free_g.len() * free_h.len());
            for &gi in &free_g {
                for &hi in &free_h {
                    let v = iou_unchecked(&gts[gi].bbox, &hyps[hi].bbox);
                    data.push(if v >= iou_threshold { 1.0 - v } else { INFEASIBLE });
                }
            }
            let c = CostMatrix::new(free_g.len(), free_h.len(), data)?;
            for (r, col) in solve_assignment(&c, f64::INFINITY).matches {
                matches.push((free_g[r], free_h[col]));
            }
        }

        prev_matches.clear();
        let mut matched_gt = vec![false; gts.len()];
        for &(gi, hi) in &matches {
            let (gid, hid) = (gts[gi].id, hyps[hi].id);
            if let Some(&before) = last_match.get(&gid) {
                if before != hid {
                    ids += 1;
                }
            }
            last_match.insert(gid, hid);
            prev_matches.insert(gid, hid);
            matched_gt[gi] = true;
        }
        for (gi, g) in gts.iter().enumerate() {
            coverage.entry(g.id).or_default().push(matched_gt[gi]);
        }
        fp += hyps.len() - matches.len();
        fn_ += gts.len() - matches.len();
    }

    let (mut mt, mut ml, mut frag) = (0usize, 0usize, 0usize);
    for tracked in coverage.values() {
        let ratio = tracked.iter().filter(|&&t| t).count() as f64 / tracked.len() as f64;
        if ratio >= MOSTLY_TRACKED {
            mt += 1;
        } else if ratio < MOSTLY_LOST {
            ml += 1;
        }
        let runs = tracked.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(tracked[0]);
        frag += runs.saturating_sub(1);
    }

    Ok(MotReport {
        mota: mota(fn_, fp, ids, num_gt),
        idf1: evaluate_identity(gt, hyp, iou_threshold)?.idf1,
        mostly_tracked: mt,
        mostly_lost: ml,
        id_switches: ids,
        false_positives: fp,
        false_negatives: fn_,
        num_gt,
        num_trajectories: coverage.len(),
        fragmentations: frag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Global identity measures: one-to-one matching of gt ids to hypothesis
/// ids maximizing the number of frames where the matched pair overlaps.
pub fn evaluate_identity(gt: &SequenceResult, hyp: &SequenceResult, iou_threshold: f64) -> Result<IdentityReport> {
    check_threshold(iou_threshold)?;
    let gt_ids: Vec<i64> = gt
        .rows
        .iter()
        .map(|r| r.id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let hyp_ids: Vec<i64> = hyp
        .rows
        .iter()
        .map(|r| r.id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let gt_index: HashMap<i64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let hyp_index: HashMap<i64, usize> = hyp_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut overlap = vec![0u64; gt_ids.len() * hyp_ids.len()];
    let hyp_frames = hyp.by_frame();
    for (f, gts) in gt.by_frame() {
        let Some(hyps) = hyp_frames.get(&f) else { continue };
        for g in &gts {
            for h in hyps {
                if iou_unchecked(&g.bbox, &h.bbox) >= iou_threshold {
                    overlap[gt_index[&g.id] * hyp_ids.len() + hyp_index[&h.id]] += 1;
                }
            }
        }
    }

    let idtp = if gt_ids.is_empty() || hyp_ids.is_empty() {
        0
    } else {
        let max = *overlap.iter().max().unwrap_or(&0) as f64;
        let c = CostMatrix::new(
            gt_ids.len(),
            hyp_ids.len(),
            overlap.iter().map(|&o| max - o as f64).collect(),
        )?;
        solve_assignment(&c, f64::INFINITY)
            .matches
            .iter()
            .map(|&(g, h)| overlap[g * hyp_ids.len() + h] as usize)
            .sum()
    };

    let n_gt = gt.rows.len();
    let n_hyp = hyp.rows.len();
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(IdentityReport {
        idf1: ratio(2 * idtp, n_gt + n_hyp),
        idp: ratio(idtp, n_hyp),
        idr: ratio(idtp, n_gt),
        idtp,
        idfp: n_hyp - idtp,
        idfn: n_gt - idtp,
    })
}

pub fn evaluate_idf1(gt: &SequenceResult, hyp: &SequenceResult, iou_threshold: f64) -> Result<f64> {
    Ok(evaluate_identity(gt, hyp, iou_threshold)?.idf1)
}

/// True-positive rate at a false-accept rate.
///
/// A pair is accepted when its score is at least the threshold. The
/// threshold is the lowest impostor score whose acceptance share stays
/// within `far`; if none qualifies, only genuine scores strictly above
/// every impostor are accepted.
pub fn tpr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::domain("genuine and impostor score lists must be nonempty"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::domain(format!("far must lie in (0, 1), got {far}")));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::domain("scores must not be NaN"));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    let n = imp.len() as f64;
    let mut threshold: Option<f64> = None;
    let mut i = 0;
    while i < imp.len() {
        let s = imp[i];
        while i < imp.len() && imp[i] == s {
            i += 1;
        }
        if i as f64 / n <= far {
            threshold = Some(s);
        } else {
            break;
        }
    }
    let accepted = match threshold {
        Some(t) => genuine.iter().filter(|&&g| g >= t).count(),
        None => genuine.iter().filter(|&&g| g > imp[0]).count(),
    };
    Ok(accepted as f64 / genuine.len() as f64)
}

/// Cosine similarities of every labelled pair, split into same-label
/// (genuine) and different-label (impostor) scores. Negative labels are
/// unlabelled and skipped.
pub fn pair_scores(embeddings: &[Vec<f64>], labels: &[i64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.len() != labels.len() {
        return Err(Error::domain("one label per embedding required"));
    }
    let norms: Vec<f64> = embeddings
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::domain("embedding has zero norm"));
    }
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..embeddings.len() {
        if labels[i] < 0 {
            continue;
        }
        for j in i + 1..embeddings.len() {
            if labels[j] < 0 {
                continue;
            }
            let dot: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a * b).sum();
            let s = dot / (norms[i] * norms[j]);
            if labels[i] == labels[j] {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    Ok((genuine, impostor))
}

/// Detection AP with greedy score-ordered matching and all-point
/// interpolation of the precision/recall curve.
pub fn average_precision(scored: &[(BBox, f64)], gts: &[BBox], iou_threshold: f64) -> Result<f64> {
    check_threshold(iou_threshold)?;
    for (b, s) in scored {
        b.validate()?;
        if !s.is_finite() {
            return Err(Error::domain("detection scores must be finite"));
        }
    }
    for g in gts {
        g.validate()?;
    }
    if gts.is_empty() || scored.is_empty() {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    // stable on ties: earlier detections first
    order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1));

    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (k, &d) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou_unchecked(&scored[d].0, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }

    // precision envelope from the right, then integrate over recall steps
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (recall, _) = curve[i];
        if recall > prev_recall {
            let p = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * p;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Distinct ids present in a sequence.
pub fn id_set(seq: &SequenceResult) -> HashSet<i64> {
    seq.rows.iter().map(|r| r.id).collect()
}

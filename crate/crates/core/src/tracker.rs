//! Online tracklet engine.
//!
//! Every frame runs a single association pass between the whole pool
//! (tentative, active and recently lost tracklets) and the detections. Lost
//! tracklets stay in the pool until they have gone `max_lost_frames` frames
//! without an update, so short occlusions are bridged without a separate
//! matching cascade.

use std::time::{Duration, Instant};

use crate::association::{
    appearance_cost, fuse_costs, motion_cost, solve_assignment, CostMatrix, DEFAULT_LAMBDA, DEFAULT_MAX_COST,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kalman::{KalmanFilter, Measurement, MotionState, CHI2_95_4DOF};
use crate::metrics::{SequenceResult, TrackRow};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    /// Unit-normalized appearance embedding.
    pub embedding: Option<Vec<f64>>,
}

impl Detection {
    /// Validates the box and normalizes the embedding to unit length.
    pub fn new(bbox: BBox, confidence: f64, embedding: Option<Vec<f64>>) -> Result<Self> {
        bbox.validate()?;
        let embedding = embedding.map(normalized).transpose()?;
        Ok(Self {
            bbox,
            confidence,
            embedding,
        })
    }
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::domain("embedding has zero or non-finite norm"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackStatus {
    Tentative,
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone)]
pub struct Tracklet {
    pub id: u64,
    pub motion: MotionState,
    pub appearance: Option<Vec<f64>>,
    pub status: TrackStatus,
    pub frames_since_update: u32,
    pub consecutive_hits: u32,
    pub history: Vec<(u64, BBox)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Weight of the appearance cost; `0` is pure motion.
    pub lambda: f64,
    /// Appearance momentum.
    pub alpha_ema: f64,
    pub confirm_frames: u32,
    pub max_lost_frames: u32,
    /// Squared-Mahalanobis gate.
    pub gate: f64,
    pub max_cost: f64,
    pub min_confidence: f64,
    /// Ignore embeddings entirely and force `lambda = 0`.
    pub motion_only: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            alpha_ema: 0.9,
            confirm_frames: 2,
            max_lost_frames: 30,
            gate: CHI2_95_4DOF,
            max_cost: DEFAULT_MAX_COST,
            min_confidence: 0.5,
            motion_only: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::domain(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha_ema) {
            return Err(Error::domain(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha_ema
            )));
        }
        if self.confirm_frames < 1 {
            return Err(Error::domain("confirm_frames must be at least 1"));
        }
        if !(self.gate > 0.0) {
            return Err(Error::domain(format!("gate must be positive, got {}", self.gate)));
        }
        if self.max_cost.is_nan() || self.max_cost < 0.0 {
            return Err(Error::domain(format!("max_cost must be >= 0, got {}", self.max_cost)));
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.motion_only {
            0.0
        } else {
            self.lambda
        }
    }

    fn uses_appearance(&self) -> bool {
        self.effective_lambda() > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaUpdate {
    pub vector: Vec<f64>,
    /// The blend cancelled to zero and `vector` is the previous state.
    pub degenerate: bool,
}

/// `alpha * e_prev + (1 - alpha) * f`, renormalized to unit length.
pub fn ema_update(e_prev: &[f64], f: &[f64], alpha: f64) -> EmaUpdate {
    let blended: Vec<f64> = e_prev
        .iter()
        .zip(f)
        .map(|(e, x)| alpha * e + (1.0 - alpha) * x)
        .collect();
    match normalized(blended) {
        Ok(vector) => EmaUpdate {
            vector,
            degenerate: false,
        },
        Err(_) => EmaUpdate {
            vector: e_prev.to_vec(),
            degenerate: true,
        },
    }
}

/// Wall time spent in each phase of [`Tracker::step`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub predict: Duration,
    pub cost: Duration,
    pub assign: Duration,
    pub update: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.predict + self.cost + self.assign + self.update
    }

    pub fn accumulate(&mut self, o: &StageTimings) {
        self.predict += o.predict;
        self.cost += o.cost;
        self.assign += o.assign;
        self.update += o.update;
    }
}

#[derive(Debug)]
pub struct Tracker {
    config: TrackerConfig,
    kf: KalmanFilter,
    pool: Vec<Tracklet>,
    next_id: u64,
    last_frame: Option<u64>,
    last_timings: StageTimings,
    backfill: Vec<TrackRow>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        Self::with_filter(config, KalmanFilter::default())
    }

    pub fn with_filter(config: TrackerConfig, kf: KalmanFilter) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            kf,
            pool: Vec::new(),
            next_id: 1,
            last_frame: None,
            last_timings: StageTimings::default(),
            backfill: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Tracklets still in the pool. Removed ones are dropped immediately.
    pub fn tracklets(&self) -> &[Tracklet] {
        &self.pool
    }

    pub fn last_timings(&self) -> StageTimings {
        self.last_timings
    }

    /// Rows from frames before a tracklet's confirmation, emitted once it is
    /// confirmed. Drained by the caller.
    pub fn drain_backfill(&mut self) -> Vec<TrackRow> {
        std::mem::take(&mut self.backfill)
    }

    /// Processes one frame and returns `(id, box)` for every active tracklet.
    pub fn step(&mut self, frame: u64, dets: &[Detection]) -> Result<Vec<(u64, BBox)>> {
        if let Some(prev) = self.last_frame {
            if frame <= prev {
                return Err(Error::Usage(format!(
                    "frame index must increase strictly: got {frame} after {prev}"
                )));
            }
        }
        let use_appearance = self.config.uses_appearance();
        let dets: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.confidence >= self.config.min_confidence)
            .collect();
        if use_appearance && dets.iter().any(|d| d.embedding.is_none()) {
            return Err(Error::Usage(
                "appearance cost enabled but a detection has no embedding".into(),
            ));
        }
        let measurements = dets
            .iter()
            .map(|d| Measurement::from_box(&d.bbox))
            .collect::<Result<Vec<_>>>()?;
        self.last_frame = Some(frame);

        let mut timings = StageTimings::default();

        let t0 = Instant::now();
        self.kf
            .predict_batch_in_place(self.pool.iter_mut().map(|t| &mut t.motion));
        timings.predict = t0.elapsed();

        let t1 = Instant::now();
        let cost = if self.pool.is_empty() || dets.is_empty() {
            CostMatrix::filled(self.pool.len(), dets.len(), 0.0)
        } else {
            let states: Vec<MotionState> = self.pool.iter().map(|t| t.motion.clone()).collect();
            let gating = self.kf.gating_distance_batch(&states, &measurements)?;
            let a_m = motion_cost(&gating, self.config.gate)?;
            let a_e = if use_appearance {
                let tracks: Vec<&[f64]> = self
                    .pool
                    .iter()
                    .map(|t| t.appearance.as_deref().unwrap_or(&[]))
                    .collect();
                let embs: Vec<&[f64]> = dets.iter().map(|d| d.embedding.as_deref().unwrap_or(&[])).collect();
                appearance_cost(&tracks, &embs)?
            } else {
                CostMatrix::filled(self.pool.len(), dets.len(), 0.0)
            };
            fuse_costs(&a_e, &a_m, self.config.effective_lambda())?
        };
        timings.cost = t1.elapsed();

        let t2 = Instant::now();
        let assignment = solve_assignment(&cost, self.config.max_cost);
        timings.assign = t2.elapsed();

        let t3 = Instant::now();
        let alpha = self.config.alpha_ema;
        for &(ti, di) in &assignment.matches {
            let det = dets[di];
            let track = &mut self.pool[ti];
            track.motion = self.kf.update(&track.motion, &measurements[di])?;
            if use_appearance {
                if let (Some(prev), Some(f)) = (&track.appearance, &det.embedding) {
                    track.appearance = Some(ema_update(prev, f, alpha).vector);
                }
            }
            track.frames_since_update = 0;
            track.consecutive_hits += 1;
            track.history.push((frame, track.motion.to_box()));
            match track.status {
                TrackStatus::Tentative if track.consecutive_hits >= self.config.confirm_frames => {
                    track.status = TrackStatus::Active;
                    let id = track.id as i64;
                    let earlier = &track.history[..track.history.len() - 1];
                    self.backfill
                        .extend(earlier.iter().map(|&(f, b)| TrackRow { frame: f, id, bbox: b }));
                }
                TrackStatus::Lost => track.status = TrackStatus::Active,
                _ => {}
            }
        }

        for &ti in &assignment.unmatched_rows {
            let track = &mut self.pool[ti];
            track.frames_since_update += 1;
            track.consecutive_hits = 0;
            track.status = match track.status {
                TrackStatus::Tentative => TrackStatus::Removed,
                _ if track.frames_since_update > self.config.max_lost_frames => TrackStatus::Removed,
                _ => TrackStatus::Lost,
            };
        }
        self.pool.retain(|t| t.status != TrackStatus::Removed);

        for &di in &assignment.unmatched_cols {
            let det = dets[di];
            let motion = self.kf.initiate(&measurements[di])?;
            let status = if self.config.confirm_frames <= 1 {
                TrackStatus::Active
            } else {
                TrackStatus::Tentative
            };
            let bbox = motion.to_box();
            self.pool.push(Tracklet {
                id: self.next_id,
                motion,
                appearance: if use_appearance { det.embedding.clone() } else { None },
                status,
                frames_since_update: 0,
                consecutive_hits: 1,
                history: vec![(frame, bbox)],
            });
            self.next_id += 1;
        }
        timings.update = t3.elapsed();
        self.last_timings = timings;

        let mut out: Vec<(u64, BBox)> = self
            .pool
            .iter()
            .filter(|t| t.status == TrackStatus::Active)
            .map(|t| (t.id, t.motion.to_box()))
            .collect();
        out.sort_by_key(|o| o.0);
        Ok(out)
    }
}

/// Runs a tracker over a whole sequence. Frame `k` of `frames` is frame
/// index `k + 1`. Rows of tracklets confirmed after a few tentative frames
/// include those earlier frames.
pub fn tracker_run(config: TrackerConfig, frames: &[Vec<Detection>]) -> Result<SequenceResult> {
    let mut tracker = Tracker::new(config)?;
    let mut rows = Vec::new();
    for (k, dets) in frames.iter().enumerate() {
        let frame = k as u64 + 1;
        let out = tracker.step(frame, dets)?;
        rows.extend(tracker.drain_backfill());
        rows.extend(out.into_iter().map(|(id, bbox)| TrackRow {
            frame,
            id: id as i64,
            bbox,
        }));
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    SequenceResult::new(rows)
}

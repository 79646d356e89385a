//! Deterministic synthetic scenarios and the brute-force assignment oracle.
//!
//! # Randomness
//!
//! All draws come from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Each concern reads its own stream, selected with
//! `set_stream`:
//!
//! | stream | use |
//! |-------:|-----|
//! | 0 | target sizes, start positions and velocities |
//! | 1 | identity mean embeddings, then the background mean |
//! | 2 | per-detection drop decision and box jitter |
//! | 3 | per-detection embedding noise |
//! | 4 | false positives |
//!
//! A uniform in `[0, 1)` is `(next_u64 >> 11) * 2^-53`. A standard normal is
//! Box-Muller on two uniforms `u1, u2`: `sqrt(-2 ln(1 - u1)) cos(2 pi u2)`.
//! Poisson counts use Knuth's multiplication method.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::association::{Assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::{SequenceResult, TrackRow};
use crate::tracker::Detection;

/// Largest `min(rows, cols)` the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

const STREAM_TARGETS: u64 = 0;
const STREAM_IDENTITIES: u64 = 1;
const STREAM_OBSERVATION: u64 = 2;
const STREAM_EMBED_NOISE: u64 = 3;
const STREAM_FALSE_POSITIVES: u64 = 4;

/// Width-to-height ratio of synthetic boxes.
const BOX_ASPECT: f64 = 0.4;

pub struct SimRng(ChaCha8Rng);

impl SimRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn poisson(&mut self, mean: f64) -> usize {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }

    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            if let Some(u) = unit(v) {
                return u;
            }
        }
    }
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        Some(v)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionPattern {
    /// Random headings with reflection at the arena border.
    Random,
    /// Targets in pairs on shared lanes, moving toward each other and
    /// crossing halfway through the sequence.
    Crossing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_frames: usize,
    pub n_targets: usize,
    pub arena_width: f64,
    pub arena_height: f64,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub p_miss: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
    pub box_jitter_std: f64,
    pub embed_dim: usize,
    pub embed_noise_std: f64,
    pub background_noise_std: f64,
    pub motion: MotionPattern,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_frames: 100,
            n_targets: 5,
            arena_width: 1920.0,
            arena_height: 1080.0,
            min_speed: 1.0,
            max_speed: 6.0,
            min_height: 80.0,
            max_height: 200.0,
            p_miss: 0.0,
            fp_rate: 0.0,
            box_jitter_std: 0.0,
            embed_dim: 128,
            embed_noise_std: 0.0,
            background_noise_std: 0.1,
            motion: MotionPattern::Random,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn noiseless(n_frames: usize, n_targets: usize, seed: u64) -> Self {
        Self {
            n_frames,
            n_targets,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_miss) {
            return Err(Error::domain(format!("p_miss must lie in [0, 1), got {}", self.p_miss)));
        }
        if !(self.fp_rate >= 0.0) || !(self.box_jitter_std >= 0.0) || !(self.embed_noise_std >= 0.0) {
            return Err(Error::domain("rates and noise levels must be non-negative"));
        }
        if !(0.0 < self.min_height && self.min_height <= self.max_height) {
            return Err(Error::domain("need 0 < min_height <= max_height"));
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return Err(Error::domain("need 0 <= min_speed <= max_speed"));
        }
        if self.arena_height <= self.max_height
            || self.arena_width <= self.max_height * BOX_ASPECT + 2.0 * self.max_speed
        {
            return Err(Error::domain("arena too small for the largest box"));
        }
        if self.embed_dim == 0 {
            return Err(Error::domain("embed_dim must be positive"));
        }
        if self.motion == MotionPattern::Crossing && !self.n_targets.is_multiple_of(2) {
            return Err(Error::domain("crossing scenarios need an even number of targets"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub gt: SequenceResult,
    /// Detections of frame `k + 1`, true detections first in target order,
    /// then false positives.
    pub frames: Vec<Vec<Detection>>,
    /// Ground-truth id behind every detection, `None` for false positives.
    pub sources: Vec<Vec<Option<i64>>>,
}

impl Scenario {
    pub fn detection_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn true_detection_count(&self) -> usize {
        self.sources.iter().flatten().filter(|s| s.is_some()).count()
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, extent: f64, limit: f64) {
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    }
    if *pos + extent > limit {
        *pos = 2.0 * (limit - extent) - *pos;
        *vel = -*vel;
    }
}

fn random_paths(cfg: &ScenarioConfig, rng: &mut SimRng) -> Vec<Vec<BBox>> {
    (0..cfg.n_targets)
        .map(|_| {
            let h = rng.range(cfg.min_height, cfg.max_height);
            let w = h * BOX_ASPECT;
            let mut x = rng.range(0.0, cfg.arena_width - w);
            let mut y = rng.range(0.0, cfg.arena_height - h);
            let speed = rng.range(cfg.min_speed, cfg.max_speed);
            let heading = rng.range(0.0, 2.0 * std::f64::consts::PI);
            let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
            let mut path = Vec::with_capacity(cfg.n_frames);
            for _ in 0..cfg.n_frames {
                path.push(BBox::new(x, y, w, h));
                x += vx;
                y += vy;
                reflect(&mut x, &mut vx, w, cfg.arena_width);
                reflect(&mut y, &mut vy, h, cfg.arena_height);
            }
            path
        })
        .collect()
}

fn crossing_paths(cfg: &ScenarioConfig, rng: &mut SimRng) -> Vec<Vec<BBox>> {
    let pairs = cfg.n_targets / 2;
    let mid = (cfg.n_frames as f64 - 1.0) / 2.0;
    let mut paths = Vec::with_capacity(cfg.n_targets);
    for p in 0..pairs {
        let h = rng.range(cfg.min_height, cfg.max_height);
        let w = h * BOX_ASPECT;
        let speed = rng.range(cfg.min_speed, cfg.max_speed);
        let lane_y = cfg.arena_height * (p as f64 + 1.0) / (pairs as f64 + 1.0) - h / 2.0;
        let meet_x = rng.range(0.3, 0.7) * cfg.arena_width - w / 2.0;
        // a small vertical drift in opposite directions turns the lane into an X
        let drift = 0.15 * speed;
        for dir in [1.0, -1.0] {
            let path = (0..cfg.n_frames)
                .map(|k| {
                    let t = k as f64 - mid;
                    let x = (meet_x + dir * speed * t).clamp(0.0, cfg.arena_width - w);
                    let y = (lane_y + dir * drift * t).clamp(0.0, cfg.arena_height - h);
                    BBox::new(x, y, w, h)
                })
                .collect();
            paths.push(path);
        }
    }
    paths
}

/// Generates ground truth and corrupted detections for `cfg`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut targets = SimRng::new(cfg.seed, STREAM_TARGETS);
    let paths = match cfg.motion {
        MotionPattern::Random => random_paths(cfg, &mut targets),
        MotionPattern::Crossing => crossing_paths(cfg, &mut targets),
    };

    let mut identities = SimRng::new(cfg.seed, STREAM_IDENTITIES);
    let means: Vec<Vec<f64>> = (0..cfg.n_targets)
        .map(|_| identities.unit_vector(cfg.embed_dim))
        .collect();
    let background = identities.unit_vector(cfg.embed_dim);

    let mut observe = SimRng::new(cfg.seed, STREAM_OBSERVATION);
    let mut embed_noise = SimRng::new(cfg.seed, STREAM_EMBED_NOISE);
    let mut fps = SimRng::new(cfg.seed, STREAM_FALSE_POSITIVES);

    let noisy_embedding = |mean: &[f64], std: f64, rng: &mut SimRng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = mean.iter().map(|m| m + std * rng.normal()).collect();
            if let Some(u) = unit(v) {
                return u;
            }
        }
    };

    let mut gt_rows = Vec::with_capacity(cfg.n_frames * cfg.n_targets);
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut sources = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let frame = k as u64 + 1;
        let mut dets = Vec::new();
        let mut src = Vec::new();
        for (t, path) in paths.iter().enumerate() {
            let id = t as i64 + 1;
            let b = path[k];
            gt_rows.push(TrackRow { frame, id, bbox: b });

            let dropped = observe.uniform() < cfg.p_miss;
            let jitter: [f64; 4] = std::array::from_fn(|_| observe.normal() * cfg.box_jitter_std);
            let confidence = observe.range(0.7, 1.0);
            let embedding = noisy_embedding(&means[t], cfg.embed_noise_std, &mut embed_noise);
            if dropped {
                continue;
            }
            let det_box = if cfg.box_jitter_std == 0.0 {
                b
            } else {
                BBox::new(
                    b.x + jitter[0],
                    b.y + jitter[1],
                    (b.w + jitter[2]).max(1.0),
                    (b.h + jitter[3]).max(1.0),
                )
            };
            dets.push(Detection::new(det_box, confidence, Some(embedding))?);
            src.push(Some(id));
        }
        for _ in 0..fps.poisson(cfg.fp_rate) {
            let h = fps.range(cfg.min_height, cfg.max_height);
            let w = h * BOX_ASPECT;
            let b = BBox::new(
                fps.range(0.0, cfg.arena_width - w),
                fps.range(0.0, cfg.arena_height - h),
                w,
                h,
            );
            let confidence = fps.range(0.5, 1.0);
            let embedding = noisy_embedding(&background, cfg.background_noise_std, &mut fps);
            dets.push(Detection::new(b, confidence, Some(embedding))?);
            src.push(None);
        }
        frames.push(dets);
        sources.push(src);
    }

    Ok(Scenario {
        gt: SequenceResult::new(gt_rows)?,
        frames,
        sources,
    })
}

/// Exhaustive assignment oracle with the same objective as
/// [`solve_assignment`](crate::association::solve_assignment): most
/// feasible matches, then least total cost, then the lexicographically
/// smallest match list.
pub fn brute_force_assignment(c: &CostMatrix, max_cost: f64) -> Result<Assignment> {
    let (rows, cols) = c.shape();
    let small = rows.min(cols);
    if small > BRUTE_FORCE_LIMIT {
        return Err(Error::Usage(format!(
            "brute force limited to min(rows, cols) <= {BRUTE_FORCE_LIMIT}, got {small}"
        )));
    }
    let transposed = rows > cols;
    let large = rows.max(cols);
    let pair = |s: usize, l: usize| if transposed { (l, s) } else { (s, l) };
    let feasible = |r: usize, col: usize| {
        let v = c.get(r, col);
        v.is_finite() && v <= max_cost
    };

    /// Match count, total cost and the matches themselves.
    type Candidate = (usize, f64, Vec<(usize, usize)>);

    struct Search<'a> {
        best: Option<Candidate>,
        used: Vec<bool>,
        chosen: Vec<usize>,
        c: &'a CostMatrix,
    }

    fn recurse(
        s: &mut Search<'_>,
        depth: usize,
        small: usize,
        large: usize,
        pair: &dyn Fn(usize, usize) -> (usize, usize),
        feasible: &dyn Fn(usize, usize) -> bool,
    ) {
        if depth == small {
            let mut matches: Vec<(usize, usize)> = s
                .chosen
                .iter()
                .enumerate()
                .map(|(si, &li)| pair(si, li))
                .filter(|&(r, col)| feasible(r, col))
                .collect();
            matches.sort_unstable();
            let count = matches.len();
            let cost: f64 = matches.iter().map(|&(r, col)| s.c.get(r, col)).sum();
            let better = match &s.best {
                None => true,
                Some((bc, bcost, bm)) => {
                    count > *bc || (count == *bc && (cost < *bcost || (cost == *bcost && matches < *bm)))
                }
            };
            if better {
                s.best = Some((count, cost, matches));
            }
            return;
        }
        for l in 0..large {
            if s.used[l] {
                continue;
            }
            s.used[l] = true;
            s.chosen.push(l);
            recurse(s, depth + 1, small, large, pair, feasible);
            s.chosen.pop();
            s.used[l] = false;
        }
    }

    let mut search = Search {
        best: None,
        used: vec![false; large],
        chosen: Vec::with_capacity(small),
        c,
    };
    recurse(&mut search, 0, small, large, &pair, &feasible);
    let matches = search.best.map(|b| b.2).unwrap_or_default();
    Ok(Assignment::from_matches(rows, cols, matches))
}

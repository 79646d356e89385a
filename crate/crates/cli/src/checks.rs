//! `losses-check`: random-batch comparisons between the triplet loss, its
//! smooth bound and the softmax rewrite, plus finite-difference gradients.

use anyhow::{bail, Result};

use trackkit_core::losses::{softmax_form_loss, triplet_loss, upper_bound_loss, EmbeddingBatch, EmbeddingLoss};
use trackkit_core::simulate::SimRng;

const IDENTITY_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_batch(rng: &mut SimRng) -> EmbeddingBatch {
    let d = 2 + (rng.uniform() * 31.0) as usize;
    let np = 1 + (rng.uniform() * 4.0) as usize;
    let nn = 1 + (rng.uniform() * 8.0) as usize;
    let anchor = rng.unit_vector(d);
    let positives = (0..np).map(|_| rng.unit_vector(d)).collect();
    let negatives = (0..nn).map(|_| rng.unit_vector(d)).collect();
    EmbeddingBatch::new(anchor, positives, negatives).expect("nonempty batch")
}

/// Margins `f.n_i - f.p` against the hardest positive.
fn margins(b: &EmbeddingBatch) -> Vec<f64> {
    let p = b
        .positives
        .iter()
        .map(|p| dot(&b.anchor, p))
        .fold(f64::INFINITY, f64::min);
    b.negatives.iter().map(|n| dot(&b.anchor, n) - p).collect()
}

fn near_kink(b: &EmbeddingBatch) -> bool {
    let mut pos: Vec<f64> = b.positives.iter().map(|p| dot(&b.anchor, p)).collect();
    pos.sort_by(f64::total_cmp);
    (pos.len() > 1 && pos[1] - pos[0] < 1e-3) || margins(b).iter().any(|m| m.abs() < 1e-3)
}

fn flat_grad(l: &EmbeddingLoss) -> Vec<f64> {
    l.grad_anchor
        .iter()
        .chain(l.grad_positives.iter().flatten())
        .chain(l.grad_negatives.iter().flatten())
        .copied()
        .collect()
}

fn rebuilt(x: &[f64], like: &EmbeddingBatch) -> EmbeddingBatch {
    let d = like.anchor.len();
    let mut it = x.chunks(d).map(<[f64]>::to_vec);
    let anchor = it.next().expect("anchor");
    let positives = it.by_ref().take(like.positives.len()).collect();
    let negatives = it.collect();
    EmbeddingBatch::new(anchor, positives, negatives).expect("same shape")
}

fn gradient_error(
    b: &EmbeddingBatch,
    loss: fn(&EmbeddingBatch) -> trackkit_core::Result<EmbeddingLoss>,
) -> Result<f64> {
    let analytic = flat_grad(&loss(b)?);
    let x: Vec<f64> = b
        .anchor
        .iter()
        .chain(b.positives.iter().flatten())
        .chain(b.negatives.iter().flatten())
        .copied()
        .collect();
    let mut y = x.clone();
    let mut diff = 0.0;
    let mut scale_a = 0.0;
    let mut scale_n = 0.0;
    for i in 0..x.len() {
        y[i] = x[i] + FD_STEP;
        let up = loss(&rebuilt(&y, b))?.value;
        y[i] = x[i] - FD_STEP;
        let down = loss(&rebuilt(&y, b))?.value;
        y[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        diff += (analytic[i] - numeric).powi(2);
        scale_a += analytic[i].powi(2);
        scale_n += numeric * numeric;
    }
    let scale = f64::sqrt(f64::max(scale_a, scale_n));
    Ok(if scale < 1e-10 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    })
}

pub fn losses_check(batches: usize, grad_points: usize, seed: u64) -> Result<()> {
    let mut rng = SimRng::new(seed, 0);
    let mut sum_violations = 0usize;
    let mut worst_sum_gap = 0f64;
    let mut hardest_violations = 0usize;
    let mut worst_identity = 0f64;
    for _ in 0..batches {
        let b = random_batch(&mut rng);
        let t = triplet_loss(&b)?.value;
        let u = upper_bound_loss(&b)?.value;
        let s = softmax_form_loss(&b)?;
        if u < t {
            sum_violations += 1;
            worst_sum_gap = worst_sum_gap.max(t - u);
        }
        let hardest = margins(&b).into_iter().fold(0.0, f64::max);
        if u < hardest {
            hardest_violations += 1;
        }
        worst_identity = worst_identity.max((u - s).abs());
    }

    let mut worst_grad = [0f64; 2];
    let mut checked = 0;
    while checked < grad_points {
        let b = random_batch(&mut rng);
        if near_kink(&b) {
            continue;
        }
        checked += 1;
        worst_grad[0] = worst_grad[0].max(gradient_error(&b, triplet_loss)?);
        worst_grad[1] = worst_grad[1].max(gradient_error(&b, upper_bound_loss)?);
    }

    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "ordering     upper_bound >= summed triplet: {sum_violations}/{batches} violations (largest gap {worst_sum_gap:.4})"
    );
    println!(
        "ordering     upper_bound >= hardest-negative hinge: {hardest_violations}/{batches} violations [{}]",
        mark(hardest_violations == 0)
    );
    println!(
        "equivalence  |upper_bound - softmax_form| max {worst_identity:.2e} (tol {IDENTITY_TOL:.0e}) [{}]",
        mark(worst_identity < IDENTITY_TOL)
    );
    println!(
        "gradients    triplet {:.1e}, upper_bound {:.1e} over {grad_points} points (tol {GRAD_TOL:.0e}) [{}]",
        worst_grad[0],
        worst_grad[1],
        mark(worst_grad.iter().all(|g| *g < GRAD_TOL))
    );
    if hardest_violations > 0 || worst_identity >= IDENTITY_TOL || worst_grad.iter().any(|g| *g >= GRAD_TOL) {
        bail!("loss checks failed");
    }
    Ok(())
}

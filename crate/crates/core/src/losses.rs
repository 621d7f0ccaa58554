//! Training objectives: variety (best-of-K position error), adversarial
//! path/sequence terms, global and local intention classification, and the
//! composed generator/discriminator objectives.

use crate::action::Action;
use crate::error::{Error, Result};
use crate::geometry::Path;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp distance from the 0/1 boundaries before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Published objective weights.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Variety-loss weight in the generator objective.
    pub lambda1: f64,
    /// Sequence-adversarial weight in the generator objective.
    pub lambda2: f64,
    /// Local-classification weight in the generator objective.
    pub lambda3: f64,
    /// Sequence-adversarial weight in the discriminator objective.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1e2, lambda2: 1e-2, lambda3: 5e-3, lambda4: 1.0 }
    }
}

/// The five loss terms of one step plus the composed objectives.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub variety: f64,
    pub adv_path: f64,
    pub adv_seq: f64,
    pub cls_global: f64,
    pub cls_local: f64,
    pub total_g: f64,
    pub total_d: f64,
}

/// Best-of-K mean squared position error against the ground truth.
///
/// `positions` holds L step vars of `[k, 2]`; the per-sample error is
/// `(1/L) * sum_l |p_l - gt_l|^2` and the minimum over the K rollouts is
/// returned (subgradient flows to the argmin rollout).
pub fn variety_loss(tape: &mut Tape, gt: &Path, positions: &[Var]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::invalid("no generated positions"));
    }
    if gt.len() != positions.len() {
        return Err(Error::shape(
            format!("{} steps", gt.len()),
            format!("{}", positions.len()),
        ));
    }
    let k = tape.value(positions[0]).rows();
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut acc: Option<Var> = None;
    for (l, &p) in positions.iter().enumerate() {
        let gt_l = gt.positions()[l];
        let target = tape.constant(Tensor::tile_row(&gt_l, k));
        let d = tape.sub(p, target);
        let sq = tape.mul(d, d);
        let col = tape.sum_cols(sq);
        acc = Some(match acc {
            None => col,
            Some(a) => tape.add(a, col),
        });
    }
    let sum = acc.expect("non-empty");
    let mean = tape.scale(sum, 1.0 / positions.len() as f64);
    Ok(tape.min_col(mean))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GanRole {
    Generator,
    Discriminator,
}

/// The adversarial term one role minimizes for a single stream (path or
/// intention sequence).
///
/// The discriminator minimizes `-[mean ln D(real) + mean ln(1 - D(fake))]`.
/// The generator by default minimizes the non-saturating `-mean ln D(fake)`;
/// with `saturating` it minimizes the literal `mean ln(1 - D(fake))` instead
/// (the real-data expectation carries no generator gradient and is dropped).
pub fn adversarial_loss(
    tape: &mut Tape,
    real_scores: Option<Var>,
    fake_scores: Var,
    role: GanRole,
    saturating: bool,
) -> Result<Var> {
    for scores in real_scores.iter().chain(std::iter::once(&fake_scores)) {
        let v = tape.value(*scores);
        if v.data().iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("adversarial scores must lie in [0, 1]"));
        }
    }
    match role {
        GanRole::Discriminator => {
            let real = real_scores
                .ok_or_else(|| Error::invalid("discriminator loss needs real scores"))?;
            let rc = tape.clamp(real, SCORE_EPS, 1.0 - SCORE_EPS);
            let rl = tape.ln(rc);
            let rterm = tape.mean_all(rl);
            let fc = tape.clamp(fake_scores, SCORE_EPS, 1.0 - SCORE_EPS);
            let neg = tape.scale(fc, -1.0);
            let one = tape.constant(Tensor::new(
                tape.value(neg).dims().to_vec(),
                vec![1.0; tape.value(neg).len()],
            ));
            let omf = tape.add(one, neg);
            let fl = tape.ln(omf);
            let fterm = tape.mean_all(fl);
            let s = tape.add(rterm, fterm);
            Ok(tape.scale(s, -1.0))
        }
        GanRole::Generator => {
            let fc = tape.clamp(fake_scores, SCORE_EPS, 1.0 - SCORE_EPS);
            if saturating {
                let neg = tape.scale(fc, -1.0);
                let one = tape.constant(Tensor::new(
                    tape.value(neg).dims().to_vec(),
                    vec![1.0; tape.value(neg).len()],
                ));
                let omf = tape.add(one, neg);
                let fl = tape.ln(omf);
                Ok(tape.mean_all(fl))
            } else {
                let fl = tape.ln(fc);
                let m = tape.mean_all(fl);
                Ok(tape.scale(m, -1.0))
            }
        }
    }
}

/// Mean categorical cross-entropy of softmaxed logits against one-hot
/// targets (one class index per row).
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let v = tape.value(logits);
    if v.rows() != targets.len() {
        return Err(Error::shape(
            format!("{} target rows", v.rows()),
            format!("{}", targets.len()),
        ));
    }
    let classes = v.cols();
    if let Some(bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("target class {bad} out of range")));
    }
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(logp, targets);
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Global-intention classification loss: cross-entropy of the class logits
/// against the conditioning action, one row per sample.
pub fn global_classification_loss(tape: &mut Tape, class_logits: Var, target: Action) -> Result<Var> {
    let rows = tape.value(class_logits).rows();
    cross_entropy(tape, class_logits, &vec![target.id(); rows])
}

/// Local-intention classification loss: per-step cross-entropy of the
/// rolled-out intention logits against the ground-truth labels, averaged over
/// steps 2..=L (the first step is conditioned directly on the global
/// intention and is skipped).
pub fn local_classification_loss(
    tape: &mut Tape,
    step_logits: &[Var],
    targets: &[Action],
) -> Result<Var> {
    if step_logits.len() != targets.len() {
        return Err(Error::shape(
            format!("{} label steps", step_logits.len()),
            format!("{}", targets.len()),
        ));
    }
    if step_logits.len() < 2 {
        return Err(Error::invalid("need at least two steps for the local term"));
    }
    let mut acc: Option<Var> = None;
    for (logits, action) in step_logits.iter().zip(targets).skip(1) {
        let ce = global_classification_loss(tape, *logits, *action)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce),
        });
    }
    let sum = acc.expect("at least one step");
    Ok(tape.scale(sum, 1.0 / (step_logits.len() - 1) as f64))
}

/// Compose the generator and discriminator objectives from the five terms.
///
/// `adv_path`/`adv_seq` are the role-specific minimized terms produced by
/// [`adversarial_loss`]; the weighting follows the published objective:
/// generator `l1*var + adv1 + cls1 + l2*adv2 + l3*cls2`, discriminator
/// `adv1 + l4*adv2 + cls1` (its adversarial terms already carry the
/// minimization sign).
pub fn total_objectives(
    variety: f64,
    adv_path_g: f64,
    adv_seq_g: f64,
    cls_global: f64,
    cls_local: f64,
    adv_path_d: f64,
    adv_seq_d: f64,
    cls_global_d: f64,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let terms = [
        variety, adv_path_g, adv_seq_g, cls_global, cls_local, adv_path_d, adv_seq_d, cls_global_d,
    ];
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(Error::TrainingAbort(format!("non-finite loss term: {terms:?}")));
    }
    let g = weights.lambda1 * variety
        + adv_path_g
        + cls_global
        + weights.lambda2 * adv_seq_g
        + weights.lambda3 * cls_local;
    let d = adv_path_d + weights.lambda4 * adv_seq_d + cls_global_d;
    Ok((g, d))
}

//! Trajectory metrics: displacement errors, diversity, marginal
//! log-likelihood, steering error, and generation-speed measurement.

use crate::action::{Action, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::geometry::{dist, path_to_steering, Path};

/// Average and final L2 displacement between two equal-length paths (meters,
/// unsquared).
pub fn ade_fde(gt: &Path, candidate: &Path) -> Result<(f64, f64)> {
    if gt.len() != candidate.len() {
        return Err(Error::shape(
            format!("{} positions", gt.len()),
            format!("{}", candidate.len()),
        ));
    }
    if gt.is_empty() {
        return Err(Error::invalid("empty paths"));
    }
    let mut sum = 0.0;
    for (a, b) in gt.positions().iter().zip(candidate.positions()) {
        sum += dist(*a, *b);
    }
    let ade = sum / gt.len() as f64;
    let fde = dist(gt.last().unwrap(), candidate.last().unwrap());
    Ok((ade, fde))
}

/// Mean ADE over all unordered pairs of the K generated paths.
pub fn diversity(paths: &[Path]) -> Result<f64> {
    if paths.len() < 2 {
        return Err(Error::invalid("diversity needs at least two paths"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            sum += ade_fde(&paths[i], &paths[j])?.0;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Bandwidth floor for the per-position kernel density estimate.
pub const KDE_BANDWIDTH_FLOOR: f64 = 1e-3;

/// Average log-likelihood of the ground-truth positions under per-position
/// 2-D Gaussian kernel density estimates over the K generated paths.
///
/// Bandwidth per axis is `std * K^(-1/4)` (slightly under-smoothed relative
/// to the classic `K^(-1/6)` rule, which keeps the estimate within 0.1 nat of
/// truth at the mode for K = 1000), floored at [`KDE_BANDWIDTH_FLOOR`].
pub fn marginal_log_likelihood(gt: &Path, paths: &[Path]) -> Result<f64> {
    if paths.len() < 2 {
        return Err(Error::invalid("log-likelihood needs at least two paths"));
    }
    let l = gt.len();
    if paths.iter().any(|p| p.len() != l) {
        return Err(Error::shape(format!("{l} positions"), "ragged paths"));
    }
    let k = paths.len() as f64;
    let mut total = 0.0;
    for (li, gt_p) in gt.positions().iter().enumerate() {
        let xs: Vec<f64> = paths.iter().map(|p| p.positions()[li][0]).collect();
        let ys: Vec<f64> = paths.iter().map(|p| p.positions()[li][1]).collect();
        let hx = (sample_std(&xs) * k.powf(-0.25)).max(KDE_BANDWIDTH_FLOOR);
        let hy = (sample_std(&ys) * k.powf(-0.25)).max(KDE_BANDWIDTH_FLOOR);
        let norm = 1.0 / (k * std::f64::consts::TAU * hx * hy);
        let mut density = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let dx = (gt_p[0] - x) / hx;
            let dy = (gt_p[1] - y) / hy;
            density += (-0.5 * (dx * dx + dy * dy)).exp();
        }
        total += (density * norm).max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / l as f64)
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt()
}

/// Squared difference of the pure-pursuit steering values of the ground truth
/// and the chosen (minimum-ADE) generated path.
pub fn steering_mse(gt_path: &Path, best_path: &Path, speed: f64) -> Result<f64> {
    let s_gt = path_to_steering(gt_path, speed)?;
    let s_gen = path_to_steering(best_path, speed)?;
    Ok((s_gt - s_gen).powi(2))
}

/// Per-sample evaluation of a candidate set against the ground truth.
#[derive(Copy, Clone, Debug)]
pub struct SampleMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub diversity: f64,
    pub mll: f64,
    pub min_mse_s: f64,
}

pub fn sample_metrics(gt: &Path, candidates: &[Path], speed: f64) -> Result<SampleMetrics> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate paths"));
    }
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    let mut best = 0usize;
    for (i, c) in candidates.iter().enumerate() {
        let (ade, fde) = ade_fde(gt, c)?;
        if ade < min_ade {
            min_ade = ade;
            best = i;
        }
        min_fde = min_fde.min(fde);
    }
    let diversity = if candidates.len() >= 2 { diversity(candidates)? } else { 0.0 };
    let mll = if candidates.len() >= 2 {
        marginal_log_likelihood(gt, candidates)?
    } else {
        f64::NEG_INFINITY
    };
    let min_mse_s = steering_mse(gt, &candidates[best], speed)?;
    Ok(SampleMetrics { min_ade, min_fde, diversity, mll, min_mse_s })
}

/// Aggregated metrics over an evaluation split.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub k: usize,
    pub f: usize,
    pub count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub diversity: f64,
    pub mll: f64,
    pub min_mse_s: f64,
    /// Seconds per generated path, when measured.
    pub gen_time_mean: Option<f64>,
    pub gen_time_std: Option<f64>,
    pub per_action: Vec<(Action, usize, SampleMetrics)>,
}

impl MetricReport {
    pub fn aggregate(rows: &[(Action, SampleMetrics)], k: usize, f: usize) -> MetricReport {
        let count = rows.len();
        let mean = |sel: fn(&SampleMetrics) -> f64| -> f64 {
            if count == 0 {
                return f64::NAN;
            }
            rows.iter().map(|(_, m)| sel(m)).sum::<f64>() / count as f64
        };
        let mut per_action = Vec::new();
        for action in crate::action::ALL_ACTIONS {
            let group: Vec<&SampleMetrics> =
                rows.iter().filter(|(a, _)| *a == action).map(|(_, m)| m).collect();
            if group.is_empty() {
                continue;
            }
            let n = group.len() as f64;
            let avg = |sel: fn(&SampleMetrics) -> f64| -> f64 {
                group.iter().map(|m| sel(m)).sum::<f64>() / n
            };
            per_action.push((
                action,
                group.len(),
                SampleMetrics {
                    min_ade: avg(|m| m.min_ade),
                    min_fde: avg(|m| m.min_fde),
                    diversity: avg(|m| m.diversity),
                    mll: avg(|m| m.mll),
                    min_mse_s: avg(|m| m.min_mse_s),
                },
            ));
        }
        MetricReport {
            k,
            f,
            count,
            min_ade: mean(|m| m.min_ade),
            min_fde: mean(|m| m.min_fde),
            diversity: mean(|m| m.diversity),
            mll: mean(|m| m.mll),
            min_mse_s: mean(|m| m.min_mse_s),
            gen_time_mean: None,
            gen_time_std: None,
            per_action,
        }
    }

    pub fn csv_header() -> &'static str {
        "count,k,f,min_ade,min_fde,diversity,mll,min_mse_s,gen_time_mean,gen_time_std"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.count,
            self.k,
            self.f,
            self.min_ade,
            self.min_fde,
            self.diversity,
            self.mll,
            self.min_mse_s,
            self.gen_time_mean.map_or(String::new(), |v| v.to_string()),
            self.gen_time_std.map_or(String::new(), |v| v.to_string()),
        )
    }

    /// Table-style summary with one row per action and the overall means.
    pub fn table_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>6} {:>9} {:>9} {:>9} {:>9} {:>10}\n",
            "action", "n", "minADE", "minFDE", "Div", "MLL", "minMSE-S"
        ));
        for (action, n, m) in &self.per_action {
            out.push_str(&format!(
                "{:<16} {:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>10.5}\n",
                action.name(),
                n,
                m.min_ade,
                m.min_fde,
                m.diversity,
                m.mll,
                m.min_mse_s
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>10.5}\n",
            "all",
            self.count,
            self.min_ade,
            self.min_fde,
            self.diversity,
            self.mll,
            self.min_mse_s
        ));
        if let (Some(m), Some(s)) = (self.gen_time_mean, self.gen_time_std) {
            out.push_str(&format!("gen time: {m:.5} +/- {s:.5} s/path (K={})\n", self.k));
        }
        out
    }
}

/// Wall-clock seconds per generated path: mean and std over `records`
/// invocations of `generate_batch` (which must produce `k` paths per call).
/// The first few calls are warm-up and excluded.
pub fn measure_generation_speed(
    mut generate_batch: impl FnMut() -> usize,
    records: usize,
) -> (f64, f64) {
    for _ in 0..3 {
        generate_batch();
    }
    let mut times = Vec::with_capacity(records);
    for _ in 0..records {
        let t0 = std::time::Instant::now();
        let k = generate_batch();
        let dt = t0.elapsed().as_secs_f64();
        times.push(dt / k.max(1) as f64);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
    (mean, var.sqrt())
}

/// Count rows per action id (report plumbing).
pub fn action_histogram(actions: &[Action]) -> [usize; ACTION_COUNT] {
    let mut h = [0usize; ACTION_COUNT];
    for a in actions {
        h[a.id()] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path_of(points: &[[f64; 2]]) -> Path {
        Path::new(points.to_vec()).unwrap()
    }

    fn random_path(rng: &mut ChaCha8Rng, l: usize) -> Path {
        path_of(
            &(0..l)
                .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn ade_fde_identical_zero() {
        let p = path_of(&[[0.0, 1.0], [0.0, 2.0]]);
        assert_eq!(ade_fde(&p, &p).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn ade_fde_three_four_five() {
        let gt = path_of(&[[0.0, 1.0], [0.0, 2.0]]);
        let off = path_of(&[[0.3, 1.4], [0.3, 2.4]]);
        let (ade, fde) = ade_fde(&gt, &off).unwrap();
        assert!((ade - 0.5).abs() < 1e-12);
        assert!((fde - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ade_fde_length_mismatch_errors() {
        let a = path_of(&[[0.0, 1.0]]);
        let b = path_of(&[[0.0, 1.0], [0.0, 2.0]]);
        assert!(ade_fde(&a, &b).is_err());
    }

    #[test]
    fn ade_fde_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let l = rng.gen_range(1..8);
            let a = random_path(&mut rng, l);
            let b = random_path(&mut rng, l);
            let (ade, fde) = ade_fde(&a, &b).unwrap();
            let mut oracle = 0.0;
            for i in 0..l {
                oracle += dist(a.positions()[i], b.positions()[i]);
            }
            assert!((ade - oracle / l as f64).abs() < 1e-12);
            assert!((fde - dist(a.positions()[l - 1], b.positions()[l - 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_identical_zero_offset_one() {
        let p = path_of(&[[0.0, 1.0], [0.0, 2.0]]);
        assert_eq!(diversity(&[p.clone(), p.clone(), p.clone()]).unwrap(), 0.0);
        let q = path_of(&[[1.0, 1.0], [1.0, 2.0]]);
        assert!((diversity(&[p, q]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_matches_exhaustive_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let paths: Vec<Path> = (0..4).map(|_| random_path(&mut rng, 5)).collect();
        let got = diversity(&paths).unwrap();
        let mut oracle = 0.0;
        let mut n = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i < j {
                    oracle += ade_fde(&paths[i], &paths[j]).unwrap().0;
                    n += 1;
                }
            }
        }
        assert_eq!(n, 6);
        assert!((got - oracle / 6.0).abs() < 1e-12);
        // Permutation invariance.
        let mut shuffled = paths.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        assert!((diversity(&shuffled).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn diversity_needs_two() {
        let p = path_of(&[[0.0, 1.0]]);
        assert!(diversity(&[p]).is_err());
    }

    #[test]
    fn mll_calibrated_against_gaussian() {
        // K samples from an isotropic Gaussian centered on each gt position;
        // the estimate must sit within 0.1 nat of the analytic log density at
        // the mean.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let l = 20;
        let sigma = 0.7;
        let k = 1000;
        let gt = random_path(&mut rng, l);
        let paths: Vec<Path> = (0..k)
            .map(|_| {
                path_of(
                    &gt.positions()
                        .iter()
                        .map(|p| {
                            [
                                p[0] + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
                                p[1] + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
                            ]
                        })
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let mll = marginal_log_likelihood(&gt, &paths).unwrap();
        let analytic = -(std::f64::consts::TAU * sigma * sigma).ln();
        assert!(
            (mll - analytic).abs() < 0.1,
            "mll {mll} vs analytic {analytic}"
        );
    }

    #[test]
    fn mll_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_path(&mut rng, 4);
        let paths: Vec<Path> = (0..50).map(|_| random_path(&mut rng, 4)).collect();
        let base = marginal_log_likelihood(&gt, &paths).unwrap();
        let shift = [13.0, -7.0];
        let gt2 = path_of(
            &gt.positions()
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1]])
                .collect::<Vec<_>>(),
        );
        let paths2: Vec<Path> = paths
            .iter()
            .map(|p| {
                path_of(
                    &p.positions()
                        .iter()
                        .map(|q| [q[0] + shift[0], q[1] + shift[1]])
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let shifted = marginal_log_likelihood(&gt2, &paths2).unwrap();
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn mll_decreases_with_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt0 = path_of(&[[0.0, 0.0]]);
        let paths: Vec<Path> = (0..100)
            .map(|_| {
                path_of(&[[
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                ]])
            })
            .collect();
        let mut last = f64::INFINITY;
        for d in [0.0, 3.0, 6.0, 10.0] {
            let gt = path_of(&[[gt0.positions()[0][0] + d, 0.0]]);
            let mll = marginal_log_likelihood(&gt, &paths).unwrap();
            assert!(mll < last, "distance {d}: {mll} !< {last}");
            last = mll;
        }
        // Far away the kernels underflow to the density floor.
        let far = path_of(&[[100.0, 0.0]]);
        let mll_far = marginal_log_likelihood(&far, &paths).unwrap();
        assert!(mll_far <= last && mll_far < -700.0);
    }

    #[test]
    fn steering_mse_zero_for_same_path() {
        let p = path_of(&(1..=20).map(|i| [0.2 * i as f64, i as f64]).collect::<Vec<_>>());
        assert_eq!(steering_mse(&p, &p, 8.0).unwrap(), 0.0);
    }

    #[test]
    fn steering_mse_matches_oracle_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a = random_path(&mut rng, 20);
            let b = random_path(&mut rng, 20);
            let speed = rng.gen_range(1.0..14.0);
            let got = steering_mse(&a, &b, speed).unwrap();
            let oracle =
                (path_to_steering(&a, speed).unwrap() - path_to_steering(&b, speed).unwrap()).powi(2);
            assert!((got - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn min_ade_non_increasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_path(&mut rng, 6);
        let pool: Vec<Path> = (0..50).map(|_| random_path(&mut rng, 6)).collect();
        let mut last = f64::INFINITY;
        for k in 1..=50 {
            let m = sample_metrics(&gt, &pool[..k], 5.0).unwrap();
            assert!(m.min_ade <= last + 1e-15, "k={k}");
            last = m.min_ade;
        }
    }

    #[test]
    fn report_csv_roundtrips() {
        let rows = vec![
            (
                Action::Go,
                SampleMetrics { min_ade: 0.2, min_fde: 0.5, diversity: 0.3, mll: -2.0, min_mse_s: 0.004 },
            ),
            (
                Action::TurnLeft,
                SampleMetrics { min_ade: 0.4, min_fde: 0.9, diversity: 0.5, mll: -2.5, min_mse_s: 0.009 },
            ),
        ];
        let report = MetricReport::aggregate(&rows, 20, 5);
        assert!((report.min_ade - 0.3).abs() < 1e-12);
        let row = report.csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), MetricReport::csv_header().split(',').count());
        assert_eq!(fields[0].parse::<usize>().unwrap(), 2);
        assert!((fields[3].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
        assert!(report.table_string().contains("TurnLeft"));
    }

    #[test]
    fn generation_speed_reports_positive_finite() {
        let (mean, std) = measure_generation_speed(
            || {
                std::hint::black_box((0..2000).map(|i| i as f64).sum::<f64>());
                4
            },
            50,
        );
        assert!(mean > 0.0 && mean.is_finite());
        assert!(std >= 0.0 && std.is_finite());
    }
}

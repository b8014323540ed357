//! Listwise ranking losses over query–candidate similarity scores.
//!
//! The quantized AP surrogate bins scores into `M` triangular soft bins with
//! centers `1, 1 − Δ, …, −1` (`Δ = 2/(M − 1)`) and evaluates AP from the
//! cumulative histograms:
//!
//! ```text
//! AP = Σ_m P_m · r_m,   P_m = H⁺_m / H_m,   r_m = h⁺_m / N⁺
//! ```
//!
//! where `h`/`h⁺` are per-bin masses of all and positive items and `H`/`H⁺`
//! their cumulative sums from the top bin down.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

/// Bin count used for training.
pub const DEFAULT_BINS: usize = 20;
/// Margin of the contrastive ablation loss.
pub const DEFAULT_MARGIN: f64 = 0.5;

/// A loss value with its gradient with respect to the scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn check_instance<T: Real>(scores: &[T], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "ranking instance",
            (scores.len(), 1),
            (labels.len(), 1),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("ranking score {s:?}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    Ok(positives)
}

/// Quantized average precision and its gradient with respect to `scores`.
pub fn quantized_ap<T: Real>(scores: &[T], labels: &[bool], bins: usize) -> Result<LossValue<T>> {
    if bins < 2 {
        return Err(Error::Parameter(alloc::format!(
            "quantized AP needs at least 2 bins, got {bins}"
        )));
    }
    let n_pos = T::from_usize(check_instance(scores, labels)?);
    let delta = T::from_f64(2.0) / T::from_usize(bins - 1);
    let center = |m: usize| T::one() - T::from_usize(m) * delta;

    // Each score touches at most the two bins around it.
    let touching = |s: T| -> [(usize, T, T); 2] {
        let pos = ((T::one() - s) / delta)
            .max(T::zero())
            .min(T::from_usize(bins - 1));
        let lo = pos.floor().to_usize().unwrap_or(0).min(bins - 1);
        let hi = (lo + 1).min(bins - 1);
        let mut out = [(lo, T::zero(), T::zero()), (hi, T::zero(), T::zero())];
        for (k, slot) in out.iter_mut().enumerate() {
            if k == 1 && hi == lo {
                break;
            }
            let m = slot.0;
            let d = s - center(m);
            let w = T::one() - d.abs() / delta;
            if w > T::zero() {
                slot.1 = w;
                // ∂w/∂s
                slot.2 = if d > T::zero() {
                    -T::one() / delta
                } else {
                    T::one() / delta
                };
            }
        }
        out
    };

    let mut h = vec![T::zero(); bins];
    let mut hp = vec![T::zero(); bins];
    for (&s, &l) in scores.iter().zip(labels) {
        for (m, w, _) in touching(s) {
            h[m] += w;
            if l {
                hp[m] += w;
            }
        }
    }

    let mut cum = vec![T::zero(); bins];
    let mut cum_p = vec![T::zero(); bins];
    let (mut c, mut cp) = (T::zero(), T::zero());
    for m in 0..bins {
        c += h[m];
        cp += hp[m];
        cum[m] = c;
        cum_p[m] = cp;
    }

    let mut ap = T::zero();
    let mut prec = vec![T::zero(); bins];
    let mut rec = vec![T::zero(); bins];
    for m in 0..bins {
        if cum[m] > T::zero() {
            prec[m] = cum_p[m] / cum[m];
        }
        rec[m] = hp[m] / n_pos;
        ap += prec[m] * rec[m];
    }

    // Suffix sums over m'' ≥ m of r/C and r·C⁺/C².
    let mut d_hp = vec![T::zero(); bins];
    let mut d_h = vec![T::zero(); bins];
    let (mut s1, mut s2) = (T::zero(), T::zero());
    for m in (0..bins).rev() {
        if cum[m] > T::zero() {
            s1 += rec[m] / cum[m];
            s2 += rec[m] * cum_p[m] / (cum[m] * cum[m]);
        }
        d_hp[m] = prec[m] / n_pos + s1;
        d_h[m] = -s2;
    }

    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let mut g = T::zero();
            for (m, w, dw) in touching(s) {
                if w > T::zero() {
                    let mut dm = d_h[m];
                    if l {
                        dm += d_hp[m];
                    }
                    g += dm * dw;
                }
            }
            g
        })
        .collect();
    Ok(LossValue { value: ap, grad })
}

/// `1 − quantized AP`, with gradient.
pub fn quantized_ap_loss<T: Real>(
    scores: &[T],
    labels: &[bool],
    bins: usize,
) -> Result<LossValue<T>> {
    let ap = quantized_ap(scores, labels, bins)?;
    Ok(LossValue {
        value: T::one() - ap.value,
        grad: ap.grad.into_iter().map(|g| -g).collect(),
    })
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_by_score<T: Real>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Average precision of the full ranking induced by `scores`.
pub fn exact_ap<T: Real>(scores: &[T], labels: &[bool]) -> Result<f64> {
    let positives = check_instance(scores, labels)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, idx) in rank_by_score(scores).into_iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// `Σ_pos (1 − s) + Σ_neg max(0, s − margin)`, with gradient.
pub fn contrastive_loss<T: Real>(scores: &[T], labels: &[bool], margin: T) -> Result<LossValue<T>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "ranking instance",
            (scores.len(), 1),
            (labels.len(), 1),
        ));
    }
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            value += T::one() - s;
            grad.push(-T::one());
        } else if s > margin {
            value += s - margin;
            grad.push(T::one());
        } else {
            grad.push(T::zero());
        }
    }
    Ok(LossValue { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
        loop {
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            if labels.iter().any(|&l| l) {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn exact_ap_hand_cases() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        let ap = exact_ap(&scores, &[true, false, true, false, false]).unwrap();
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(
            exact_ap(&scores, &[true, false, false, false, false]).unwrap(),
            1.0
        );
        for k in 1..=5 {
            let mut labels = [false; 5];
            labels[k - 1] = true;
            assert!((exact_ap(&scores, &labels).unwrap() - 1.0 / k as f64).abs() < 1e-15);
        }
        assert_eq!(exact_ap(&scores, &[false; 5]), Err(Error::NoPositives));
    }

    #[test]
    fn exact_ap_ties_use_index_order() {
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(exact_ap(&scores, &[true, false, false]).unwrap(), 1.0);
        assert_eq!(exact_ap(&scores, &[false, false, true]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn perfect_ranking_has_small_loss() {
        let scores: Vec<f64> = (0..20).map(|i| 0.95 - 0.09 * i as f64).collect();
        let labels: Vec<bool> = (0..20).map(|i| i < 6).collect();
        let loss = quantized_ap_loss(&scores, &labels, 201).unwrap();
        assert!(loss.value < 0.02, "{}", loss.value);
    }

    #[test]
    fn quantized_tracks_exact_at_fine_bins() {
        // Items closer than 2Δ share bins and count as tied, so the two only
        // agree on average.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..100 {
            let (s, l) = random_instance(&mut rng, 50);
            let q = quantized_ap(&s, &l, 201).unwrap().value;
            let e = exact_ap(&s, &l).unwrap();
            assert!((q - e).abs() < 0.06, "{q} vs {e}");
            total += (q - e).abs();
        }
        assert!(total / 100.0 < 0.015);
    }

    #[test]
    fn separated_scores_reproduce_exact_ap() {
        // Gaps wider than two bins: every item owns its bins.
        let scores: Vec<f64> = (0..10).map(|i| 0.9 - 0.19 * i as f64).collect();
        let labels = [
            true, false, false, true, true, false, true, false, false, true,
        ];
        let q = quantized_ap(&scores, &labels, 101).unwrap().value;
        let e = exact_ap(&scores, &labels).unwrap();
        assert!(q <= e && e - q < 0.05, "{q} vs {e}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bins in [5, 20, 51] {
            let (s, l) = random_instance(&mut rng, 30);
            let g = quantized_ap_loss(&s, &l, bins).unwrap().grad;
            let h = 1e-7;
            for i in 0..s.len() {
                let mut sp = s.clone();
                sp[i] += h;
                let mut sm = s.clone();
                sm[i] -= h;
                let fd = (quantized_ap_loss(&sp, &l, bins).unwrap().value
                    - quantized_ap_loss(&sm, &l, bins).unwrap().value)
                    / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-5,
                    "bins {bins} item {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn raising_a_trailing_positive_lowers_the_loss() {
        let scores = [0.9, 0.7, 0.41, 0.39, -0.2];
        let labels = [true, false, false, true, false];
        let g = quantized_ap_loss(&scores, &labels, 20).unwrap().grad;
        assert!(g[3] < 0.0);
        let mut up = scores;
        up[3] += 1e-3;
        assert!(
            quantized_ap_loss(&up, &labels, 20).unwrap().value
                < quantized_ap_loss(&scores, &labels, 20).unwrap().value
        );
    }

    #[test]
    fn contrastive_cases() {
        let zero =
            contrastive_loss(&[1.0, 1.0, 0.2, 0.5], &[true, true, false, false], 0.5).unwrap();
        assert_eq!(zero.value, 0.0);
        let one = contrastive_loss(&[1.0f64, 0.6], &[true, false], 0.5).unwrap();
        assert!((one.value - 0.1).abs() < 1e-12);
        assert_eq!(one.grad, vec![-1.0, 1.0]);
        let h: f64 = 1e-6;
        let fd = (contrastive_loss(&[1.0f64, 0.6 + h], &[true, false], 0.5)
            .unwrap()
            .value
            - contrastive_loss(&[1.0, 0.6 - h], &[true, false], 0.5)
                .unwrap()
                .value)
            / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_instances() {
        assert_eq!(
            quantized_ap(&[0.1f64], &[false], 20),
            Err(Error::NoPositives)
        );
        assert!(matches!(
            quantized_ap(&[0.1f64], &[true], 1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            quantized_ap(&[0.1f64, 0.2], &[true], 20),
            Err(Error::Shape { .. })
        ));
    }
}

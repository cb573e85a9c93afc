use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};

/// Threshold that stops nothing, since gate scores never exceed 1.
pub const NEVER_STOP: f64 = 1.0 + f64::EPSILON;

/// A sample is early-stopped when its gate score is `>= tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingThreshold {
    pub tau: f64,
    pub target_incorrect_rate: f64,
}

impl GatingThreshold {
    pub fn new(tau: f64, target_incorrect_rate: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= NEVER_STOP) {
            return Err(Error::OutOfRange {
                name: "tau",
                value: tau,
                reason: "threshold must lie in (0, 1] or be the never-stop sentinel",
            });
        }
        check_range("target_incorrect_rate", target_incorrect_rate, 0.0, 1.0)?;
        Ok(GatingThreshold {
            tau,
            target_incorrect_rate,
        })
    }

    pub fn stops(&self, gate_score: f64) -> bool {
        gate_score >= self.tau
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub threshold: GatingThreshold,
    /// Fraction of the calibration positives stopped at `tau`.
    pub calibrated_incorrect_rate: f64,
    pub positives: usize,
    /// Fewer than `1 / target` positives were available.
    pub undersized: bool,
}

/// Smallest threshold among the distinct positive scores and
/// [`NEVER_STOP`] whose stopped fraction of positives is `<= target`.
pub fn calibrate(positive_scores: &[f64], target: f64) -> Result<Calibration> {
    if positive_scores.is_empty() {
        return Err(Error::Empty("calibration positive set"));
    }
    check_range("target_incorrect_rate", target, 0.0, 1.0)?;
    if target >= 1.0 {
        return Err(Error::OutOfRange {
            name: "target_incorrect_rate",
            value: target,
            reason: "a target of 1 would allow stopping every positive",
        });
    }
    if let Some(bad) = positive_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::OutOfRange {
            name: "gate score",
            value: *bad,
            reason: "gate scores must lie in [0, 1]",
        });
    }
    let n = positive_scores.len();
    let undersized = target == 0.0 || (n as f64) < 1.0 / target;
    if undersized {
        log::warn!("calibrating with {n} positives for target rate {target}; the cap is coarse");
    }
    let mut sorted = positive_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut tau = NEVER_STOP;
    let mut stopped_at_tau = 0;
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
        // `i` scores are >= v.
        if i as f64 / n as f64 <= target {
            tau = v;
            stopped_at_tau = i;
        } else {
            break;
        }
    }
    if tau <= 0.0 {
        // Only reachable when every positive scored exactly 0.
        tau = f64::MIN_POSITIVE;
    }
    Ok(Calibration {
        threshold: GatingThreshold::new(tau, target)?,
        calibrated_incorrect_rate: stopped_at_tau as f64 / n as f64,
        positives: n,
        undersized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive scan: every candidate, keep the smallest valid one.
    fn brute(scores: &[f64], target: f64) -> f64 {
        let mut candidates: Vec<f64> = scores.to_vec();
        candidates.push(NEVER_STOP);
        candidates
            .into_iter()
            .filter(|&c| {
                scores.iter().filter(|&&s| s >= c).count() as f64 / scores.len() as f64 <= target
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn picks_smallest_admissible_score() {
        let c = calibrate(&[0.1, 0.2, 0.3, 0.9], 0.25).unwrap();
        assert_eq!(c.threshold.tau, 0.9);
        assert_eq!(c.calibrated_incorrect_rate, 0.25);
        assert_eq!(brute(&[0.1, 0.2, 0.3, 0.9], 0.25), 0.9);
    }

    #[test]
    fn zero_target_never_stops_positives() {
        let scores = [0.1, 0.99, 1.0, 0.5];
        let c = calibrate(&scores, 0.0).unwrap();
        assert_eq!(c.threshold.tau, NEVER_STOP);
        assert!(scores.iter().all(|&s| !c.threshold.stops(s)));
    }

    #[test]
    fn ties_resolve_toward_fewer_stops() {
        let scores = vec![0.5; 100];
        let c = calibrate(&scores, 0.01).unwrap();
        assert!(c.threshold.tau > 0.5);
        assert_eq!(c.calibrated_incorrect_rate, 0.0);
    }

    #[test]
    fn errors_and_warnings() {
        assert!(matches!(calibrate(&[], 0.01), Err(Error::Empty(_))));
        assert!(calibrate(&[0.2], 1.0).is_err());
        assert!(calibrate(&[1.2], 0.1).is_err());
        assert!(calibrate(&[0.2; 10], 0.01).unwrap().undersized);
        assert!(!calibrate(&[0.2; 100], 0.01).unwrap().undersized);
    }

    proptest::proptest! {
        #[test]
        fn matches_exhaustive_scan(
            raw in proptest::collection::vec(0u32..50, 1..200),
            target in 0.0f64..0.5,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&r| r as f64 / 50.0).collect();
            let c = calibrate(&scores, target).unwrap();
            let expected = brute(&scores, target);
            proptest::prop_assert_eq!(c.threshold.tau, expected.max(f64::MIN_POSITIVE));
            let stopped = scores.iter().filter(|&&s| c.threshold.stops(s)).count() as f64;
            proptest::prop_assert!(stopped / scores.len() as f64 <= target);
        }
    }
}

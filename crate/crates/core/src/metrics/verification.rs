use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One scored trial: accept iff `score ≥ θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetCurvePoint {
    pub threshold: f64,
    pub false_accept_rate: f64,
    pub false_reject_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub normalize: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
            normalize: true,
        }
    }
}

impl DcfParams {
    /// Cost of the best trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// FAR/FRR at every candidate threshold: −∞, each midpoint between
/// consecutive distinct scores, and +∞.
pub fn det_curve(scores: &[LabeledScore]) -> Result<Vec<DetCurvePoint>> {
    let n_t = scores.iter().filter(|s| s.target).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::SingleClass);
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(invalid(format!("non-finite score {}", s.score)));
    }
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Start below every score: everything accepted.
    let (mut rejected_t, mut rejected_n) = (0usize, 0usize);
    let mut points = vec![DetCurvePoint {
        threshold: f64::NEG_INFINITY,
        false_accept_rate: 1.0,
        false_reject_rate: 0.0,
    }];
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].score;
        while i < sorted.len() && sorted[i].score == v {
            if sorted[i].target {
                rejected_t += 1;
            } else {
                rejected_n += 1;
            }
            i += 1;
        }
        let threshold = match sorted.get(i) {
            Some(next) => v + (next.score - v) / 2.0,
            None => f64::INFINITY,
        };
        points.push(DetCurvePoint {
            threshold,
            false_accept_rate: (n_n - rejected_n) as f64 / n_n as f64,
            false_reject_rate: rejected_t as f64 / n_t as f64,
        });
    }
    Ok(points)
}

/// Equal error rate in percent, linearly interpolated between sweep points.
pub fn eer(scores: &[LabeledScore]) -> Result<f64> {
    let det = det_curve(scores)?;
    Ok(100.0 * crossing(&det))
}

/// Crossing of FAR and FRR along a sweep ordered by rising threshold.
pub(crate) fn crossing(det: &[DetCurvePoint]) -> f64 {
    for (i, p) in det.iter().enumerate() {
        let d = p.false_accept_rate - p.false_reject_rate;
        if d <= 0.0 {
            if d == 0.0 || i == 0 {
                return p.false_accept_rate.max(p.false_reject_rate);
            }
            let q = &det[i - 1];
            let dq = q.false_accept_rate - q.false_reject_rate;
            let w = dq / (dq - d);
            return q.false_accept_rate + w * (p.false_accept_rate - q.false_accept_rate);
        }
    }
    // unreachable: the +∞ point has FAR 0 and FRR 1
    1.0
}

/// Minimum detection cost over the threshold sweep.
pub fn min_dcf(scores: &[LabeledScore], params: &DcfParams) -> Result<f64> {
    if !(params.p_target > 0.0 && params.p_target < 1.0) || params.c_miss <= 0.0 || params.c_fa <= 0.0 {
        return Err(invalid("DCF needs p_target in (0, 1) and positive costs"));
    }
    let det = det_curve(scores)?;
    let best = det
        .iter()
        .map(|p| {
            params.c_miss * params.p_target * p.false_reject_rate
                + params.c_fa * (1.0 - params.p_target) * p.false_accept_rate
        })
        .fold(f64::INFINITY, f64::min);
    Ok(if params.normalize { best / params.normalizer() } else { best })
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// How the step budget is split across curriculum stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pacing {
    Linear,
    #[serde(alias = "exp")]
    Exponential,
    #[serde(alias = "log")]
    Logarithmic,
}

impl FromStr for Pacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Pacing::Linear),
            "exp" | "exponential" => Ok(Pacing::Exponential),
            "log" | "logarithmic" => Ok(Pacing::Logarithmic),
            other => Err(Error::Config(format!("unknown pacing {other:?} (expected linear, exp or log)"))),
        }
    }
}

impl fmt::Display for Pacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pacing::Linear => "linear",
            Pacing::Exponential => "exp",
            Pacing::Logarithmic => "log",
        })
    }
}

/// Per-stage step budgets for stages `1..=kappa`.
///
/// Each stage receives its share of `total` under the pacing function,
/// rounded so that the budgets add up to exactly `total`: every share is
/// floored and the leftover steps go to the largest fractional parts
/// (earlier stages first on ties).
pub fn stage_steps(pacing: Pacing, kappa: usize, total: usize) -> Result<Vec<usize>> {
    if kappa == 0 || total < kappa {
        return Err(Error::Invalid(format!("need kappa >= 1 and total >= kappa, got kappa {kappa}, total {total}")));
    }
    let k = kappa as f64;
    let shares: Vec<f64> = (1..=kappa)
        .map(|t| {
            let t = t as f64;
            match pacing {
                Pacing::Linear => 1.0 / k,
                Pacing::Exponential => (t - 1.0).exp2() / (k.exp2() - 1.0),
                Pacing::Logarithmic => ((t + 1.0).ln() - t.ln()) / (k + 1.0).ln(),
            }
        })
        .collect();
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut steps: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = steps.iter().sum();
    let mut order: Vec<usize> = (0..kappa).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        steps[i] += 1;
    }
    Ok(steps)
}

/// Real-valued visible window `[left, right)` over the video frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpan {
    pub left: f64,
    pub right: f64,
}

impl MaskSpan {
    pub fn full(len: usize) -> Self {
        MaskSpan { left: 0.0, right: len as f64 }
    }

    /// Indices `floor(left) ..= ceil(right) - 1` that stay visible.
    pub fn kept_rows(&self, len: usize) -> std::ops::Range<usize> {
        let lo = (self.left.floor().max(0.0) as usize).min(len);
        let hi = (self.right.ceil().max(0.0) as usize).min(len);
        lo..hi.max(lo)
    }
}

/// Widens `[start, end]` towards `[0, len]` by the fraction `(t/kappa)·gamma`.
pub fn mask_bounds(start: f64, end: f64, len: f64, t: usize, kappa: usize, gamma: f64) -> Result<MaskSpan> {
    if !(0.0 <= start && start <= end && end <= len) {
        return Err(Error::Invalid(format!("mask bounds need 0 <= {start} <= {end} <= {len}")));
    }
    if kappa == 0 || t > kappa {
        return Err(Error::Invalid(format!("stage {t} outside 0..={kappa}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    let r = t as f64 / kappa as f64 * gamma;
    Ok(MaskSpan { left: start - r * start, right: end + r * (len - end) })
}

/// Keeps the rows inside `span` and zeroes the rest.
pub fn apply_mask(video: &Tensor, span: MaskSpan) -> Result<Tensor> {
    let (rows, _) = video.dims2()?;
    let keep = span.kept_rows(rows);
    let mut out = video.clone();
    for i in (0..rows).filter(|i| !keep.contains(i)) {
        out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

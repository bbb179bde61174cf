use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrideKind {
    Linear,
    Quadratic,
    /// Searched timesteps; the fixed stride used to initialize them is linear.
    Learned,
}

impl StrideKind {
    pub fn label(self) -> &'static str {
        match self {
            StrideKind::Linear => "linear",
            StrideKind::Quadratic => "quadratic",
            StrideKind::Learned => "learned",
        }
    }
}

impl std::str::FromStr for StrideKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(StrideKind::Linear),
            "quadratic" => Ok(StrideKind::Quadratic),
            "learned" => Ok(StrideKind::Learned),
            other => Err(Error::Usage(format!(
                "unknown stride '{other}' (expected linear, quadratic or learned)"
            ))),
        }
    }
}

/// `K` strictly increasing base timesteps in `1..=T` ending at `T`.
pub fn stride_timesteps(t_max: usize, k: usize, kind: StrideKind) -> Result<Vec<usize>> {
    if k == 0 || k > t_max {
        return Err(Error::Usage(format!("stride needs 1 <= K <= T, got K={k}, T={t_max}")));
    }
    let (tf, kf) = (t_max as f64, k as f64);
    let mut out: Vec<usize> = (1..=k)
        .map(|i| {
            let f = i as f64 / kf;
            match kind {
                StrideKind::Linear | StrideKind::Learned => (f * tf).round() as usize,
                StrideKind::Quadratic => ((tf * f * f).round() as usize).max(1),
            }
        })
        .collect();
    for i in 1..k {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1;
        }
    }
    out[k - 1] = t_max;
    for i in (0..k - 1).rev() {
        out[i] = out[i].min(out[i + 1] - 1);
    }
    Ok(out)
}

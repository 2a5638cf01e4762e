//! Histogram-landmark intensity standardization.
//!
//! Each volume is summarized by its intensity percentiles at
//! [`PERCENTILES`]. Training volumes, each rescaled to `[0, 1]` by its own
//! minimum and maximum, are averaged into a standard scale. A volume is then
//! standardized by the piecewise-linear map sending its minimum to 0, its
//! landmarks to the standard landmarks and its maximum to 1.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::Volume;

pub const PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

/// Minimum, landmarks at [`PERCENTILES`] and maximum of `values`, with
/// linear interpolation between order statistics.
pub fn landmarks(values: &[f32]) -> Result<(f64, Vec<f64>, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot take percentiles of an empty volume"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let n = sorted.len();
    let at = |p: f64| {
        let pos = p / 100.0 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
        a + (b - a) * (pos - lo as f64)
    };
    Ok((sorted[0] as f64, PERCENTILES.iter().map(|p| at(*p)).collect(), sorted[n - 1] as f64))
}

/// Averaged landmark positions on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardScale {
    pub landmarks: Vec<f64>,
}

/// The piecewise-linear map for one particular volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Mapping {
    from: Vec<f64>,
    to: Vec<f64>,
}

impl Mapping {
    /// Monotone non-decreasing; clamps to `[0, 1]` outside the anchors.
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.from.partition_point(|a| *a <= x);
        if idx == 0 {
            return self.to[0];
        }
        if idx == self.from.len() {
            return self.to[idx - 1];
        }
        // from[idx - 1] <= x < from[idx], hence a non-empty segment
        let (x0, x1, y0, y1) = (self.from[idx - 1], self.from[idx], self.to[idx - 1], self.to[idx]);
        (y0 + (y1 - y0) * (x - x0) / (x1 - x0)).clamp(0.0, 1.0)
    }
}

impl StandardScale {
    pub fn learn(volumes: &[Volume]) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::invalid("standard scale needs at least one training volume"));
        }
        let mut sum = vec![0.0; PERCENTILES.len()];
        for v in volumes {
            let (min, marks, max) = landmarks(v.data.data())?;
            if max <= min {
                return Err(Error::invalid(format!("volume {} has constant intensity", v.id)));
            }
            for (s, m) in sum.iter_mut().zip(marks) {
                *s += (m - min) / (max - min);
            }
        }
        let scale = StandardScale {
            landmarks: sum.into_iter().map(|s| s / volumes.len() as f64).collect(),
        };
        scale.validate()?;
        Ok(scale)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.landmarks.len() == PERCENTILES.len()
            && self.landmarks.iter().all(|v| (0.0..=1.0).contains(v))
            && self.landmarks.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate standard landmarks {:?}", self.landmarks)))
        }
    }

    pub fn mapping(&self, volume: &Volume) -> Result<Mapping> {
        let (min, marks, max) = landmarks(volume.data.data())?;
        if max <= min {
            return Err(Error::invalid(format!("volume {} has constant intensity", volume.id)));
        }
        let mut from = vec![min];
        from.extend(marks);
        from.push(max);
        let mut to = vec![0.0];
        to.extend(&self.landmarks);
        to.push(1.0);
        Ok(Mapping { from, to })
    }

    pub fn apply(&self, volume: &Volume) -> Result<Volume> {
        let m = self.mapping(volume)?;
        let data = volume.data.data().iter().map(|v| m.eval(*v as f64) as f32).collect();
        let d = volume.data.dims();
        volume.with_data(data, [d[0], d[1], d[2]])
    }
}

impl fmt::Display for StandardScale {
    /// Comma-separated landmarks with round-trip precision.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.landmarks.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for StandardScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let landmarks = s
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::format(format!("bad landmark {v:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let scale = StandardScale { landmarks };
        scale.validate()?;
        Ok(scale)
    }
}

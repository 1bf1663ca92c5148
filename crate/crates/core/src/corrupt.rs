//! Noise corruptions for supervision images.
//!
//! Severity levels 1–5 use the constants of the common ImageNet-C style
//! benchmark; severity 0 is the identity.
//!
//! | severity | gaussian std | shot photons | pepper fraction |
//! |---|---|---|---|
//! | 1 | 0.08 | 60 | 0.03 |
//! | 2 | 0.12 | 25 | 0.06 |
//! | 3 | 0.18 | 12 | 0.09 |
//! | 4 | 0.26 | 5 | 0.17 |
//! | 5 | 0.38 | 3 | 0.27 |

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Gaussian,
    Shot,
    Pepper,
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "shot" => Ok(Self::Shot),
            "pepper" => Ok(Self::Pepper),
            other => Err(Error::invalid(
                "corruption kind",
                format!("unknown kind {other:?}"),
            )),
        }
    }
}

const GAUSSIAN_STD: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const PEPPER_FRACTION: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];

pub const MAX_SEVERITY: usize = 5;

impl Corruption {
    /// Noise parameter for a severity in `1..=5`.
    pub fn parameter(self, severity: usize) -> Result<f64> {
        if !(1..=MAX_SEVERITY).contains(&severity) {
            return Err(Error::invalid(
                "severity",
                format!("{severity} outside 1..={MAX_SEVERITY}"),
            ));
        }
        let table = match self {
            Self::Gaussian => &GAUSSIAN_STD,
            Self::Shot => &SHOT_PHOTONS,
            Self::Pepper => &PEPPER_FRACTION,
        };
        Ok(table[severity - 1])
    }
}

pub fn corrupt_image<R: Rng + ?Sized>(
    img: &Image,
    kind: Corruption,
    severity: usize,
    rng: &mut R,
) -> Result<Image> {
    if severity == 0 {
        return Ok(img.clone());
    }
    corrupt_with(img, kind, kind.parameter(severity)?, rng)
}

/// Apply a corruption with an explicit parameter: the noise std for
/// `Gaussian`, the photon count `p` for `Shot`, the pixel fraction for `Pepper`.
pub fn corrupt_with<R: Rng + ?Sized>(
    img: &Image,
    kind: Corruption,
    parameter: f64,
    rng: &mut R,
) -> Result<Image> {
    let mut out = img.clone();
    match kind {
        Corruption::Gaussian => {
            let noise = Normal::new(0.0, parameter)
                .map_err(|e| Error::invalid("gaussian std", e.to_string()))?;
            for v in &mut out.data {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        Corruption::Shot => {
            if parameter.is_nan() || parameter <= 0.0 {
                return Err(Error::invalid("shot photons", format!("{parameter}")));
            }
            for v in &mut out.data {
                let rate = *v * parameter;
                let count = if rate > 0.0 {
                    Poisson::new(rate)
                        .map_err(|e| Error::invalid("shot rate", e.to_string()))?
                        .sample(rng)
                } else {
                    0.0
                };
                *v = (count / parameter).clamp(0.0, 1.0);
            }
        }
        Corruption::Pepper => {
            if !(0.0..=1.0).contains(&parameter) {
                return Err(Error::invalid("pepper fraction", format!("{parameter}")));
            }
            for px in out.data.chunks_mut(3) {
                if rng.random::<f64>() < parameter {
                    px.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    Ok(out)
}

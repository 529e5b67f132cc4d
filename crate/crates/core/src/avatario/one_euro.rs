//! One-Euro low-pass filter for jittery landmark tracks.

use std::f64::consts::PI;

use crate::coremath::Vec2;
use crate::error::{Error, Result};
use crate::rig::FrameParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneEuroConfig {
    pub min_cutoff: f64,
    pub beta: f64,
    pub derivative_cutoff: f64,
}

impl Default for OneEuroConfig {
    fn default() -> Self {
        Self {
            min_cutoff: 1.0,
            beta: 0.007,
            derivative_cutoff: 1.0,
        }
    }
}

fn alpha(cutoff: f64, dt: f64) -> f64 {
    let tau = 1.0 / (2.0 * PI * cutoff);
    1.0 / (1.0 + tau / dt)
}

/// Scalar filter state.
#[derive(Debug, Clone, PartialEq)]
pub struct OneEuro {
    cfg: OneEuroConfig,
    last: Option<(f64, f64, f64)>,
}

impl OneEuro {
    pub fn new(cfg: OneEuroConfig) -> Self {
        Self { cfg, last: None }
    }

    /// Filters `x` observed at time `t`; the first sample passes through.
    pub fn filter(&mut self, t: f64, x: f64) -> Result<f64> {
        let Some((t0, x0, dx0)) = self.last else {
            self.last = Some((t, x, 0.0));
            return Ok(x);
        };
        let dt = t - t0;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "timestamps must increase ({t0} then {t})"
            )));
        }
        let dx = (x - x0) / dt;
        let a_d = alpha(self.cfg.derivative_cutoff, dt);
        let dx_hat = dx0 + a_d * (dx - dx0);
        let cutoff = self.cfg.min_cutoff + self.cfg.beta * dx_hat.abs();
        let a = alpha(cutoff, dt);
        let x_hat = x0 + a * (x - x0);
        self.last = Some((t, x_hat, dx_hat));
        Ok(x_hat)
    }
}

/// Smooths every landmark coordinate over a sequence in place.
pub fn smooth_landmarks(frames: &mut [FrameParams], cfg: OneEuroConfig) -> Result<()> {
    let mut filters = vec![OneEuro::new(cfg); 8];
    for f in frames.iter_mut() {
        let t = f.timestamp;
        let mut out = [Vec2::zeros(); 4];
        for (k, p) in f.ldmk.iter().enumerate() {
            out[k] = Vec2::new(filters[2 * k].filter(t, p.x)?, filters[2 * k + 1].filter(t, p.y)?);
        }
        f.ldmk = out;
    }
    Ok(())
}

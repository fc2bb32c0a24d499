//! Synthetic advected rain cells: Gaussian blobs moving with one constant
//! velocity per sequence and slowly spreading out.

use ndarray::Array3;
use rand::Rng;

use super::FrameSequence;
use crate::{config_check, Result, MAX_RAIN_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cadence_minutes: f64,
    pub min_cells: usize,
    pub max_cells: usize,
    /// Peak intensities are drawn uniformly from this range, in mm/h.
    pub peak_range: (f64, f64),
    /// Initial cell widths (Gaussian σ, pixels) as fractions of the shorter side.
    pub sigma_range: (f64, f64),
    /// Largest speed along each axis, pixels per frame.
    pub max_speed: f64,
    /// Growth of σ² per frame, pixels².
    pub diffusion: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 24,
            height: 64,
            width: 64,
            cadence_minutes: 5.0,
            min_cells: 2,
            max_cells: 4,
            peak_range: (1.0, 64.0),
            sigma_range: (0.05, 0.1),
            max_speed: 1.5,
            diffusion: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainCell {
    /// Centre at frame 0, `(row, col)` in pixels.
    pub origin: (f64, f64),
    pub peak: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub sequence: FrameSequence,
    /// `(rows, cols)` per frame.
    pub velocity: (f64, f64),
    pub cells: Vec<RainCell>,
}

/// Range of start positions along one axis that keep a cell of width `reach`
/// inside `[0, size)` while it travels `travel` pixels.
fn start_range(size: f64, reach: f64, travel: f64) -> (f64, f64) {
    let lo = reach + travel.min(0.0).abs();
    let hi = size - 1.0 - reach - travel.max(0.0);
    if lo <= hi {
        (lo, hi)
    } else {
        let mid = (size - 1.0 - travel) / 2.0;
        (mid, mid)
    }
}

/// Draws one sequence. Every random choice comes from `rng`, in a fixed order.
pub fn synth_advection<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthSequence> {
    config_check!(
        cfg.height >= 16 && cfg.width >= 16,
        "synthetic frames must be at least 16x16, got {}x{}",
        cfg.height,
        cfg.width
    );
    config_check!(
        cfg.min_cells >= 1 && cfg.min_cells <= cfg.max_cells,
        "cell count range {}..={} is empty",
        cfg.min_cells,
        cfg.max_cells
    );
    config_check!(
        cfg.peak_range.0 > 0.0 && cfg.peak_range.0 <= cfg.peak_range.1,
        "bad peak range {:?}",
        cfg.peak_range
    );
    config_check!(
        cfg.sigma_range.0 > 0.0 && cfg.sigma_range.0 <= cfg.sigma_range.1,
        "bad width range {:?}",
        cfg.sigma_range
    );
    config_check!(cfg.diffusion >= 0.0 && cfg.max_speed >= 0.0, "negative speed or diffusion");
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let span = cfg.frames.saturating_sub(1) as f64;
    // Keep total travel within a third of each side.
    let vmax_r = cfg.max_speed.min(h / 3.0 / span.max(1.0));
    let vmax_c = cfg.max_speed.min(w / 3.0 / span.max(1.0));
    let velocity = (
        rng.random_range(-vmax_r..=vmax_r),
        rng.random_range(-vmax_c..=vmax_c),
    );
    let n_cells = rng.random_range(cfg.min_cells..=cfg.max_cells);
    let mut cells = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let sigma = side * rng.random_range(cfg.sigma_range.0..=cfg.sigma_range.1);
        let peak = rng.random_range(cfg.peak_range.0..=cfg.peak_range.1);
        let final_sigma = (sigma * sigma + cfg.diffusion * span).sqrt();
        let reach = (2.0 * final_sigma).min(side / 4.0);
        let (r0, r1) = start_range(h, reach, velocity.0 * span);
        let (c0, c1) = start_range(w, reach, velocity.1 * span);
        let origin = (rng.random_range(r0..=r1), rng.random_range(c0..=c1));
        cells.push(RainCell {
            origin,
            peak,
            sigma,
        });
    }
    let frames = Array3::from_shape_fn((cfg.frames, cfg.height, cfg.width), |(t, i, j)| {
        let t = t as f64;
        let v: f64 = cells
            .iter()
            .map(|c| {
                let s2 = c.sigma * c.sigma + cfg.diffusion * t;
                let amp = c.peak * c.sigma * c.sigma / s2;
                let dr = i as f64 - (c.origin.0 + velocity.0 * t);
                let dc = j as f64 - (c.origin.1 + velocity.1 * t);
                amp * (-(dr * dr + dc * dc) / (2.0 * s2)).exp()
            })
            .sum();
        v.clamp(0.0, MAX_RAIN_RATE as f64) as f32
    });
    Ok(SynthSequence {
        sequence: FrameSequence::new(frames, cfg.cadence_minutes)?,
        velocity,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn draw(cfg: &SynthConfig, seed: u64) -> SynthSequence {
        synth_advection(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn seeded_and_bounded() {
        let cfg = SynthConfig::default();
        let a = draw(&cfg, 5);
        assert_eq!(a, draw(&cfg, 5));
        assert_ne!(a.sequence, draw(&cfg, 6).sequence);
        assert_eq!(a.sequence.frames().dim(), (24, 64, 64));
        assert!(a
            .sequence
            .frames()
            .iter()
            .all(|v| (0.0..=128.0).contains(v)));
        for c in &a.cells {
            assert!((1.0..=64.0).contains(&c.peak));
        }
    }

    #[test]
    fn rejects_small_grids() {
        let cfg = SynthConfig {
            height: 8,
            ..SynthConfig::default()
        };
        assert!(synth_advection(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

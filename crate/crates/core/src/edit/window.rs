use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::SamplingGrid;

/// Interval of the reverse trajectory, in fractions of `T`, during which an
/// edit is applied. `start >= end` since sampling runs from `T` down to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub const FULL: TimeWindow = TimeWindow { start: 1.0, end: 0.0 };
    /// Fine detail: from `0.5 T` to the end.
    pub const FINE: TimeWindow = TimeWindow { start: 0.5, end: 0.0 };
    /// Coarse structure: `[0.9 T, 0.8 T]`.
    pub const COARSE: TimeWindow = TimeWindow { start: 0.9, end: 0.8 };

    pub fn new(start: f64, end: f64) -> Result<Self> {
        let w = Self { start, end };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.start)
            && (0.0..=1.0).contains(&self.end)
            && self.start >= self.end;
        if !ok {
            return Err(Error::invalid(format!(
                "window [{}, {}] must satisfy 1 >= start >= end >= 0",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Inclusive `(hi, lo)` timesteps on `grid`, widened outward to the
    /// nearest grid points.
    pub fn grid_bounds(&self, grid: &SamplingGrid) -> (usize, usize) {
        let t_max = grid.num_train_steps() as f64;
        let ts = grid.timesteps();
        let hi_target = self.start * t_max;
        let lo_target = self.end * t_max;
        let hi = ts
            .iter()
            .copied()
            .filter(|&t| t as f64 >= hi_target - 1e-9)
            .min()
            .unwrap_or(ts[0]);
        let lo = ts
            .iter()
            .copied()
            .filter(|&t| t as f64 <= lo_target + 1e-9)
            .max()
            .unwrap_or(0);
        (hi, lo)
    }

    /// Whether the prediction at timestep `t` receives the edit.
    pub fn contains(&self, t: usize, grid: &SamplingGrid) -> bool {
        let (hi, lo) = self.grid_bounds(grid);
        t > 0 && lo <= t && t <= hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{NoiseSchedule, ScheduleParams};

    fn grid() -> SamplingGrid {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        SamplingGrid::for_schedule(&s).unwrap()
    }

    fn active(w: TimeWindow) -> Vec<usize> {
        let g = grid();
        g.timesteps().iter().copied().filter(|&t| w.contains(t, &g)).collect()
    }

    #[test]
    fn presets_map_onto_the_grid() {
        let fine = active(TimeWindow::FINE);
        assert_eq!(fine.first(), Some(&500));
        assert_eq!(fine.last(), Some(&20));
        assert_eq!(fine.len(), 25);
        assert_eq!(active(TimeWindow::COARSE), vec![900, 880, 860, 840, 820, 800]);
        assert_eq!(active(TimeWindow::FULL).len(), 50);
    }

    #[test]
    fn off_grid_bounds_widen() {
        // 0.51 T = 510 widens up to 520, 0.49 T = 490 down to 480.
        let w = TimeWindow::new(0.51, 0.49).unwrap();
        assert_eq!(active(w), vec![520, 500, 480]);
    }

    #[test]
    fn invalid_windows_rejected() {
        assert!(TimeWindow::new(0.2, 0.5).is_err());
        assert!(TimeWindow::new(1.2, 0.5).is_err());
        assert!(TimeWindow::new(0.5, -0.1).is_err());
    }
}

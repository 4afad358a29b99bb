//! Long/short stream window construction for a query frame.
//!
//! The short stream holds the last `n_st` consecutive frames ending at the
//! query frame; the long stream holds `n_lt` frames at stride `s` ending at
//! the query frame. Indices before the start of the video clamp to frame 0,
//! so every query time from t = 0 on yields full-size windows.

use crate::{GlsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    /// short-stream frame count
    pub n_st: usize,
    /// long-stream frame count
    pub n_lt: usize,
    /// long-stream sampling period in frames
    pub s: usize,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_st < 1 || self.n_lt < 1 || self.s < 1 {
            return Err(GlsError::config(format!(
                "stream config requires n_st, n_lt, s >= 1, got n_st={} n_lt={} s={}",
                self.n_st, self.n_lt, self.s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamWindow {
    pub short_idx: Vec<usize>,
    pub long_idx: Vec<usize>,
    pub query_t: usize,
}

/// Build the frame-index windows for query time `t`. Both windows end at
/// `t`; pre-video positions are clamped to frame 0.
pub fn sample_window(t: usize, cfg: &StreamConfig) -> StreamWindow {
    let short_idx = (0..cfg.n_st)
        .map(|i| t.saturating_sub(cfg.n_st - 1 - i))
        .collect();
    let long_idx = (0..cfg.n_lt)
        .map(|i| t.saturating_sub(cfg.s * (cfg.n_lt - 1 - i)))
        .collect();
    StreamWindow {
        short_idx,
        long_idx,
        query_t: t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_window_is_last_n_frames() {
        let cfg = StreamConfig { n_st: 8, n_lt: 1, s: 1 };
        let w = sample_window(100, &cfg);
        assert_eq!(w.short_idx, (93..=100).collect::<Vec<_>>());
    }

    #[test]
    fn long_window_is_strided_progression() {
        let cfg = StreamConfig { n_st: 1, n_lt: 8, s: 8 };
        let w = sample_window(100, &cfg);
        assert_eq!(w.long_idx, vec![44, 52, 60, 68, 76, 84, 92, 100]);
    }

    #[test]
    fn early_t_clamps_to_frame_zero() {
        let cfg = StreamConfig { n_st: 8, n_lt: 1, s: 1 };
        let w = sample_window(2, &cfg);
        assert_eq!(w.short_idx, vec![0, 0, 0, 0, 0, 0, 1, 2]);
    }

    #[test]
    fn brute_force_oracle_grid() {
        // independent enumeration of the clamped arithmetic progressions
        for &n_st in &[1usize, 3, 8] {
            for &n_lt in &[1usize, 4, 8] {
                for &s in &[1usize, 4, 16] {
                    let cfg = StreamConfig { n_st, n_lt, s };
                    for t in 0..=500usize {
                        let w = sample_window(t, &cfg);
                        let mut short = Vec::new();
                        for i in (0..n_st).rev() {
                            short.push(if t >= i { t - i } else { 0 });
                        }
                        let mut long = Vec::new();
                        for i in (0..n_lt).rev() {
                            let back = i * s;
                            long.push(if t >= back { t - back } else { 0 });
                        }
                        assert_eq!(w.short_idx, short, "t={} cfg={:?}", t, cfg);
                        assert_eq!(w.long_idx, long, "t={} cfg={:?}", t, cfg);
                    }
                }
            }
        }
    }

    #[test]
    fn window_invariants_hold() {
        for t in 0..300usize {
            let cfg = StreamConfig { n_st: 5, n_lt: 6, s: 7 };
            let w = sample_window(t, &cfg);
            // causality and anchoring
            assert_eq!(*w.short_idx.last().unwrap(), t);
            assert_eq!(*w.long_idx.last().unwrap(), t);
            assert!(w.short_idx.iter().all(|&i| i <= t));
            assert!(w.long_idx.iter().all(|&i| i <= t));
            // nondecreasing with bounded steps
            for pair in w.short_idx.windows(2) {
                assert!(pair[1] >= pair[0] && pair[1] - pair[0] <= 1);
            }
            for pair in w.long_idx.windows(2) {
                assert!(pair[1] >= pair[0] && pair[1] - pair[0] <= cfg.s);
            }
        }
    }

    #[test]
    fn windows_shift_by_one_after_warmup() {
        let cfg = StreamConfig { n_st: 4, n_lt: 3, s: 2 };
        for t in cfg.n_st - 1..100 {
            let w0 = sample_window(t, &cfg);
            let w1 = sample_window(t + 1, &cfg);
            let shifted: Vec<usize> = w0.short_idx.iter().map(|&i| i + 1).collect();
            assert_eq!(w1.short_idx, shifted);
        }
    }

    #[test]
    fn degenerate_streams_coincide() {
        // s = 1 and equal counts make both windows identical
        let cfg = StreamConfig { n_st: 6, n_lt: 6, s: 1 };
        for t in 0..50 {
            let w = sample_window(t, &cfg);
            assert_eq!(w.short_idx, w.long_idx);
        }
    }
}

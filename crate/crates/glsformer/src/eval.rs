//! Online evaluation: per-video frame accuracy and macro-averaged
//! precision/recall/Jaccard, plus a color-ribbon rendering of predicted
//! versus ground-truth step tracks.

use std::path::Path;

use autodiff::Tensor;

use crate::model::{forward_logits, ModelConfig, ModelParams};
use crate::sampler::sample_window;
use crate::synth::LabeledVideo;
use crate::train::argmax;
use crate::{GlsError, Result};

/// Frame access used during prediction. Kept behind a trait so tests can
/// verify online causality: predicting frame t may only touch frames <= t.
pub trait FrameSource {
    fn num_frames(&self) -> usize;
    /// Gather frames by index into a [k, H, W, C] tensor.
    fn gather(&self, indices: &[usize]) -> Tensor;
}

impl FrameSource for LabeledVideo {
    fn num_frames(&self) -> usize {
        LabeledVideo::num_frames(self)
    }

    fn gather(&self, indices: &[usize]) -> Tensor {
        LabeledVideo::gather(self, indices)
    }
}

/// Predicted and true step ids at the evaluated frames of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionTrack {
    pub frames: Vec<usize>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Greedy per-frame prediction over every `stride`-th frame. Only frames
/// at or before the query frame are ever requested from the source.
pub fn predict_track(
    params: &ModelParams,
    cfg: &ModelConfig,
    source: &dyn FrameSource,
    truth: &[usize],
    stride: usize,
) -> Result<PredictionTrack> {
    if stride == 0 {
        return Err(GlsError::config("evaluation stride must be positive"));
    }
    let scfg = cfg.stream_config();
    let mut track = PredictionTrack {
        frames: Vec::new(),
        predicted: Vec::new(),
        truth: Vec::new(),
    };
    for t in (0..source.num_frames()).step_by(stride) {
        let w = sample_window(t, &scfg);
        let st = source.gather(&w.short_idx);
        let lt = if cfg.gating_mode.uses_long_stream() {
            Some(source.gather(&w.long_idx))
        } else {
            None
        };
        let logits = forward_logits(params, cfg, &st, lt.as_ref())?;
        track.frames.push(t);
        track.predicted.push(argmax(&logits));
        track.truth.push(truth[t]);
    }
    Ok(track)
}

/// Percent scores, macro-averaged as described on [`metrics_for_tracks`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// confusion[truth][pred]
fn confusion(track: &PredictionTrack, num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &g) in track.predicted.iter().zip(&track.truth) {
        m[g][p] += 1;
    }
    m
}

/// Metrics of one video: frame accuracy, and precision/recall/Jaccard
/// macro-averaged over the classes present in its ground truth. Undefined
/// ratios (0/0) count as zero.
fn video_metrics(track: &PredictionTrack, num_classes: usize) -> Metrics {
    let m = confusion(track, num_classes);
    let total: usize = track.truth.len();
    let correct: usize = (0..num_classes).map(|c| m[c][c]).sum();
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut present = 0usize;
    let (mut p_sum, mut r_sum, mut j_sum) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        let tp = m[c][c];
        let fn_ = m[c].iter().sum::<usize>() - tp;
        let fp = (0..num_classes).map(|g| m[g][c]).sum::<usize>() - tp;
        if tp + fn_ == 0 {
            continue; // class absent from this video's ground truth
        }
        present += 1;
        p_sum += ratio(tp, tp + fp);
        r_sum += ratio(tp, tp + fn_);
        j_sum += ratio(tp, tp + fp + fn_);
    }
    let denom = present.max(1) as f64;
    Metrics {
        accuracy: 100.0 * ratio(correct, total),
        precision: 100.0 * p_sum / denom,
        recall: 100.0 * r_sum / denom,
        jaccard: 100.0 * j_sum / denom,
    }
}

/// Average the per-video metrics over a set of tracks.
pub fn metrics_for_tracks(tracks: &[PredictionTrack], num_classes: usize) -> Metrics {
    let n = tracks.len().max(1) as f64;
    let mut out = Metrics::default();
    for t in tracks {
        let m = video_metrics(t, num_classes);
        out.accuracy += m.accuracy / n;
        out.precision += m.precision / n;
        out.recall += m.recall / n;
        out.jaccard += m.jaccard / n;
    }
    out
}

/// Predict every `stride`-th frame of each video and report averaged
/// metrics.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    videos: &[LabeledVideo],
    stride: usize,
) -> Result<Metrics> {
    let mut tracks = Vec::with_capacity(videos.len());
    for v in videos {
        tracks.push(predict_track(params, cfg, v, &v.labels, stride)?);
    }
    Ok(metrics_for_tracks(&tracks, cfg.num_classes))
}

/// Mean and (population) standard deviation of each metric across several
/// checkpoints evaluated on the same videos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub mean: Metrics,
    pub std: Metrics,
}

pub fn evaluate_checkpoints(
    checkpoints: &[&ModelParams],
    cfg: &ModelConfig,
    videos: &[LabeledVideo],
    stride: usize,
) -> Result<MetricsSummary> {
    if checkpoints.is_empty() {
        return Err(GlsError::config("need at least one checkpoint to evaluate"));
    }
    let all: Vec<Metrics> = checkpoints
        .iter()
        .map(|p| evaluate(p, cfg, videos, stride))
        .collect::<Result<Vec<_>>>()?;
    let n = all.len() as f64;
    let field = |f: fn(&Metrics) -> f64| {
        let mean = all.iter().map(f).sum::<f64>() / n;
        let var = all.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (am, asd) = field(|m| m.accuracy);
    let (pm, psd) = field(|m| m.precision);
    let (rm, rsd) = field(|m| m.recall);
    let (jm, jsd) = field(|m| m.jaccard);
    Ok(MetricsSummary {
        mean: Metrics {
            accuracy: am,
            precision: pm,
            recall: rm,
            jaccard: jm,
        },
        std: Metrics {
            accuracy: asd,
            precision: psd,
            recall: rsd,
            jaccard: jsd,
        },
    })
}

/// Distinct colors for step ids.
fn class_color(c: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 64, 52],
        [60, 130, 230],
        [70, 190, 90],
        [240, 190, 40],
        [160, 90, 220],
        [240, 130, 50],
        [90, 200, 200],
        [200, 100, 150],
    ];
    PALETTE[c % PALETTE.len()]
}

/// Render ground truth (top band) against predictions (bottom band) as a
/// binary P6 PPM image, one pixel column per evaluated frame.
pub fn render_ribbon(path: &Path, track: &PredictionTrack) -> Result<()> {
    let w = track.predicted.len();
    if w == 0 {
        return Err(GlsError::config("cannot render an empty track"));
    }
    const BAND: usize = 16;
    const GAP: usize = 2;
    let h = 2 * BAND + GAP;
    let mut buf = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = if y < BAND {
                class_color(track.truth[x])
            } else if y < BAND + GAP {
                [0, 0, 0]
            } else {
                class_color(track.predicted[x])
            };
            buf.extend_from_slice(&px);
        }
    }
    std::fs::write(path, buf).map_err(|e| GlsError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track(pred: &[usize], truth: &[usize]) -> PredictionTrack {
        PredictionTrack {
            frames: (0..pred.len()).collect(),
            predicted: pred.to_vec(),
            truth: truth.to_vec(),
        }
    }

    #[test]
    fn perfect_prediction_scores_100_everywhere() {
        let t = track(&[0, 1, 2, 2, 1], &[0, 1, 2, 2, 1]);
        let m = video_metrics(&t, 3);
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.jaccard),
            (100.0, 100.0, 100.0, 100.0)
        );
    }

    #[test]
    fn fully_wrong_prediction_scores_zero() {
        let t = track(&[1, 0, 1], &[0, 1, 0]);
        let m = video_metrics(&t, 2);
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.jaccard),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn absent_classes_are_excluded_from_the_macro_average() {
        // class 2 never occurs in ground truth; it must not dilute recall
        let t = track(&[0, 0, 1, 1], &[0, 0, 1, 1]);
        let m = video_metrics(&t, 3);
        assert_eq!(m.recall, 100.0);
        assert_eq!(m.jaccard, 100.0);
    }

    /// Independent re-derivation: per-class tallies by direct counting
    /// loops rather than a confusion matrix.
    fn brute_force(track: &PredictionTrack, num_classes: usize) -> Metrics {
        let n = track.truth.len();
        let correct = (0..n).filter(|&i| track.predicted[i] == track.truth[i]).count();
        let mut p = 0.0;
        let mut r = 0.0;
        let mut j = 0.0;
        let mut present = 0;
        for c in 0..num_classes {
            let tp = (0..n)
                .filter(|&i| track.predicted[i] == c && track.truth[i] == c)
                .count();
            let fp = (0..n)
                .filter(|&i| track.predicted[i] == c && track.truth[i] != c)
                .count();
            let fn_ = (0..n)
                .filter(|&i| track.predicted[i] != c && track.truth[i] == c)
                .count();
            if tp + fn_ == 0 {
                continue;
            }
            present += 1;
            if tp + fp > 0 {
                p += tp as f64 / (tp + fp) as f64;
            }
            r += tp as f64 / (tp + fn_) as f64;
            if tp + fp + fn_ > 0 {
                j += tp as f64 / (tp + fp + fn_) as f64;
            }
        }
        let d = present.max(1) as f64;
        Metrics {
            accuracy: 100.0 * correct as f64 / n as f64,
            precision: 100.0 * p / d,
            recall: 100.0 * r / d,
            jaccard: 100.0 * j / d,
        }
    }

    #[test]
    fn metrics_match_brute_force_on_random_tracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let classes = rng.gen_range(2..7);
            let len = rng.gen_range(1..60);
            let t = PredictionTrack {
                frames: (0..len).collect(),
                predicted: (0..len).map(|_| rng.gen_range(0..classes)).collect(),
                truth: (0..len).map(|_| rng.gen_range(0..classes)).collect(),
            };
            let a = video_metrics(&t, classes);
            let b = brute_force(&t, classes);
            for (x, y) in [
                (a.accuracy, b.accuracy),
                (a.precision, b.precision),
                (a.recall, b.recall),
                (a.jaccard, b.jaccard),
            ] {
                assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn summary_std_is_zero_for_identical_checkpoints() {
        let tracks = [track(&[0, 1], &[0, 0])];
        let m = metrics_for_tracks(&tracks, 2);
        assert_eq!(m.accuracy, 50.0);
    }

    #[test]
    fn ribbon_has_ppm_header_and_expected_size() {
        let t = track(&[0, 1, 2, 3], &[3, 2, 1, 0]);
        let dir = std::env::temp_dir().join("glsformer-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ribbon.ppm");
        render_ribbon(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n4 34\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 4 * 34 * 3);
    }
}

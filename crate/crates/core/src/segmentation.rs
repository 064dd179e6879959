//! Layer boundary detection on the normalized laser signal.
//!
//! Three-state automaton: `LayerTransition` (laser idle between layers),
//! `Sintering` (inside a layer) and `Leaving` (laser went OFF inside a layer
//! but the OFF run is not yet long enough to call the layer finished).

use crate::signal_prep::BinaryLaserSignal;

/// Inclusive sample interval of one sintered layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpan {
    pub start: usize,
    pub end: usize,
}

impl LayerSpan {
    pub fn sample_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerBoundaries {
    pub layers: Vec<LayerSpan>,
}

impl LayerBoundaries {
    pub fn new(layers: Vec<LayerSpan>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks ordering and that every span lies within `signal_len` samples.
    pub fn is_well_formed(&self, signal_len: usize) -> bool {
        self.layers
            .iter()
            .all(|l| l.start <= l.end && l.end < signal_len)
            && self.layers.windows(2).all(|w| w[0].end < w[1].start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentationConfig {
    /// An OFF run longer than this many samples ends the layer.
    pub off_run_threshold: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            off_run_threshold: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    LayerTransition,
    Sintering,
    Leaving { off_run: usize },
}

/// Runs the layer automaton over `laser`.
///
/// A layer starts at the first ON sample after an idle phase. OFF runs of at
/// most `off_run_threshold` samples keep the layer open; the first OFF run
/// exceeding it closes the layer at its last ON sample. A layer still open at
/// the end of the signal is closed the same way.
pub fn segment_layers(laser: &BinaryLaserSignal, cfg: &SegmentationConfig) -> LayerBoundaries {
    let threshold = cfg.off_run_threshold.max(1);
    let mut layers = Vec::new();
    let mut phase = Phase::LayerTransition;
    let mut start = 0;
    let mut last_on = 0;

    for (i, state) in laser.states.iter().enumerate() {
        let on = state.is_on();
        phase = match (phase, on) {
            (Phase::LayerTransition, false) => Phase::LayerTransition,
            (Phase::LayerTransition, true) => {
                start = i;
                last_on = i;
                Phase::Sintering
            }
            (Phase::Sintering | Phase::Leaving { .. }, true) => {
                last_on = i;
                Phase::Sintering
            }
            (Phase::Sintering, false) => Phase::Leaving { off_run: 1 },
            (Phase::Leaving { off_run }, false) => Phase::Leaving {
                off_run: off_run + 1,
            },
        };
        if let Phase::Leaving { off_run } = phase {
            if off_run > threshold {
                layers.push(LayerSpan {
                    start,
                    end: last_on,
                });
                phase = Phase::LayerTransition;
            }
        }
    }
    if phase != Phase::LayerTransition {
        layers.push(LayerSpan {
            start,
            end: last_on,
        });
    }
    LayerBoundaries { layers }
}

/// Durations of the sintering phases and of the idle gaps between them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub sample_rate_hz: f64,
    pub durations_samples: Vec<usize>,
    pub gaps_samples: Vec<usize>,
}

impl LayerStatistics {
    pub fn durations_seconds(&self) -> Vec<f64> {
        self.durations_samples
            .iter()
            .map(|&d| d as f64 / self.sample_rate_hz)
            .collect()
    }

    pub fn gaps_seconds(&self) -> Vec<f64> {
        self.gaps_samples
            .iter()
            .map(|&d| d as f64 / self.sample_rate_hz)
            .collect()
    }
}

pub fn layer_statistics(b: &LayerBoundaries, sample_rate_hz: f64) -> LayerStatistics {
    LayerStatistics {
        sample_rate_hz,
        durations_samples: b.layers.iter().map(LayerSpan::sample_count).collect(),
        gaps_samples: b
            .layers
            .windows(2)
            .map(|w| w[1].start - w[0].end - 1)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bursts(parts: &[(bool, usize)]) -> BinaryLaserSignal {
        BinaryLaserSignal::from_bools(parts.iter().flat_map(|&(on, n)| std::iter::repeat_n(on, n)))
    }

    #[test]
    fn long_gap_splits_layers() {
        let sig = bursts(&[(true, 50), (false, 2000), (true, 50)]);
        let b = segment_layers(&sig, &SegmentationConfig::default());
        assert_eq!(
            b.layers,
            vec![
                LayerSpan { start: 0, end: 49 },
                LayerSpan {
                    start: 2050,
                    end: 2099
                }
            ]
        );
    }

    #[test]
    fn short_gap_keeps_layer_open() {
        let sig = bursts(&[(true, 50), (false, 500), (true, 50), (false, 2000)]);
        let b = segment_layers(&sig, &SegmentationConfig::default());
        assert_eq!(b.layers, vec![LayerSpan { start: 0, end: 599 }]);
    }

    #[test]
    fn threshold_is_strict() {
        let cfg = SegmentationConfig {
            off_run_threshold: 3,
        };
        let merged = bursts(&[(false, 2), (true, 1), (false, 3), (true, 1)]);
        assert_eq!(segment_layers(&merged, &cfg).len(), 1);
        let split = bursts(&[(false, 2), (true, 1), (false, 4), (true, 1)]);
        assert_eq!(segment_layers(&split, &cfg).len(), 2);
    }

    #[test]
    fn all_off_yields_nothing() {
        let sig = bursts(&[(false, 5000)]);
        assert!(segment_layers(&sig, &SegmentationConfig::default()).is_empty());
    }

    #[test]
    fn on_at_first_sample_starts_layer() {
        let sig = bursts(&[(true, 3), (false, 2)]);
        let b = segment_layers(&sig, &SegmentationConfig::default());
        assert_eq!(b.layers, vec![LayerSpan { start: 0, end: 2 }]);
    }

    #[test]
    fn statistics_durations_and_gaps() {
        let b = LayerBoundaries::new(vec![LayerSpan {
            start: 10,
            end: 109,
        }]);
        let s = layer_statistics(&b, 20_000.0);
        assert_eq!(s.durations_samples, vec![100]);
        assert!((s.durations_seconds()[0] - 0.005).abs() < 1e-12);
        assert!(s.gaps_samples.is_empty());

        let b = LayerBoundaries::new(vec![
            LayerSpan { start: 0, end: 9 },
            LayerSpan {
                start: 2010,
                end: 2019,
            },
        ]);
        assert_eq!(layer_statistics(&b, 20_000.0).gaps_samples, vec![2000]);
    }
}

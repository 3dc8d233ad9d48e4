//! Nearest-neighbor alignment of multi-rate streams onto a reference clock.

use thiserror::Error;

/// Largest accepted pairing skew unless overridden: half the 100 ms
/// inter-device offset bound.
pub const DEFAULT_MAX_GAP_MS: i64 = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("reference stream {0} is empty")]
    EmptyReference(usize),
    #[error("reference stream {reference} does not exist ({streams} streams)")]
    UnknownReference { reference: usize, streams: usize },
    #[error("stream {stream} is not strictly increasing at sample {index}")]
    NotTimeOrdered { stream: usize, index: usize },
    #[error("max gap {0} ms is negative")]
    NegativeMaxGap(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyncEntry {
    /// Nearest sample and its signed offset `sample − reference` in ms.
    Matched { index: usize, gap_ms: i64 },
    /// The nearest sample is farther than the max gap.
    OutOfRange { gap_ms: i64 },
    /// The stream has no samples.
    Empty,
}

impl SyncEntry {
    pub fn index(&self) -> Option<usize> {
        match self {
            SyncEntry::Matched { index, .. } => Some(*index),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, SyncEntry::Matched { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedFrame {
    pub timestamp_ms: i64,
    /// One entry per input stream, in input order.
    pub entries: Vec<SyncEntry>,
}

/// Pairs every reference sample with the nearest sample of each stream.
///
/// Ties (equal distance on both sides) go to the earlier sample. Runs a
/// single forward pointer per stream, so the cost is linear in the total
/// sample count.
pub fn synchronize(
    streams: &[&[i64]],
    reference: usize,
    max_gap_ms: i64,
) -> Result<Vec<AlignedFrame>, SyncError> {
    if max_gap_ms < 0 {
        return Err(SyncError::NegativeMaxGap(max_gap_ms));
    }
    let Some(reference_ts) = streams.get(reference) else {
        return Err(SyncError::UnknownReference {
            reference,
            streams: streams.len(),
        });
    };
    if reference_ts.is_empty() {
        return Err(SyncError::EmptyReference(reference));
    }
    for (s, ts) in streams.iter().enumerate() {
        if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SyncError::NotTimeOrdered {
                stream: s,
                index: i + 1,
            });
        }
    }

    let mut cursors = vec![0usize; streams.len()];
    let frames = reference_ts
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let entries = streams
                .iter()
                .enumerate()
                .map(|(s, ts)| {
                    if s == reference {
                        return SyncEntry::Matched { index: r, gap_ms: 0 };
                    }
                    if ts.is_empty() {
                        return SyncEntry::Empty;
                    }
                    // advance to the last sample at or before t
                    let c = &mut cursors[s];
                    while *c + 1 < ts.len() && ts[*c + 1] <= t {
                        *c += 1;
                    }
                    let mut best = *c;
                    if ts[best] < t && best + 1 < ts.len() {
                        let before = t - ts[best];
                        let after = ts[best + 1] - t;
                        if after < before {
                            best += 1;
                        }
                    }
                    let gap_ms = ts[best] - t;
                    if gap_ms.abs() <= max_gap_ms {
                        SyncEntry::Matched { index: best, gap_ms }
                    } else {
                        SyncEntry::OutOfRange { gap_ms }
                    }
                })
                .collect();
            AlignedFrame {
                timestamp_ms: t,
                entries,
            }
        })
        .collect();
    Ok(frames)
}

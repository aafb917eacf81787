//! Segmentation of annotated recordings into fixed-length clips.
//!
//! For a call no longer than the clip length `L`, one clip start is drawn
//! from `U[t_end - L, t_start]` (intersected with the recording bounds), so
//! the call is fully contained at a random position. Calls longer than `L`
//! are chunked into clips that cover them, non-overlapping whenever
//! possible; a chunk is only extracted when at least one second of the call
//! it covers is not already supported by earlier clips. A revisit pass then
//! guarantees that every unsupported call stretch of one second or more
//! receives an additional clip, processing calls left to right. Background
//! stretches of at least `L` seconds become evenly spaced negative clips.
//! Every clip is labeled positive for each species whose call overlaps it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum unsupported call duration that forces another clip.
pub const REVISIT_THRESHOLD_S: f64 = 1.0;

const EPS: f64 = 1e-9;

/// One annotated call, as ingested from the annotations CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub recording_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub species: String,
}

/// A recording with its annotations and partition assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingAnnotations {
    pub recording_id: String,
    pub duration_s: f64,
    pub partition: String,
    pub calls: Vec<Annotation>,
}

/// A fixed-length clip with its per-task label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub recording_id: String,
    pub partition: String,
    pub start_s: f64,
    pub length_s: f64,
    /// One flag per task in vocabulary order.
    pub labels: Vec<bool>,
    /// Species names carried for the manifest.
    pub species: Vec<String>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Measure of `[s, e]` not covered by the union of clip intervals, together
/// with the leftmost uncovered run at least `min_len` long.
fn uncovered(
    s: f64,
    e: f64,
    clips: &[f64],
    len: f64,
) -> (f64, Option<(f64, f64)>, Option<(f64, f64)>) {
    let mut covered: Vec<(f64, f64)> = clips
        .iter()
        .map(|&c| (c.max(s), (c + len).min(e)))
        .filter(|(a, b)| b > a)
        .collect();
    covered.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in covered {
        match merged.last_mut() {
            Some((_, pe)) if a <= *pe + EPS => *pe = pe.max(b),
            _ => merged.push((a, b)),
        }
    }
    let mut gaps: Vec<(f64, f64)> = Vec::new();
    let mut cursor = s;
    for (a, b) in &merged {
        if *a > cursor + EPS {
            gaps.push((cursor, *a));
        }
        cursor = cursor.max(*b);
    }
    if e > cursor + EPS {
        gaps.push((cursor, e));
    }
    let total: f64 = gaps.iter().map(|(a, b)| b - a).sum();
    let first = gaps.first().copied();
    let first_big = gaps
        .iter()
        .find(|(a, b)| b - a >= REVISIT_THRESHOLD_S - EPS)
        .copied();
    (total, first, first_big)
}

/// Segment one recording into positive and negative clips.
pub fn segment_recording(
    rec: &RecordingAnnotations,
    vocab: &[String],
    clip_len: f64,
    seed: u64,
) -> Result<Vec<Clip>> {
    if rec.duration_s < clip_len {
        return Err(Error::Config(format!(
            "recording {} is shorter ({}s) than the clip length {clip_len}s",
            rec.recording_id, rec.duration_s
        )));
    }
    for call in &rec.calls {
        if call.start_s >= call.end_s {
            return Err(Error::Config(format!(
                "call in {} has start {} >= end {}",
                rec.recording_id, call.start_s, call.end_s
            )));
        }
        if call.start_s < 0.0 || call.end_s > rec.duration_s + EPS {
            return Err(Error::Config(format!(
                "call [{}, {}] outside recording {} bounds [0, {}]",
                call.start_s, call.end_s, rec.recording_id, rec.duration_s
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&rec.recording_id));

    // deterministic left-to-right processing order
    let mut calls = rec.calls.clone();
    calls.sort_by(|a, b| {
        (a.start_s, a.end_s, a.species.as_str())
            .partial_cmp(&(b.start_s, b.end_s, b.species.as_str()))
            .unwrap()
    });

    let max_start = rec.duration_s - clip_len;
    let mut starts: Vec<f64> = Vec::new();

    // main pass
    for call in &calls {
        let dur = call.end_s - call.start_s;
        if dur <= clip_len + EPS {
            let supported = starts
                .iter()
                .any(|&c| c <= call.start_s + EPS && call.end_s <= c + clip_len + EPS);
            if !supported {
                let lo = (call.end_s - clip_len).max(0.0);
                let hi = call.start_s.min(max_start);
                let t0 = if lo >= hi {
                    lo.min(max_start).max(0.0)
                } else {
                    rng.random_range(lo..=hi)
                };
                starts.push(t0);
            }
        } else {
            // chunk a long call; last chunk is end-aligned
            let k = (dur / clip_len).ceil() as usize;
            for i in 0..k {
                let chunk_start = if i + 1 == k {
                    (call.end_s - clip_len).min(max_start).max(0.0)
                } else {
                    (call.start_s + i as f64 * clip_len).min(max_start)
                };
                let cov_lo = chunk_start.max(call.start_s);
                let cov_hi = (chunk_start + clip_len).min(call.end_s);
                let (unsupported, _, _) = uncovered(cov_lo, cov_hi, &starts, clip_len);
                if unsupported >= REVISIT_THRESHOLD_S - EPS {
                    starts.push(chunk_start);
                }
            }
        }
    }

    // revisit pass: every remaining unsupported stretch of at least one
    // second yields an additional clip
    for call in &calls {
        let dur = call.end_s - call.start_s;
        if dur <= clip_len + EPS {
            continue;
        }
        loop {
            let (_, _, gap) = uncovered(call.start_s, call.end_s, &starts, clip_len);
            match gap {
                Some((a, _)) => starts.push(a.min(max_start).max(0.0)),
                None => break,
            }
        }
    }

    let mut clips: Vec<Clip> = starts
        .iter()
        .map(|&t0| make_clip(rec, vocab, &calls, t0, clip_len))
        .collect();

    // background stretches >= clip_len chunk into negative clips
    let mut call_iv: Vec<(f64, f64)> = calls.iter().map(|c| (c.start_s, c.end_s)).collect();
    call_iv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in call_iv {
        match merged.last_mut() {
            Some((_, pe)) if a <= *pe + EPS => *pe = pe.max(b),
            _ => merged.push((a, b)),
        }
    }
    let mut background: Vec<(f64, f64)> = Vec::new();
    let mut cursor = 0.0;
    for (a, b) in &merged {
        if *a > cursor {
            background.push((cursor, *a));
        }
        cursor = *b;
    }
    if rec.duration_s > cursor {
        background.push((cursor, rec.duration_s));
    }
    for (a, b) in background {
        let len = b - a;
        if len + EPS < clip_len {
            continue;
        }
        let k = (len / clip_len).ceil() as usize;
        for i in 0..k {
            let t0 = if k == 1 {
                a
            } else {
                a + i as f64 * (len - clip_len) / (k - 1) as f64
            };
            clips.push(make_clip(rec, vocab, &calls, t0, clip_len));
        }
    }

    Ok(clips)
}

fn make_clip(
    rec: &RecordingAnnotations,
    vocab: &[String],
    calls: &[Annotation],
    start: f64,
    clip_len: f64,
) -> Clip {
    let end = start + clip_len;
    let mut labels = vec![false; vocab.len()];
    let mut species = Vec::new();
    for call in calls {
        if call.start_s < end - EPS && start < call.end_s - EPS {
            if let Some(t) = vocab.iter().position(|v| v == &call.species) {
                if !labels[t] {
                    labels[t] = true;
                    species.push(call.species.clone());
                }
            }
        }
    }
    species.sort();
    Clip {
        recording_id: rec.recording_id.clone(),
        partition: rec.partition.clone(),
        start_s: start,
        length_s: clip_len,
        labels,
        species,
    }
}

/// Vocabulary: the sorted unique species over a set of recordings.
pub fn build_vocabulary(recordings: &[RecordingAnnotations]) -> Vec<String> {
    let mut set: Vec<String> = recordings
        .iter()
        .flat_map(|r| r.calls.iter().map(|c| c.species.clone()))
        .collect();
    set.sort();
    set.dedup();
    set
}

/// Segment a whole dataset; partitions stay recording-disjoint because every
/// clip inherits its recording's partition.
pub fn segment_dataset(
    recordings: &[RecordingAnnotations],
    clip_len: f64,
    seed: u64,
) -> Result<(Vec<Clip>, Vec<String>)> {
    let vocab = build_vocabulary(recordings);
    let mut clips = Vec::new();
    for rec in recordings {
        clips.extend(segment_recording(rec, &vocab, clip_len, seed)?);
    }
    Ok((clips, vocab))
}

/// Load the annotations CSV: `recording_id,start_s,end_s,species`.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let ann: Annotation = row.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        out.push(ann);
    }
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
struct RecordingRow {
    recording_id: String,
    duration_s: f64,
    partition: String,
}

/// Load the recordings CSV (`recording_id,duration_s,partition`) and attach
/// annotations to each recording.
pub fn load_recordings(
    path: &Path,
    annotations: &[Annotation],
) -> Result<Vec<RecordingAnnotations>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut by_id: BTreeMap<String, RecordingAnnotations> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: RecordingRow =
            row.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        by_id.insert(
            row.recording_id.clone(),
            RecordingAnnotations {
                recording_id: row.recording_id,
                duration_s: row.duration_s,
                partition: row.partition,
                calls: Vec::new(),
            },
        );
    }
    for ann in annotations {
        match by_id.get_mut(&ann.recording_id) {
            Some(rec) => rec.calls.push(ann.clone()),
            None => {
                return Err(Error::Parse(format!(
                    "annotation references unknown recording '{}'",
                    ann.recording_id
                )))
            }
        }
    }
    Ok(by_id.into_values().collect())
}

/// Write the clips manifest CSV:
/// `recording_id,partition,start_s,length_s,labels` with labels joined by
/// `;` (empty for negatives).
pub fn write_clip_manifest(path: &Path, clips: &[Clip]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    w.write_record(["recording_id", "partition", "start_s", "length_s", "labels"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for c in clips {
        w.write_record([
            c.recording_id.as_str(),
            c.partition.as_str(),
            &format!("{:.6}", c.start_s),
            &format!("{:.6}", c.length_s),
            &c.species.join(";"),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Manifest row as read back by the feature extractor.
#[derive(Debug, Clone, Deserialize)]
pub struct ManifestRow {
    pub recording_id: String,
    pub partition: String,
    pub start_s: f64,
    pub length_s: f64,
    pub labels: String,
}

pub fn read_clip_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

//! Stimulus transcripts, fMRI runs, and the windowing that pairs them.
//!
//! A run is cut into fixed-length non-overlapping windows (20 s by
//! default). Each window carries the BOLD frames recorded in that span and
//! the words whose onset falls inside it, plus a per-TR word count and the
//! special-token annotated target used by one of the two inference
//! strategies.

use crate::tensor::Mat;
use crate::{Error, Result};
use std::collections::BTreeSet;
use std::path::Path;

/// Start-of-text mark prepended to annotated targets.
pub const START_MARK: &str = "=";
/// End-of-TR mark; one per repetition time in annotated targets.
pub const TR_MARK: &str = "$";

/// Non-speech annotation labels dropped from transcripts by default.
pub const DEFAULT_ANNOTATIONS: [&str; 5] = ["cough", "laugh", "lip smack", "misc noise", "silence"];

/// One spoken word with its audio-aligned timing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WordEvent {
    pub word: String,
    pub onset: f64,
    pub offset: f64,
}

/// The text side of one story: onset-sorted word events.
#[derive(Debug, Clone)]
pub struct StimulusTranscript {
    pub story_id: String,
    pub events: Vec<WordEvent>,
    pub annotations: BTreeSet<String>,
}

impl StimulusTranscript {
    /// Build a transcript, sorting events by onset and validating timing.
    pub fn new(story_id: impl Into<String>, mut events: Vec<WordEvent>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !(e.onset.is_finite() && e.offset.is_finite()) || e.onset < 0.0 {
                return Err(Error::Validation(format!(
                    "event {i} ({:?}): onset/offset must be finite and onset >= 0",
                    e.word
                )));
            }
            if e.offset < e.onset {
                return Err(Error::Validation(format!(
                    "event {i} ({:?}): offset {} < onset {}",
                    e.word, e.offset, e.onset
                )));
            }
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        Ok(StimulusTranscript {
            story_id: story_id.into(),
            events,
            annotations: DEFAULT_ANNOTATIONS.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn words(&self) -> Vec<String> {
        self.events.iter().map(|e| e.word.clone()).collect()
    }
}

/// The brain side of one story for one subject: TR-sampled voxel frames.
#[derive(Debug, Clone)]
pub struct FmriRun {
    pub story_id: String,
    pub subject_id: String,
    pub tr_seconds: f64,
    /// [n_tr x n_voxels], z-scored BOLD amplitudes.
    pub frames: Mat,
    /// Optional ROI selection over voxel columns.
    pub roi_mask: Option<Vec<bool>>,
}

impl FmriRun {
    pub fn new(
        story_id: impl Into<String>,
        subject_id: impl Into<String>,
        tr_seconds: f64,
        frames: Mat,
        roi_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if tr_seconds <= 0.0 || !tr_seconds.is_finite() {
            return Err(Error::Validation(format!(
                "tr_seconds must be positive, got {tr_seconds}"
            )));
        }
        if frames.rows == 0 {
            return Err(Error::Validation("run must have at least one TR".into()));
        }
        if !frames.all_finite() {
            return Err(Error::Validation("fMRI frames contain non-finite values".into()));
        }
        if let Some(mask) = &roi_mask {
            if mask.len() != frames.cols {
                return Err(Error::Shape {
                    expected: format!("roi_mask of length {}", frames.cols),
                    got: format!("{}", mask.len()),
                });
            }
        }
        Ok(FmriRun {
            story_id: story_id.into(),
            subject_id: subject_id.into(),
            tr_seconds,
            frames,
            roi_mask,
        })
    }

    pub fn n_tr(&self) -> usize {
        self.frames.rows
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames.rows as f64 * self.tr_seconds
    }

    /// Number of voxels after ROI masking.
    pub fn n_voxels_roi(&self) -> usize {
        match &self.roi_mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.frames.cols,
        }
    }

    fn roi_row(&self, tr: usize) -> Vec<f64> {
        let row = self.frames.row(tr);
        match &self.roi_mask {
            Some(m) => row
                .iter()
                .zip(m)
                .filter_map(|(&v, &keep)| keep.then_some(v))
                .collect(),
            None => row.to_vec(),
        }
    }
}

/// One aligned (fMRI frames, word sequence) pair.
#[derive(Debug, Clone)]
pub struct Window {
    pub story_id: String,
    pub subject_id: String,
    /// Window start in stimulus seconds.
    pub start: f64,
    pub duration: f64,
    pub tr_seconds: f64,
    /// [n_tr_window x n_voxels_roi].
    pub frames: Mat,
    /// Word events with onset inside [start, start+duration), onset-sorted.
    pub events: Vec<WordEvent>,
    /// Per-TR word counts; sums to `events.len()`.
    pub words_per_tr: Vec<usize>,
}

impl Window {
    pub fn n_tr(&self) -> usize {
        self.frames.rows
    }

    pub fn words(&self) -> Vec<String> {
        self.events.iter().map(|e| e.word.clone()).collect()
    }
}

/// Parse a transcript TSV (header `word<TAB>onset<TAB>offset`), dropping
/// non-speech annotation labels when `drop_annotations` is set.
/// The story id is the file stem.
pub fn load_transcript(path: &Path, drop_annotations: bool) -> Result<StimulusTranscript> {
    let default: BTreeSet<String> = DEFAULT_ANNOTATIONS.iter().map(|s| s.to_string()).collect();
    load_transcript_with(path, drop_annotations, &default)
}

pub fn load_transcript_with(
    path: &Path,
    drop_annotations: bool,
    annotations: &BTreeSet<String>,
) -> Result<StimulusTranscript> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!(
        "cannot read transcript {}: {e}",
        path.display()
    )))?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == "word\tonset\toffset" => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                msg: format!("expected header 'word\\tonset\\toffset', got {header:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                msg: "empty transcript file".into(),
            })
        }
    }
    let mut events = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: pstr,
                line: lineno,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let word = fields[0].trim().to_string();
        if word.is_empty() {
            return Err(Error::Parse {
                path: pstr,
                line: lineno,
                msg: "empty word field".into(),
            });
        }
        let onset: f64 = fields[1].trim().parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line: lineno,
            msg: format!("bad onset {:?}", fields[1]),
        })?;
        let offset: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line: lineno,
            msg: format!("bad offset {:?}", fields[2]),
        })?;
        if offset < onset {
            return Err(Error::Validation(format!(
                "{pstr}:{lineno}: offset {offset} < onset {onset}"
            )));
        }
        if drop_annotations && annotations.contains(&word) {
            continue;
        }
        events.push(WordEvent { word, onset, offset });
    }
    let story_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "unknown".to_string());
    let mut t = StimulusTranscript::new(story_id, events)?;
    t.annotations = annotations.clone();
    Ok(t)
}

/// Write a transcript in the same TSV format `load_transcript` reads.
pub fn save_transcript(path: &Path, transcript: &StimulusTranscript) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("word\tonset\toffset\n");
    for e in &transcript.events {
        out.push_str(&format!("{}\t{:.4}\t{:.4}\n", e.word, e.onset, e.offset));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Cut a run into non-overlapping `window_seconds` windows aligned with the
/// transcript. The trailing partial window is dropped. Words are assigned
/// to exactly one window by onset (half-open intervals).
pub fn window_run(
    run: &FmriRun,
    transcript: &StimulusTranscript,
    window_seconds: f64,
) -> Result<Vec<Window>> {
    window_run_with_offset(run, transcript, window_seconds, 0)
}

/// Like [`window_run`], with the fMRI frames delayed by `frame_offset_trs`
/// repetition times relative to the audio window to compensate for
/// hemodynamic lag. The default offset is 0; windows whose shifted frame
/// range runs past the end of the recording are dropped.
pub fn window_run_with_offset(
    run: &FmriRun,
    transcript: &StimulusTranscript,
    window_seconds: f64,
    frame_offset_trs: usize,
) -> Result<Vec<Window>> {
    if window_seconds <= 0.0 {
        return Err(Error::Config(format!(
            "window_seconds must be positive, got {window_seconds}"
        )));
    }
    let ratio = window_seconds / run.tr_seconds;
    let trs_per_window = ratio.round() as usize;
    if trs_per_window == 0 || (ratio - trs_per_window as f64).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "window_seconds {} is not an integer multiple of tr_seconds {}",
            window_seconds, run.tr_seconds
        )));
    }
    let n_windows = run.n_tr() / trs_per_window;
    let n_vox = run.n_voxels_roi();
    let mut windows = Vec::new();
    for w in 0..n_windows {
        let frame_lo = w * trs_per_window + frame_offset_trs;
        let frame_hi = frame_lo + trs_per_window;
        if frame_hi > run.n_tr() {
            break;
        }
        let start = w as f64 * window_seconds;
        let end = start + window_seconds;
        let mut frames = Mat::zeros(trs_per_window, n_vox);
        for (r, tr) in (frame_lo..frame_hi).enumerate() {
            frames.row_mut(r).copy_from_slice(&run.roi_row(tr));
        }
        let events: Vec<WordEvent> = transcript
            .events
            .iter()
            .filter(|e| e.onset >= start && e.onset < end)
            .cloned()
            .collect();
        let words_per_tr = count_words_per_tr(start, run.tr_seconds, trs_per_window, &events);
        windows.push(Window {
            story_id: run.story_id.clone(),
            subject_id: run.subject_id.clone(),
            start,
            duration: window_seconds,
            tr_seconds: run.tr_seconds,
            frames,
            events,
            words_per_tr,
        });
    }
    Ok(windows)
}

fn count_words_per_tr(start: f64, tr: f64, n_tr: usize, events: &[WordEvent]) -> Vec<usize> {
    let mut counts = vec![0usize; n_tr];
    for e in events {
        let bin = ((e.onset - start) / tr).floor() as usize;
        let bin = bin.min(n_tr - 1);
        counts[bin] += 1;
    }
    counts
}

/// Per-TR word counts for a window: entry t counts words with onset in
/// `[start + t*tr, start + (t+1)*tr)`.
pub fn words_per_tr(window: &Window) -> Vec<usize> {
    count_words_per_tr(
        window.start,
        window.tr_seconds,
        window.n_tr(),
        &window.events,
    )
}

/// Render the special-token training target for a window: a leading
/// start mark, then each TR's words followed by one TR mark.
///
/// `words_per_tr = [2, 1]`, `words = [a, b, c]` gives `"= a b $ c $"`.
pub fn annotate_special_tokens(window: &Window) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(1 + window.events.len() + window.n_tr());
    parts.push(START_MARK);
    let mut next = 0usize;
    for &count in &window.words_per_tr {
        for _ in 0..count {
            parts.push(&window.events[next].word);
            next += 1;
        }
        parts.push(TR_MARK);
    }
    debug_assert_eq!(next, window.events.len());
    parts.join(" ")
}

/// Remove the start and TR marks from a token string, recovering the plain
/// word sequence.
pub fn strip_marks(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|t| *t != START_MARK && *t != TR_MARK)
        .map(|t| t.to_string())
        .collect()
}

/// Sidecar manifest stored next to each fMRI matrix container.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FmriSidecar {
    pub story_id: String,
    pub subject_id: String,
    pub tr_seconds: f64,
    /// [n_tr, n_voxels]
    pub shape: [usize; 2],
    pub roi: String,
    /// Indices of ROI voxels within the stored matrix, if a mask applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_voxels: Option<Vec<usize>>,
}

/// Write a run as `<stem>.bold.bin` (row-major little-endian f64) plus
/// `<stem>.bold.json` sidecar.
pub fn save_fmri_run(dir: &Path, run: &FmriRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_{}", run.story_id, run.subject_id);
    let mut bytes = Vec::with_capacity(run.frames.len() * 8);
    for v in &run.frames.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(format!("{stem}.bold.bin")), bytes)?;
    let sidecar = FmriSidecar {
        story_id: run.story_id.clone(),
        subject_id: run.subject_id.clone(),
        tr_seconds: run.tr_seconds,
        shape: [run.frames.rows, run.frames.cols],
        roi: "synthetic-auditory".into(),
        roi_voxels: run.roi_mask.as_ref().map(|m| {
            m.iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect()
        }),
    };
    crate::util::write_json(&dir.join(format!("{stem}.bold.json")), &sidecar)
}

/// Load a run written by [`save_fmri_run`] given the `.bold.json` path.
pub fn load_fmri_run(sidecar_path: &Path) -> Result<FmriRun> {
    let sidecar: FmriSidecar = crate::util::read_json(sidecar_path)?;
    let bin_path = sidecar_path.with_extension("bin"); // `.bold.json` -> `.bold.bin`
    let bytes = std::fs::read(&bin_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", bin_path.display())))?;
    let [n_tr, n_vox] = sidecar.shape;
    if bytes.len() != n_tr * n_vox * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for shape [{n_tr}, {n_vox}], found {}",
            bin_path.display(),
            n_tr * n_vox * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let roi_mask = sidecar.roi_voxels.map(|idx| {
        let mut mask = vec![false; n_vox];
        for i in idx {
            if i < n_vox {
                mask[i] = true;
            }
        }
        mask
    });
    FmriRun::new(
        sidecar.story_id,
        sidecar.subject_id,
        sidecar.tr_seconds,
        Mat::from_vec(n_tr, n_vox, data),
        roi_mask,
    )
}

//! On-disk trial stores.
//!
//! A store is a directory holding `manifest.json` and one little-endian f32
//! blob per subject. Continuous stores hold a whole recording per subject
//! (channel-major); epoched stores hold trials back to back in manifest order,
//! each channel-major. ICA decompositions live next to a store as
//! `<subject>.ica.json` plus `<subject>.ica.bin` (W then A, f64, row-major).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::{ComponentScore, IcaDecomposition};
use crate::signal::{Event, FeatureKind, Recording, Trial, TrialSet, NUM_CLASSES};

pub const MANIFEST: &str = "manifest.json";
pub const STORE_FORMAT: &str = "airscl-trial-store";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Continuous,
    Epoched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub label: u8,
    pub samples: usize,
    pub pad_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub file: String,
    /// Continuous layout: recording length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Continuous layout: cue events.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
    /// Epoched layout: trial index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trials: Vec<TrialEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub layout: Layout,
    pub feature_kind: FeatureKind,
    pub fs: f64,
    pub channels: usize,
    pub channel_labels: Vec<String>,
    pub num_classes: usize,
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn trial_count(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| if self.layout == Layout::Epoched { s.trials.len() } else { s.events.len() })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != STORE_FORMAT {
            return Err(Error::manifest("format", format!("expected `{STORE_FORMAT}`, found `{}`", self.format)));
        }
        if self.version != 1 {
            return Err(Error::manifest("version", format!("unsupported version {}", self.version)));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::manifest("fs", format!("must be positive, found {}", self.fs)));
        }
        if self.channels == 0 {
            return Err(Error::manifest("channels", "must be positive"));
        }
        if self.channel_labels.len() != self.channels {
            return Err(Error::manifest(
                "channel_labels",
                format!("{} labels for {} channels", self.channel_labels.len(), self.channels),
            ));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::manifest("num_classes", format!("out of range: {}", self.num_classes)));
        }
        let mut seen = std::collections::HashSet::new();
        for (si, s) in self.subjects.iter().enumerate() {
            let at = |f: &str| format!("subjects[{si}].{f}");
            if !seen.insert(&s.id) {
                return Err(Error::manifest(at("id"), format!("duplicate subject `{}`", s.id)));
            }
            if s.file.is_empty() || s.file.contains(['/', '\\']) || s.file.starts_with('.') {
                return Err(Error::manifest(at("file"), format!("not a plain file name: `{}`", s.file)));
            }
            match self.layout {
                Layout::Continuous => {
                    let n = s.samples.ok_or_else(|| Error::manifest(at("samples"), "missing"))?;
                    for (ei, e) in s.events.iter().enumerate() {
                        if e.onset >= e.offset || e.offset > n {
                            return Err(Error::manifest(
                                at(&format!("events[{ei}]")),
                                format!("span {}..{} outside 0..{n}", e.onset, e.offset),
                            ));
                        }
                        if usize::from(e.label) >= self.num_classes {
                            return Err(Error::manifest(at(&format!("events[{ei}].label")), "out of range"));
                        }
                    }
                }
                Layout::Epoched => {
                    for (ti, t) in s.trials.iter().enumerate() {
                        if usize::from(t.label) >= self.num_classes {
                            return Err(Error::manifest(
                                at(&format!("trials[{ti}].label")),
                                format!("{} not below {}", t.label, self.num_classes),
                            ));
                        }
                        if t.samples == 0 || t.pad_len >= t.samples {
                            return Err(Error::manifest(
                                at(&format!("trials[{ti}].pad_len")),
                                format!("{} leaves no signal in {} samples", t.pad_len, t.samples),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn expected_values(&self, s: &SubjectEntry) -> usize {
        match self.layout {
            Layout::Continuous => self.channels * s.samples.unwrap_or(0),
            Layout::Epoched => s.trials.iter().map(|t| self.channels * t.samples).sum(),
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| {
        // serde reports the offending key in its message
        Error::manifest(MANIFEST, e.to_string())
    })?;
    m.validate()?;
    Ok(m)
}

fn encode_f32<'a>(values: impl IntoIterator<Item = &'a f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_blob(dir: &Path, m: &Manifest, s: &SubjectEntry, si: usize) -> Result<Vec<f32>> {
    let path = dir.join(&s.file);
    let bytes = fs::read(&path).map_err(|e| Error::manifest(format!("subjects[{si}].file"), format!("{}: {e}", path.display())))?;
    let expected = m.expected_values(s) * 4;
    if bytes.len() != expected {
        return Err(Error::manifest(
            format!("subjects[{si}].file"),
            format!("{} holds {} bytes, manifest implies {expected}", s.file, bytes.len()),
        ));
    }
    Ok(decode_f32(&bytes))
}

fn check_target(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::invalid(format!("{} exists and is not empty", dir.display())));
    }
    Ok(())
}

fn staging_dir(dir: &Path) -> Result<PathBuf> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad output path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    Ok(parent.join(format!(".{name}.partial-{}", std::process::id())))
}

fn commit(staging: &Path, dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir(dir)?;
    }
    fs::rename(staging, dir)?;
    Ok(())
}

fn manifest_bytes(m: &Manifest) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(m)?;
    v.push(b'\n');
    Ok(v)
}

fn blob_name(subject: &str) -> String {
    format!("{subject}.bin")
}

/// Writes one continuous recording per subject. Samples are stored as f32.
/// Returns the number of bytes written.
pub fn write_continuous(
    dir: &Path,
    recordings: &[(String, Recording)],
    feature_kind: FeatureKind,
    num_classes: usize,
) -> Result<u64> {
    let first = &recordings.first().ok_or_else(|| Error::invalid("no recordings to write"))?.1;
    let mut w = StoreWriter::continuous(dir, feature_kind, first.fs, &first.channel_labels, num_classes)?;
    for (id, rec) in recordings {
        w.add_recording(id, rec)?;
    }
    w.finish()
}

/// Reads the recording of one subject from a continuous store.
pub fn read_recording(dir: &Path, m: &Manifest, subject: &str) -> Result<Recording> {
    if m.layout != Layout::Continuous {
        return Err(Error::manifest("layout", "expected `continuous`"));
    }
    let (si, s) = find_subject(dir, m, subject)?;
    let values = read_blob(dir, m, s, si)?;
    let n = s.samples.unwrap_or(0);
    let data = Array2::from_shape_vec((m.channels, n), values.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    let rec = Recording {
        data,
        fs: m.fs,
        channel_labels: m.channel_labels.clone(),
        events: s.events.clone(),
    };
    rec.validate()?;
    Ok(rec)
}

pub fn read_continuous(dir: &Path) -> Result<(Manifest, Vec<(String, Recording)>)> {
    let m = read_manifest(dir)?;
    let out = m
        .subjects
        .iter()
        .map(|s| Ok((s.id.clone(), read_recording(dir, &m, &s.id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, out))
}

fn find_subject<'a>(dir: &Path, m: &'a Manifest, subject: &str) -> Result<(usize, &'a SubjectEntry)> {
    m.subjects
        .iter()
        .enumerate()
        .find(|(_, s)| s.id == subject)
        .ok_or_else(|| Error::invalid(format!("subject {subject} not in store {}", dir.display())))
}

/// Builds a store one subject at a time. Blobs go to a staging directory as
/// they arrive; [`StoreWriter::finish`] writes the manifest and moves the
/// store into place. Dropping an unfinished writer removes the staging
/// directory.
pub struct StoreWriter {
    dir: PathBuf,
    staging: PathBuf,
    manifest: Manifest,
    bytes: u64,
    finished: bool,
}

impl StoreWriter {
    fn create(dir: &Path, layout: Layout, kind: FeatureKind, fs_hz: f64, labels: &[String], classes: usize) -> Result<Self> {
        check_target(dir)?;
        let staging = staging_dir(dir)?;
        fs::create_dir_all(&staging)?;
        Ok(StoreWriter {
            dir: dir.to_path_buf(),
            staging,
            manifest: Manifest {
                format: STORE_FORMAT.into(),
                version: 1,
                layout,
                feature_kind: kind,
                fs: fs_hz,
                channels: labels.len(),
                channel_labels: labels.to_vec(),
                num_classes: classes,
                subjects: Vec::new(),
            },
            bytes: 0,
            finished: false,
        })
    }

    /// Epoched store. The class count grows to cover every label written.
    pub fn epoched(dir: &Path, feature_kind: FeatureKind, fs_hz: f64, channel_labels: &[String]) -> Result<Self> {
        Self::create(dir, Layout::Epoched, feature_kind, fs_hz, channel_labels, NUM_CLASSES)
    }

    pub fn continuous(
        dir: &Path,
        feature_kind: FeatureKind,
        fs_hz: f64,
        channel_labels: &[String],
        num_classes: usize,
    ) -> Result<Self> {
        Self::create(dir, Layout::Continuous, feature_kind, fs_hz, channel_labels, num_classes)
    }

    fn check_new(&self, subject: &str, layout: Layout) -> Result<()> {
        if self.manifest.layout != layout {
            return Err(Error::invalid(format!("store being written is {:?}", self.manifest.layout)));
        }
        if self.manifest.subjects.iter().any(|s| s.id == subject) {
            return Err(Error::invalid(format!("subject {subject} written twice")));
        }
        Ok(())
    }

    fn push(&mut self, entry: SubjectEntry, blob: &[u8]) -> Result<()> {
        fs::write(self.staging.join(&entry.file), blob)?;
        self.bytes += blob.len() as u64;
        self.manifest.subjects.push(entry);
        Ok(())
    }

    pub fn add_recording(&mut self, subject: &str, rec: &Recording) -> Result<()> {
        self.check_new(subject, Layout::Continuous)?;
        rec.validate()?;
        if rec.channel_labels != self.manifest.channel_labels || rec.fs != self.manifest.fs {
            return Err(Error::invalid(format!("subject {subject} has a different montage or rate")));
        }
        let mut blob = Vec::with_capacity(rec.data.len() * 4);
        for row in rec.data.rows() {
            for &v in row {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let entry = SubjectEntry {
            id: subject.to_string(),
            file: blob_name(subject),
            samples: Some(rec.samples()),
            events: rec.events.clone(),
            trials: Vec::new(),
        };
        self.push(entry, &blob)
    }

    /// Appends the trials of `subject` in the given order.
    pub fn add_trials<'a>(&mut self, subject: &str, trials: impl IntoIterator<Item = &'a Trial>) -> Result<()> {
        self.check_new(subject, Layout::Epoched)?;
        let channels = self.manifest.channels;
        let mut entry = SubjectEntry {
            id: subject.to_string(),
            file: blob_name(subject),
            samples: None,
            events: Vec::new(),
            trials: Vec::new(),
        };
        let mut blob = Vec::new();
        for t in trials {
            if t.channels() != channels {
                return Err(Error::invalid(format!("trial of subject {subject} has {} channels", t.channels())));
            }
            self.manifest.num_classes = self.manifest.num_classes.max(usize::from(t.label) + 1);
            entry.trials.push(TrialEntry {
                label: t.label,
                samples: t.samples(),
                pad_len: t.pad_len,
            });
            // standard layout is channel-major
            encode_f32(t.data.as_standard_layout().iter(), &mut blob);
        }
        self.push(entry, &blob)
    }

    /// Directory holding the files written so far; extra files placed here
    /// are moved along with the store.
    pub fn staging_path(&self) -> &Path {
        &self.staging
    }

    pub fn finish(mut self) -> Result<u64> {
        self.manifest.validate()?;
        let bytes = manifest_bytes(&self.manifest)?;
        fs::write(self.staging.join(MANIFEST), &bytes)?;
        commit(&self.staging, &self.dir)?;
        self.finished = true;
        Ok(self.bytes + bytes.len() as u64)
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Writes an epoched store. Subjects appear in order of first occurrence.
pub fn write_trials(dir: &Path, ts: &TrialSet, fs_hz: f64, channel_labels: &[String]) -> Result<u64> {
    let channels = ts.channels().ok_or_else(|| Error::invalid("empty trial set"))?;
    if channel_labels.len() != channels {
        return Err(Error::invalid(format!("{} labels for {channels} channels", channel_labels.len())));
    }
    let mut w = StoreWriter::epoched(dir, ts.feature_kind, fs_hz, channel_labels)?;
    for id in ts.subjects() {
        w.add_trials(&id, ts.trials.iter().filter(|t| t.subject == id))?;
    }
    w.finish()
}

/// Reads the trials of one subject from an epoched store.
pub fn read_subject_trials(dir: &Path, m: &Manifest, subject: &str) -> Result<TrialSet> {
    if m.layout != Layout::Epoched {
        return Err(Error::manifest("layout", "expected `epoched`"));
    }
    let (si, s) = find_subject(dir, m, subject)?;
    let values = read_blob(dir, m, s, si)?;
    let mut trials = Vec::with_capacity(s.trials.len());
    let mut offset = 0;
    for t in &s.trials {
        let len = m.channels * t.samples;
        let data = Array2::from_shape_vec((m.channels, t.samples), values[offset..offset + len].to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        offset += len;
        trials.push(Trial {
            data,
            label: t.label,
            subject: s.id.clone(),
            pad_len: t.pad_len,
        });
    }
    Ok(TrialSet {
        trials,
        feature_kind: m.feature_kind,
        provenance: dir.join(MANIFEST).display().to_string(),
    })
}

pub fn read_trials(dir: &Path) -> Result<(Manifest, TrialSet)> {
    let m = read_manifest(dir)?;
    let mut all = TrialSet {
        trials: Vec::new(),
        feature_kind: m.feature_kind,
        provenance: dir.join(MANIFEST).display().to_string(),
    };
    for s in &m.subjects {
        all.trials.extend(read_subject_trials(dir, &m, &s.id)?.trials);
    }
    Ok((m, all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaSidecar {
    pub subject: String,
    pub channels: usize,
    pub components: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub threshold: f64,
    pub removed: Vec<usize>,
    pub scores: Vec<ComponentScore>,
}

/// Stores the sensor-space unmixing W (components × channels) and mixing A
/// (channels × components).
pub fn write_ica_sidecar(dir: &Path, meta: &IcaSidecar, dec: &IcaDecomposition) -> Result<()> {
    let w = dec.sensor_unmixing();
    let a = dec.sensor_mixing();
    let mut blob = Vec::with_capacity((w.len() + a.len()) * 8);
    for v in w.as_standard_layout().iter().chain(a.as_standard_layout().iter()) {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(format!("{}.ica.json", meta.subject)), serde_json::to_vec_pretty(meta)?)?;
    fs::write(dir.join(format!("{}.ica.bin", meta.subject)), blob)?;
    Ok(())
}

pub fn read_ica_sidecar(dir: &Path, subject: &str) -> Result<(IcaSidecar, Array2<f64>, Array2<f64>)> {
    let meta: IcaSidecar = serde_json::from_slice(&fs::read(dir.join(format!("{subject}.ica.json")))?)?;
    let bytes = fs::read(dir.join(format!("{subject}.ica.bin")))?;
    let (k, c) = (meta.components, meta.channels);
    if bytes.len() != 2 * k * c * 8 {
        return Err(Error::Format(format!("{subject}.ica.bin has {} bytes, expected {}", bytes.len(), 16 * k * c)));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let w = Array2::from_shape_vec((k, c), values[..k * c].to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let a = Array2::from_shape_vec((c, k), values[k * c..].to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    Ok((meta, w, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trial_set(rng: &mut ChaCha8Rng) -> TrialSet {
        let mut trials = Vec::new();
        for s in ["S02", "S01"] {
            for k in 0..5 {
                let data = Array2::from_shape_fn((3, 20), |_| rng.gen::<f32>() * 4.0 - 2.0);
                trials.push(Trial {
                    data,
                    label: k as u8,
                    subject: s.into(),
                    pad_len: k,
                });
            }
        }
        TrialSet {
            trials,
            feature_kind: FeatureKind::PreprocessedEeg,
            provenance: String::new(),
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("C{i}")).collect()
    }

    #[test]
    fn epoched_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = trial_set(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store");
        let bytes = write_trials(&path, &ts, 500.0, &labels(3)).unwrap();
        assert!(bytes > 10 * 3 * 20 * 4);
        let (m, back) = read_trials(&path).unwrap();
        assert_eq!(m.trial_count(), 10);
        assert_eq!(back.trials, ts.trials);
        assert_eq!(m.subjects[0].id, "S02");

        let copy = dir.path().join("copy");
        write_trials(&copy, &back, 500.0, &labels(3)).unwrap();
        for f in [MANIFEST, "S01.bin", "S02.bin"] {
            assert_eq!(fs::read(path.join(f)).unwrap(), fs::read(copy.join(f)).unwrap());
        }
    }

    #[test]
    fn continuous_round_trip() {
        let data = Array2::from_shape_fn((2, 50), |(c, t)| (c * 50 + t) as f64 * 0.25);
        let rec = Recording {
            data,
            fs: 100.0,
            channel_labels: labels(2),
            events: vec![Event {
                onset: 10,
                offset: 20,
                label: 3,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw");
        write_continuous(&path, &[("A".into(), rec.clone())], FeatureKind::Raw, 26).unwrap();
        let (m, back) = read_continuous(&path).unwrap();
        assert_eq!(m.layout, Layout::Continuous);
        assert_eq!(back[0].1, rec);
        assert!(read_trials(&path).is_err());
    }

    #[test]
    fn unfinished_writer_leaves_nothing_behind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = trial_set(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store");
        {
            let mut w = StoreWriter::epoched(&path, ts.feature_kind, 500.0, &labels(3)).unwrap();
            w.add_trials("S01", ts.trials.iter().filter(|t| t.subject == "S01")).unwrap();
            assert!(w.add_trials("S01", []).is_err());
        }
        assert!(!path.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn single_subject_reads_match_full_reads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts = trial_set(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store");
        write_trials(&path, &ts, 500.0, &labels(3)).unwrap();
        let m = read_manifest(&path).unwrap();
        let one = read_subject_trials(&path, &m, "S01").unwrap();
        assert_eq!(one.trials, ts.for_subject("S01").trials);
        assert!(read_subject_trials(&path, &m, "S09").is_err());
        assert!(read_recording(&path, &m, "S01").is_err());
    }

    #[test]
    fn refuses_non_empty_destination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts = trial_set(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), b"x").unwrap();
        assert!(write_trials(dir.path(), &ts, 500.0, &labels(3)).is_err());
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        write_trials(&empty, &ts, 500.0, &labels(3)).unwrap();
    }

    #[test]
    fn corrupt_manifest_names_the_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = trial_set(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s");
        write_trials(&path, &ts, 500.0, &labels(3)).unwrap();
        let text = fs::read_to_string(path.join(MANIFEST)).unwrap();

        let broken = text.replacen("\"pad_len\": 4", "\"pad_len\": 40", 1);
        fs::write(path.join(MANIFEST), &broken).unwrap();
        let err = read_trials(&path).unwrap_err().to_string();
        assert!(err.contains("trials[4].pad_len"), "{err}");

        fs::write(path.join(MANIFEST), text.replace("\"fs\": 500.0", "\"fs\": -1.0")).unwrap();
        assert!(read_trials(&path).unwrap_err().to_string().contains("`fs`"));

        fs::write(path.join(MANIFEST), &text).unwrap();
        let blob = fs::read(path.join("S01.bin")).unwrap();
        fs::write(path.join("S01.bin"), &blob[..blob.len() - 4]).unwrap();
        let err = read_trials(&path).unwrap_err().to_string();
        assert!(err.contains("subjects[1].file"), "{err}");
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::eegb::byte_offset;
use super::{extract_epochs, read_eegb, write_trialset, DataError, Role, TrialSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub role: Role,
}

/// Epoch placement relative to each marker, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochWindow {
    pub offset: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub task: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// When absent, every file must carry its own `trial_length` and epochs
    /// start at the markers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<EpochWindow>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            file: path.to_path_buf(),
            offset: byte_offset(&text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate().map_err(|message| DataError::Parse {
            file: path.to_path_buf(),
            offset: 0,
            message,
        })?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<(), String> {
        if self.task.len() != 2 {
            return Err(format!("task must name two classes, got {}", self.task.len()));
        }
        if self.entries.is_empty() {
            return Err("manifest lists no entries".into());
        }
        if let Some(e) = self.epoch {
            if !(e.length > 0.0) {
                return Err(format!("epoch length must be positive, got {}", e.length));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// `(subject, role)` groups in deterministic order with their entries in
    /// file order.
    pub fn groups(&self) -> BTreeMap<(String, Role), Vec<&ManifestEntry>> {
        let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for e in &self.entries {
            groups.entry((e.subject.clone(), e.role)).or_default().push(e);
        }
        groups
    }
}

/// Writes every group of `cohort` as `<subject>_<role>.eegb` in `dir` and a
/// `manifest.json` beside them; returns the manifest path.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::new();
    for set in cohort.groups() {
        let name = format!("{}_{}.eegb", set.subject_id, set.role);
        write_trialset(&dir.join(&name), set)?;
        entries.push(ManifestEntry {
            subject: set.subject_id.clone(),
            path: PathBuf::from(name),
            role: set.role,
        });
    }
    let manifest = CohortManifest {
        task: cohort.task.clone(),
        entries,
        epoch: None,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

/// Anything that can hand out per-subject, per-role trial sets on demand.
///
/// Training only asks for the groups its split needs, so a lazy source never
/// touches held-out data.
pub trait CohortSource: Sync {
    /// Sorted subject ids.
    fn subjects(&self) -> Vec<String>;
    fn has(&self, subject: &str, role: Role) -> bool;
    fn load(&self, subject: &str, role: Role) -> Result<TrialSet, DataError>;
}

/// Trial sets held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub task: Vec<String>,
    sets: BTreeMap<(String, Role), TrialSet>,
}

impl Cohort {
    pub fn new(task: Vec<String>) -> Self {
        Self {
            task,
            sets: BTreeMap::new(),
        }
    }

    /// Adds a set, appending its trials if the group already exists.
    pub fn insert(&mut self, set: TrialSet) -> Result<(), DataError> {
        let key = (set.subject_id.clone(), set.role);
        match self.sets.get_mut(&key) {
            Some(existing) => {
                if existing.spec != set.spec {
                    return Err(DataError::Config(format!(
                        "subject {} ({}) mixes recording layouts",
                        key.0, key.1
                    )));
                }
                existing.trials.extend(set.trials);
            }
            None => {
                self.sets.insert(key, set);
            }
        }
        Ok(())
    }

    pub fn get(&self, subject: &str, role: Role) -> Option<&TrialSet> {
        self.sets.get(&(subject.to_string(), role))
    }

    /// Groups in `(subject, role)` order.
    pub fn groups(&self) -> impl Iterator<Item = &TrialSet> {
        self.sets.values()
    }

    pub fn group_count(&self) -> usize {
        self.sets.len()
    }
}

impl CohortSource for Cohort {
    fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.sets.keys().map(|(s, _)| s.clone()).collect();
        s.dedup();
        s
    }

    fn has(&self, subject: &str, role: Role) -> bool {
        self.get(subject, role).is_some()
    }

    fn load(&self, subject: &str, role: Role) -> Result<TrialSet, DataError> {
        self.get(subject, role)
            .cloned()
            .ok_or_else(|| DataError::Config(format!("no {role} data for subject {subject}")))
    }
}

/// Manifest-backed source that reads files only when a group is requested
/// and records every path it opens.
#[derive(Debug)]
pub struct FileCohort {
    pub manifest: CohortManifest,
    opened: Mutex<Vec<PathBuf>>,
}

impl FileCohort {
    pub fn open(manifest_path: &Path) -> Result<Self, DataError> {
        Ok(Self::from_manifest(CohortManifest::from_file(manifest_path)?))
    }

    pub fn from_manifest(manifest: CohortManifest) -> Self {
        Self {
            manifest,
            opened: Mutex::new(Vec::new()),
        }
    }

    /// Paths read so far, in order.
    pub fn access_log(&self) -> Vec<PathBuf> {
        self.opened.lock().expect("access log poisoned").clone()
    }

    fn load_entry(&self, entry: &ManifestEntry) -> Result<TrialSet, DataError> {
        let path = self.manifest.resolve(entry);
        self.opened.lock().expect("access log poisoned").push(path.clone());
        let rec = read_eegb(&path)?;
        let (offset, length) = match (self.manifest.epoch, rec.trial_length) {
            (Some(e), _) => (e.offset, e.length),
            (None, Some(t)) => (0.0, t),
            (None, None) => {
                return Err(DataError::Config(format!(
                    "{}: no epoch window in the manifest and no trial_length in the file",
                    path.display()
                )))
            }
        };
        let labels = self.manifest.task.len();
        if let Some(m) = rec.markers.iter().find(|m| m.label >= labels) {
            return Err(DataError::Config(format!(
                "{}: marker at sample {} has label {} but the task has {labels} classes",
                path.display(),
                m.sample,
                m.label
            )));
        }
        let trials = extract_epochs(&rec.data, &rec.markers, offset, length, rec.spec.sampling_frequency)?;
        Ok(TrialSet {
            subject_id: entry.subject.clone(),
            role: entry.role,
            spec: rec.spec,
            trials,
        })
    }
}

impl CohortSource for FileCohort {
    fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.manifest.entries.iter().map(|e| e.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    fn has(&self, subject: &str, role: Role) -> bool {
        self.manifest.entries.iter().any(|e| e.subject == subject && e.role == role)
    }

    fn load(&self, subject: &str, role: Role) -> Result<TrialSet, DataError> {
        let mut out: Option<TrialSet> = None;
        for entry in self
            .manifest
            .entries
            .iter()
            .filter(|e| e.subject == subject && e.role == role)
        {
            let set = self.load_entry(entry)?;
            match &mut out {
                None => out = Some(set),
                Some(acc) => {
                    if acc.spec != set.spec {
                        return Err(DataError::Config(format!(
                            "{}: recording layout differs from earlier files of subject {subject}",
                            self.manifest.resolve(entry).display()
                        )));
                    }
                    acc.trials.extend(set.trials);
                }
            }
        }
        out.ok_or_else(|| DataError::Config(format!("no {role} data for subject {subject}")))
    }
}

/// Reads a manifest and every file it references.
pub fn load_cohort(manifest_path: &Path) -> Result<(CohortManifest, Cohort), DataError> {
    let source = FileCohort::open(manifest_path)?;
    let mut cohort = Cohort::new(source.manifest.task.clone());
    for (subject, role) in source.manifest.groups().into_keys() {
        cohort.insert(source.load(&subject, role)?)?;
    }
    Ok((source.manifest, cohort))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_trialset, RecordingSpec, Trial};
    use crate::linalg::Matrix;

    fn set(subject: &str, role: Role, n: usize, seed: f64) -> TrialSet {
        TrialSet {
            subject_id: subject.into(),
            role,
            spec: RecordingSpec::new(128.0, vec!["C3".into(), "C4".into()]).unwrap(),
            trials: (0..n)
                .map(|i| Trial {
                    data: Matrix::from_fn(2, 64, |r, c| ((seed + i as f64) * 0.37 + r as f64 * 1.3 + c as f64 * 0.011).sin()),
                    label: i % 2,
                    trial_length: 0.5,
                })
                .collect(),
        }
    }

    fn write_manifest(dir: &Path, sets: &[TrialSet]) -> PathBuf {
        let entries: Vec<ManifestEntry> = sets
            .iter()
            .map(|s| {
                let name = format!("{}_{}.eegb", s.subject_id, s.role);
                write_trialset(&dir.join(&name), s).unwrap();
                ManifestEntry {
                    subject: s.subject_id.clone(),
                    path: name.into(),
                    role: s.role,
                }
            })
            .collect();
        let m = CohortManifest {
            task: vec!["left".into(), "right".into()],
            entries,
            epoch: None,
            base_dir: PathBuf::new(),
        };
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        p
    }

    #[test]
    fn groups_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sets = vec![
            set("s2", Role::Online, 3, 1.0),
            set("s1", Role::Offline, 4, 2.0),
            set("s2", Role::Offline, 2, 3.0),
            set("s1", Role::Online, 5, 4.0),
        ];
        let p = write_manifest(dir.path(), &sets);
        let (_, cohort) = load_cohort(&p).unwrap();
        assert_eq!(cohort.group_count(), 4);
        let order: Vec<(String, Role)> = cohort.groups().map(|g| (g.subject_id.clone(), g.role)).collect();
        assert_eq!(
            order,
            vec![
                ("s1".into(), Role::Offline),
                ("s1".into(), Role::Online),
                ("s2".into(), Role::Offline),
                ("s2".into(), Role::Online)
            ]
        );
        for s in &sets {
            let got = cohort.get(&s.subject_id, s.role).unwrap();
            // stored as f32: compare against the f32-rounded originals bit for bit
            for (a, b) in got.trials.iter().zip(&s.trials) {
                assert_eq!(a.label, b.label);
                for (x, y) in a.data.as_slice().iter().zip(b.data.as_slice()) {
                    assert_eq!(x.to_bits(), f64::from(*y as f32).to_bits());
                }
            }
        }
    }

    #[test]
    fn unknown_role_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let text = "{\"task\": [\"a\", \"b\"],\n \"entries\": [{\"subject\": \"s\", \"path\": \"x\", \"role\": \"nightly\"}]}";
        fs::write(&p, text).unwrap();
        match CohortManifest::from_file(&p) {
            Err(DataError::Parse { offset, file, .. }) => {
                assert_eq!(file, p);
                let at = text.find("nightly").unwrap() as u64;
                assert!(offset >= at && offset <= at + 9, "offset {offset}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lazy_source_reads_only_requested_groups() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[set("a", Role::Offline, 2, 0.0), set("a", Role::Online, 2, 1.0)]);
        let src = FileCohort::open(&p).unwrap();
        src.load("a", Role::Offline).unwrap();
        let log = src.access_log();
        assert_eq!(log.len(), 1);
        assert!(log[0].ends_with("a_offline.eegb"));
    }
}

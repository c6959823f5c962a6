//! Preference pairs: construction from trajectories and the per-iteration
//! dataset files with their manifests.
//!
//! Layout under the store root: `iter_<k>/pairs.jsonl` (canonical NDJSON),
//! `iter_<k>/manifest.json` and, once exported, `iter_<k>/train.jsonl`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{self, sha256_hex};
use crate::model::{PairMeta, PreferencePair, Trajectory, Validate};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("invalid pairs: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

fn storage<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> StoreError + '_ {
    move |e| StoreError::StorageFailure(format!("{context}: {e}"))
}

/// One pair per non-chosen candidate whose raw text differs from the
/// chosen one, for every recorded step.
pub fn build_pairs(trajectory: &Trajectory) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for step in &trajectory.steps {
        let Some(best) = step.chosen_candidate() else {
            continue;
        };
        let context = trajectory.context_at(step.index);
        for (i, cand) in step.candidates.iter().enumerate() {
            let id = i + 1;
            if id == step.chosen || cand.action.raw == best.action.raw {
                continue;
            }
            out.push(PreferencePair {
                context: context.clone(),
                preferred: best.action.clone(),
                dispreferred: cand.action.clone(),
                meta: PairMeta {
                    pair_id: format!("{}-s{}-c{}-r{}", trajectory.task_id, step.index, step.chosen, id),
                    task_id: trajectory.task_id.clone(),
                    step_index: step.index,
                    chosen_candidate: step.chosen,
                    rejected_candidate: id,
                    chosen_status: best.observation.status,
                    rejected_status: cand.observation.status,
                },
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub iteration_index: usize,
    pub pair_count: usize,
    /// Sorted, deduplicated ids of the trajectories that contributed pairs.
    pub source_trajectory_ids: Vec<String>,
    /// sha256 of `pairs.jsonl`.
    pub content_digest: String,
    /// Digests of the batches already appended, for idempotent retries.
    pub batch_digests: Vec<String>,
}

impl DatasetManifest {
    fn empty(iteration_index: usize) -> DatasetManifest {
        DatasetManifest {
            iteration_index,
            pair_count: 0,
            source_trajectory_ids: Vec::new(),
            content_digest: sha256_hex(b""),
            batch_digests: Vec::new(),
        }
    }
}

/// Training exchange record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PairMeta,
}

impl From<&PreferencePair> for TrainingRecord {
    fn from(p: &PreferencePair) -> Self {
        TrainingRecord {
            prompt: p.context.render(),
            chosen: p.preferred.text(),
            rejected: p.dispreferred.text(),
            meta: p.meta.clone(),
        }
    }
}

/// Writes `bytes` to `path` via a sibling temp file, fsync and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // persist the rename itself where the platform allows it
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub struct PreferenceStore {
    root: PathBuf,
}

impl PreferenceStore {
    pub fn new(root: impl Into<PathBuf>) -> PreferenceStore {
        PreferenceStore { root: root.into() }
    }

    pub fn iteration_dir(&self, k: usize) -> PathBuf {
        self.root.join(format!("iter_{k}"))
    }

    fn pairs_path(&self, k: usize) -> PathBuf {
        self.iteration_dir(k).join("pairs.jsonl")
    }

    fn manifest_path(&self, k: usize) -> PathBuf {
        self.iteration_dir(k).join("manifest.json")
    }

    pub fn manifest(&self, k: usize) -> Result<Option<DatasetManifest>, StoreError> {
        let path = self.manifest_path(k);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(storage("reading manifest"))?;
        canonical::deserialize(&bytes)
            .map(Some)
            .map_err(storage("decoding manifest"))
    }

    /// Pair file bytes, checked against the manifest digest.
    fn verified_bytes(&self, manifest: &DatasetManifest) -> Result<Vec<u8>, StoreError> {
        let path = self.pairs_path(manifest.iteration_index);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && manifest.pair_count == 0 => Vec::new(),
            Err(e) => return Err(storage("reading pairs")(e)),
        };
        let digest = sha256_hex(&bytes);
        if digest != manifest.content_digest {
            return Err(StoreError::StorageFailure(format!(
                "integrity check failed for {}: digest {digest} does not match manifest {}",
                path.display(),
                manifest.content_digest
            )));
        }
        Ok(bytes)
    }

    /// Appends a validated batch to iteration `k`. A batch whose digest was
    /// already recorded is not appended again.
    pub fn append(&self, pairs: &[PreferencePair], k: usize) -> Result<DatasetManifest, StoreError> {
        let problems: Vec<String> = pairs
            .iter()
            .flat_map(|p| p.violations().into_iter().map(move |v| format!("{}: {v}", p.meta.pair_id)))
            .collect();
        if !problems.is_empty() {
            return Err(StoreError::Invalid(problems));
        }
        let mut manifest = self.manifest(k)?.unwrap_or_else(|| DatasetManifest::empty(k));
        let mut bytes = self.verified_bytes(&manifest)?;
        let batch = canonical::to_ndjson(pairs).map_err(storage("encoding pairs"))?;
        let batch_digest = sha256_hex(&batch);
        let exists = self.manifest_path(k).exists();
        if exists && (pairs.is_empty() || manifest.batch_digests.contains(&batch_digest)) {
            return Ok(manifest);
        }
        bytes.extend_from_slice(&batch);
        let mut ids: BTreeSet<String> = manifest.source_trajectory_ids.iter().cloned().collect();
        ids.extend(pairs.iter().map(|p| p.meta.task_id.clone()));
        manifest.pair_count += pairs.len();
        manifest.source_trajectory_ids = ids.into_iter().collect();
        manifest.content_digest = sha256_hex(&bytes);
        if !pairs.is_empty() {
            manifest.batch_digests.push(batch_digest);
        }
        let dir = self.iteration_dir(k);
        fs::create_dir_all(&dir).map_err(storage("creating dataset directory"))?;
        write_atomic(&self.pairs_path(k), &bytes).map_err(storage("writing pairs"))?;
        let encoded = canonical::to_canonical_bytes(&manifest).map_err(storage("encoding manifest"))?;
        write_atomic(&self.manifest_path(k), &encoded).map_err(storage("writing manifest"))?;
        Ok(manifest)
    }

    pub fn load_pairs(&self, k: usize) -> Result<Vec<PreferencePair>, StoreError> {
        let manifest = self
            .manifest(k)?
            .ok_or_else(|| StoreError::StorageFailure(format!("no dataset manifest for iteration {k}")))?;
        let bytes = self.verified_bytes(&manifest)?;
        let text = String::from_utf8(bytes).map_err(storage("decoding pairs"))?;
        canonical::from_ndjson(&text).map_err(storage("decoding pairs"))
    }

    /// Writes `train.jsonl` with one `{prompt, chosen, rejected, meta}`
    /// record per stored pair and returns its path.
    pub fn export_training_file(&self, k: usize) -> Result<PathBuf, StoreError> {
        let records: Vec<TrainingRecord> = self.load_pairs(k)?.iter().map(TrainingRecord::from).collect();
        let bytes = canonical::to_ndjson(&records).map_err(storage("encoding export"))?;
        let path = self.iteration_dir(k).join("train.jsonl");
        write_atomic(&path, &bytes).map_err(storage("writing export"))?;
        Ok(path)
    }
}

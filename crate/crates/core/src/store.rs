//! On-disk dataset store: image files plus an append-only JSONL manifest.
//!
//! Layout under the root directory:
//!
//! ```text
//! manifest.jsonl                      header line, then one entry per line
//! images/{wnid}/{template}/{index_in_class:06}.png
//! ```
//!
//! The manifest has a single writer. Entries are flushed line by line, so a
//! killed run leaves at most one partial trailing line, which is dropped
//! when the store is reopened for resume.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::is_valid_wnid;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::prompt::{PromptRecord, PromptTemplate, RecordKey};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub plan_seed: u64,
    pub catalog_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Ok,
    Failed,
}

/// One generated (or failed) record. For failed entries `file_path` holds
/// the error message and `sha256` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub wnid: String,
    pub class_index: usize,
    pub template: PromptTemplate,
    pub background: Option<String>,
    pub index_in_class: usize,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
    pub width: u32,
    pub height: u32,
    pub backend_id: String,
    pub file_path: String,
    pub sha256: String,
    pub status: EntryStatus,
    #[serde(default)]
    pub safety_flagged: bool,
}

impl ManifestEntry {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            wnid: self.wnid.clone(),
            template: self.template,
            background: self.background.clone(),
            index_in_class: self.index_in_class,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == EntryStatus::Ok
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Relative path of a record's image.
pub fn image_rel_path(record: &PromptRecord, ext: &str) -> String {
    format!(
        "images/{}/{}/{:06}.{ext}",
        record.wnid,
        record.template.id(),
        record.index_in_class
    )
}

/// Parsed manifest contents.
#[derive(Debug, Clone, Default)]
pub struct ManifestContents {
    pub header: Option<ManifestHeader>,
    pub entries: Vec<ManifestEntry>,
    /// (1-based line number, message) for lines that failed to parse.
    pub parse_errors: Vec<(usize, String)>,
}

impl ManifestContents {
    /// Last status recorded per key.
    pub fn latest(&self) -> HashMap<RecordKey, &ManifestEntry> {
        let mut out = HashMap::new();
        for e in &self.entries {
            out.insert(e.key(), e);
        }
        out
    }
}

pub fn parse_manifest(text: &str) -> ManifestContents {
    let mut out = ManifestContents::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            match serde_json::from_str::<ManifestHeader>(line) {
                Ok(h) => {
                    out.header = Some(h);
                    continue;
                }
                Err(e) => out.parse_errors.push((1, format!("bad header: {e}"))),
            }
            continue;
        }
        match serde_json::from_str::<ManifestEntry>(line) {
            Ok(e) => out.entries.push(e),
            Err(e) => out.parse_errors.push((i + 1, e.to_string())),
        }
    }
    out
}

pub fn read_manifest(root: &Path) -> Result<ManifestContents> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(parse_manifest(&text))
}

/// Appending handle on a dataset directory.
pub struct DatasetStore {
    root: PathBuf,
    header: ManifestHeader,
    writer: Mutex<BufWriter<File>>,
    ok_keys: Mutex<HashSet<RecordKey>>,
}

impl std::fmt::Debug for DatasetStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetStore")
            .field("root", &self.root)
            .finish()
    }
}

impl DatasetStore {
    /// Creates a fresh store; fails if a manifest already exists.
    pub fn create(root: &Path, header: ManifestHeader) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if path.exists() {
            return Err(Error::WouldOverwrite(path));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = BufWriter::new(file);
        let line = serde_json::to_string(&header)?;
        writeln!(writer, "{line}")
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            header,
            writer: Mutex::new(writer),
            ok_keys: Mutex::new(HashSet::new()),
        })
    }

    /// Opens an existing store for appending, or creates it. A partial
    /// trailing line left by an interrupted run is truncated away.
    pub fn open_or_create(root: &Path, header: ManifestHeader) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Self::create(root, header);
        }
        let mut bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if complete < bytes.len() {
            log::warn!(
                "dropping {} bytes of partial trailing line in {}",
                bytes.len() - complete,
                path.display()
            );
            bytes.truncate(complete);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        let text = String::from_utf8_lossy(&bytes);
        let contents = parse_manifest(&text);
        if let Some((line, msg)) = contents.parse_errors.first() {
            return Err(Error::format(&path, format!("line {line}: {msg}")));
        }
        let existing = match contents.header {
            Some(h) => h,
            None => {
                // Header lost to truncation: rewrite it.
                let line = serde_json::to_string(&header)?;
                fs::write(&path, format!("{line}\n")).map_err(|e| Error::io(&path, e))?;
                header.clone()
            }
        };
        if existing.plan_seed != header.plan_seed || existing.catalog_name != header.catalog_name {
            return Err(Error::Contract(format!(
                "manifest at {} belongs to plan seed {} / catalog {:?}",
                root.display(),
                existing.plan_seed,
                existing.catalog_name
            )));
        }
        let ok_keys = contents
            .entries
            .iter()
            .filter(|e| e.is_ok())
            .map(ManifestEntry::key)
            .collect();
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            header: existing,
            writer: Mutex::new(BufWriter::new(file)),
            ok_keys: Mutex::new(ok_keys),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn header(&self) -> &ManifestHeader {
        &self.header
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn has_ok(&self, key: &RecordKey) -> bool {
        self.ok_keys.lock().expect("poisoned").contains(key)
    }

    /// Writes image bytes atomically (temp file + rename) and returns the
    /// relative path and SHA-256 of the bytes.
    pub fn write_image(&self, rel_path: &str, bytes: &[u8]) -> Result<String> {
        let path = self.root.join(rel_path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("part");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(sha256_hex(bytes))
    }

    /// Appends one entry and flushes. An ok entry whose key already has an
    /// ok entry is rejected unless `overwrite` is set. Failed entries are
    /// bookkeeping and may be superseded by a later ok entry.
    pub fn append(&self, entry: &ManifestEntry, overwrite: bool) -> Result<()> {
        let line = serde_json::to_string(entry)?;
        let mut keys = self.ok_keys.lock().expect("poisoned");
        let key = entry.key();
        if entry.is_ok() {
            if keys.contains(&key) && !overwrite {
                return Err(Error::DuplicateKey(key.to_string()));
            }
        } else if keys.contains(&key) {
            return Err(Error::DuplicateKey(key.to_string()));
        }
        let mut w = self.writer.lock().expect("poisoned");
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(self.manifest_path(), e))?;
        if entry.is_ok() {
            keys.insert(key);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Entries in the manifest, including failed ones.
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
    pub missing_files: Vec<String>,
    pub checksum_mismatches: Vec<String>,
    pub parse_errors: Vec<(usize, String)>,
    pub count_by_class: BTreeMap<String, usize>,
}

impl VerifyReport {
    pub fn integrity_errors(&self) -> usize {
        self.missing_files.len() + self.checksum_mismatches.len() + self.parse_errors.len()
    }
}

/// Re-hashes every ok entry's file. Unparseable lines are reported, not fatal.
pub fn verify(root: &Path, par: Parallelism) -> Result<VerifyReport> {
    let contents = read_manifest(root)?;
    let ok: Vec<&ManifestEntry> = contents.entries.iter().filter(|e| e.is_ok()).collect();
    enum Check {
        Fine,
        Missing,
        Mismatch,
    }
    let checks = par::map(par, &ok, |e| match fs::read(root.join(&e.file_path)) {
        Ok(bytes) if sha256_hex(&bytes) == e.sha256 => Check::Fine,
        Ok(_) => Check::Mismatch,
        Err(_) => Check::Missing,
    });
    let mut report = VerifyReport {
        total: contents.entries.len(),
        ok: ok.len(),
        failed: contents.entries.len() - ok.len(),
        parse_errors: contents.parse_errors.clone(),
        ..Default::default()
    };
    for (e, check) in ok.iter().zip(checks) {
        *report.count_by_class.entry(e.wnid.clone()).or_default() += 1;
        match check {
            Check::Fine => {}
            Check::Missing => report.missing_files.push(e.file_path.clone()),
            Check::Mismatch => report.checksum_mismatches.push(e.file_path.clone()),
        }
    }
    Ok(report)
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetItem {
    pub path: PathBuf,
    pub label: usize,
}

/// Labeled, read-only view over a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
    /// `classes[class_index]` is the wnid.
    pub classes: Vec<String>,
    pub catalog_name: Option<String>,
}

impl DatasetView {
    /// View over a generated dataset: ok entries, label = class_index.
    pub fn from_manifest(root: &Path) -> Result<Self> {
        let contents = read_manifest(root)?;
        let mut classes: Vec<Option<String>> = Vec::new();
        let mut items = Vec::new();
        for e in contents.entries.iter().filter(|e| e.is_ok()) {
            if classes.len() <= e.class_index {
                classes.resize(e.class_index + 1, None);
            }
            match &classes[e.class_index] {
                Some(w) if *w != e.wnid => {
                    return Err(Error::InvalidData(format!(
                        "class_index {} maps to both {w} and {}",
                        e.class_index, e.wnid
                    )))
                }
                _ => classes[e.class_index] = Some(e.wnid.clone()),
            }
            items.push(DatasetItem {
                path: root.join(&e.file_path),
                label: e.class_index,
            });
        }
        let classes = classes
            .into_iter()
            .enumerate()
            .map(|(i, w)| w.unwrap_or_else(|| format!("class{i}")))
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            items,
            classes,
            catalog_name: contents.header.map(|h| h.catalog_name),
        })
    }

    /// View over an ImageFolder tree (`root/{wnid}/*.{png,jpg,jpeg}`), labels
    /// taken from the position of the wnid in `classes`. Folders for unknown
    /// wnids are skipped with a warning.
    pub fn from_image_folder(root: &Path, classes: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut items = Vec::new();
        for dir in dirs {
            let name = dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let Some(&label) = index.get(name.as_str()) else {
                if is_valid_wnid(&name) {
                    log::warn!("skipping folder {name}: not a checkpoint class");
                }
                continue;
            };
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| {
                    p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                        matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg")
                    })
                })
                .collect();
            files.sort();
            items.extend(files.into_iter().map(|path| DatasetItem { path, label }));
        }
        Ok(Self {
            root: root.to_path_buf(),
            items,
            classes: classes.to_vec(),
            catalog_name: None,
        })
    }

    /// Manifest view when `root/manifest.jsonl` exists, ImageFolder otherwise.
    pub fn open(root: &Path, classes: &[String]) -> Result<Self> {
        if root.join(MANIFEST_FILE).exists() {
            let view = Self::from_manifest(root)?;
            if !classes.is_empty() {
                for (i, w) in view.classes.iter().enumerate() {
                    if classes.get(i) != Some(w) {
                        return Err(Error::InvalidData(format!(
                            "dataset class {i} is {w}, expected {:?}",
                            classes.get(i)
                        )));
                    }
                }
            }
            Ok(view)
        } else {
            Self::from_image_folder(root, classes)
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn counts_by_class(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for it in &self.items {
            *out.entry(self.classes[it.label].clone()).or_default() += 1;
        }
        out
    }
}

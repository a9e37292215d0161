//! Executing generation plans against a text-to-image backend.

pub mod http;
pub mod mock;
pub mod stub;

use std::io::Cursor;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{mock_generate, MockBackend};

use crate::error::{Error, Result};
use crate::imaging::decode_rgb;
use crate::par::{self, Parallelism};
use crate::prompt::{GenParams, GenerationPlan, PromptRecord};
use crate::store::{image_rel_path, DatasetStore, EntryStatus, ManifestEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub max_width: u32,
    pub max_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub backend_id: String,
    pub elapsed_ms: u64,
    pub safety_flagged: bool,
    pub sampler: Option<String>,
}

/// A generated image, PNG-encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub png: Vec<u8>,
    pub meta: ImageMeta,
}

/// A text-to-image generator. Implementations must be callable from several
/// threads at once, or report a max concurrency of 1.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    /// Upper bound on concurrent calls; `None` means unlimited.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
    fn generate(&self, prompt: &str, seed: u64, params: &GenParams) -> Result<ImageResult>;
}

/// Calls the backend and checks the result is a `width`×`height` RGB image.
/// The safety flag is passed through untouched.
pub fn generate(
    backend: &dyn Backend,
    prompt: &str,
    seed: u64,
    params: &GenParams,
) -> Result<(ImageResult, RgbImage)> {
    let caps = backend.capabilities();
    if params.width > caps.max_width || params.height > caps.max_height {
        return Err(Error::Contract(format!(
            "{}x{} exceeds backend limit {}x{}",
            params.width, params.height, caps.max_width, caps.max_height
        )));
    }
    let result = backend.generate(prompt, seed, params)?;
    let decoded = image::load_from_memory(&result.png)
        .map_err(|e| Error::MalformedResponse(format!("undecodable image: {e}")))?;
    if decoded.color().channel_count() != 3 {
        return Err(Error::MalformedResponse(format!(
            "expected 3 channels, got {}",
            decoded.color().channel_count()
        )));
    }
    let rgb = decoded.to_rgb8();
    if rgb.dimensions() != (params.width, params.height) {
        return Err(Error::MalformedResponse(format!(
            "expected {}x{}, got {}x{}",
            params.width,
            params.height,
            rgb.width(),
            rgb.height()
        )));
    }
    Ok((result, rgb))
}

/// Backoff between attempts on retryable errors.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub delays: Vec<Duration>,
}

impl Default for RetryPolicy {
    /// Three retries after 0.5 s, 2 s and 8 s.
    fn default() -> Self {
        Self {
            delays: vec![
                Duration::from_millis(500),
                Duration::from_secs(2),
                Duration::from_secs(8),
            ],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { delays: vec![] }
    }

    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.delays.len() => {
                    log::warn!("retryable backend error (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(self.delays[attempt]);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageFileFormat {
    #[default]
    Png,
    /// Lossy; quality 95.
    Jpeg,
}

impl ImageFileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFileFormat::Png => "png",
            ImageFileFormat::Jpeg => "jpg",
        }
    }
}

impl std::str::FromStr for ImageFileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(Self::Png),
            "jpeg" | "jpg" => Ok(Self::Jpeg),
            other => Err(Error::Contract(format!("unknown image format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    pub resume: bool,
    pub format: ImageFileFormat,
    pub retry: RetryPolicy,
    /// Stop after this many newly completed records (simulates a crash).
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            resume: false,
            format: ImageFileFormat::Png,
            retry: RetryPolicy::default(),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub completed: usize,
    pub failed: usize,
    pub skipped: usize,
}

fn encode(img: &RgbImage, png: Vec<u8>, format: ImageFileFormat) -> Result<Vec<u8>> {
    match format {
        ImageFileFormat::Png => Ok(png),
        ImageFileFormat::Jpeg => {
            let mut buf = Cursor::new(Vec::new());
            let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, 95);
            img.write_with_encoder(enc)?;
            Ok(buf.into_inner())
        }
    }
}

fn base_entry(record: &PromptRecord, params: &GenParams, backend_id: &str) -> ManifestEntry {
    ManifestEntry {
        wnid: record.wnid.clone(),
        class_index: record.class_index,
        template: record.template,
        background: record.background.clone(),
        index_in_class: record.index_in_class,
        prompt: record.prompt.clone(),
        seed: record.seed,
        steps: params.steps,
        guidance: params.guidance,
        width: params.width,
        height: params.height,
        backend_id: backend_id.to_string(),
        file_path: String::new(),
        sha256: String::new(),
        status: EntryStatus::Ok,
        safety_flagged: false,
    }
}

/// Generates every pending record of `plan` into `store`.
///
/// Records are fanned out to up to `workers` threads (capped by the
/// backend's max concurrency); each completed record is appended to the
/// manifest through the store's single serialized writer. Per-record backend
/// failures are recorded as failed entries and the run continues; store
/// write failures abort the run.
pub fn run_plan(
    plan: &GenerationPlan,
    backend: &dyn Backend,
    store: &DatasetStore,
    opts: &RunOptions,
) -> Result<RunReport> {
    let params = &plan.gen_params;
    let (pending, skipped): (Vec<&PromptRecord>, Vec<&PromptRecord>) = plan
        .records
        .iter()
        .partition(|r| !(opts.resume && store.has_ok(&r.key())));

    let workers = match backend.max_concurrency() {
        Some(cap) => opts.workers.min(cap),
        None => opts.workers,
    };
    let completed = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let fatal: Mutex<Option<Error>> = Mutex::new(None);

    par::for_each(Parallelism::from_workers(workers), &pending, |&record| {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let outcome = opts
            .retry
            .run(|| generate(backend, &record.prompt, record.seed, params))
            .and_then(|(result, rgb)| {
                let bytes = encode(&rgb, result.png, opts.format)?;
                Ok((result.meta, bytes))
            });
        let mut entry = base_entry(record, params, backend.id());
        let written = match outcome {
            Ok((meta, bytes)) => {
                let rel = image_rel_path(record, opts.format.extension());
                store.write_image(&rel, &bytes).map(|sha| {
                    entry.backend_id = meta.backend_id;
                    entry.safety_flagged = meta.safety_flagged;
                    entry.file_path = rel;
                    entry.sha256 = sha;
                    true
                })
            }
            Err(e) => {
                log::error!("record {} failed: {e}", record.key());
                entry.status = EntryStatus::Failed;
                entry.file_path = format!("{}: {e}", e.code());
                Ok(false)
            }
        };
        let result = written.and_then(|ok| store.append(&entry, false).map(|_| ok));
        match result {
            Ok(true) => {
                let n = completed.fetch_add(1, Ordering::SeqCst) + 1;
                if opts.stop_after.is_some_and(|limit| n >= limit) {
                    stop.store(true, Ordering::SeqCst);
                }
            }
            Ok(false) => {
                failed.fetch_add(1, Ordering::SeqCst);
            }
            Err(e) => {
                stop.store(true, Ordering::SeqCst);
                fatal.lock().expect("poisoned").get_or_insert(e);
            }
        }
    });

    if let Some(e) = fatal.into_inner().expect("poisoned") {
        return Err(e);
    }
    Ok(RunReport {
        completed: completed.into_inner(),
        failed: failed.into_inner(),
        skipped: skipped.len(),
    })
}

/// Decodes a stored image file.
pub fn load_image(path: &std::path::Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes)
}

/// Re-encodes raw RGB to PNG, exposed for callers assembling fixtures.
pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ManifestHeader;

    #[test]
    fn mock_is_deterministic_and_sized() {
        let p = GenParams::default();
        let (a, img) = generate(&MockBackend, "papillon", 5, &p).unwrap();
        let (b, _) = generate(&MockBackend, "papillon", 5, &p).unwrap();
        assert_eq!(a.png, b.png);
        assert_eq!(img.dimensions(), (512, 384));
        let (c, _) = generate(&MockBackend, "papillon", 6, &p).unwrap();
        assert_ne!(
            crate::store::sha256_hex(&a.png),
            crate::store::sha256_hex(&c.png)
        );
    }

    #[test]
    fn oversize_rejected() {
        let p = GenParams {
            width: 5000,
            ..Default::default()
        };
        assert!(matches!(
            generate(&MockBackend, "x", 0, &p),
            Err(Error::Contract(_))
        ));
    }

    struct Flaky {
        calls: AtomicUsize,
        fail: usize,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn capabilities(&self) -> Capabilities {
            MockBackend.capabilities()
        }
        fn generate(&self, prompt: &str, seed: u64, params: &GenParams) -> Result<ImageResult> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail {
                Err(Error::BackendUnreachable("down".into()))
            } else {
                mock_generate(prompt, seed, params)
            }
        }
    }

    #[test]
    fn retry_policy_recovers() {
        let b = Flaky {
            calls: AtomicUsize::new(0),
            fail: 2,
        };
        let policy = RetryPolicy {
            delays: vec![Duration::ZERO; 3],
        };
        let p = GenParams {
            width: 8,
            height: 8,
            ..Default::default()
        };
        assert!(policy.run(|| generate(&b, "x", 0, &p)).is_ok());
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);

        let b = Flaky {
            calls: AtomicUsize::new(0),
            fail: 10,
        };
        assert!(policy.run(|| generate(&b, "x", 0, &p)).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
    }

    struct Broken;

    impl Backend for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn capabilities(&self) -> Capabilities {
            MockBackend.capabilities()
        }
        fn generate(&self, _: &str, _: u64, _: &GenParams) -> Result<ImageResult> {
            Ok(ImageResult {
                png: b"garbage".to_vec(),
                meta: ImageMeta {
                    backend_id: "broken".into(),
                    elapsed_ms: 0,
                    safety_flagged: false,
                    sampler: None,
                },
            })
        }
    }

    #[test]
    fn malformed_records_fail_and_run_continues() {
        use crate::prompt::{PromptRecord, PromptTemplate};
        let dir = tempfile::tempdir().unwrap();
        let records = (0..3)
            .map(|i| PromptRecord {
                wnid: "n00000001".into(),
                class_index: 0,
                template: PromptTemplate::Name,
                background: None,
                prompt: "x".into(),
                seed: i,
                index_in_class: i as usize,
            })
            .collect();
        let plan = GenerationPlan {
            plan_seed: 0,
            records,
            gen_params: GenParams {
                width: 8,
                height: 8,
                ..Default::default()
            },
            catalog_name: "c".into(),
            created_at: None,
        };
        let header = ManifestHeader {
            format_version: 1,
            plan_seed: 0,
            catalog_name: "c".into(),
        };
        let store = DatasetStore::create(dir.path(), header.clone()).unwrap();
        let report = run_plan(&plan, &Broken, &store, &RunOptions::default()).unwrap();
        assert_eq!(
            report,
            RunReport {
                completed: 0,
                failed: 3,
                skipped: 0
            }
        );
        drop(store);

        // Failed records are retried on resume.
        let store = DatasetStore::open_or_create(dir.path(), header).unwrap();
        let opts = RunOptions {
            resume: true,
            ..Default::default()
        };
        let report = run_plan(&plan, &MockBackend, &store, &opts).unwrap();
        assert_eq!(
            report,
            RunReport {
                completed: 3,
                failed: 0,
                skipped: 0
            }
        );
    }

    #[test]
    fn jpeg_format() {
        let img = mock::mock_image("x", 0, 16, 16);
        let bytes = encode(&img, vec![], ImageFileFormat::Jpeg).unwrap();
        assert_eq!(&bytes[..2], &[0xff, 0xd8]);
    }
}

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, GatewayError};

/// One cassette line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub responses: Vec<String>,
}

/// Digest-keyed response store persisted as JSONL.
///
/// New entries are appended as they arrive; [`Cassette::compact`] rewrites
/// the file sorted by digest so recordings diff cleanly.
#[derive(Debug)]
pub struct Cassette {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, Vec<String>>>,
    file: Mutex<()>,
}

impl Cassette {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(BTreeMap::new()),
            file: Mutex::new(()),
        }
    }

    /// Opens `path`, starting empty when it does not exist yet. Later lines
    /// override earlier ones with the same digest.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if path.exists() {
            let f = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| io_err(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                    GatewayError::Io(format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                entries.insert(e.digest, e.responses);
            }
        }
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            file: Mutex::new(()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<Vec<String>> {
        self.entries.read().unwrap().get(digest).cloned()
    }

    pub fn insert(&self, digest: String, responses: Vec<String>) -> Result<(), GatewayError> {
        let _guard = self.file.lock().unwrap();
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| io_err(path, e))?;
            let line = serde_json::to_string(&CassetteEntry {
                digest: digest.clone(),
                responses: responses.clone(),
            })
            .map_err(|e| GatewayError::Io(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
        }
        self.entries.write().unwrap().insert(digest, responses);
        Ok(())
    }

    /// Rewrites the backing file with one line per digest, sorted.
    pub fn compact(&self) -> Result<(), GatewayError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let _guard = self.file.lock().unwrap();
        let entries = self.entries.read().unwrap();
        let mut buf = String::new();
        for (digest, responses) in entries.iter() {
            let line = serde_json::to_string(&CassetteEntry {
                digest: digest.clone(),
                responses: responses.clone(),
            })
            .map_err(|e| GatewayError::Io(e.to_string()))?;
            buf.push_str(&line);
            buf.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, buf).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> GatewayError {
    GatewayError::Io(format!("{}: {e}", path.display()))
}

/// Answers strictly from a cassette.
pub struct ReplayBackend {
    cassette: Arc<Cassette>,
}

impl ReplayBackend {
    pub fn new(cassette: Arc<Cassette>) -> Self {
        Self { cassette }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let digest = req.digest();
        self.cassette
            .get(&digest)
            .ok_or_else(|| GatewayError::FixtureMiss {
                digest,
                model: req.model.clone(),
            })
    }
}

/// Replays known digests and proxies the rest to `inner`, persisting what
/// it hears.
pub struct RecordingBackend<B> {
    inner: B,
    cassette: Arc<Cassette>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, cassette: Arc<Cassette>) -> Self {
        Self { inner, cassette }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let digest = req.digest();
        if let Some(hit) = self.cassette.get(&digest) {
            return Ok(hit);
        }
        let responses = self.inner.complete(req)?;
        self.cassette.insert(digest, responses.clone())?;
        Ok(responses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);

    impl ChatBackend for Counting {
        fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok((0..req.n_samples).map(|i| format!("r{n}-{i}")).collect())
        }
    }

    #[test]
    fn replay_returns_fixture() {
        let cassette = Arc::new(Cassette::in_memory());
        let req = ChatRequest::new("m", "sys", "q");
        cassette.insert(req.digest(), vec!["ANSWER: A".into()]).unwrap();
        let gw = Gateway::new(Arc::new(ReplayBackend::new(cassette)));
        assert_eq!(gw.complete_chat(&req).unwrap(), vec!["ANSWER: A"]);
    }

    #[test]
    fn replay_miss_names_digest() {
        let gw = Gateway::new(Arc::new(ReplayBackend::new(Arc::new(Cassette::in_memory()))));
        let req = ChatRequest::new("m", "sys", "q");
        match gw.complete_chat(&req) {
            Err(GatewayError::FixtureMiss { digest, .. }) => assert_eq!(digest, req.digest()),
            other => panic!("expected fixture miss, got {other:?}"),
        }
    }

    #[test]
    fn five_samples_replayed() {
        let cassette = Arc::new(Cassette::in_memory());
        let req = ChatRequest::new("m", "sys", "q").with_samples(5);
        cassette
            .insert(req.digest(), (0..5).map(|i| i.to_string()).collect())
            .unwrap();
        let gw = Gateway::new(Arc::new(ReplayBackend::new(cassette)));
        assert_eq!(gw.complete_chat(&req).unwrap().len(), 5);
    }

    #[test]
    fn record_then_replay_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let reqs: Vec<_> = ["b", "a", "c"]
            .iter()
            .map(|q| ChatRequest::new("m", "sys", *q).with_samples(2))
            .collect();
        let recorded = {
            let cassette = Arc::new(Cassette::open(&path).unwrap());
            let inner = Counting(AtomicUsize::new(0));
            let rec = RecordingBackend::new(inner, cassette.clone());
            let out: Vec<_> = reqs.iter().map(|r| rec.complete(r).unwrap()).collect();
            // A second pass is served from the cassette.
            for (r, o) in reqs.iter().zip(&out) {
                assert_eq!(&rec.complete(r).unwrap(), o);
            }
            assert_eq!(rec.inner.0.load(Ordering::SeqCst), 3);
            cassette.compact().unwrap();
            out
        };
        let text = fs::read_to_string(&path).unwrap();
        let digests: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<CassetteEntry>(l).unwrap().digest)
            .collect();
        let mut sorted = digests.clone();
        sorted.sort();
        assert_eq!(digests, sorted);

        let replay = ReplayBackend::new(Arc::new(Cassette::open(&path).unwrap()));
        for (r, o) in reqs.iter().zip(&recorded) {
            assert_eq!(&replay.complete(r).unwrap(), o);
        }
    }
}

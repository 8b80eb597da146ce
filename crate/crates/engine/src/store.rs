//! On-disk model store: one JSON file per landscape group plus an index.
//!
//! Every write goes to a temp file in the store directory and is renamed
//! into place, so readers only ever see complete files. Writers serialize
//! on an in-process mutex and an advisory lock on `.lock`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use bidscape_core::auction_log::{parse_log, write_jsonl, AuctionSnapshot, LogFormat, ParseReport};
use bidscape_core::landscape::BidLandscape;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;
use thiserror::Error;

const INDEX_FILE: &str = "index.json";
const LOG_FILE: &str = "logs.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no model for group '{0}'")]
    NotFound(String),
    #[error("corrupt store file {}: {reason}", file.display())]
    Corrupt { file: PathBuf, reason: String },
    #[error("store I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug)]
pub struct ModelStore {
    root: PathBuf,
    writer: Mutex<()>,
}

impl ModelStore {
    /// Opens the store at `root`, creating the directory if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// File name used for a group: a readable prefix plus a hash, so
    /// distinct groups never collide after sanitizing.
    pub fn file_name_for(group: &str) -> String {
        let readable: String = group
            .chars()
            .take(40)
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let digest = Sha256::digest(group.as_bytes());
        let hash: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!("landscape-{readable}-{hash}.json")
    }

    pub fn index(&self) -> Result<BTreeMap<String, String>, StoreError> {
        let path = self.root.join(INDEX_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                file: path,
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn groups(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.index()?.into_keys().collect())
    }

    pub fn save_model(&self, landscape: &BidLandscape) -> Result<(), StoreError> {
        self.save_models(std::slice::from_ref(landscape))
    }

    /// Writes every landscape, then the index once.
    pub fn save_models(&self, landscapes: &[BidLandscape]) -> Result<(), StoreError> {
        let _guard = self.lock()?;
        let mut index = self.index()?;
        for l in landscapes {
            let name = Self::file_name_for(l.group());
            let bytes = serde_json::to_vec_pretty(l).expect("landscape serializes");
            self.write_atomic(&name, &bytes)?;
            index.insert(l.group().to_string(), name);
        }
        let bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        self.write_atomic(INDEX_FILE, &bytes)
    }

    pub fn load_model(&self, group: &str) -> Result<BidLandscape, StoreError> {
        let index = self.index()?;
        let name = index
            .get(group)
            .ok_or_else(|| StoreError::NotFound(group.to_string()))?;
        let path = self.root.join(name);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::Corrupt {
                    file: path,
                    reason: "indexed file is missing".into(),
                })
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let landscape: BidLandscape =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                file: path.clone(),
                reason: e.to_string(),
            })?;
        if landscape.group() != group {
            return Err(StoreError::Corrupt {
                file: path,
                reason: format!("holds group '{}', expected '{group}'", landscape.group()),
            });
        }
        Ok(landscape)
    }

    /// Appends validated snapshots to the stored log.
    pub fn append_logs(&self, snapshots: &[AuctionSnapshot]) -> Result<(), StoreError> {
        let _guard = self.lock()?;
        let path = self.root.join(LOG_FILE);
        let mut bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        write_jsonl(snapshots, &mut bytes).map_err(io_err(&path))?;
        self.write_atomic(LOG_FILE, &bytes)
    }

    pub fn load_logs(&self) -> Result<ParseReport, StoreError> {
        let path = self.root.join(LOG_FILE);
        match File::open(&path) {
            Ok(f) => Ok(parse_log(BufReader::new(f), LogFormat::Jsonl)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(ParseReport::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn lock(&self) -> Result<WriteGuard<'_>, StoreError> {
        let guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.root.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(WriteGuard {
            _file: file,
            _guard: guard,
        })
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let target = self.root.join(name);
        let mut tmp = NamedTempFile::new_in(&self.root).map_err(io_err(&self.root))?;
        tmp.write_all(bytes).map_err(io_err(tmp.path()))?;
        tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;
        tmp.persist(&target).map_err(|e| io_err(&target)(e.error))?;
        Ok(())
    }
}

/// Holds the file lock (released on drop) and the in-process mutex.
struct WriteGuard<'a> {
    _file: File,
    _guard: std::sync::MutexGuard<'a, ()>,
}

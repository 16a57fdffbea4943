//! `.winmeta` sidecar files.
//!
//! Plain `key=value` lines, magic first:
//!
//! ```text
//! magic=SWIN1
//! size_bytes=4096
//! disp_unit=8
//! file_offset=0
//! last_sync_epoch=3
//! ```
//!
//! Unknown lines are ignored on read so newer writers stay readable.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::StorageError;

pub const SIDECAR_MAGIC: &str = "SWIN1";
pub const SIDECAR_SUFFIX: &str = ".winmeta";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSidecar {
    pub size_bytes: u64,
    pub disp_unit: u64,
    pub file_offset: u64,
    pub last_sync_epoch: u64,
}

/// `path` with `.winmeta` appended (not substituted for the extension).
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(SIDECAR_SUFFIX);
    PathBuf::from(s)
}

impl WindowSidecar {
    pub fn encode(&self) -> String {
        format!(
            "magic={SIDECAR_MAGIC}\nsize_bytes={}\ndisp_unit={}\nfile_offset={}\nlast_sync_epoch={}\n",
            self.size_bytes, self.disp_unit, self.file_offset, self.last_sync_epoch
        )
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, StorageError> {
        let corrupt = |why: String| StorageError::SidecarCorrupt {
            path: path.to_owned(),
            reason: why,
        };
        let mut magic = None;
        let (mut size, mut disp, mut off, mut epoch) = (None, None, None, None);
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            let num = || {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| corrupt(format!("`{k}` is not a non-negative integer: `{v}`")))
            };
            match k.trim() {
                "magic" => magic = Some(v.trim().to_owned()),
                "size_bytes" => size = Some(num()?),
                "disp_unit" => disp = Some(num()?),
                "file_offset" => off = Some(num()?),
                "last_sync_epoch" => epoch = Some(num()?),
                _ => {}
            }
        }
        match magic.as_deref() {
            Some(SIDECAR_MAGIC) => {}
            Some(other) => return Err(corrupt(format!("bad magic `{other}`"))),
            None => return Err(corrupt("missing magic".into())),
        }
        let need = |v: Option<u64>, k: &str| v.ok_or_else(|| corrupt(format!("missing `{k}`")));
        Ok(Self {
            size_bytes: need(size, "size_bytes")?,
            disp_unit: need(disp, "disp_unit")?,
            file_offset: need(off, "file_offset")?,
            last_sync_epoch: need(epoch, "last_sync_epoch")?,
        })
    }

    pub fn read(path: &Path) -> Result<Self, StorageError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StorageError::SidecarMissing(path.to_owned()))
            }
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                return Err(StorageError::SidecarCorrupt {
                    path: path.to_owned(),
                    reason: "not valid UTF-8".into(),
                })
            }
            Err(e) => return Err(StorageError::io(path, e)),
        };
        Self::parse(path, &text)
    }

    /// Atomically replaces the sidecar: write a temp file, fsync, rename.
    pub fn write(&self, path: &Path) -> Result<(), StorageError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let res = (|| -> io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.encode().as_bytes())?;
            f.sync_data()?;
            fs::rename(&tmp, path)
        })();
        res.map_err(|e| StorageError::io(path, e))
    }
}

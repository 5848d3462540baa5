//! Binary weight archive.
//!
//! ```text
//! magic    8 bytes  "EDGEWTS1"
//! version  u32 LE   1
//! count    u32 LE
//! entries  count x { name_len u16 LE, name UTF-8, ndim u8, dims u32 LE x ndim, data f32 LE x prod(dims) }
//! crc32    u32 LE   IEEE CRC-32 of every preceding byte
//! ```
//!
//! The manifest lives next to the archive in `<path>.manifest` as
//! `key=value` lines and records the CRC of the archive it describes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nn::{EntryKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EDGEWTS1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic: expected EDGEWTS1, found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("manifest mismatch on `{field}`: expected `{expected}`, found `{found}`")]
    ManifestMismatch {
        field: String,
        expected: String,
        found: String,
    },
    #[error("truncated archive: {context} needs {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        context: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error("archive i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ArchiveError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes `store` in insertion order.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len())
        .map_err(|_| ArchiveError::Malformed("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, e) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| {
            ArchiveError::Malformed(format!("name `{name}` longer than 65535 bytes"))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = e.tensor.shape();
        let ndim = u8::try_from(shape.len())
            .map_err(|_| ArchiveError::Malformed(format!("`{name}` has rank > 255")))?;
        out.push(ndim);
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| ArchiveError::Malformed(format!("`{name}` dim {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ArchiveError::Truncated {
                context,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, context)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, context)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Header fields and CRC of a verified archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveInfo {
    pub version: u32,
    pub count: u32,
    pub crc32: u32,
}

/// Checks magic, version and CRC. Returns the header information.
pub fn verify(bytes: &[u8]) -> Result<ArchiveInfo> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    if bytes.len() < r.pos + 4 {
        return Err(ArchiveError::Truncated {
            context: "checksum",
            offset: r.pos,
            needed: 4,
            available: bytes.len() - r.pos,
        });
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(ArchiveError::Checksum { stored, computed });
    }
    Ok(ArchiveInfo {
        version,
        count,
        crc32: stored,
    })
}

/// Parses an archive, keeping entries whose name starts with `prefix`.
pub fn decode_filtered(bytes: &[u8], prefix: &str) -> Result<(ParamStore, ArchiveInfo)> {
    let info = verify(bytes)?;
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 16 };
    let mut store = ParamStore::new();
    for _ in 0..info.count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| {
                ArchiveError::Malformed(format!(
                    "entry name at offset {} is not UTF-8",
                    r.pos - len
                ))
            })?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| {
                ArchiveError::Malformed(format!("`{name}` shape {shape:?} overflows"))
            })?;
        let raw = r.take(numel, "tensor data")?;
        if !name.starts_with(prefix) {
            continue;
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
        if store.contains(&name) {
            return Err(ArchiveError::Malformed(format!("duplicate entry `{name}`")));
        }
        store
            .insert(&name, t, EntryKind::from_name(&name))
            .map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(ArchiveError::Malformed(format!(
            "{} trailing bytes after {} entries",
            body.len() - r.pos,
            info.count
        )));
    }
    Ok((store, info))
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    Ok(decode_filtered(bytes, "")?.0)
}

/// Provenance stored beside an archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub model_kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub source_condition: u32,
    pub created_by: String,
}

impl Manifest {
    pub fn new(model_kind: &str, config_hash: &str, seed: u64, source_condition: u32) -> Self {
        Self {
            model_kind: model_kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            source_condition,
            created_by: concat!("edgeda ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }

    fn render(&self, crc: u32) -> String {
        format!(
            "model_kind={}\nconfig_hash={}\nseed={}\nsource_condition={}\ncreated_by={}\narchive_crc32={crc:08x}\n",
            self.model_kind, self.config_hash, self.seed, self.source_condition, self.created_by
        )
    }

    fn parse(text: &str) -> Result<(Self, u32)> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ArchiveError::Malformed(format!("manifest line `{line}` has no `=`"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| ArchiveError::Malformed(format!("manifest lacks `{k}`")))
        };
        let num = |k: &str, v: String| {
            v.parse::<u64>()
                .map_err(|_| ArchiveError::Malformed(format!("manifest `{k}` is not an integer")))
        };
        let crc = u32::from_str_radix(&get("archive_crc32")?, 16)
            .map_err(|_| ArchiveError::Malformed("manifest `archive_crc32` is not hex".into()))?;
        let m = Self {
            model_kind: get("model_kind")?,
            config_hash: get("config_hash")?,
            seed: num("seed", get("seed")?)?,
            source_condition: num("source_condition", get("source_condition")?)? as u32,
            created_by: get("created_by")?,
        };
        Ok((m, crc))
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

/// Writes the archive and its manifest, each via temp file and rename.
pub fn save_archive(store: &ParamStore, manifest: &Manifest, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), manifest.render(crc).as_bytes())
}

/// Reads the manifest beside `path` and checks it belongs to `archive_crc`.
pub fn read_manifest(path: &Path, archive_crc: u32) -> Result<Manifest> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let (m, crc) = Manifest::parse(&text)?;
    if crc != archive_crc {
        return Err(ArchiveError::ManifestMismatch {
            field: "archive_crc32".into(),
            expected: format!("{archive_crc:08x}"),
            found: format!("{crc:08x}"),
        });
    }
    Ok(m)
}

/// Loads every entry. With `expected`, the manifest must exist and agree on
/// model kind and config hash.
pub fn load_archive(
    path: &Path,
    expected: Option<&Manifest>,
) -> Result<(ParamStore, Option<Manifest>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (store, info) = decode_filtered(&bytes, "")?;
    let manifest = match expected {
        None => read_manifest(path, info.crc32).ok(),
        Some(want) => {
            let got = match read_manifest(path, info.crc32) {
                Ok(m) => m,
                Err(ArchiveError::Io { .. }) => {
                    return Err(ArchiveError::ManifestMismatch {
                        field: "manifest".into(),
                        expected: manifest_path(path).display().to_string(),
                        found: "missing".into(),
                    })
                }
                Err(e) => return Err(e),
            };
            for (field, a, b) in [
                ("model_kind", &want.model_kind, &got.model_kind),
                ("config_hash", &want.config_hash, &got.config_hash),
            ] {
                if a != b {
                    return Err(ArchiveError::ManifestMismatch {
                        field: field.into(),
                        expected: a.clone(),
                        found: b.clone(),
                    });
                }
            }
            Some(got)
        }
    };
    Ok((store, manifest))
}

/// Entries whose names start with `prefix`; an unmatched prefix gives an
/// empty store.
pub fn load_subset(path: &Path, prefix: &str) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_filtered(&bytes, prefix)?.0)
}

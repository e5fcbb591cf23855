//! Plugin bundles: tar archives with `manifest.json` at the root and the
//! plugin executable at the manifest's `entry` path.

use std::io::{Cursor, Read};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ParamSpec, PluginDescriptor, PluginKind, Provenance};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("invalid plugin schema: {}", .0.join("; "))]
    SchemaInvalid(Vec<String>),
}

/// `manifest.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    pub kind: PluginKind,
    pub version: String,
    #[serde(default)]
    pub param_schema: Vec<ParamSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samplers: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub analyzers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicators: Option<Vec<String>>,
    pub entry: String,
}

impl Manifest {
    pub fn descriptor(&self, digest: Option<String>) -> PluginDescriptor {
        PluginDescriptor {
            id: self.id.clone(),
            kind: self.kind,
            provenance: Provenance::External,
            version: self.version.clone(),
            param_schema: self.param_schema.clone(),
            samplers: self.samplers.clone(),
            analyzers: self.analyzers.clone(),
            indicators: self.indicators.clone(),
            entry: Some(self.entry.clone()),
            digest,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedBundle {
    pub manifest: Manifest,
    pub descriptor: PluginDescriptor,
    pub digest: String,
}

pub fn digest_hex(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn normalize(path: &Path) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(out)
}

/// Reads and validates a bundle without unpacking it.
pub fn parse_bundle(bytes: &[u8]) -> Result<ParsedBundle, BundleError> {
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    let entries = archive.entries().map_err(|e| BundleError::Malformed(e.to_string()))?;
    let mut manifest_raw = None;
    let mut files = Vec::new();
    for entry in entries {
        let mut entry = entry.map_err(|e| BundleError::Malformed(e.to_string()))?;
        let raw_path = entry.path().map_err(|e| BundleError::Malformed(e.to_string()))?.into_owned();
        let path = normalize(&raw_path)
            .ok_or_else(|| BundleError::Malformed(format!("unsafe path {}", raw_path.display())))?;
        if path == Path::new(MANIFEST_NAME) {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| BundleError::Malformed(e.to_string()))?;
            manifest_raw = Some(buf);
        } else if entry.header().entry_type().is_file() {
            files.push(path);
        }
    }
    if files.is_empty() && manifest_raw.is_none() {
        return Err(BundleError::Malformed("empty or unreadable archive".into()));
    }
    let raw = manifest_raw.ok_or_else(|| BundleError::Malformed(format!("{MANIFEST_NAME} missing")))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| BundleError::SchemaInvalid(vec![format!("{MANIFEST_NAME}: {e}")]))?;

    let digest = digest_hex(bytes);
    let descriptor = manifest.descriptor(Some(digest.clone()));
    let mut problems = descriptor.check();
    match normalize(Path::new(&manifest.entry)) {
        Some(entry) if files.contains(&entry) => {}
        Some(_) => problems.push(format!("entry {:?} not found in bundle", manifest.entry)),
        None => problems.push(format!("entry {:?} is not a relative path", manifest.entry)),
    }
    if !problems.is_empty() {
        return Err(BundleError::SchemaInvalid(problems));
    }
    Ok(ParsedBundle { manifest, descriptor, digest })
}

/// Unpacks a bundle into `dir` and marks the entry executable.
pub fn unpack_bundle(bytes: &[u8], manifest: &Manifest, dir: &Path) -> Result<PathBuf, BundleError> {
    std::fs::create_dir_all(dir).map_err(|e| BundleError::Malformed(e.to_string()))?;
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    archive.set_preserve_permissions(true);
    archive.unpack(dir).map_err(|e| BundleError::Malformed(e.to_string()))?;
    let entry = dir.join(normalize(Path::new(&manifest.entry)).unwrap_or_default());
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let meta = std::fs::metadata(&entry).map_err(|e| BundleError::Malformed(e.to_string()))?;
        let mut perms = meta.permissions();
        perms.set_mode(perms.mode() | 0o755);
        std::fs::set_permissions(&entry, perms).map_err(|e| BundleError::Malformed(e.to_string()))?;
    }
    Ok(entry)
}

/// Builds a bundle from a manifest and `(path, contents, mode)` files.
/// Output is byte-for-byte reproducible.
pub fn pack_bundle(manifest: &Manifest, files: &[(&str, &[u8], u32)]) -> std::io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    let manifest_json = serde_json::to_vec_pretty(manifest).map_err(std::io::Error::other)?;
    let mut append = |path: &str, data: &[u8], mode: u32| {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(mode);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        header.set_cksum();
        builder.append_data(&mut header, path, data)
    };
    append(MANIFEST_NAME, &manifest_json, 0o644)?;
    for (path, data, mode) in files {
        append(path, data, *mode)?;
    }
    builder.into_inner()
}

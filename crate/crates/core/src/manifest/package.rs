//! Contribution packages: a ZIP whose root holds nested contribution
//! archives plus one `application.composite` descriptor.

use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;

use super::{parse_manifest, ApplicationManifest, ManifestError};

pub const DESCRIPTOR_FILE: &str = "application.composite";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageReport {
    pub archives: Vec<String>,
    pub manifest: ApplicationManifest,
}

fn package_err(e: impl std::fmt::Display) -> ManifestError {
    ManifestError::Package(e.to_string())
}

/// Checks that the package holds a descriptor and at least one nested
/// archive, and that every contribution the descriptor names is present.
pub fn validate_package(bytes: &[u8]) -> Result<PackageReport, ManifestError> {
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(package_err)?;
    let mut archives = Vec::new();
    let mut descriptor = None;
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(package_err)?;
        let name = entry.name().to_string();
        if entry.is_dir() || name.contains('/') {
            continue;
        }
        if name == DESCRIPTOR_FILE {
            let mut text = String::new();
            entry.read_to_string(&mut text).map_err(package_err)?;
            descriptor = Some(text);
        } else if name.to_ascii_lowercase().ends_with(".zip") {
            let mut nested = Vec::new();
            entry.read_to_end(&mut nested).map_err(package_err)?;
            zip::ZipArchive::new(Cursor::new(nested))
                .map_err(|e| package_err(format!("nested archive `{name}` is unreadable: {e}")))?;
            archives.push(name);
        }
    }
    let descriptor = descriptor.ok_or(ManifestError::MissingDescriptor)?;
    if archives.is_empty() {
        return Err(ManifestError::MissingArchive);
    }
    let manifest = parse_manifest(&descriptor)?;
    for c in &manifest.components {
        if !archives.contains(&c.contribution) {
            return Err(ManifestError::AbsentArchive {
                component: c.name.clone(),
                archive: c.contribution.clone(),
            });
        }
    }
    archives.sort();
    Ok(PackageReport { archives, manifest })
}

fn empty_zip() -> Vec<u8> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    w.start_file("README", SimpleFileOptions::default())
        .expect("in-memory zip");
    w.write_all(b"contribution\n").expect("in-memory zip");
    w.finish().expect("in-memory zip").into_inner()
}

/// Assembles a package from a descriptor and nested archive names. Each
/// nested archive is a small placeholder contribution.
pub fn build_package(descriptor: Option<&str>, archives: &[&str]) -> Vec<u8> {
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = SimpleFileOptions::default();
    for name in archives {
        w.start_file(*name, opts).expect("in-memory zip");
        w.write_all(&empty_zip()).expect("in-memory zip");
    }
    if let Some(d) = descriptor {
        w.start_file(DESCRIPTOR_FILE, opts).expect("in-memory zip");
        w.write_all(d.as_bytes()).expect("in-memory zip");
    }
    w.finish().expect("in-memory zip").into_inner()
}

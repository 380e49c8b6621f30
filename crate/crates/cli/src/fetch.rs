//! Dataset download with checksum verification.
//!
//! Each artifact's SHA-256 is checked against a pin when the built-in
//! manifest carries one; otherwise the digest observed on the first
//! successful fetch is recorded next to the file (`<file>.sha256`) and
//! enforced on every later invocation. A mismatch quarantines the file
//! instead of using it.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use kwta_ensemble::data::DatasetTag;

struct FileSpec {
    /// Path relative to the data directory.
    rel_path: &'static str,
    url: &'static str,
    /// Pinned digest, when known ahead of time.
    sha256: Option<&'static str>,
}

fn manifest(tag: DatasetTag) -> Vec<FileSpec> {
    let idx_files = |base: &'static str, dir: &'static str| -> Vec<FileSpec> {
        [
            "train-images-idx3-ubyte.gz",
            "train-labels-idx1-ubyte.gz",
            "t10k-images-idx3-ubyte.gz",
            "t10k-labels-idx1-ubyte.gz",
        ]
        .into_iter()
        .map(|name| FileSpec {
            rel_path: Box::leak(format!("{dir}/{name}").into_boxed_str()),
            url: Box::leak(format!("{base}/{name}").into_boxed_str()),
            sha256: None,
        })
        .collect()
    };
    match tag {
        DatasetTag::Mnist => idx_files("https://ossci-datasets.s3.amazonaws.com/mnist", "mnist"),
        DatasetTag::Fashion => idx_files(
            "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com",
            "fashion",
        ),
        DatasetTag::Kmnist => idx_files("http://codh.rois.ac.jp/kmnist/dataset/kmnist", "kmnist"),
        DatasetTag::Wdbc => vec![FileSpec {
            rel_path: "wdbc.data",
            url: "https://archive.ics.uci.edu/ml/machine-learning-databases/breast-cancer-wisconsin/wdbc.data",
            sha256: None,
        }],
    }
}

fn sha256_of_file(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn recorded_digest_path(target: &Path) -> PathBuf {
    let mut name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".sha256");
    target.with_file_name(name)
}

fn expected_digest(spec: &FileSpec, target: &Path) -> Result<Option<String>> {
    if let Some(pinned) = spec.sha256 {
        return Ok(Some(pinned.to_string()));
    }
    let recorded = recorded_digest_path(target);
    if recorded.exists() {
        let text = std::fs::read_to_string(&recorded)?;
        return Ok(Some(text.trim().to_string()));
    }
    Ok(None)
}

fn quarantine(target: &Path) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(&format!(".corrupt-{stamp}"));
    let dest = target.with_file_name(name);
    std::fs::rename(target, &dest)?;
    Ok(dest)
}

fn download(url: &str, dest: &Path) -> Result<String> {
    let mut response = ureq::get(url)
        .call()
        .with_context(|| format!("GET {url}"))?;
    let mut reader = response.body_mut().as_reader();
    let mut file = File::create(dest)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        file.write_all(&buf[..n])?;
    }
    file.flush()?;
    Ok(hex_string(&hasher.finalize()))
}

fn fetch_file(spec: &FileSpec, data_dir: &Path) -> Result<()> {
    let target = data_dir.join(spec.rel_path);
    if let Some(parent) = target.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let expected = expected_digest(spec, &target)?;

    if target.exists() {
        let digest = sha256_of_file(&target)?;
        match &expected {
            Some(want) if *want != digest => {
                let dest = quarantine(&target)?;
                bail!(
                    "{}: checksum mismatch (expected {want}, got {digest}); quarantined as {}",
                    target.display(),
                    dest.display()
                );
            }
            Some(_) => {
                println!("ok {} (verified)", target.display());
            }
            None => {
                std::fs::write(recorded_digest_path(&target), format!("{digest}\n"))?;
                println!("ok {} (recorded sha256 {digest})", target.display());
            }
        }
        return Ok(());
    }

    println!("fetching {} -> {}", spec.url, target.display());
    let partial = target.with_extension("partial");
    let digest = download(spec.url, &partial).inspect_err(|_| {
        let _ = std::fs::remove_file(&partial);
    })?;
    if let Some(want) = &expected {
        if *want != digest {
            let dest = quarantine(&partial)?;
            bail!(
                "{}: downloaded checksum mismatch (expected {want}, got {digest}); quarantined as {}",
                target.display(),
                dest.display()
            );
        }
    }
    std::fs::rename(&partial, &target)?;
    if spec.sha256.is_none() {
        std::fs::write(recorded_digest_path(&target), format!("{digest}\n"))?;
    }
    println!("ok {} (sha256 {digest})", target.display());
    Ok(())
}

pub fn fetch_datasets(tags: &[DatasetTag], data_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(data_dir)?;
    for &tag in tags {
        for spec in manifest(tag) {
            fetch_file(&spec, data_dir)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn present_valid_file_is_a_noop_and_records_digest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FileSpec {
            rel_path: "wdbc.data",
            url: "http://unreachable.invalid/wdbc.data",
            sha256: None,
        };
        std::fs::write(dir.path().join("wdbc.data"), b"1,M,0.5\n").unwrap();
        fetch_file(&spec, dir.path()).unwrap();
        let recorded = dir.path().join("wdbc.data.sha256");
        assert!(recorded.exists());
        // Second invocation verifies against the recorded digest, no
        // network involved.
        fetch_file(&spec, dir.path()).unwrap();
    }

    #[test]
    fn corrupted_file_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FileSpec {
            rel_path: "wdbc.data",
            url: "http://unreachable.invalid/wdbc.data",
            sha256: None,
        };
        std::fs::write(dir.path().join("wdbc.data"), b"original").unwrap();
        fetch_file(&spec, dir.path()).unwrap();
        // Tamper with the file behind the recorded digest.
        std::fs::write(dir.path().join("wdbc.data"), b"tampered").unwrap();
        let err = fetch_file(&spec, dir.path()).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
        assert!(!dir.path().join("wdbc.data").exists());
        let quarantined: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("corrupt"))
            .collect();
        assert_eq!(quarantined.len(), 1);
    }

    #[test]
    fn pinned_digest_rejects_wrong_content() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FileSpec {
            rel_path: "pinned.bin",
            url: "http://unreachable.invalid/pinned.bin",
            sha256: Some("0000000000000000000000000000000000000000000000000000000000000000"),
        };
        std::fs::write(dir.path().join("pinned.bin"), b"anything").unwrap();
        let err = fetch_file(&spec, dir.path()).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
    }
}

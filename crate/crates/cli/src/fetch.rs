//! Downloading and unpacking the CIFAR-10 binary distribution.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use deepbroadcast::data::load_cifar10;
use deepbroadcast::{Error, Result};
use flate2::read::GzDecoder;

pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";

/// Downloads the archive from `url` into `dir` and checks that it loads.
pub fn fetch(url: &str, dir: &Path) -> Result<PathBuf> {
    if load_cifar10(dir).is_ok() {
        eprintln!("CIFAR-10 already present in {}", dir.display());
        return Ok(dir.to_path_buf());
    }
    fs::create_dir_all(dir)?;
    eprintln!("downloading {url}");
    let response = ureq::get(url)
        .call()
        .map_err(|e| Error::Other(format!("download of {url} failed: {e}")))?;
    let unpacked = unpack(response.into_body().into_reader(), dir)?;
    load_cifar10(dir)?;
    eprintln!("unpacked {unpacked} files into {}", dir.display());
    Ok(dir.to_path_buf())
}

/// Extracts a gzipped tarball into `dir`, returning the number of entries.
pub fn unpack(gz: impl Read, dir: &Path) -> Result<usize> {
    let mut archive = tar::Archive::new(GzDecoder::new(gz));
    let mut n = 0;
    for entry in archive.entries()? {
        let mut entry = entry?;
        // unpack_in refuses paths that escape `dir`
        if entry.unpack_in(dir)? {
            n += 1;
        }
    }
    Ok(n)
}

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

use wildreid_core::catalog::{self, Catalog, Schema};
use wildreid_core::local::{self, DescriptorSet};
use wildreid_core::EmbeddingMatrix;

/// Writes through `body` into a temp file next to `path`, then renames it
/// into place. Nothing is left behind if `body` fails.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(dir).with_context(|| format!("cannot create a temp file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Atomic file output when a path is given, stdout otherwise.
pub fn emit<F>(path: Option<&Path>, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match path {
        Some(p) => write_atomic(p, body),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

pub fn require_output<'a>(output: Option<&'a Path>, command: &str) -> Result<&'a Path> {
    output.with_context(|| format!("`{command}` needs --output"))
}

pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    catalog::ingest(path, &name, &Schema::default()).with_context(|| format!("reading catalog {}", path.display()))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    EmbeddingMatrix::read_from(BufReader::new(f)).with_context(|| format!("reading embeddings {}", path.display()))
}

pub fn read_descriptors(path: &Path) -> Result<(usize, Vec<DescriptorSet>)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    local::read_descriptors(BufReader::new(f)).with_context(|| format!("reading descriptors {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// `<path>.partial`
pub fn journal_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

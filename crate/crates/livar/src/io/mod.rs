//! On-disk formats.

pub mod dataset;
pub mod metrics;
pub mod snapshot;
pub mod table;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::{Error, Result};

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

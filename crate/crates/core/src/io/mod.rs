//! File formats: multichannel WAV, MSK1 mask tensors and key=value run
//! configuration.

mod config;
mod msk;
mod wav;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use config::{
    format_key_values, load_config, parse_config, read_config, parse_key_values, MaskPaths, RunConfig,
};
pub use msk::{decode_masks, encode_masks, read_mask, write_mask, MSK_MAGIC, MSK_VERSION};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, WavCodec};

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the same directory and renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use heterodyn::{Error, Result};

/// Provenance line written at the top of every output file.
pub fn header(hash: &str, seed: u64) -> String {
    format!("# heterodyn {} config_hash={hash} seed={seed}", env!("CARGO_PKG_VERSION"))
}

/// 64-bit digest of the canonical model text followed by the sorted
/// subcommand parameters.
pub fn run_hash(model_text: &str, command: &str, params: &[(&str, String)]) -> String {
    let mut sorted: Vec<_> = params.iter().collect();
    sorted.sort_by_key(|(k, _)| *k);
    let mut text = format!("{model_text}[{command}]\n");
    for (k, v) in sorted {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Writer {
    pub dir: PathBuf,
    pub header: String,
    pub plot_data: bool,
}

impl Writer {
    pub fn new(dir: &Path, header: String, plot_data: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            header,
            plot_data,
        })
    }

    /// Write a body that does not carry the header yet.
    pub fn write(&self, name: &str, body: &str) -> Result<()> {
        let text = format!("{}\n{body}", self.header);
        fs::write(self.dir.join(name), text).map_err(Error::from)
    }

    /// Write a body produced by a `to_csv(header)` method.
    pub fn write_raw(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.dir.join(name), text).map_err(Error::from)
    }

    /// Two-column plot file, skipped unless plot data was requested.
    pub fn plot(&self, name: &str, columns: (&str, &str), points: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
        if !self.plot_data {
            return Ok(());
        }
        let mut body = format!("# {} {}\n", columns.0, columns.1);
        for (x, y) in points {
            body.push_str(&format!("{x:e} {y:e}\n"));
        }
        self.write(&format!("plot_{name}.dat"), &body)
    }
}

//! Append-only metrics CSV.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const HEADER_VERSION: &str = "# tdino-metrics v1";
pub const COLUMNS: [&str; 7] = ["backbone", "interval", "protocol", "loss_variant", "seed", "macro_precision", "n_frames"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub backbone: String,
    pub interval: usize,
    pub protocol: String,
    pub loss_variant: String,
    pub seed: u64,
    pub macro_precision: f64,
    pub n_frames: usize,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Appends rows, writing the version line and header first when the file is new.
pub fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let io_err = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
    let mut buf = Vec::new();
    if fresh {
        writeln!(buf, "{HEADER_VERSION}").map_err(io_err)?;
        writeln!(buf, "{}", COLUMNS.join(",")).map_err(io_err)?;
    }
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        for row in rows {
            w.serialize(row).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err)?;
    }
    // one write per batch keeps concurrent appenders from interleaving rows
    file.write_all(&buf).map_err(io_err)?;
    file.sync_all().map_err(io_err)
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::MissingFile(format!("{}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if !headers.is_empty() && headers.iter().ne(COLUMNS) {
        return Err(HarnessError::Config(format!(
            "{}: unexpected metrics columns {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(csv_err(path))
}

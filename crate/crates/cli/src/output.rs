//! Result emission: headered CSV with RFC-4180 quoting and a JSON summary
//! with provenance fields.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const FORMAT_VERSION: u32 = 1;

/// Quotes a CSV field only when it contains a delimiter, quote, or newline.
pub fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') || raw.contains('\r') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Line-oriented CSV writer; numeric fields use the shortest exact decimal
/// representation so reruns are byte-identical.
pub struct CsvWriter {
    file: fs::File,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> io::Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{}", header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","))?;
        Ok(Self { file })
    }

    pub fn row(&mut self, fields: &[String]) -> io::Result<()> {
        writeln!(
            self.file,
            "{}",
            fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
        )
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Output directory with the provenance files in place.
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn prepare(root: &Path, resolved_config_toml: &str) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        fs::write(root.join("config_resolved.toml"), resolved_config_toml)?;
        fs::write(root.join("FORMAT_VERSION"), format!("{FORMAT_VERSION}\n"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_summary<T: Serialize>(&self, summary: &T) -> io::Result<()> {
        let text = serde_json::to_string_pretty(summary).expect("summary serializes");
        fs::write(self.root.join("summary.json"), text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting_only_when_needed() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("1.25"), "1.25");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-12, 123456.789, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}

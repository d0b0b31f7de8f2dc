//! File output: CSV tables, JSON summaries, and the run manifest.
//!
//! Every floating-point number is written with 17 significant digits
//! (`{:.16e}`), enough to reproduce the exact bit pattern on parse, so two
//! runs agree exactly when and only when their outputs agree byte for byte.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::harness::StudyConfig;
use crate::risk::CsvCell;
use crate::{Error, Result};

/// One CSV cell as text: unsigned integers in decimal, floats with 17
/// significant digits, flags as 0/1, missing values empty.
pub fn format_cell(cell: &CsvCell) -> String {
    match *cell {
        CsvCell::UInt(v) => v.to_string(),
        CsvCell::Float(v) => format!("{v:.16e}"),
        CsvCell::Flag(b) => String::from(if b { "1" } else { "0" }),
        CsvCell::Missing => String::new(),
    }
}

/// Write a comma-separated table with a header row. Cells are numeric or
/// empty, so no quoting is needed.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<CsvCell>>,
{
    let file = fs::File::create(path)?;
    let mut writer = io::BufWriter::new(file);
    writeln!(writer, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let mut first = true;
        for cell in &row {
            if !first {
                write!(writer, ",")?;
            }
            write!(writer, "{}", format_cell(cell))?;
            first = false;
        }
        writeln!(writer)?;
    }
    writer.flush()?;
    Ok(())
}

/// Pretty JSON formatter that pins every float to 17 significant digits.
/// Layout is delegated to [`PrettyFormatter`]; only the number rendering
/// differs from stock serde_json.
pub struct SigFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Default for SigFormatter<'_> {
    fn default() -> Self {
        SigFormatter {
            inner: PrettyFormatter::new(),
        }
    }
}

impl Formatter for SigFormatter<'_> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.8e}")
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object_value(writer)
    }
}

/// Serialize `value` as pretty JSON with pinned float precision, plus a
/// trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut writer = io::BufWriter::new(file);
    let mut ser = serde_json::Serializer::with_formatter(&mut writer, SigFormatter::default());
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// What produced a run directory. Lists every other file the run wrote, so
/// each output file is referenced by exactly one manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Path the configuration was loaded from, as given.
    pub config_path: String,
    /// The effective configuration (after command-line overrides).
    pub config: StudyConfig,
    /// Master seed in effect.
    pub seed: u64,
    pub code_version: String,
    /// File names written by this run, relative to its output directory.
    pub outputs: Vec<String>,
    /// Oracle pilot ceiling, when the run computed one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_ceiling: Option<f64>,
}

impl RunManifest {
    pub fn code_version() -> String {
        env!("CARGO_PKG_VERSION").to_string()
    }
}

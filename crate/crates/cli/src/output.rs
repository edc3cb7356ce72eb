//! CSV tables with a schema-version comment line.
//!
//! Every table starts with `# schema: bffg-<kind> v1`, then a header row.
//! Fields are quoted only when they contain a comma, a double quote or a line
//! break, with embedded quotes doubled; records end in `\n`. Floats use the
//! shortest decimal text that parses back to the same `f64` (`inf`, `-inf`
//! and `NaN` for non-finite values), so equal runs give byte-identical files.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

pub struct Table {
    writer: csv::Writer<Box<dyn Write>>,
}

impl Table {
    /// Opens `path` (stdout when `None`) and writes the schema line and header.
    pub fn create(path: Option<&Path>, kind: &str, header: &[&str]) -> io::Result<Self> {
        let mut sink: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        writeln!(sink, "# schema: bffg-{kind} v{SCHEMA_VERSION}")?;
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> io::Result<()> {
        self.writer.write_record(fields).map_err(io::Error::from)
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

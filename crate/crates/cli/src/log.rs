use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Line-oriented `key=value` records to a file, with selected lines echoed
/// to the console.
pub struct Logger<'a> {
    file: Option<BufWriter<File>>,
    console: &'a mut dyn Write,
    prefix: String,
}

impl<'a> Logger<'a> {
    pub fn to_file(path: &Path, console: &'a mut dyn Write) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            file: Some(BufWriter::new(File::create(path)?)),
            console,
            prefix: String::new(),
        })
    }

    pub fn console_only(console: &'a mut dyn Write) -> Self {
        Self {
            file: None,
            console,
            prefix: String::new(),
        }
    }

    /// Prepended to every following line.
    pub fn set_prefix(&mut self, prefix: impl Into<String>) {
        self.prefix = prefix.into();
    }

    fn compose(&self, line: &str) -> String {
        if self.prefix.is_empty() {
            line.to_string()
        } else {
            format!("{} {line}", self.prefix)
        }
    }

    /// File only.
    pub fn record(&mut self, line: &str) -> std::io::Result<()> {
        let l = self.compose(line);
        match self.file.as_mut() {
            Some(f) => writeln!(f, "{l}"),
            None => Ok(()),
        }
    }

    /// File and console.
    pub fn note(&mut self, line: &str) -> std::io::Result<()> {
        self.record(line)?;
        let l = self.compose(line);
        writeln!(self.console, "{l}")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
        }
        self.console.flush()
    }
}

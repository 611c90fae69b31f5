//! Stderr logger that can also append to a run's `run.log`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

struct RunLogger {
    level: LevelFilter,
    file: Mutex<Option<File>>,
}

static LOGGER: RunLogger = RunLogger {
    level: LevelFilter::Trace,
    file: Mutex::new(None),
};

impl Log for RunLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level() && metadata.target().starts_with("ida")
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{:<5}] {}", record.level(), record.args());
        eprintln!("{line}");
        if record.level() <= Level::Info {
            if let Some(f) = self.file.lock().expect("log file lock").as_mut() {
                let stamp = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ");
                let _ = writeln!(f, "{stamp} {line}");
            }
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log file lock").as_mut() {
            let _ = f.flush();
        }
    }
}

/// Level from `IDA_LOG` (error, warn, info, debug, trace); info by default.
pub fn init(filter: Option<&str>) {
    let level = filter
        .and_then(|s| s.parse::<LevelFilter>().ok())
        .unwrap_or(LevelFilter::Info);
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(level.min(LOGGER.level));
    }
}

/// Appends info-and-above records to `path` from now on.
pub fn attach_file(path: &Path) -> std::io::Result<()> {
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    *LOGGER.file.lock().expect("log file lock") = Some(f);
    Ok(())
}

pub fn detach_file() {
    log::logger().flush();
    *LOGGER.file.lock().expect("log file lock") = None;
}

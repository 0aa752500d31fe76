//! Optional file-access log. When `KSPOD_ACCESS_LOG` names a file, every
//! dataset/model read and write is appended to it together with phase markers.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

pub const ENV: &str = "KSPOD_ACCESS_LOG";

static LOG: OnceLock<Option<Mutex<File>>> = OnceLock::new();

fn sink() -> Option<&'static Mutex<File>> {
    LOG.get_or_init(|| {
        let path = std::env::var_os(ENV)?;
        match OpenOptions::new().create(true).append(true).open(&path) {
            Ok(f) => Some(Mutex::new(f)),
            Err(e) => {
                log::warn!("cannot open access log {}: {e}", Path::new(&path).display());
                None
            }
        }
    })
    .as_ref()
}

fn line(kind: &str, what: &str) {
    if let Some(m) = sink() {
        let mut f = m.lock().unwrap_or_else(|p| p.into_inner());
        let _ = writeln!(f, "{kind} {what}");
    }
}

pub fn phase(name: &str) {
    line("phase", name);
}

pub fn read(path: &Path) {
    line("read", &path.display().to_string());
}

pub fn write(path: &Path) {
    line("write", &path.display().to_string());
}

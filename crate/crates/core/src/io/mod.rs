//! File formats and configuration: OBJ meshes, 8-bit PNG images, the binary
//! model container, plain-text parameter/landmark files, and key=value run
//! configuration. Every writer goes through [`atomic_write`] so a crash or
//! full disk never leaves a half-written file at the target path.

use std::path::Path;

use crate::error::Result;

pub mod config;
pub mod landmarks;
pub mod model_file;
pub mod obj;
pub mod params;
pub mod png;

pub use config::{load_config, parse_config, RunConfig};
pub use landmarks::{load_landmarks, save_landmarks};
pub use model_file::{load_model, save_model, ModelFile};
pub use obj::{load_obj, save_obj};
pub use params::{load_params, save_params, ParamFile};
pub use png::{load_png, save_png};

/// Write `bytes` to `path` atomically: the data goes to a sibling temp file
/// which is then renamed over the target, so readers never observe a partial
/// file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp_name = format!(".{file_name}.tmp{}", std::process::id());
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            // Leave no stray temp file behind on a failed rename.
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("out.txt");
        std::fs::write(&path, b"old").expect("seed file");
        atomic_write(&path, b"new content").expect("atomic write");
        let got = std::fs::read(&path).expect("readback");
        assert_eq!(got, b"new content", "target must hold exactly the new bytes");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .expect("list dir")
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty(), "no temp file may remain after a successful write");
    }
}

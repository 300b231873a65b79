//! Plain-text landmark annotations: one `x y [visible]` line per landmark,
//! in the standard 68-point ordering. The optional third field is 1 (or
//! absent) for visible and 0 for occluded. Comments (`#`) and blank lines
//! are skipped.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::losses::LandmarkSet;

pub fn save_landmarks(path: &Path, lms: &LandmarkSet) -> Result<()> {
    let mut out = String::new();
    for (p, vis) in lms.points.iter().zip(&lms.visible) {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], u8::from(*vis)));
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut points = Vec::new();
    let mut visible = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(Error::Parse {
                path: pname,
                line: line_no,
                msg: format!("expected 'x y [visible]', found {} fields", parts.len()),
            });
        }
        let mut xy = [0.0; 2];
        for (slot, tok) in xy.iter_mut().zip(&parts[..2]) {
            *slot = tok.parse().map_err(|_| Error::Parse {
                path: pname.clone(),
                line: line_no,
                msg: format!("not a number: {tok}"),
            })?;
        }
        let vis = match parts.get(2) {
            None => true,
            Some(&"1") => true,
            Some(&"0") => false,
            Some(other) => {
                return Err(Error::Parse {
                    path: pname,
                    line: line_no,
                    msg: format!("visibility must be 0 or 1, found {other}"),
                });
            }
        };
        points.push(xy);
        visible.push(vis);
    }
    LandmarkSet::new(points, visible)
}

//! Plain-text parameter files.
//!
//! One record per line, each starting with a field name and a count:
//!
//! ```text
//! m 6 <f> <pitch> <yaw> <roll> <tx> <ty>
//! L 27 <27 values, channel-major: R bands 0..8, then G, then B>
//! f_S <n> <n values>
//! f_A <n> <n values>
//! ```
//!
//! Numbers are written with shortest round-trip formatting, so save followed
//! by load reproduces every value exactly. The declared count must match the
//! number of values on the line.

use std::path::Path;

use crate::camera::ProjectionParams;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::lighting::ShLighting;

/// The full parameter tuple of one fit or render: projection, lighting, and
/// the two coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub m: ProjectionParams,
    pub light: ShLighting,
    pub f_s: Vec<f64>,
    pub f_a: Vec<f64>,
}

fn write_row(out: &mut String, name: &str, values: &[f64]) {
    out.push_str(name);
    out.push(' ');
    out.push_str(&values.len().to_string());
    for v in values {
        out.push(' ');
        out.push_str(&v.to_string());
    }
    out.push('\n');
}

pub fn save_params(path: &Path, p: &ParamFile) -> Result<()> {
    let mut out = String::new();
    write_row(&mut out, "m", &p.m.to_vec());
    write_row(&mut out, "L", &p.light.to_flat());
    write_row(&mut out, "f_S", &p.f_s);
    write_row(&mut out, "f_A", &p.f_a);
    atomic_write(path, out.as_bytes())
}

fn parse_row(path: &str, line_no: usize, line: &str) -> Result<(String, Vec<f64>)> {
    let mut it = line.split_whitespace();
    let name = it
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: "empty record".to_string(),
        })?
        .to_string();
    let count: usize = it
        .next()
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: "missing or invalid value count".to_string(),
        })?;
    let values: Vec<f64> = it
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("not a number: {tok}"),
            })
        })
        .collect::<Result<_>>()?;
    if values.len() != count {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("declared {count} values but found {}", values.len()),
        });
    }
    Ok((name, values))
}

pub fn load_params(path: &Path) -> Result<ParamFile> {
    let text = std::fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut m: Option<ProjectionParams> = None;
    let mut light: Option<ShLighting> = None;
    let mut f_s: Option<Vec<f64>> = None;
    let mut f_a: Option<Vec<f64>> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, values) = parse_row(&pname, line_no, line)?;
        let expect_len = |want: usize| -> Result<()> {
            if values.len() != want {
                return Err(Error::Parse {
                    path: pname.clone(),
                    line: line_no,
                    msg: format!("{name} needs {want} values, found {}", values.len()),
                });
            }
            Ok(())
        };
        match name.as_str() {
            "m" => {
                expect_len(6)?;
                let mut v = [0.0; 6];
                v.copy_from_slice(&values);
                m = Some(ProjectionParams::from_vec(v));
            }
            "L" => {
                expect_len(27)?;
                let mut v = [0.0; 27];
                v.copy_from_slice(&values);
                light = Some(ShLighting::from_flat(&v));
            }
            "f_S" => f_s = Some(values),
            "f_A" => f_a = Some(values),
            other => {
                return Err(Error::Parse {
                    path: pname,
                    line: line_no,
                    msg: format!("unknown record: {other}"),
                });
            }
        }
    }
    let missing = |what: &str| Error::Parse {
        path: pname.clone(),
        line: 0,
        msg: format!("missing record: {what}"),
    };
    Ok(ParamFile {
        m: m.ok_or_else(|| missing("m"))?,
        light: light.ok_or_else(|| missing("L"))?,
        f_s: f_s.ok_or_else(|| missing("f_S"))?,
        f_a: f_a.ok_or_else(|| missing("f_A"))?,
    })
}

//! Run configuration in `key = value` lines.
//!
//! Unset keys keep their defaults; every value is range-checked at parse
//! time so a bad config fails before any computation starts. Booleans are
//! `true`/`false`, the background is three comma-separated values, and
//! `metric` selects the NME normalizer (`inter_ocular` or `bbox`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::fit::FitConfig;

/// Everything an experiment run can override from a file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    /// Normalize NME by the bounding-box diagonal instead of the
    /// inter-ocular distance.
    pub bbox_metric: bool,
    /// Default model path, overridden by the CLI flag when given.
    pub model: Option<String>,
    /// Default output path, overridden by the CLI flag when given.
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fit: FitConfig::default(),
            width: 128,
            height: 128,
            background: [0.0; 3],
            bbox_metric: false,
            model: None,
            out: None,
        }
    }
}

fn parse_num(path: &str, line: usize, key: &str, val: &str) -> Result<f64> {
    val.parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("{key}: not a number: {val}"),
    })
}

fn parse_bool(path: &str, line: usize, key: &str, val: &str) -> Result<bool> {
    match val {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse {
            path: path.to_string(),
            line,
            msg: format!("{key}: expected true or false, found {val}"),
        }),
    }
}

/// Parse config text over the defaults. `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, val)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg: format!("expected key = value, found: {line}"),
            });
        };
        let key = key.trim();
        let val = val.trim();
        let num = |v: &str| parse_num(origin, line_no, key, v);
        let w = &mut cfg.fit.weights;
        match key {
            "step" => cfg.fit.step = num(val)?,
            "max_iters" => {
                cfg.fit.max_iters = val.parse().map_err(|_| Error::Parse {
                    path: origin.to_string(),
                    line: line_no,
                    msg: format!("max_iters: not a count: {val}"),
                })?
            }
            "tol" => cfg.fit.tol = num(val)?,
            "normal_weight" => cfg.fit.normal_weight = num(val)?,
            "fit_m" => cfg.fit.fit_m = parse_bool(origin, line_no, key, val)?,
            "fit_light" => cfg.fit.fit_light = parse_bool(origin, line_no, key, val)?,
            "fit_shape" => cfg.fit.fit_shape_params = parse_bool(origin, line_no, key, val)?,
            "fit_albedo" => cfg.fit.fit_albedo_params = parse_bool(origin, line_no, key, val)?,
            "texture_through_renderer" => {
                cfg.fit.texture_through_renderer = parse_bool(origin, line_no, key, val)?
            }
            "lambda_l" => w.lambda_l = num(val)?,
            "lambda_reg" => w.lambda_reg = num(val)?,
            "lambda_f" => w.lambda_f = num(val)?,
            "lambda_t" => w.lambda_t = num(val)?,
            "lambda_m" => w.lambda_m = num(val)?,
            "alpha" => w.alpha = num(val)?,
            "p" => w.p = num(val)?,
            "w_sym" => w.w_sym = num(val)?,
            "w_const" => w.w_const = num(val)?,
            "w_smooth" => w.w_smooth = num(val)?,
            "width" | "height" => {
                let n: usize = val.parse().map_err(|_| Error::Parse {
                    path: origin.to_string(),
                    line: line_no,
                    msg: format!("{key}: not a size: {val}"),
                })?;
                if n == 0 {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: line_no,
                        msg: format!("{key} must be positive"),
                    });
                }
                if key == "width" {
                    cfg.width = n;
                } else {
                    cfg.height = n;
                }
            }
            "background" => {
                let parts: Vec<&str> = val.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: line_no,
                        msg: format!("background needs three comma-separated values, found {}", parts.len()),
                    });
                }
                for (c, p) in cfg.background.iter_mut().zip(&parts) {
                    *c = parse_num(origin, line_no, key, p)?;
                }
            }
            "metric" => {
                cfg.bbox_metric = match val {
                    "inter_ocular" => false,
                    "bbox" => true,
                    _ => {
                        return Err(Error::Parse {
                            path: origin.to_string(),
                            line: line_no,
                            msg: format!("metric must be inter_ocular or bbox, found {val}"),
                        });
                    }
                }
            }
            "model" => cfg.model = Some(val.to_string()),
            "out" => cfg.out = Some(val.to_string()),
            other => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: line_no,
                    msg: format!("unknown key: {other}"),
                });
            }
        }
    }
    // Range validation happens once over the assembled struct so a value set
    // by several keys is checked in its final state.
    cfg.fit.validate().map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    for c in cfg.background {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 0,
                msg: format!("background channel {c} outside [0, 1]"),
            });
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}

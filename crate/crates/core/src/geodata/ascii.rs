//! Plain-text elevation grids.
//!
//! ```text
//! ncols 3
//! nrows 2
//! xllcorner 0.0
//! yllcorner 0.0
//! cellsize 1.929
//! NODATA_value -9999
//! 1 2 3
//! 4 5 6
//! ```
//!
//! Data rows are listed top row first. Keys are case-insensitive.

use std::fmt::Write as _;
use std::path::Path;

use super::{ElevationMap, MapPoint};
use crate::{Error, Result};

const DEFAULT_NODATA: f64 = -9999.0;

pub fn load_elevation(path: impl AsRef<Path>) -> Result<ElevationMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_elevation(&text)
}

pub fn parse_elevation(text: &str) -> Result<ElevationMap> {
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cellsize = None;
    let mut nodata = None;

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();

    // Header lines start with a key; the first line starting with a number
    // begins the data block.
    while let Some(&(line_no, line)) = lines.peek() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        if key.parse::<f64>().is_ok() {
            break;
        }
        lines.next();
        let value = parts.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("header key `{key}` has no value"),
        })?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("trailing tokens after `{key}`"),
            });
        }
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric value `{v}` for `{key}`"),
            })
        };
        let int = |v: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{key}` must be a non-negative integer, got `{v}`"),
            })
        };
        match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols = Some(int(value)?),
            "nrows" => nrows = Some(int(value)?),
            "xllcorner" => xll = Some(num(value)?),
            "yllcorner" => yll = Some(num(value)?),
            "cellsize" => cellsize = Some(num(value)?),
            "nodata_value" => nodata = Some(num(value)?),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown header key `{key}`"),
                })
            }
        }
    }

    let header_end = lines.peek().map(|(n, _)| *n).unwrap_or(1);
    let missing = |name: &str| Error::Parse {
        line: header_end,
        msg: format!("missing header `{name}`"),
    };
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let xll = xll.ok_or_else(|| missing("xllcorner"))?;
    let yll = yll.ok_or_else(|| missing("yllcorner"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    let nodata = nodata.unwrap_or(DEFAULT_NODATA);
    if ncols == 0 || nrows == 0 {
        return Err(Error::Parse {
            line: header_end,
            msg: "ncols and nrows must be positive".into(),
        });
    }
    if !(cellsize > 0.0) {
        return Err(Error::Parse {
            line: header_end,
            msg: format!("cellsize must be positive, got {cellsize}"),
        });
    }

    let mut top_first: Vec<Vec<f64>> = Vec::with_capacity(nrows);
    let mut last_line = header_end;
    for (line_no, line) in lines {
        last_line = line_no;
        if top_first.len() == nrows {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("more than {nrows} data rows"),
            });
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("non-numeric cell `{tok}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != ncols {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {ncols} values, found {}", row.len()),
            });
        }
        if let Some(bad) = row.iter().find(|v| **v != nodata && !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("non-finite height {bad}"),
            });
        }
        top_first.push(row);
    }
    if top_first.len() != nrows {
        return Err(Error::Parse {
            line: last_line,
            msg: format!("expected {nrows} data rows, found {}", top_first.len()),
        });
    }

    let heights = top_first.into_iter().rev().flatten().collect();
    ElevationMap::new(ncols, nrows, cellsize, MapPoint::new(xll, yll), heights, nodata)
}

/// Serialises a map in the text grid format.
pub fn write_elevation(map: &ElevationMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    let _ = writeln!(s, "ncols {}", map.width_px);
    let _ = writeln!(s, "nrows {}", map.height_px);
    let _ = writeln!(s, "xllcorner {}", map.origin.x);
    let _ = writeln!(s, "yllcorner {}", map.origin.y);
    let _ = writeln!(s, "cellsize {}", map.cell_size_m);
    let _ = writeln!(s, "NODATA_value {}", map.nodata);
    for row in map.heights.chunks(map.width_px).rev() {
        let line: Vec<String> = row.iter().map(|h| h.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

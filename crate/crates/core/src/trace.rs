//! Per-step simulation trace export.
//!
//! Fixed schema, one row per vehicle per step:
//! `step, vehicle_id, x, y, psi, v, a, delta`. Vehicle id 0 is the ego.
//! Floats use Rust's shortest round-trip formatting, so traces are
//! byte-for-byte reproducible for identical runs.

use std::io::{self, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: i64,
    pub vehicle_id: u32,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    /// Applied longitudinal acceleration (m/s^2).
    pub a: f64,
    /// Applied steering angle (rad); 0 for vehicles without a steering model.
    pub delta: f64,
}

pub const TRACE_HEADER: &str = "step,vehicle_id,x,y,psi,v,a,delta";

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step, r.vehicle_id, r.x, r.y, r.psi, r.v, r.a, r.delta
        )?;
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, rows: &[TraceRow]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(64 * rows.len());
    write_trace(&mut buf, rows)?;
    std::fs::write(path, buf)
}

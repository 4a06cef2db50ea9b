//! Artifact writers. Every float is written with 17 significant digits so
//! that values round-trip exactly.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::hjb::ValueGrid;
use crate::simulator::{PopulationPath, ReplicationSummary};

/// `d.dddddddddddddddde±x`, or `NaN` / `inf` / `-inf`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Pretty JSON formatter that prints floats with 17 significant digits.
struct Precise<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for Precise<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_float(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Compact JSON formatter that prints floats with 17 significant digits.
struct PreciseCompact;

impl Formatter for PreciseCompact {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_float(value).as_bytes())
    }
}

pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let fmt = Precise {
        inner: PrettyFormatter::new(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn to_json_line<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseCompact);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Grid export: one row `t,x,u,argmin` per node and layer.
pub fn write_grid_csv(w: &mut impl Write, grid: &ValueGrid) -> io::Result<()> {
    writeln!(w, "t,x,u,argmin")?;
    for (t, x, u, a) in grid.export_rows() {
        writeln!(w, "{},{},{},{a}", fmt_float(t), fmt_float(x), fmt_float(u))?;
    }
    Ok(())
}

/// Path dump: the event log followed by the terminal population (event
/// `terminal`, empty mark).
pub fn write_path_csv(w: &mut impl Write, path: &PopulationPath) -> io::Result<()> {
    let d = path
        .terminal
        .first()
        .map(|(_, x)| x.len())
        .or_else(|| path.events.first().map(|e| e.position.len()))
        .unwrap_or(1);
    write!(w, "time,label,event")?;
    for i in 0..d {
        write!(w, ",x{i}")?;
    }
    writeln!(w, ",mark")?;
    let coords = |x: &[f64]| {
        x.iter()
            .map(|v| fmt_float(*v))
            .collect::<Vec<_>>()
            .join(",")
    };
    for e in &path.events {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt_float(e.time),
            e.label,
            e.outcome.name(),
            coords(&e.position),
            fmt_float(e.mark)
        )?;
    }
    for (label, x) in &path.terminal {
        writeln!(w, "{},{label},terminal,{},", fmt_float(path.end), coords(x))?;
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_replications_jsonl(
    w: &mut impl Write,
    summaries: &[ReplicationSummary],
) -> io::Result<()> {
    for s in summaries {
        writeln!(w, "{}", to_json_line(s).map_err(io::Error::other)?)?;
    }
    Ok(())
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task: String,
    pub kind: String,
    pub check: String,
    pub estimate: f64,
    pub stderr: f64,
    pub target: f64,
    pub band: f64,
    pub pass: bool,
}

pub fn write_summary_csv(w: &mut impl Write, rows: &[SummaryRow]) -> io::Result<()> {
    writeln!(w, "task,kind,check,estimate,stderr,target,band,pass")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.task,
            r.kind,
            r.check,
            fmt_float(r.estimate),
            fmt_float(r.stderr),
            fmt_float(r.target),
            fmt_float(r.band),
            r.pass
        )?;
    }
    Ok(())
}

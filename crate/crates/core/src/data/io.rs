//! Text feature-dataset format.
//!
//! ```text
//! DRIFTLAB-FEATURES v1
//! dim=<d> classes=<C> tasks=<T>
//! <task_id>,<class_id>,<labeled 0|1>,<v_1>,...,<v_d>
//! ```
//!
//! UTF-8 with LF line endings. Task ids are 1-based. Values are written in
//! shortest round-trip decimal form so save → load is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{StreamMeta, Task, TaskStream};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &str = "DRIFTLAB-FEATURES";
const VERSION: &str = "v1";

pub fn render_feature_dataset(stream: &TaskStream) -> Result<String> {
    stream.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(
        out,
        "dim={} classes={} tasks={}",
        stream.input_dim,
        stream.num_classes,
        stream.num_tasks()
    );
    for task in &stream.tasks {
        for (i, row) in task.inputs.row_iter().enumerate() {
            let _ = write!(out, "{},{},{}", task.index, task.labels[i], u8::from(task.labeled[i]));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_feature_dataset(stream: &TaskStream, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_feature_dataset(stream)?)?;
    Ok(())
}

pub fn load_feature_dataset(path: impl AsRef<Path>) -> Result<TaskStream> {
    let text = std::fs::read_to_string(path)?;
    parse_feature_dataset(&text)
}

struct Cursor<'a> {
    lines: std::iter::Peekable<std::str::SplitInclusive<'a, char>>,
    line: usize,
    offset: usize,
    next_offset: usize,
    terminated: bool,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor {
            lines: text.split_inclusive('\n').peekable(),
            line: 0,
            offset: 0,
            next_offset: 0,
            terminated: true,
        }
    }

    fn next(&mut self) -> Option<&'a str> {
        let raw = self.lines.next()?;
        self.line += 1;
        self.offset = self.next_offset;
        self.next_offset += raw.len();
        self.terminated = raw.ends_with('\n');
        Some(raw.strip_suffix('\n').unwrap_or(raw))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            line: self.line,
            offset: self.offset,
            message: message.into(),
        }
    }

    fn eof_err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            line: self.line + 1,
            offset: self.next_offset,
            message: message.into(),
        }
    }
}

fn header_field(cur: &Cursor, token: Option<&str>, key: &str) -> Result<usize> {
    let token = token.ok_or_else(|| cur.err(format!("header is missing `{key}=`")))?;
    let value = token
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| cur.err(format!("expected `{key}=<n>`, found `{token}`")))?;
    value
        .parse()
        .map_err(|_| cur.err(format!("`{key}` must be a non-negative integer, found `{value}`")))
}

/// Flattened inputs, labels and labeled flags of one task.
type TaskRows = (Vec<f64>, Vec<usize>, Vec<bool>);

pub fn parse_feature_dataset(text: &str) -> Result<TaskStream> {
    let mut cur = Cursor::new(text);

    let magic = cur.next().ok_or_else(|| cur.eof_err("empty file, expected header"))?;
    if magic.contains('\r') {
        return Err(cur.err("CR line endings are not supported"));
    }
    let mut parts = magic.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(cur.err(format!("expected magic `{MAGIC}`")));
    }
    match parts.next() {
        Some(VERSION) if parts.next().is_none() => {}
        Some(v) => return Err(cur.err(format!("unknown format version `{v}`"))),
        None => return Err(cur.err("missing format version")),
    }

    let dims = cur
        .next()
        .ok_or_else(|| cur.eof_err("truncated header: missing `dim= classes= tasks=` line"))?;
    let mut tok = dims.split(' ');
    let dim = header_field(&cur, tok.next(), "dim")?;
    let classes = header_field(&cur, tok.next(), "classes")?;
    let tasks = header_field(&cur, tok.next(), "tasks")?;
    if let Some(extra) = tok.next() {
        return Err(cur.err(format!("unexpected header token `{extra}`")));
    }
    if tasks == 0 {
        return Err(cur.err("stream must contain ≥ 1 task"));
    }
    if dim == 0 {
        return Err(cur.err("dim must be ≥ 1"));
    }

    let mut per_task: BTreeMap<usize, TaskRows> = BTreeMap::new();
    while let Some(line) = cur.next() {
        if line.is_empty() && cur.lines.peek().is_none() {
            break;
        }
        if !cur.terminated {
            return Err(cur.err("row is not terminated by a newline (truncated file?)"));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(cur.err(format!(
                "row has {} fields, expected {} (task, class, labeled, {dim} values)",
                fields.len(),
                dim + 3
            )));
        }
        let task: usize = fields[0]
            .parse()
            .map_err(|_| cur.err(format!("bad task id `{}`", fields[0])))?;
        if task == 0 || task > tasks {
            return Err(cur.err(format!("task id {task} outside 1..={tasks}")));
        }
        let class: usize = fields[1]
            .parse()
            .map_err(|_| cur.err(format!("bad class id `{}`", fields[1])))?;
        if class >= classes {
            return Err(cur.err(format!("class id {class} ≥ declared class count {classes}")));
        }
        let labeled = match fields[2] {
            "0" => false,
            "1" => true,
            other => return Err(cur.err(format!("labeled flag must be 0 or 1, found `{other}`"))),
        };
        let entry = per_task.entry(task).or_default();
        for (j, f) in fields[3..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| cur.err(format!("value {} is not a number: `{f}`", j + 1)))?;
            if !v.is_finite() {
                return Err(cur.err(format!("value {} is not finite", j + 1)));
            }
            entry.0.push(v);
        }
        entry.1.push(class);
        entry.2.push(labeled);
    }

    let mut out = Vec::with_capacity(tasks);
    for t in 1..=tasks {
        let (data, labels, labeled) = per_task
            .remove(&t)
            .ok_or_else(|| cur.eof_err(format!("task {t} declared in header but has no rows (truncated file?)")))?;
        let inputs = Matrix::from_vec(labels.len(), dim, data)?;
        out.push(Task::new(t, inputs, labels, labeled)?);
    }
    TaskStream::new(
        out,
        dim,
        classes,
        StreamMeta {
            seed: None,
            generator: "file".into(),
        },
    )
    .map_err(|e| cur.eof_err(format!("invalid stream: {e}")))
}

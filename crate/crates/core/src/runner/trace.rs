//! Text trace files: one row per optimizer step.
//!
//! ```text
//! # muonlab-trace v1 digest=<sha256 hex> seed=<u64>
//! t,f_val,grad_fro,grad_nuc,mom_err_fro,mom_err_nuc,b_nuc,rank,eta_used,inner_grad_dir,skipped
//! 1,0.9999999999999998,1.2649110640673518,...,false
//! # end rows=<T> finalized=true
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! gives bit-identical values. The footer is written last; a file without it
//! was not completely written.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::verifier::StepTrace;

pub const TRACE_VERSION: u32 = 1;
pub const COLUMNS: [&str; 11] = [
    "t",
    "f_val",
    "grad_fro",
    "grad_nuc",
    "mom_err_fro",
    "mom_err_nuc",
    "b_nuc",
    "rank",
    "eta_used",
    "inner_grad_dir",
    "skipped",
];

const MAGIC: &str = "# muonlab-trace";
const FOOTER: &str = "# end";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("trace header (line 1): {0}")]
    BadHeader(String),
    #[error("trace column line (line 2) must be `{}`", COLUMNS.join(","))]
    BadColumns,
    #[error("trace row {row} (line {line}): {reason}")]
    BadRow {
        row: usize,
        line: usize,
        reason: String,
    },
    #[error("trace footer (line {line}): {reason}")]
    BadFooter { line: usize, reason: String },
    #[error("trace is not finalized: {rows} rows read and no footer")]
    NotFinalized { rows: usize },
    #[error("unexpected content after the footer at line {0}")]
    TrailingData(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub digest: String,
    pub seed: u64,
    pub rows: Vec<StepTrace>,
}

fn parse_u64(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn parse_header(line: &str) -> Result<(String, u64), TraceError> {
    let bad = |m: &str| TraceError::BadHeader(m.to_string());
    let rest = line
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad("missing `# muonlab-trace` marker"))?;
    let mut parts = rest.split(' ');
    let version = parts.next().unwrap_or("");
    if version != format!("v{TRACE_VERSION}") {
        return Err(bad(&format!("unsupported version `{version}`")));
    }
    let digest = parts
        .next()
        .and_then(|p| p.strip_prefix("digest="))
        .ok_or_else(|| bad("missing digest="))?;
    if digest.is_empty() || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(bad("digest must be non-empty hex"));
    }
    let seed = parts
        .next()
        .and_then(|p| p.strip_prefix("seed="))
        .and_then(parse_u64)
        .ok_or_else(|| bad("missing or malformed seed="))?;
    if parts.next().is_some() {
        return Err(bad("unexpected fields"));
    }
    Ok((digest.to_string(), seed))
}

fn parse_row(line: &str, expected_t: usize) -> Result<StepTrace, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != COLUMNS.len() {
        return Err(format!(
            "expected {} fields, found {}",
            COLUMNS.len(),
            fields.len()
        ));
    }
    let int = |i: usize| -> Result<usize, String> {
        parse_u64(fields[i])
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| {
                format!(
                    "column `{}`: `{}` is not a nonnegative integer",
                    COLUMNS[i], fields[i]
                )
            })
    };
    let real = |i: usize| -> Result<f64, String> {
        let v: f64 = fields[i]
            .parse()
            .map_err(|_| format!("column `{}`: `{}` is not a number", COLUMNS[i], fields[i]))?;
        if !v.is_finite() {
            return Err(format!("column `{}`: value must be finite", COLUMNS[i]));
        }
        Ok(v)
    };
    let norm = |i: usize| -> Result<f64, String> {
        let v = real(i)?;
        if v < 0.0 {
            return Err(format!("column `{}`: norm must be nonnegative", COLUMNS[i]));
        }
        Ok(v)
    };
    let t = int(0)?;
    if t != expected_t {
        return Err(format!("step index {t}, expected {expected_t}"));
    }
    let skipped = match fields[10] {
        "true" => true,
        "false" => false,
        other => return Err(format!("column `skipped`: `{other}` is not true/false")),
    };
    Ok(StepTrace {
        t,
        f_val: real(1)?,
        grad_fro: norm(2)?,
        grad_nuc: norm(3)?,
        mom_err_fro: norm(4)?,
        mom_err_nuc: norm(5)?,
        b_nuc: norm(6)?,
        rank: int(7)?,
        eta_used: norm(8)?,
        inner_grad_dir: real(9)?,
        skipped,
    })
}

fn parse_footer(line: &str, line_no: usize, rows: usize) -> Result<(), TraceError> {
    let bad = |m: String| TraceError::BadFooter {
        line: line_no,
        reason: m,
    };
    let rest = line
        .strip_prefix(FOOTER)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad("malformed footer".into()))?;
    let mut parts = rest.split(' ');
    let declared = parts
        .next()
        .and_then(|p| p.strip_prefix("rows="))
        .and_then(parse_u64)
        .ok_or_else(|| bad("missing rows=".into()))?;
    if parts.next() != Some("finalized=true") || parts.next().is_some() {
        return Err(bad("expected `finalized=true`".into()));
    }
    if declared != rows as u64 {
        return Err(bad(format!(
            "footer declares {declared} rows, file has {rows}"
        )));
    }
    Ok(())
}

impl TraceFile {
    pub fn new(digest: impl Into<String>, seed: u64, rows: Vec<StepTrace>) -> Self {
        TraceFile {
            digest: digest.into(),
            seed,
            rows,
        }
    }

    /// Parses a finalized trace. Errors carry the 1-based row and line of
    /// the first problem.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.split('\n');
        let header = lines
            .next()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| TraceError::BadHeader("empty file".into()))?;
        let (digest, seed) = parse_header(header)?;
        if lines.next() != Some(COLUMNS.join(",").as_str()) {
            return Err(TraceError::BadColumns);
        }
        let mut rows = Vec::new();
        let mut line_no = 2;
        loop {
            line_no += 1;
            let Some(line) = lines.next() else {
                return Err(TraceError::NotFinalized { rows: rows.len() });
            };
            if line.starts_with('#') {
                parse_footer(line, line_no, rows.len())?;
                break;
            }
            if line.is_empty() {
                // A truncated write ends with an empty last line.
                if lines.clone().all(str::is_empty) {
                    return Err(TraceError::NotFinalized { rows: rows.len() });
                }
            }
            let row = parse_row(line, rows.len() + 1).map_err(|reason| TraceError::BadRow {
                row: rows.len() + 1,
                line: line_no,
                reason,
            })?;
            rows.push(row);
        }
        match (lines.next(), lines.next()) {
            (None, _) | (Some(""), None) => Ok(TraceFile { digest, seed, rows }),
            _ => Err(TraceError::TrailingData(line_no + 1)),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "{MAGIC} v{TRACE_VERSION} digest={} seed={}",
            self.digest, self.seed
        )?;
        writeln!(w, "{}", COLUMNS.join(","))?;
        let mut line = String::new();
        for r in &self.rows {
            line.clear();
            write!(
                line,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?},{:?},{}",
                r.t,
                r.f_val,
                r.grad_fro,
                r.grad_nuc,
                r.mom_err_fro,
                r.mom_err_nuc,
                r.b_nuc,
                r.rank,
                r.eta_used,
                r.inner_grad_dir,
                r.skipped
            )
            .expect("writing to a String cannot fail");
            writeln!(w, "{line}")?;
        }
        writeln!(w, "{FOOTER} rows={} finalized=true", self.rows.len())?;
        w.flush()
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("trace text is ASCII")
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), TraceError> {
        let file = fs::File::create(path)?;
        self.write_to(io::BufWriter::new(file))?;
        Ok(())
    }
}

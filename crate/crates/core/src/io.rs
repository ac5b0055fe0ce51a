//! On-disk formats.
//!
//! Text files are UTF-8, tab separated, with `#` comments:
//!
//! - graph: header `nodes<TAB>N`, then `i<TAB>j[<TAB>w]` per edge (`w` defaults to 1);
//! - observations: header `dims<TAB>M<TAB>N`, then `m<TAB>n<TAB>r`;
//! - labels: header `dims<TAB>M<TAB>N`, then `m<TAB>n<TAB>y` with `y` in {+1, -1}.
//!
//! Matrices use a little-endian binary framing: magic `KRNL`, u32 version 1,
//! u64 rows, u64 cols, then `rows·cols` f64 values row-major. Models are a
//! section-tagged container of such matrices plus JSON metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{GraphAdjacency, KernelBasis};
use crate::meanfit::{Hyperparams, MeanModel, SparseObservations};
use crate::ranking::{LabeledObservations, RankingState};

pub const MATRIX_MAGIC: &[u8; 4] = b"KRNL";
pub const MATRIX_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"TGPM";
pub const MODEL_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then(|| (i + 1, line.split('\t').map(str::trim).collect()))
    })
}

fn field<T: std::str::FromStr>(fields: &[&str], k: usize, what: &str, path: &str, line: usize) -> Result<T> {
    let raw = fields
        .get(k)
        .ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} from {raw:?}")))
}

pub fn parse_graph(text: &str, path: &str) -> Result<GraphAdjacency> {
    let mut lines = content_lines(text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing `nodes` header"))?;
    if header.first() != Some(&"nodes") || header.len() != 2 {
        return Err(parse_err(path, hl, "expected header `nodes<TAB>N`"));
    }
    let n: usize = field(&header, 1, "node count", path, hl)?;
    let mut edges = Vec::new();
    for (ln, f) in lines {
        if f.len() < 2 || f.len() > 3 {
            return Err(parse_err(path, ln, "expected `i<TAB>j[<TAB>w]`"));
        }
        let i: usize = field(&f, 0, "node index", path, ln)?;
        let j: usize = field(&f, 1, "node index", path, ln)?;
        let w: f64 = if f.len() == 3 {
            field(&f, 2, "edge weight", path, ln)?
        } else {
            1.0
        };
        if i >= n || j >= n {
            return Err(parse_err(path, ln, format!("node index out of range for {n} nodes")));
        }
        edges.push((i, j, w));
    }
    GraphAdjacency::new(n, edges).map_err(|e| Error::Format {
        path: PathBuf::from(path),
        msg: e.to_string(),
    })
}

pub fn read_graph(path: &Path) -> Result<GraphAdjacency> {
    parse_graph(&read_text(path)?, &path.display().to_string())
}

fn parse_dims(header: Option<(usize, Vec<&str>)>, path: &str) -> Result<(usize, usize)> {
    let (hl, h) = header.ok_or_else(|| parse_err(path, 1, "missing `dims` header"))?;
    if h.first() != Some(&"dims") || h.len() != 3 {
        return Err(parse_err(path, hl, "expected header `dims<TAB>M<TAB>N`"));
    }
    Ok((
        field(&h, 1, "row count", path, hl)?,
        field(&h, 2, "column count", path, hl)?,
    ))
}

/// Grid dimensions and `(m, n, value)` rows.
type Triples<T> = (usize, usize, Vec<(usize, usize, T)>);

fn parse_triples<T: std::str::FromStr>(text: &str, path: &str, what: &str) -> Result<Triples<T>> {
    let mut lines = content_lines(text);
    let (rows, cols) = parse_dims(lines.next(), path)?;
    let mut out = Vec::new();
    for (ln, f) in lines {
        if f.len() != 3 {
            return Err(parse_err(path, ln, format!("expected `m<TAB>n<TAB>{what}`")));
        }
        let m: usize = field(&f, 0, "row index", path, ln)?;
        let n: usize = field(&f, 1, "column index", path, ln)?;
        if m >= rows || n >= cols {
            return Err(parse_err(
                path,
                ln,
                format!("cell ({m}, {n}) outside a {rows}x{cols} grid"),
            ));
        }
        out.push((m, n, field(&f, 2, what, path, ln)?));
    }
    Ok((rows, cols, out))
}

pub fn parse_observations(text: &str, path: &str) -> Result<SparseObservations> {
    let (rows, cols, triples) = parse_triples::<f64>(text, path, "value")?;
    SparseObservations::new(rows, cols, triples).map_err(|e| Error::Format {
        path: PathBuf::from(path),
        msg: e.to_string(),
    })
}

pub fn read_observations(path: &Path) -> Result<SparseObservations> {
    parse_observations(&read_text(path)?, &path.display().to_string())
}

pub fn parse_labels(text: &str, path: &str) -> Result<LabeledObservations> {
    let (rows, cols, raw) = parse_triples::<String>(text, path, "label")?;
    let mut triples = Vec::with_capacity(raw.len());
    for (m, n, y) in raw {
        let y = match y.as_str() {
            "+1" | "1" => 1,
            "-1" => -1,
            other => {
                return Err(Error::Format {
                    path: PathBuf::from(path),
                    msg: format!("label at ({m}, {n}) is {other:?}, expected +1 or -1"),
                })
            }
        };
        triples.push((m, n, y));
    }
    LabeledObservations::new(rows, cols, triples).map_err(|e| Error::Format {
        path: PathBuf::from(path),
        msg: e.to_string(),
    })
}

pub fn read_labels(path: &Path) -> Result<LabeledObservations> {
    parse_labels(&read_text(path)?, &path.display().to_string())
}

fn with_header(comments: &[String], dims: String, body: impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&dims);
    out.push('\n');
    for line in body {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Observations text with leading `#` comment lines.
pub fn format_observations(data: &SparseObservations, comments: &[String]) -> String {
    with_header(
        comments,
        format!("dims\t{}\t{}", data.n_rows(), data.n_cols()),
        data.triples().iter().map(|&(m, n, r)| format!("{m}\t{n}\t{r}")),
    )
}

pub fn format_labels(labels: &LabeledObservations, comments: &[String]) -> String {
    with_header(
        comments,
        format!("dims\t{}\t{}", labels.n_rows(), labels.n_cols()),
        labels
            .triples()
            .iter()
            .map(|&(m, n, y)| format!("{m}\t{n}\t{}", if y > 0 { "+1" } else { "-1" })),
    )
}

pub fn format_graph(g: &GraphAdjacency, comments: &[String]) -> String {
    with_header(
        comments,
        format!("nodes\t{}", g.n_nodes()),
        g.edges().iter().map(|&(i, j, w)| format!("{i}\t{j}\t{w}")),
    )
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads fixed-size little-endian fields off the front of a byte slice.
struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(format_err(self.path, "unexpected end of data"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let mut c = Cursor { bytes, path };
    if c.take(4)? != MATRIX_MAGIC {
        return Err(format_err(path, "bad magic, expected KRNL"));
    }
    let version = c.u32()?;
    if version != MATRIX_VERSION {
        return Err(format_err(path, format!("unsupported matrix version {version}")));
    }
    let rows = usize::try_from(c.u64()?).map_err(|_| format_err(path, "row count too large"))?;
    let cols = usize::try_from(c.u64()?).map_err(|_| format_err(path, "column count too large"))?;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format_err(path, "matrix too large"))?;
    if c.bytes.len() != len {
        return Err(format_err(
            path,
            format!(
                "{rows}x{cols} matrix needs {len} bytes of data, found {}",
                c.bytes.len()
            ),
        ));
    }
    let data = c.take(len)?;
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let k = 8 * (i * cols + j);
        f64::from_le_bytes(data[k..k + 8].try_into().expect("8 bytes"))
    }))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    atomic_write(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    decode_matrix(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

/// Everything persisted for one trained model.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: MeanModel,
    pub hyperparams: Hyperparams,
    pub ranking: Option<RankingState>,
}

const TAG_B: &[u8; 4] = b"BMAT";
const TAG_GM: &[u8; 4] = b"GROW";
const TAG_GN: &[u8; 4] = b"GCOL";
const TAG_BIAS: &[u8; 4] = b"BIAS";
const TAG_HYPER: &[u8; 4] = b"HYPR";
const TAG_RANK: &[u8; 4] = b"RANK";

pub fn encode_model(saved: &SavedModel) -> Result<Vec<u8>> {
    let m = &saved.model;
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (TAG_B, encode_matrix(m.b_matrix())),
        (TAG_GM, encode_matrix(m.basis_m().entries())),
        (TAG_GN, encode_matrix(m.basis_n().entries())),
        (
            TAG_BIAS,
            encode_matrix(&DMatrix::from_column_slice(m.n_rows(), 1, m.row_bias().as_slice())),
        ),
        (TAG_HYPER, to_json(&saved.hyperparams)?),
    ];
    if let Some(r) = &saved.ranking {
        sections.push((TAG_RANK, to_json(r)?));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Numerical(format!("cannot serialize: {e}")))
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<SavedModel> {
    let mut c = Cursor { bytes, path };
    if c.take(4)? != MODEL_MAGIC {
        return Err(format_err(path, "bad magic, expected TGPM"));
    }
    let version = c.u32()?;
    if version != MODEL_VERSION {
        return Err(format_err(path, format!("unsupported model version {version}")));
    }
    let count = c.u32()?;
    let mut sections = std::collections::BTreeMap::new();
    for _ in 0..count {
        let tag: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
        let len = usize::try_from(c.u64()?).map_err(|_| format_err(path, "section too large"))?;
        sections.insert(tag, c.take(len)?);
    }
    if !c.bytes.is_empty() {
        return Err(format_err(path, "trailing bytes after the last section"));
    }
    let section = |tag: &[u8; 4]| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| format_err(path, format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let b = decode_matrix(section(TAG_B)?, path)?;
    let gm = KernelBasis::from_matrix(decode_matrix(section(TAG_GM)?, path)?)?;
    let gn = KernelBasis::from_matrix(decode_matrix(section(TAG_GN)?, path)?)?;
    let bias = decode_matrix(section(TAG_BIAS)?, path)?;
    let hyperparams: Hyperparams =
        serde_json::from_slice(section(TAG_HYPER)?).map_err(|e| format_err(path, format!("hyperparameters: {e}")))?;
    let ranking = match sections.get(TAG_RANK) {
        Some(raw) => Some(serde_json::from_slice(raw).map_err(|e| format_err(path, format!("ranking state: {e}")))?),
        None => None,
    };
    if bias.ncols() != 1 {
        return Err(format_err(path, "row bias must be a column vector"));
    }
    let model = MeanModel::new(
        b,
        Arc::new(gm),
        Arc::new(gn),
        DVector::from_column_slice(bias.as_slice()),
    )
    .map_err(|e| format_err(path, e.to_string()))?;
    Ok(SavedModel {
        model,
        hyperparams,
        ranking,
    })
}

pub fn write_model(path: &Path, saved: &SavedModel) -> Result<()> {
    atomic_write(path, &encode_model(saved)?)
}

pub fn read_model(path: &Path) -> Result<SavedModel> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

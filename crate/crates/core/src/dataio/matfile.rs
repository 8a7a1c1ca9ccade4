//! Dense matrix files: a `rows<TAB>cols` TSV dialect and the `SPCD` binary
//! framing (magic, u32 rows, u32 cols, little-endian f32 row-major payload).

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"SPCD";

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MATRIX_MAGIC) {
        decode_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::format(path, "neither SPCD binary nor UTF-8 text"))?;
        decode_text(&text, path)
    }
}

pub fn write_matrix_binary(path: &Path, m: &Array2<f64>) -> Result<()> {
    std::fs::write(path, encode_binary(m)).map_err(|e| Error::io(path, e))
}

pub fn write_matrix_text(path: &Path, m: &Array2<f64>) -> Result<()> {
    std::fs::write(path, encode_text(m)).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(12 + rows * cols * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn decode_binary(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated SPCD header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, header declares {rows}x{cols}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

pub fn encode_text(m: &Array2<f64>) -> String {
    let (rows, cols) = m.dim();
    let mut out = format!("{rows}\t{cols}\n");
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}

pub(crate) fn decode_text(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty matrix file"))?;
    let dims: Vec<usize> = header
        .split('\t')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("bad header `{header}`")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::format(path, "header must be `rows<TAB>cols`"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for tok in line.split('\t') {
            let v: f64 = tok.trim().parse().map_err(|_| {
                Error::format(path, format!("row {i}: cannot parse `{tok}`"))
            })?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::format(
                path,
                format!("row {i} has {} columns, expected {cols}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::format(
            path,
            format!("found {seen} rows, header declares {rows}"),
        ));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

//! Reading and writing tensors in the numpy `.npy` v1.0 format.
//!
//! Only little-endian `f32` in C order is supported. Headers are written the
//! way numpy writes them: a python dict literal padded with spaces and a
//! trailing newline so that magic + version + length + header is a multiple
//! of 64 bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const ALIGN: usize = 64;
/// magic + 2 version bytes + 2 length bytes
const PREAMBLE_V1: usize = 10;

pub fn tensor_from_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn tensor_to_npy(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(t))
}

/// Serializes a tensor to the exact bytes of an `.npy` file.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let header = header_text(t.shape());
    let mut out = Vec::with_capacity(PREAMBLE_V1 + header.len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header_text(shape: &[usize]) -> String {
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = PREAMBLE_V1 + header.len() + 1;
    let padded = unpadded.div_ceil(ALIGN) * ALIGN;
    header.extend(std::iter::repeat_n(' ', padded - unpadded));
    header.push('\n');
    header
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < PREAMBLE_V1 || bytes[..6] != MAGIC {
        return Err(Error::Format("missing npy magic".into()));
    }
    let (header_len, header_start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        v => {
            return Err(Error::Format(format!(
                "unsupported npy version {v}.{}",
                bytes[7]
            )))
        }
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("header runs past end of file".into()));
    }
    let text = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| Error::Format("header is not text".into()))?;
    let header = HeaderDict::parse(text)?;

    if header.descr != "<f4" {
        return Err(Error::Format(format!(
            "dtype {:?} not supported, expected '<f4'",
            header.descr
        )));
    }
    if header.fortran_order {
        return Err(Error::Format(
            "fortran-order arrays are not supported".into(),
        ));
    }
    if header.shape.is_empty() || header.shape.len() > MAX_RANK || header.shape.contains(&0) {
        return Err(Error::Format(format!(
            "shape {:?} not representable (rank 1..={MAX_RANK}, positive extents)",
            header.shape
        )));
    }

    let numel: usize = header.shape.iter().product();
    let expected = numel * 4;
    let payload = &bytes[payload_start..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(header.shape, data)
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

#[derive(Debug, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut p = Parser { rest: text.trim() };
        p.expect('{')?;
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        loop {
            p.skip_ws();
            if p.eat('}') {
                break;
            }
            let key = match p.literal()? {
                Literal::Str(s) => s,
                other => return Err(Error::Format(format!("bad header key {other:?}"))),
            };
            p.expect(':')?;
            let value = p.literal()?;
            match (key.as_str(), value) {
                ("descr", Literal::Str(s)) => descr = Some(s),
                ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k, v) => return Err(Error::Format(format!("bad header entry {k:?}: {v:?}"))),
            }
            p.skip_ws();
            if !p.eat(',') {
                p.expect('}')?;
                break;
            }
        }
        if !p.rest.trim().is_empty() {
            return Err(Error::Format("junk after header dict".into()));
        }
        match (descr, fortran, shape) {
            (Some(descr), Some(fortran_order), Some(shape)) => Ok(Self {
                descr,
                fortran_order,
                shape,
            }),
            _ => Err(Error::Format(
                "header missing descr, fortran_order or shape".into(),
            )),
        }
    }
}

struct Parser<'a> {
    rest: &'a str,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        match self.rest.strip_prefix(c) {
            Some(r) => {
                self.rest = r;
                true
            }
            None => false,
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!("expected {c:?} in header")))
        }
    }

    fn literal(&mut self) -> Result<Literal> {
        self.skip_ws();
        let bad = || Error::Format("malformed header literal".into());
        if let Some(quote) = self.rest.chars().next().filter(|c| *c == '\'' || *c == '"') {
            let body = &self.rest[1..];
            let end = body.find(quote).ok_or_else(bad)?;
            self.rest = &body[end + 1..];
            return Ok(Literal::Str(body[..end].to_string()));
        }
        for (word, value) in [("True", true), ("False", false)] {
            if let Some(r) = self.rest.strip_prefix(word) {
                self.rest = r;
                return Ok(Literal::Bool(value));
            }
        }
        if self.eat('(') {
            let mut dims = Vec::new();
            loop {
                self.skip_ws();
                if self.eat(')') {
                    break;
                }
                let digits = self.rest.len()
                    - self
                        .rest
                        .trim_start_matches(|c: char| c.is_ascii_digit())
                        .len();
                if digits == 0 {
                    return Err(bad());
                }
                dims.push(self.rest[..digits].parse().map_err(|_| bad())?);
                self.rest = &self.rest[digits..];
                if !self.eat(',') {
                    self.expect(')')?;
                    break;
                }
            }
            return Ok(Literal::Tuple(dims));
        }
        Err(bad())
    }
}

/// Writes `bytes` to a sibling temp file then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Arg(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

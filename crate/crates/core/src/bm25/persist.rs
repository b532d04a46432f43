//! Single-file binary index format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "JRBM25IX"
//! version  u32
//! k1, b    f64, f64
//! n_docs   u32, then per doc: id (u32 len + UTF-8), length u32
//! n_terms  u32, then per term (sorted): term (u32 len + UTF-8),
//!          n_postings u32, then (doc ordinal u32, tf u32) pairs
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use super::index::{Bm25Index, Posting};
use super::{Bm25Error, Bm25Params};

const MAGIC: &[u8; 8] = b"JRBM25IX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_index<W: Write>(mut w: W, index: &Bm25Index) -> Result<(), Bm25Error> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, INDEX_FORMAT_VERSION)?;
    w.write_all(&index.params.k1.to_le_bytes())?;
    w.write_all(&index.params.b.to_le_bytes())?;
    put_u32(&mut w, index.doc_ids.len() as u32)?;
    for (id, len) in index.doc_ids.iter().zip(&index.doc_lens) {
        put_str(&mut w, id)?;
        put_u32(&mut w, *len)?;
    }
    let mut terms: Vec<&String> = index.postings.keys().collect();
    terms.sort();
    put_u32(&mut w, terms.len() as u32)?;
    for term in terms {
        put_str(&mut w, term)?;
        let list = &index.postings[term];
        put_u32(&mut w, list.len() as u32)?;
        for p in list {
            put_u32(&mut w, p.doc)?;
            put_u32(&mut w, p.tf)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], Bm25Error> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Bm25Error::Format("truncated file".into()),
            _ => Bm25Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, Bm25Error> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, Bm25Error> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, Bm25Error> {
        let len = self.u32()? as usize;
        let mut buf = Vec::with_capacity(len.min(1 << 20));
        (&mut self.inner)
            .take(len as u64)
            .read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(Bm25Error::Format("truncated file".into()));
        }
        String::from_utf8(buf).map_err(|_| Bm25Error::Format("invalid UTF-8 string".into()))
    }
}

pub fn read_index<R: Read>(reader: R) -> Result<Bm25Index, Bm25Error> {
    let mut r = Reader { inner: reader };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Bm25Error::Format("not a BM25 index file".into()));
    }
    let version = r.u32()?;
    if version != INDEX_FORMAT_VERSION {
        return Err(Bm25Error::Format(format!(
            "unsupported format version {version} (expected {INDEX_FORMAT_VERSION})"
        )));
    }
    let params = Bm25Params::new(r.f64()?, r.f64()?)?;
    let n_docs = r.u32()? as usize;
    let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 20));
    let mut doc_lens = Vec::with_capacity(n_docs.min(1 << 20));
    for _ in 0..n_docs {
        doc_ids.push(r.string()?);
        doc_lens.push(r.u32()?);
    }
    let n_terms = r.u32()? as usize;
    let mut postings = HashMap::with_capacity(n_terms.min(1 << 20));
    for _ in 0..n_terms {
        let term = r.string()?;
        let n = r.u32()? as usize;
        let mut list = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let doc = r.u32()?;
            let tf = r.u32()?;
            if doc as usize >= n_docs {
                return Err(Bm25Error::Format(format!("posting references document {doc}")));
            }
            if list.last().is_some_and(|p: &Posting| p.doc >= doc) {
                return Err(Bm25Error::Format(format!("postings for `{term}` are not sorted")));
            }
            list.push(Posting { doc, tf });
        }
        postings.insert(term, list);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Bm25Error::Format("trailing bytes after index".into()));
    }
    Ok(Bm25Index::from_parts(params, doc_ids, doc_lens, postings))
}

//! Packed binary cache.
//!
//! Layout, little-endian: magic `DRPK`, version u32, V u32, S u32, count
//! u64, then `count` fixed-size records of S u32 tokens, S u8 mask bytes,
//! u16 boundary count, S u16 offset slots (unused slots hold `0xffff`),
//! u64 sequence id and f64 noise level. Document ids and subset labels are
//! kept in a JSON-lines sidecar next to the file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PackedSequence;
use crate::error::{Error, Result};

pub const PACK_MAGIC: &[u8; 4] = b"DRPK";
pub const PACK_VERSION: u32 = 1;
const UNUSED_OFFSET: u16 = 0xffff;

#[derive(Serialize, Deserialize)]
struct Provenance {
    doc_ids: Vec<u64>,
    subsets: Vec<String>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.jsonl");
    PathBuf::from(s)
}

pub fn write_packed(path: &Path, vocab_size: usize, seqs: &[PackedSequence]) -> Result<()> {
    let s = seqs.first().map_or(0, |q| q.seq_len());
    if s >= UNUSED_OFFSET as usize {
        return Err(Error::Data(format!(
            "sequence length {s} too large for the packed format"
        )));
    }
    if let Some(q) = seqs.iter().find(|q| q.seq_len() != s) {
        return Err(Error::Data(format!(
            "sequence {} has length {} != {s}",
            q.id,
            q.seq_len()
        )));
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(PACK_MAGIC).map_err(io)?;
    w.write_all(&PACK_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(vocab_size as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(s as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(seqs.len() as u64).to_le_bytes())
        .map_err(io)?;
    let mut rec = Vec::with_capacity(7 * s + 18);
    for q in seqs {
        rec.clear();
        for t in &q.tokens {
            rec.extend_from_slice(&t.to_le_bytes());
        }
        rec.extend(q.mask().into_iter().map(u8::from));
        rec.extend_from_slice(&(q.offsets.len() as u16).to_le_bytes());
        for i in 0..s {
            let o = q.offsets.get(i).map_or(UNUSED_OFFSET, |&o| o as u16);
            rec.extend_from_slice(&o.to_le_bytes());
        }
        rec.extend_from_slice(&q.id.to_le_bytes());
        rec.extend_from_slice(&q.noise.to_le_bytes());
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let side = sidecar(path);
    let io = |e| Error::io(&side, e);
    let mut w = BufWriter::new(File::create(&side).map_err(io)?);
    for q in seqs {
        let line = serde_json::to_string(&Provenance {
            doc_ids: q.doc_ids.clone(),
            subsets: q.subsets.clone(),
        })?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> &'a [u8] {
    let out = &buf[*pos..*pos + n];
    *pos += n;
    out
}

/// Reads a packed file; returns the vocabulary size and the sequences.
/// Without a sidecar, provenance fields are filled with placeholders.
pub fn read_packed(path: &Path) -> Result<(usize, Vec<PackedSequence>)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(io)?;
    if &header[0..4] != PACK_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a packed sequence file",
            path.display()
        )));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != PACK_VERSION {
        return Err(Error::Data(format!(
            "unsupported packed format version {version}"
        )));
    }
    let vocab = u32_at(8) as usize;
    let s = u32_at(12) as usize;
    let count = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes")) as usize;
    let rec_len = 4 * s + s + 2 + 2 * s + 16;
    let mut buf = vec![0u8; rec_len];
    let side = sidecar(path);
    let mut prov_lines = match File::open(&side) {
        Ok(f) => Some(BufReader::new(f).lines()),
        Err(_) => None,
    };
    let mut seqs = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(io)?;
        let mut p = 0;
        let tokens: Vec<u32> = take(&buf, &mut p, 4 * s)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = take(&buf, &mut p, s).to_vec();
        let valid_len = mask.iter().take_while(|&&m| m == 1).count();
        if mask[valid_len..].iter().any(|&m| m != 0) {
            return Err(Error::Data("validity mask is not a prefix".into()));
        }
        let n_off = u16::from_le_bytes(take(&buf, &mut p, 2).try_into().expect("2 bytes")) as usize;
        let offsets: Vec<usize> = take(&buf, &mut p, 2 * s)
            .chunks_exact(2)
            .take(n_off)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")) as usize)
            .collect();
        let id = u64::from_le_bytes(take(&buf, &mut p, 8).try_into().expect("8 bytes"));
        let noise = f64::from_le_bytes(take(&buf, &mut p, 8).try_into().expect("8 bytes"));
        let (doc_ids, subsets) = match prov_lines.as_mut().and_then(|l| l.next()) {
            Some(line) => {
                let pv: Provenance = serde_json::from_str(&line.map_err(|e| Error::io(&side, e))?)?;
                (pv.doc_ids, pv.subsets)
            }
            None => (vec![u64::MAX; n_off], vec!["unknown".to_string(); n_off]),
        };
        let seq = PackedSequence {
            id,
            tokens,
            valid_len,
            offsets,
            doc_ids,
            subsets,
            noise,
        };
        seq.validate(vocab)
            .map_err(|e| Error::Data(format!("sequence {id}: {e}")))?;
        seqs.push(seq);
    }
    Ok((vocab, seqs))
}

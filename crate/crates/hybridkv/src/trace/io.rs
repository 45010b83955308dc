//! Binary trace format (magic `HKVT`).
//!
//! Layout, in order, with all integers little-endian u32 and all floats
//! little-endian f32:
//!
//! ```text
//! magic        4 bytes   b"HKVT"
//! version      u32       currently 1
//! num_layers   u32
//! num_heads    u32
//! head_dim     u32
//! context_len  u32
//! text_window  u32
//! decode_steps u32
//! float_width  u32       always 4
//! token kinds  context_len bytes (0 = visual, 1 = text)
//! prefill_q    [L, H, C, d] f32, row-major
//! prefill_k    [L, H, C, d]
//! prefill_v    [L, H, C, d]
//! decode_q     [N, L, H, d]
//! decode_k     [N, L, H, d]
//! decode_v     [N, L, H, d]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, TokenKind, TraceHeader};

pub const MAGIC: [u8; 4] = *b"HKVT";
pub const VERSION: u32 = 1;
pub const FLOAT_WIDTH: u32 = 4;
/// Magic plus eight u32 header fields.
pub const HEADER_BYTES: usize = 4 + 8 * 4;

/// Serialize `trace` to `sink` and return the number of bytes written.
pub fn write_trace(trace: &AttentionTrace, sink: &mut impl Write) -> Result<u64> {
    trace.validate()?;
    let h = &trace.header;
    let mut written = 0u64;

    sink.write_all(&MAGIC)?;
    written += MAGIC.len() as u64;
    for field in [
        VERSION,
        h.num_layers as u32,
        h.num_heads as u32,
        h.head_dim as u32,
        h.context_len as u32,
        h.text_window as u32,
        h.decode_steps as u32,
        FLOAT_WIDTH,
    ] {
        sink.write_all(&field.to_le_bytes())?;
        written += 4;
    }

    let kinds: Vec<u8> = trace.token_types.iter().map(|k| k.as_byte()).collect();
    sink.write_all(&kinds)?;
    written += kinds.len() as u64;

    let mut buf = Vec::with_capacity(trace.prefill_q.len() * 4);
    for tensor in [
        &trace.prefill_q,
        &trace.prefill_k,
        &trace.prefill_v,
        &trace.decode_q,
        &trace.decode_k,
        &trace.decode_v,
    ] {
        buf.clear();
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    Ok(written)
}

/// Deserialize a trace from `source`, validating magic, version, shape
/// consistency, token kinds, and finiteness.
pub fn read_trace(source: &mut impl Read) -> Result<AttentionTrace> {
    let mut magic = [0u8; 4];
    read_exactly(source, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }

    let mut ints = [0u32; 8];
    let mut word = [0u8; 4];
    for slot in ints.iter_mut() {
        read_exactly(source, &mut word, "header")?;
        *slot = u32::from_le_bytes(word);
    }
    let [version, layers, heads, dim, ctx, text, steps, float_width] = ints;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    if float_width != FLOAT_WIDTH {
        return Err(Error::Shape(format!(
            "unsupported float width {float_width} (expected {FLOAT_WIDTH})"
        )));
    }
    let header = TraceHeader::new(
        layers as usize,
        heads as usize,
        dim as usize,
        ctx as usize,
        text as usize,
        steps as usize,
    );
    header.validate()?;

    let mut kind_bytes = vec![0u8; header.context_len];
    read_exactly(source, &mut kind_bytes, "token kinds")?;
    let token_types = kind_bytes
        .into_iter()
        .map(TokenKind::from_byte)
        .collect::<Result<Vec<_>>>()?;

    let p = header.prefill_elems();
    let n = header.decode_elems();
    let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(6);
    for (len, name) in [
        (p, "prefill_q"),
        (p, "prefill_k"),
        (p, "prefill_v"),
        (n, "decode_q"),
        (n, "decode_k"),
        (n, "decode_v"),
    ] {
        let mut bytes = vec![0u8; len * 4];
        read_exactly(source, &mut bytes, name)?;
        let tensor: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(tensor);
    }
    let decode_v = tensors.pop().unwrap();
    let decode_k = tensors.pop().unwrap();
    let decode_q = tensors.pop().unwrap();
    let prefill_v = tensors.pop().unwrap();
    let prefill_k = tensors.pop().unwrap();
    let prefill_q = tensors.pop().unwrap();

    let trace = AttentionTrace {
        header,
        token_types,
        prefill_q,
        prefill_k,
        prefill_v,
        decode_q,
        decode_k,
        decode_v,
    };
    trace.validate()?;
    Ok(trace)
}

pub fn write_trace_file(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<u64> {
    let mut sink = BufWriter::new(File::create(path)?);
    let n = write_trace(trace, &mut sink)?;
    sink.flush()?;
    Ok(n)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let mut source = BufReader::new(File::open(path)?);
    read_trace(&mut source)
}

fn read_exactly(source: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceHeader;

    fn tiny_trace() -> AttentionTrace {
        // L=1, H=1, d=2, C=3, T=1, N=0.
        let mut t = AttentionTrace::zeroed(TraceHeader::new(1, 1, 2, 3, 1, 0));
        for (i, v) in t.prefill_q.iter_mut().enumerate() {
            *v = i as f32 * 0.5;
        }
        t.prefill_k[1] = -1.25;
        t.prefill_v[5] = 3.5;
        t
    }

    #[test]
    #[allow(clippy::identity_op)] // dims spelled out to match the layout
    fn byte_count_matches_declared_layout() {
        let t = tiny_trace();
        let mut bytes = Vec::new();
        let written = write_trace(&t, &mut bytes).unwrap();
        // header + C kind bytes + (three prefill tensors of 1*1*3*2 floats).
        let expected = HEADER_BYTES as u64 + 3 + (1 * 1 * 3 * 2 * 3) as u64 * 4;
        assert_eq!(written, expected);
        assert_eq!(bytes.len() as u64, expected);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut t = tiny_trace();
        t.prefill_k[0] = f32::MIN_POSITIVE; // subnormal-adjacent value survives
        let mut bytes = Vec::new();
        write_trace(&t, &mut bytes).unwrap();
        let back = read_trace(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        write_trace(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Vec::new();
        write_trace(&tiny_trace(), &mut bytes).unwrap();
        bytes[0] = b'X';
        match read_trace(&mut bytes.as_slice()) {
            Err(Error::BadMagic { found }) => assert_eq!(&found, b"XKVT"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = Vec::new();
        write_trace(&tiny_trace(), &mut bytes).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        match read_trace(&mut bytes.as_slice()) {
            Err(Error::VersionMismatch { expected, found }) => {
                assert_eq!((expected, found), (1, 9));
            }
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = Vec::new();
        write_trace(&tiny_trace(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            read_trace(&mut bytes.as_slice()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn nan_refuses_to_serialize() {
        let mut t = tiny_trace();
        t.prefill_v[0] = f32::NAN;
        let mut bytes = Vec::new();
        match write_trace(&t, &mut bytes) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "prefill_v"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn file_helpers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hkvt");
        let t = tiny_trace();
        write_trace_file(&t, &path).unwrap();
        assert_eq!(read_trace_file(&path).unwrap(), t);
    }
}

//! Attention-trace data model: header, token kinds, dense Q/K/V tensors, the
//! binary file format ([`io`]), and the deterministic synthetic generator
//! ([`gen`]).

mod gen;
mod io;

pub use gen::{generate_trace, GenSpec};
pub use io::{
    read_trace, read_trace_file, write_trace, write_trace_file, FLOAT_WIDTH, HEADER_BYTES, MAGIC,
    VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a prefill context token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    /// Visual (or otherwise non-text) token. Encoded as byte 0.
    Visual,
    /// Prompt-text token. Encoded as byte 1.
    Text,
}

impl TokenKind {
    pub fn as_byte(self) -> u8 {
        match self {
            TokenKind::Visual => 0,
            TokenKind::Text => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(TokenKind::Visual),
            1 => Ok(TokenKind::Text),
            other => Err(Error::Shape(format!("invalid token kind byte {other}"))),
        }
    }
}

/// Trace dimensions. On disk every field is a little-endian u32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Prefill context length C.
    pub context_len: usize,
    /// Number of trailing prompt-text positions T (1 <= T <= C).
    pub text_window: usize,
    /// Recorded decode steps N (may be 0).
    pub decode_steps: usize,
}

impl TraceHeader {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        context_len: usize,
        text_window: usize,
        decode_steps: usize,
    ) -> Self {
        TraceHeader {
            num_layers,
            num_heads,
            head_dim,
            context_len,
            text_window,
            decode_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Shape(format!(
                "layers, heads, and head_dim must be >= 1 (got {}, {}, {})",
                self.num_layers, self.num_heads, self.head_dim
            )));
        }
        if self.text_window == 0 || self.text_window > self.context_len {
            return Err(Error::Shape(format!(
                "text_window must satisfy 1 <= T <= C (got T = {}, C = {})",
                self.text_window, self.context_len
            )));
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("context_len", self.context_len),
            ("text_window", self.text_window),
            ("decode_steps", self.decode_steps),
        ] {
            if v > u32::MAX as usize {
                return Err(Error::Shape(format!("{name} = {v} does not fit in u32")));
            }
        }
        Ok(())
    }

    /// Element count of one prefill tensor: L*H*C*d.
    pub fn prefill_elems(&self) -> usize {
        self.num_layers * self.num_heads * self.context_len * self.head_dim
    }

    /// Element count of one decode tensor: N*L*H*d.
    pub fn decode_elems(&self) -> usize {
        self.decode_steps * self.num_layers * self.num_heads * self.head_dim
    }
}

/// A recorded multimodal prefill plus a sequence of decode steps.
///
/// Prefill tensors are dense rank-4 arrays `[L, H, C, d]` stored row-major;
/// decode tensors are `[N, L, H, d]`. Keys are post-position-encoding, so
/// attention here is a plain scaled dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    /// Kind of each of the C context tokens; the final T entries are TEXT.
    pub token_types: Vec<TokenKind>,
    pub prefill_q: Vec<f32>,
    pub prefill_k: Vec<f32>,
    pub prefill_v: Vec<f32>,
    pub decode_q: Vec<f32>,
    pub decode_k: Vec<f32>,
    pub decode_v: Vec<f32>,
}

impl AttentionTrace {
    /// An all-zero trace with the given shape (token kinds: trailing T text).
    pub fn zeroed(header: TraceHeader) -> Self {
        let p = header.prefill_elems();
        let n = header.decode_elems();
        let mut token_types = vec![TokenKind::Visual; header.context_len];
        for k in token_types.iter_mut().skip(header.context_len - header.text_window) {
            *k = TokenKind::Text;
        }
        AttentionTrace {
            header,
            token_types,
            prefill_q: vec![0.0; p],
            prefill_k: vec![0.0; p],
            prefill_v: vec![0.0; p],
            decode_q: vec![0.0; n],
            decode_k: vec![0.0; n],
            decode_v: vec![0.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let h = &self.header;
        if self.token_types.len() != h.context_len {
            return Err(Error::Shape(format!(
                "token_types length {} != context_len {}",
                self.token_types.len(),
                h.context_len
            )));
        }
        let tail = h.context_len - h.text_window;
        if self.token_types[tail..].iter().any(|k| *k != TokenKind::Text) {
            return Err(Error::Shape(format!(
                "the final {} token kinds must be TEXT",
                h.text_window
            )));
        }
        let p = h.prefill_elems();
        let n = h.decode_elems();
        for (name, tensor, want) in [
            ("prefill_q", &self.prefill_q, p),
            ("prefill_k", &self.prefill_k, p),
            ("prefill_v", &self.prefill_v, p),
            ("decode_q", &self.decode_q, n),
            ("decode_k", &self.decode_k, n),
            ("decode_v", &self.decode_v, n),
        ] {
            if tensor.len() != want {
                return Err(Error::Shape(format!(
                    "{name} length {} != expected {want}",
                    tensor.len()
                )));
            }
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    #[inline]
    fn prefill_offset(&self, layer: usize, head: usize) -> usize {
        let h = &self.header;
        debug_assert!(layer < h.num_layers && head < h.num_heads);
        (layer * h.num_heads + head) * h.context_len * h.head_dim
    }

    #[inline]
    fn decode_offset(&self, step: usize, layer: usize, head: usize) -> usize {
        let h = &self.header;
        debug_assert!(step < h.decode_steps && layer < h.num_layers && head < h.num_heads);
        ((step * h.num_layers + layer) * h.num_heads + head) * h.head_dim
    }

    /// Query row `[d]` for prefill position `pos` of head `(layer, head)`.
    pub fn prefill_q_row(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let d = self.header.head_dim;
        let start = self.prefill_offset(layer, head) + pos * d;
        &self.prefill_q[start..start + d]
    }

    /// Contiguous `[C, d]` key block for one head.
    pub fn prefill_k_head(&self, layer: usize, head: usize) -> &[f32] {
        let h = &self.header;
        let start = self.prefill_offset(layer, head);
        &self.prefill_k[start..start + h.context_len * h.head_dim]
    }

    /// Contiguous `[C, d]` value block for one head.
    pub fn prefill_v_head(&self, layer: usize, head: usize) -> &[f32] {
        let h = &self.header;
        let start = self.prefill_offset(layer, head);
        &self.prefill_v[start..start + h.context_len * h.head_dim]
    }

    pub fn decode_q_row(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        let d = self.header.head_dim;
        let start = self.decode_offset(step, layer, head);
        &self.decode_q[start..start + d]
    }

    pub fn decode_k_row(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        let d = self.header.head_dim;
        let start = self.decode_offset(step, layer, head);
        &self.decode_k[start..start + d]
    }

    pub fn decode_v_row(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        let d = self.header.head_dim;
        let start = self.decode_offset(step, layer, head);
        &self.decode_v[start..start + d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_rejects_zero_dims_and_bad_text_window() {
        assert!(TraceHeader::new(0, 1, 1, 4, 1, 0).validate().is_err());
        assert!(TraceHeader::new(1, 1, 1, 4, 0, 0).validate().is_err());
        assert!(TraceHeader::new(1, 1, 1, 4, 5, 0).validate().is_err());
        assert!(TraceHeader::new(1, 1, 1, 4, 4, 0).validate().is_ok());
    }

    #[test]
    fn zeroed_trace_validates_and_marks_trailing_text() {
        let t = AttentionTrace::zeroed(TraceHeader::new(2, 3, 4, 6, 2, 5));
        t.validate().unwrap();
        assert_eq!(t.token_types[..4], vec![TokenKind::Visual; 4][..]);
        assert_eq!(t.token_types[4..], vec![TokenKind::Text; 2][..]);
    }

    #[test]
    fn validate_rejects_non_finite_values() {
        let mut t = AttentionTrace::zeroed(TraceHeader::new(1, 1, 2, 3, 1, 1));
        t.decode_v[0] = f32::NAN;
        match t.validate() {
            Err(Error::NonFinite(name)) => assert_eq!(name, "decode_v"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn accessors_index_row_major_layouts() {
        let header = TraceHeader::new(2, 2, 2, 3, 1, 2);
        let mut t = AttentionTrace::zeroed(header);
        for (i, v) in t.prefill_q.iter_mut().enumerate() {
            *v = i as f32;
        }
        for (i, v) in t.decode_k.iter_mut().enumerate() {
            *v = 1000.0 + i as f32;
        }
        // (layer 1, head 0, pos 2) => ((1*2 + 0)*3 + 2)*2 = 16
        assert_eq!(t.prefill_q_row(1, 0, 2), &[16.0, 17.0]);
        // (step 1, layer 0, head 1) => ((1*2 + 0)*2 + 1)*2 = 10
        assert_eq!(t.decode_k_row(1, 0, 1), &[1010.0, 1011.0]);
        assert_eq!(t.prefill_k_head(1, 1).len(), 6);
    }
}

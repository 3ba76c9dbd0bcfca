//! Attention traces: per-layer query/key tensors plus the modality layout of
//! the prompt.
//!
//! A trace covers `prompt_len + decode_len` positions. Rows `0..prompt_len`
//! are the prompt (pre-vision text, vision tokens, post-vision text, in that
//! order) and rows `prompt_len..` are decoding steps, stored in the same
//! tensors so one file serves both prefill and decoding analyses.

mod format;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{decode_trace, encode_trace, read_trace, sidecar_path, write_trace, TRACE_MAGIC, TRACE_VERSION};
pub use synth::{generate_trace, GenSpec, GeneratedTrace};

/// Shape and provenance of a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    /// Number of language tokens after the vision segment (tau).
    pub post_vision_len: usize,
    pub decode_len: usize,
    /// Generator seed, 0 for recorded traces.
    pub seed: u64,
}

impl TraceHeader {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_query_heads", self.num_query_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("prompt_len", self.prompt_len),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::spec(field, "must be positive"));
            }
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(Error::spec(
                "num_kv_heads",
                format!(
                    "{} does not divide num_query_heads = {}",
                    self.num_kv_heads, self.num_query_heads
                ),
            ));
        }
        if self.post_vision_len > self.prompt_len {
            return Err(Error::spec(
                "post_vision_len",
                format!("{} exceeds prompt_len = {}", self.post_vision_len, self.prompt_len),
            ));
        }
        Ok(())
    }

    /// Total positions covered by the trace (prompt plus decoding rows).
    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.decode_len
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    /// KV head serving query head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Query heads served by KV head `kv_head`.
    pub fn query_heads_of(&self, kv_head: usize) -> Range<usize> {
        let g = self.group_size();
        kv_head * g..(kv_head + 1) * g
    }
}

/// Contiguous run of prompt positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end()
    }

    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    /// Pre-vision and post-vision text together.
    Language,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Vision, Modality::Language];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
        }
    }
}

/// Split of the prompt into pre-vision text, vision tokens and post-vision text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityLayout {
    pub pre_vision: Segment,
    pub vision: Segment,
    pub post_vision: Segment,
}

impl ModalityLayout {
    /// Builds the layout from the two text lengths; the vision segment fills the rest.
    pub fn new(prompt_len: usize, pre_vision_len: usize, post_vision_len: usize) -> Result<Self> {
        if pre_vision_len + post_vision_len > prompt_len {
            return Err(Error::spec(
                "pre_vision_len",
                format!(
                    "pre-vision ({pre_vision_len}) plus post-vision ({post_vision_len}) exceeds prompt_len = {prompt_len}"
                ),
            ));
        }
        let vision_len = prompt_len - pre_vision_len - post_vision_len;
        Ok(Self {
            pre_vision: Segment::new(0, pre_vision_len),
            vision: Segment::new(pre_vision_len, vision_len),
            post_vision: Segment::new(pre_vision_len + vision_len, post_vision_len),
        })
    }

    pub fn validate(&self, header: &TraceHeader) -> Result<()> {
        let ordered = self.pre_vision.start == 0
            && self.vision.start == self.pre_vision.end()
            && self.post_vision.start == self.vision.end()
            && self.post_vision.end() == header.prompt_len;
        if !ordered {
            return Err(Error::spec(
                "layout",
                format!("segments {self:?} do not tile [0, {}) in order", header.prompt_len),
            ));
        }
        if self.post_vision.len != header.post_vision_len {
            return Err(Error::spec(
                "layout",
                format!(
                    "post-vision segment length {} differs from header tau = {}",
                    self.post_vision.len, header.post_vision_len
                ),
            ));
        }
        Ok(())
    }

    pub fn modality_of(&self, index: usize) -> Modality {
        if self.vision.contains(index) {
            Modality::Vision
        } else {
            Modality::Language
        }
    }

    pub fn contains(&self, modality: Modality, index: usize) -> bool {
        match modality {
            Modality::Vision => self.vision.contains(index),
            Modality::Language => self.pre_vision.contains(index) || self.post_vision.contains(index),
        }
    }
}

/// Dense row-major `[heads, positions, head_dim]` tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, head: usize, pos: usize) -> &[f32] {
        let d = self.shape[2];
        let start = (head * self.shape[1] + pos) * d;
        &self.data[start..start + d]
    }

    pub fn row_mut(&mut self, head: usize, pos: usize) -> &mut [f32] {
        let d = self.shape[2];
        let start = (head * self.shape[1] + pos) * d;
        &mut self.data[start..start + d]
    }

    /// All positions of one head, contiguous.
    pub fn head(&self, head: usize) -> &[f32] {
        let stride = self.shape[1] * self.shape[2];
        &self.data[head * stride..(head + 1) * stride]
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTensors {
    /// `[num_query_heads, seq_len, head_dim]`
    pub queries: Tensor3,
    /// `[num_kv_heads, seq_len, head_dim]`
    pub keys: Tensor3,
}

/// Immutable, validated attention trace.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    header: TraceHeader,
    layout: ModalityLayout,
    layers: Vec<LayerTensors>,
}

impl AttentionTrace {
    pub fn new(header: TraceHeader, layout: ModalityLayout, layers: Vec<LayerTensors>) -> Result<Self> {
        header.validate()?;
        layout.validate(&header)?;
        if layers.len() != header.num_layers {
            return Err(Error::LengthMismatch {
                left: layers.len(),
                right: header.num_layers,
            });
        }
        let s = header.seq_len();
        let q_shape = [header.num_query_heads, s, header.head_dim];
        let k_shape = [header.num_kv_heads, s, header.head_dim];
        for (layer, t) in layers.iter().enumerate() {
            if t.queries.shape() != q_shape {
                return Err(Error::spec(
                    "queries",
                    format!("layer {layer} has shape {:?}, expected {q_shape:?}", t.queries.shape()),
                ));
            }
            if t.keys.shape() != k_shape {
                return Err(Error::spec(
                    "keys",
                    format!("layer {layer} has shape {:?}, expected {k_shape:?}", t.keys.shape()),
                ));
            }
            if let Some(index) = t.queries.first_non_finite() {
                return Err(Error::NonFinite {
                    layer,
                    tensor: "query",
                    index,
                });
            }
            if let Some(index) = t.keys.first_non_finite() {
                return Err(Error::NonFinite {
                    layer,
                    tensor: "key",
                    index,
                });
            }
        }
        Ok(Self { header, layout, layers })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    pub fn layers(&self) -> &[LayerTensors] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerTensors> {
        self.layers.get(layer).ok_or(Error::OutOfRange {
            what: "layer",
            index: layer,
            bound: self.header.num_layers,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.header.prompt_len
    }

    pub fn seq_len(&self) -> usize {
        self.header.seq_len()
    }

    pub fn query_row(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        self.layers[layer].queries.row(head, pos)
    }

    pub fn key_row(&self, layer: usize, kv_head: usize, pos: usize) -> &[f32] {
        self.layers[layer].keys.row(kv_head, pos)
    }

    /// Checks a (layer, query head) pair against the header.
    pub fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.header.num_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                bound: self.header.num_layers,
            });
        }
        if head >= self.header.num_query_heads {
            return Err(Error::OutOfRange {
                what: "query head",
                index: head,
                bound: self.header.num_query_heads,
            });
        }
        Ok(())
    }
}

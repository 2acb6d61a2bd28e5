use serde::{Deserialize, Serialize};

use crate::autograd::meter::Allocation;
use crate::autograd::Category;

pub const BLOCK_SIZE: usize = 256;

/// Which moment a quantized buffer holds. First moments are signed and
/// stored linearly. Second moments are non-negative and stored as a linear
/// code of their square root; a positive value never gets code 0, since a
/// zero second moment under a non-zero first moment would blow up the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentKind {
    Signed,
    SqrtUnsigned,
}

/// One 8-bit code per element plus an f32 absmax scale per 256-element block.
#[derive(Debug)]
pub struct QuantizedMoment {
    kind: MomentKind,
    codes: Vec<u8>,
    scales: Vec<f32>,
    _alloc: Allocation,
}

impl Clone for QuantizedMoment {
    fn clone(&self) -> Self {
        QuantizedMoment::from_parts(self.kind, self.codes.clone(), self.scales.clone())
    }
}

pub fn num_blocks(numel: usize) -> usize {
    numel.div_ceil(BLOCK_SIZE)
}

impl QuantizedMoment {
    pub fn zeros(kind: MomentKind, numel: usize) -> Self {
        QuantizedMoment::from_parts(kind, vec![0; numel], vec![0.0; num_blocks(numel)])
    }

    pub(crate) fn from_parts(kind: MomentKind, codes: Vec<u8>, scales: Vec<f32>) -> Self {
        let bytes = codes.len() + scales.len() * 4;
        QuantizedMoment { kind, codes, scales, _alloc: Allocation::new(Category::OptimizerState, bytes) }
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn payload_bytes(&self) -> usize {
        self.codes.len() + self.scales.len() * 4
    }

    /// Dequantizes block `b` into `out`.
    pub fn load_block(&self, b: usize, out: &mut [f32]) {
        let scale = self.scales[b];
        let codes = &self.codes[b * BLOCK_SIZE..(b * BLOCK_SIZE + out.len())];
        match self.kind {
            MomentKind::Signed => {
                for (o, &c) in out.iter_mut().zip(codes) {
                    *o = f32::from(c as i8) * scale / 127.0;
                }
            }
            MomentKind::SqrtUnsigned => {
                for (o, &c) in out.iter_mut().zip(codes) {
                    let s = f32::from(c) * scale / 255.0;
                    *o = s * s;
                }
            }
        }
    }

    /// Quantizes `values` into block `b`.
    pub fn store_block(&mut self, b: usize, values: &[f32]) {
        let codes = &mut self.codes[b * BLOCK_SIZE..(b * BLOCK_SIZE + values.len())];
        match self.kind {
            MomentKind::Signed => {
                let scale = values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
                self.scales[b] = scale;
                for (c, &v) in codes.iter_mut().zip(values) {
                    *c = if scale == 0.0 { 0 } else { ((v / scale * 127.0).round().clamp(-127.0, 127.0) as i8) as u8 };
                }
            }
            MomentKind::SqrtUnsigned => {
                let scale = values.iter().fold(0.0f32, |a, v| a.max(v.max(0.0).sqrt()));
                self.scales[b] = scale;
                for (c, &v) in codes.iter_mut().zip(values) {
                    *c = if scale == 0.0 || v <= 0.0 {
                        0
                    } else {
                        (v.sqrt() / scale * 255.0).round().clamp(1.0, 255.0) as u8
                    };
                }
            }
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.numel()];
        for (b, chunk) in out.chunks_mut(BLOCK_SIZE).enumerate() {
            self.load_block(b, chunk);
        }
        out
    }

    pub fn quantize(kind: MomentKind, values: &[f32]) -> Self {
        let mut q = QuantizedMoment::zeros(kind, values.len());
        for (b, chunk) in values.chunks(BLOCK_SIZE).enumerate() {
            q.store_block(b, chunk);
        }
        q
    }
}

//! Linear symmetric blockwise 8-bit quantisation.

pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// Signed 8-bit codes with one absolute-maximum scale per block.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBuffer {
    pub codes: Vec<i8>,
    pub absmax: Vec<f32>,
    pub block_size: usize,
}

impl QuantizedBuffer {
    /// All-zero buffer of `len` elements.
    pub fn zeros(len: usize, block_size: usize) -> Self {
        assert!(block_size >= 1, "block_size must be positive");
        Self {
            codes: vec![0; len],
            absmax: vec![0.0; len.div_ceil(block_size)],
            block_size,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.absmax.len()
    }

    /// Storage cost: one byte per element plus one `f32` scale per block.
    pub fn memory_bytes(&self) -> usize {
        self.codes.len() + 4 * self.absmax.len()
    }
}

/// Quantises `x` per block: `code = round(x · 127 / absmax)`, clamped to
/// `[-127, 127]`; an all-zero block stores zero codes and a zero scale.
pub fn quantize_block(x: &[f32], block_size: usize) -> QuantizedBuffer {
    let mut q = QuantizedBuffer::zeros(x.len(), block_size);
    quantize_into(x, &mut q);
    q
}

pub(crate) fn quantize_into(x: &[f32], q: &mut QuantizedBuffer) {
    debug_assert_eq!(x.len(), q.codes.len());
    for ((block, codes), absmax) in x
        .chunks(q.block_size)
        .zip(q.codes.chunks_mut(q.block_size))
        .zip(q.absmax.iter_mut())
    {
        let m = block.iter().fold(0f32, |a, v| a.max(v.abs()));
        *absmax = m;
        if m == 0.0 {
            codes.iter_mut().for_each(|c| *c = 0);
            continue;
        }
        // f64: 127 / m overflows f32 for subnormal m
        let scale = 127.0 / m as f64;
        for (c, &v) in codes.iter_mut().zip(block) {
            *c = (v as f64 * scale).round().clamp(-127.0, 127.0) as i8;
        }
    }
}

pub fn dequantize_block(q: &QuantizedBuffer) -> Vec<f32> {
    let mut out = vec![0.0; q.codes.len()];
    dequantize_into(q, &mut out);
    out
}

pub(crate) fn dequantize_into(q: &QuantizedBuffer, out: &mut [f32]) {
    for ((codes, dst), &absmax) in q
        .codes
        .chunks(q.block_size)
        .zip(out.chunks_mut(q.block_size))
        .zip(&q.absmax)
    {
        for (d, &c) in dst.iter_mut().zip(codes) {
            *d = (c as f32 / 127.0) * absmax;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_block_roundtrips_exactly() {
        let q = quantize_block(&[0.0; 10], 4);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert!(q.absmax.iter().all(|&a| a == 0.0));
        assert_eq!(dequantize_block(&q), vec![0.0; 10]);
    }

    #[test]
    fn extremes_roundtrip_exactly() {
        let q = quantize_block(&[-1.0, 1.0], 256);
        assert_eq!(q.codes, vec![-127, 127]);
        assert_eq!(dequantize_block(&q), vec![-1.0, 1.0]);
    }

    #[test]
    fn short_last_block() {
        let x: Vec<f32> = (0..10).map(|v| v as f32).collect();
        let q = quantize_block(&x, 4);
        assert_eq!(q.num_blocks(), 3);
        assert_eq!(q.absmax, vec![3.0, 7.0, 9.0]);
        assert_eq!(q.memory_bytes(), 10 + 12);
    }
}

//! Bit-level tensor representation.
//!
//! Activations and weights are stored NHWC with the channel axis packed 32
//! channels per `u32` word, least significant bit first: channel `c` lives in
//! bit `c % 32` of word `c / 32`. A clear bit encodes `+1.0`, a set bit encodes
//! `-1.0`. Channels past `channels` in the last word of a pixel are always
//! clear, so XOR/popcount over padded lanes contributes nothing.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of channels packed into one storage word.
pub const WORD_BITS: usize = 32;

/// Number of `u32` words needed to hold `channels` sign bits.
#[inline]
pub fn words_for(channels: usize) -> usize {
    channels.div_ceil(WORD_BITS)
}

/// Sign bit of a real value. `sign(0) = sign(-0) = +1`, so only strictly
/// negative values set the bit.
#[inline(always)]
pub fn sign_bit(x: f32) -> bool {
    x < 0.0
}

/// The `±1.0` value a sign bit decodes to.
#[inline(always)]
pub fn bit_value(bit: bool) -> f32 {
    if bit {
        -1.0
    } else {
        1.0
    }
}

/// NHWC tensor shape in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape {
            batch,
            height,
            width,
            channels,
        }
    }

    pub fn elements(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    /// Number of spatial positions over the whole batch.
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn words_per_pixel(&self) -> usize {
        words_for(self.channels)
    }

    /// Word count of the bitpacked representation.
    pub fn packed_words(&self) -> usize {
        self.pixels() * self.words_per_pixel()
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl From<Shape> for [usize; 4] {
    fn from(s: Shape) -> Self {
        s.to_array()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.height, self.width, self.channels)
    }
}

/// Dense 32-bit real tensor, NHWC.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    /// Panics if `data.len()` does not match the shape.
    pub fn new(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), shape.elements(), "data length does not match shape {shape}");
        FloatTensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        FloatTensor {
            shape,
            data: vec![0.0; shape.elements()],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        FloatTensor {
            shape,
            data: vec![value; shape.elements()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let s = self.shape;
        ((n * s.height + y) * s.width + x) * s.channels + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(n, y, x, c)]
    }
}

/// Sign-bit tensor with channels packed 32 per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitpackedTensor {
    /// Logical shape; `channels` is the valid (unpadded) channel count.
    shape: Shape,
    words: Vec<u32>,
}

/// Reasons a word buffer is not a valid bitpacked tensor.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PackError {
    #[error("expected {expected} words for shape {shape}, got {actual}")]
    WordCount {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("padding bit set in word {word} (valid channels {channels})")]
    DirtyPadding { word: usize, channels: usize },
}

impl BitpackedTensor {
    /// Wraps an existing word buffer, checking the word count and that every
    /// padding bit is clear.
    pub fn from_words(shape: Shape, words: Vec<u32>) -> Result<Self, PackError> {
        let expected = shape.packed_words();
        if words.len() != expected {
            return Err(PackError::WordCount {
                shape,
                expected,
                actual: words.len(),
            });
        }
        let mask = padding_mask(shape.channels);
        let wpp = shape.words_per_pixel();
        if mask != 0 && wpp > 0 {
            for (i, w) in words.iter().enumerate().skip(wpp - 1).step_by(wpp) {
                if w & mask != 0 {
                    return Err(PackError::DirtyPadding {
                        word: i,
                        channels: shape.channels,
                    });
                }
            }
        }
        Ok(BitpackedTensor { shape, words })
    }

    pub fn zeros(shape: Shape) -> Self {
        BitpackedTensor {
            shape,
            words: vec![0; shape.packed_words()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn valid_channels(&self) -> usize {
        self.shape.channels
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u32> {
        self.words
    }

    pub fn words_per_pixel(&self) -> usize {
        self.shape.words_per_pixel()
    }

    /// Words of one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[u32] {
        let s = self.shape;
        let wpp = s.words_per_pixel();
        let start = ((n * s.height + y) * s.width + x) * wpp;
        &self.words[start..start + wpp]
    }

    /// The sign bit of one element.
    #[inline]
    pub fn bit(&self, n: usize, y: usize, x: usize, c: usize) -> bool {
        debug_assert!(c < self.shape.channels);
        (self.pixel(n, y, x)[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    /// Storage size in bytes.
    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }
}

/// Mask of the padding bits in the last word of a pixel with `channels`
/// valid channels (zero when channels is a multiple of 32).
pub fn padding_mask(channels: usize) -> u32 {
    match channels % WORD_BITS {
        0 => 0,
        r => !((1u32 << r) - 1),
    }
}

/// Packs the signs of `values` into `out`, LSB-first. `out` must hold
/// `words_for(values.len())` words; trailing bits are cleared.
pub fn pack_signs(values: &[f32], out: &mut [u32]) {
    debug_assert_eq!(out.len(), words_for(values.len()));
    let mut chunks = values.chunks_exact(WORD_BITS);
    let mut i = 0;
    for chunk in &mut chunks {
        let mut word = 0u32;
        for (b, &v) in chunk.iter().enumerate() {
            word |= (sign_bit(v) as u32) << b;
        }
        out[i] = word;
        i += 1;
    }
    let rem = chunks.remainder();
    if !rem.is_empty() {
        let mut word = 0u32;
        for (b, &v) in rem.iter().enumerate() {
            word |= (sign_bit(v) as u32) << b;
        }
        out[i] = word;
    }
}

/// Expands `count` sign bits from `words` into `±1.0` values.
pub fn unpack_signs(words: &[u32], count: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), count);
    for (c, o) in out.iter_mut().enumerate() {
        *o = bit_value((words[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1);
    }
}

/// Binarizes a float tensor by extracting sign bits.
pub fn quantize(input: &FloatTensor) -> BitpackedTensor {
    let shape = input.shape();
    let mut words = vec![0u32; shape.packed_words()];
    quantize_into(input.data(), shape.channels, &mut words);
    BitpackedTensor { shape, words }
}

/// Slice form of [`quantize`]: `data` is NHWC with `channels` channels and
/// `out` receives `words_for(channels)` words per pixel.
pub fn quantize_into(data: &[f32], channels: usize, out: &mut [u32]) {
    let wpp = words_for(channels);
    if channels == 0 {
        return;
    }
    for (pixel, words) in data.chunks_exact(channels).zip(out.chunks_exact_mut(wpp)) {
        pack_signs(pixel, words);
    }
}

/// Converts bitpacked data back into `±1.0` floats.
pub fn dequantize(input: &BitpackedTensor) -> FloatTensor {
    let shape = input.shape();
    let mut data = vec![0.0; shape.elements()];
    dequantize_into(input.words(), shape.channels, &mut data);
    FloatTensor::new(shape, data)
}

/// Slice form of [`dequantize`].
pub fn dequantize_into(words: &[u32], channels: usize, out: &mut [f32]) {
    let wpp = words_for(channels);
    if channels == 0 {
        return;
    }
    for (pixel_words, pixel) in words.chunks_exact(wpp).zip(out.chunks_exact_mut(channels)) {
        unpack_signs(pixel_words, channels, pixel);
    }
}

/// Pads the channel axis up to a multiple of `multiple` with `+1.0`, so the
/// appended channels quantize to clear bits.
pub fn channel_pad(input: &FloatTensor, multiple: usize) -> FloatTensor {
    assert!(multiple > 0, "channel multiple must be positive");
    let shape = input.shape();
    let padded = shape.channels.div_ceil(multiple) * multiple;
    if padded == shape.channels {
        return input.clone();
    }
    let out_shape = shape.with_channels(padded);
    let mut data = Vec::with_capacity(out_shape.elements());
    for pixel in input.data().chunks_exact(shape.channels) {
        data.extend_from_slice(pixel);
        data.extend(std::iter::repeat_n(1.0f32, padded - shape.channels));
    }
    FloatTensor::new(out_shape, data)
}

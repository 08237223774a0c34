//! Frozen stand-ins for the text and image encoders: fixed seeded random
//! maps.

use crate::error::{Error, Result};
use crate::numerics::random::{gaussian, rng};
use crate::numerics::{matmul, Tensor};

/// Instruction tokens, one unit-norm row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Tensor);

impl TextEmbedding {
    pub fn tokens(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Raw image-encoder tokens, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding(Tensor);

impl ImageEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        tokens.dims2()?;
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &Tensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    /// Mean over patch tokens.
    pub fn pooled(&self) -> Tensor {
        self.0.mean_rows()
    }
}

/// Seeded lookup table, rows normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    table: Tensor,
}

impl TextEncoder {
    /// Seeded unit rows; orthonormalised (Gram-Schmidt in id order) when
    /// `vocab <= dim`, so distinct tokens are exactly orthogonal.
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let raw = gaussian(&[vocab, dim], &mut rng(seed));
        let mut data = raw.into_data();
        let orthogonalise = vocab <= dim;
        for i in 0..vocab {
            let (done, rest) = data.split_at_mut(i * dim);
            let row = &mut rest[..dim];
            if orthogonalise {
                for q in done.chunks_exact(dim) {
                    let d: f64 = q.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    row.iter_mut().zip(q).for_each(|(v, a)| *v -= d * a);
                }
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self {
            table: Tensor::from_raw(vec![vocab, dim], data),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// The unit embedding of a single token.
    pub fn token(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab() {
            return Err(Error::Vocab {
                token: id,
                vocab: self.vocab(),
            });
        }
        Ok(self.table.row(id))
    }

    pub fn encode(&self, prompt: &[usize]) -> Result<TextEmbedding> {
        if prompt.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        let mut data = Vec::with_capacity(prompt.len() * self.dim());
        for &id in prompt {
            data.extend_from_slice(self.token(id)?);
        }
        Ok(TextEmbedding(Tensor::from_raw(vec![prompt.len(), self.dim()], data)))
    }
}

pub fn encode_text(prompt: &[usize], vocab: usize, dim: usize, seed: u64) -> Result<TextEmbedding> {
    TextEncoder::new(vocab, dim, seed).encode(prompt)
}

/// Non-overlapping `patch × patch` blocks, flattened and projected by a fixed
/// seeded linear map without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    patch: usize,
    channels: usize,
    proj: Tensor,
}

impl ImageEncoder {
    pub fn new(patch: usize, channels: usize, dim: usize, seed: u64) -> Self {
        let fan_in = patch * patch * channels;
        let proj = gaussian(&[fan_in, dim], &mut rng(seed)).scale(1.0 / (fan_in as f64).sqrt());
        Self { patch, channels, proj }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn projection(&self) -> &Tensor {
        &self.proj
    }

    /// `[C × dim]` map taking a colour to the embedding of a uniformly
    /// coloured patch.
    pub fn uniform_patch_map(&self) -> Tensor {
        let (c, d) = (self.channels, self.dim());
        let mut out = vec![0.0; c * d];
        for px in 0..self.patch * self.patch {
            for ch in 0..c {
                for (o, v) in out[ch * d..(ch + 1) * d].iter_mut().zip(self.proj.row(px * c + ch)) {
                    *o += v;
                }
            }
        }
        Tensor::from_raw(vec![c, d], out)
    }

    pub fn encode(&self, img: &Tensor) -> Result<ImageEmbedding> {
        let patches = patchify(img, self.patch)?;
        if patches.cols() != self.proj.rows() {
            return Err(Error::shape(format!(
                "image with {} values per patch, encoder expects {}",
                patches.cols(),
                self.proj.rows()
            )));
        }
        Ok(ImageEmbedding(matmul(&patches, &self.proj)?))
    }
}

pub fn encode_image(img: &Tensor, patch: usize, dim: usize, seed: u64) -> Result<ImageEmbedding> {
    let channels = match img.shape() {
        [_, _, c] => *c,
        s => return Err(Error::shape(format!("expected H×W×C image, got {s:?}"))),
    };
    ImageEncoder::new(patch, channels, dim, seed).encode(img)
}

/// `[H×W×C]` → `[(H/p)(W/p) × p²C]`, patches in row-major order and
/// `(row, col, channel)` order within a patch.
pub(crate) fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape(format!("expected H×W×C image, got {s:?}"))),
    };
    let index = super::patch_permutation(h, w, c, patch)?;
    let data = index.iter().map(|&i| img.data()[i]).collect();
    Ok(Tensor::from_raw(
        vec![(h / patch) * (w / patch), patch * patch * c],
        data,
    ))
}

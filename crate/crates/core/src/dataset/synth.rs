//! Procedural subjects on coloured backgrounds.
//!
//! Token ids `0..n_colors` name background colours, `n_colors..n_colors+4`
//! name the four subject placements. Background colours are solved so that a
//! uniformly coloured patch embeds exactly along the colour token's text
//! embedding; subject colours embed orthogonally to every token, so a
//! subject's identity is invisible to text alignment and visible to visual
//! alignment.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::DatasetConfig;
use crate::error::{Error, Result};
use crate::numerics::random::{derive_seed, gaussian, rng};
use crate::numerics::Tensor;

pub const POSITIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub backgrounds: Vec<Vec<f64>>,
    /// Placement-marker colours, grounded on the position tokens.
    pub markers: Vec<Vec<f64>>,
    pub subjects: Vec<Vec<f64>>,
}

/// Minimum-norm `c` with `c·M = target`.
fn ground(m: &DMatrix<f64>, target: &[f64]) -> Result<Vec<f64>> {
    let mt = m.transpose();
    let rhs = DVector::from_column_slice(target);
    let gram = &mt * m;
    let y = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::DegenerateEmbedding("image encoder patch map is rank deficient".into()))?;
    Ok((m * y).iter().copied().collect())
}

impl Palette {
    pub fn new(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let text = cfg.encoders.text_encoder();
        let image = cfg.encoders.image_encoder(cfg.channels());
        let map = image.uniform_patch_map();
        let m = DMatrix::from_row_slice(map.rows(), map.cols(), map.data());

        let backgrounds = (0..cfg.n_colors)
            .map(|v| ground(&m, text.token(v)?))
            .collect::<Result<Vec<_>>>()?;
        let markers = (cfg.n_colors..cfg.vocab())
            .map(|v| ground(&m, text.token(v)?))
            .collect::<Result<Vec<_>>>()?;

        // Orthonormal basis of the token span, then random directions in its
        // complement.
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for v in 0..cfg.vocab() {
            let mut u = DVector::from_column_slice(text.token(v)?);
            for q in &basis {
                u -= q * q.dot(&u);
            }
            let n = u.norm();
            if n > 1e-9 {
                basis.push(u / n);
            }
        }
        let mut r = rng(derive_seed(cfg.encoders.image_seed, &[0x5ab1ec7]));
        let mut subjects = Vec::with_capacity(cfg.n_subjects);
        while subjects.len() < cfg.n_subjects {
            let g = gaussian(&[cfg.encoders.text_dim], &mut r);
            let mut u = DVector::from_column_slice(g.data());
            for q in &basis {
                u -= q * q.dot(&u);
            }
            let n = u.norm();
            if n < 1e-6 {
                continue;
            }
            let u = u / n;
            basis.push(u.clone());
            subjects.push(ground(&m, u.as_slice())?);
        }
        // One shared scale keeps every colour's embedding norm equal while
        // bringing the palette's mean pixel RMS to 1.
        let all = || backgrounds.iter().chain(&markers).chain(&subjects);
        let rms = all()
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
            .sum::<f64>()
            / all().count() as f64;
        let rescale = |v: Vec<Vec<f64>>, k: f64| -> Vec<Vec<f64>> {
            v.into_iter()
                .map(|c| c.into_iter().map(|x| k * x / rms).collect())
                .collect()
        };
        Ok(Self {
            backgrounds: rescale(backgrounds, 1.0),
            markers: rescale(markers, 1.0),
            subjects: rescale(subjects, cfg.subject_gain),
        })
    }
}

/// Top-left corner of placement `p` (clockwise from the top-left corner).
fn corner(cfg: &DatasetConfig, p: usize) -> (usize, usize) {
    let (dh, dw) = (cfg.height - cfg.subject_size, cfg.width - cfg.subject_size);
    match p {
        0 => (0, 0),
        1 => (0, dw),
        2 => (dh, dw),
        _ => (dh, 0),
    }
}

/// Background colour `bg`, square subject `subject` at placement `pos`,
/// framed by a one-patch-wide marker in the placement's colour.
pub fn render(cfg: &DatasetConfig, palette: &Palette, bg: usize, subject: usize, pos: usize) -> Tensor {
    let c = cfg.channels();
    let (r0, c0) = corner(cfg, pos);
    let s = cfg.subject_size;
    let p = cfg.encoders.patch;
    let mut data = Vec::with_capacity(cfg.height * cfg.width * c);
    for i in 0..cfg.height {
        for j in 0..cfg.width {
            let inside = (r0..r0 + s).contains(&i) && (c0..c0 + s).contains(&j);
            let framed =
                (r0.saturating_sub(p)..r0 + s + p).contains(&i) && (c0.saturating_sub(p)..c0 + s + p).contains(&j);
            let colour = if inside {
                &palette.subjects[subject]
            } else if framed {
                &palette.markers[pos]
            } else {
                &palette.backgrounds[bg]
            };
            data.extend_from_slice(colour);
        }
    }
    Tensor::new(vec![cfg.height, cfg.width, c], data).expect("rendered image is well formed")
}

/// One instance: an instruction, the subject reference, and the candidate
/// targets `[compliant, identity-broken, instruction-ignoring]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub group: u64,
    pub prompt: Vec<usize>,
    pub reference: Tensor,
    pub pool: [Tensor; 3],
    pub subject: usize,
}

fn jittered(img: &Tensor, std: f64, r: &mut crate::numerics::random::Rng) -> Tensor {
    if std == 0.0 {
        return img.clone();
    }
    let noise = gaussian(img.shape(), r).scale(std);
    img.add(&noise).expect("same shape")
}

/// `n` seeded instances. The instruction asks for a new background colour
/// and a placement.
pub fn synth_triplets(n: usize, cfg: &DatasetConfig, seed: u64) -> Result<Vec<Triplet>> {
    let palette = Palette::new(cfg)?;
    synth_with(&palette, n, cfg, seed)
}

pub(crate) fn synth_with(palette: &Palette, n: usize, cfg: &DatasetConfig, seed: u64) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::Config("need at least one instance".into()));
    }
    let colours: Vec<usize> = (0..cfg.n_colors).collect();
    let subjects: Vec<usize> = (0..cfg.n_subjects).collect();
    (0..n)
        .map(|i| {
            let mut r = rng(derive_seed(seed, &[i as u64]));
            let subject = r.random_range(0..cfg.n_subjects);
            let other = *subjects
                .iter()
                .filter(|&&s| s != subject)
                .collect::<Vec<_>>()
                .choose(&mut r)
                .expect("at least two subjects");
            let pair: Vec<usize> = colours.choose_multiple(&mut r, 2).copied().collect();
            let (bg_ref, bg_new) = (pair[0], pair[1]);
            let pos_ref = r.random_range(0..POSITIONS);
            let pos_new = r.random_range(0..POSITIONS);

            let reference = render(cfg, palette, bg_ref, subject, pos_ref);
            let compliant = render(cfg, palette, bg_new, subject, pos_new);
            let broken = render(cfg, palette, bg_new, *other, pos_new);
            let pool = [
                jittered(&compliant, cfg.jitter, &mut r),
                jittered(&broken, cfg.jitter, &mut r),
                jittered(&reference, cfg.jitter, &mut r),
            ];
            Ok(Triplet {
                group: i as u64,
                prompt: vec![bg_new, cfg.n_colors + pos_new],
                reference,
                pool,
                subject,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, matmul};

    #[test]
    fn backgrounds_embed_along_their_token() {
        let cfg = DatasetConfig::default();
        let p = Palette::new(&cfg).unwrap();
        let text = cfg.encoders.text_encoder();
        let enc = cfg.encoders.image_encoder(cfg.channels());
        let map = enc.uniform_patch_map();
        for (v, c) in p.backgrounds.iter().enumerate() {
            let e = matmul(&Tensor::new(vec![1, c.len()], c.clone()).unwrap(), &map).unwrap();
            let cos = cosine(e.data(), text.token(v).unwrap()).unwrap();
            assert!((cos - 1.0).abs() < 1e-9, "colour {v}: {cos}");
        }
        for (k, c) in p.markers.iter().enumerate() {
            let e = matmul(&Tensor::new(vec![1, c.len()], c.clone()).unwrap(), &map).unwrap();
            let cos = cosine(e.data(), text.token(cfg.n_colors + k).unwrap()).unwrap();
            assert!((cos - 1.0).abs() < 1e-9, "marker {k}: {cos}");
        }
        for s in &p.subjects {
            let e = matmul(&Tensor::new(vec![1, s.len()], s.clone()).unwrap(), &map).unwrap();
            for v in 0..cfg.vocab() {
                let d: f64 = e.data().iter().zip(text.token(v).unwrap()).map(|(a, b)| a * b).sum();
                assert!(d.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = DatasetConfig::default();
        let a = synth_triplets(5, &cfg, 3).unwrap();
        let b = synth_triplets(5, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_triplets(5, &cfg, 4).unwrap());
        for t in &a {
            assert_eq!(t.reference.shape(), &cfg.image_shape());
            assert_eq!(t.prompt.len(), 2);
            assert!(t.prompt[0] < cfg.n_colors && t.prompt[1] >= cfg.n_colors);
        }
        assert!(synth_triplets(0, &cfg, 3).is_err());
    }
}

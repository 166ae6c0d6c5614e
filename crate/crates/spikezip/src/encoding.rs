//! Input spike/frame generation: Poisson rate coding and direct (analog)
//! coding.
//!
//! Poisson probabilities are raw `[0,1]` pixel intensities; direct frames
//! carry whatever normalization the dataset applied. Standardized values can
//! be negative, so they cannot serve as firing rates — the two encodings
//! intentionally see different preprocessing.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which input encoding a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Direct,
    Poisson,
}

impl Encoding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Encoding::Direct),
            "poisson" => Ok(Encoding::Poisson),
            other => Err(Error::Config(format!("unknown encoding {:?}", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::Direct => "direct",
            Encoding::Poisson => "poisson",
        }
    }
}

/// T input frames for one sample. Direct windows store a single frame; the
/// per-step view is identical either way.
#[derive(Debug, Clone)]
pub enum InputWindow<F: Scalar> {
    Direct { frame: Tensor<F>, steps: usize },
    Poisson { frames: Vec<Tensor<F>> },
}

impl<F: Scalar> InputWindow<F> {
    pub fn steps(&self) -> usize {
        match self {
            InputWindow::Direct { steps, .. } => *steps,
            InputWindow::Poisson { frames } => frames.len(),
        }
    }

    pub fn frame(&self, t: usize) -> &Tensor<F> {
        match self {
            InputWindow::Direct { frame, .. } => frame,
            InputWindow::Poisson { frames } => &frames[t],
        }
    }

    pub fn encoding(&self) -> Encoding {
        match self {
            InputWindow::Direct { .. } => Encoding::Direct,
            InputWindow::Poisson { .. } => Encoding::Poisson,
        }
    }
}

/// Binary spike train with per-pixel firing probability equal to intensity.
/// Pixels must be in `[0,1]`; frames are independent across `t` and
/// deterministic under `seed`.
pub fn poisson_encode<F: Scalar>(image: &Tensor<F>, steps: usize, seed: u64) -> Result<InputWindow<F>> {
    if steps == 0 {
        return Err(Error::Config("encoding needs at least one time step".into()));
    }
    for (i, &v) in image.data().iter().enumerate() {
        let x = v.as_f64();
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Data(format!(
                "pixel {} = {} outside [0,1]; Poisson rates need raw intensities",
                i, x
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..steps)
        .map(|_| {
            let data: Vec<F> = image
                .data()
                .iter()
                .map(|&p| {
                    if rng.gen::<f64>() < p.as_f64() {
                        F::one()
                    } else {
                        F::zero()
                    }
                })
                .collect();
            Tensor::new(image.shape().to_vec(), data).expect("frame shape")
        })
        .collect();
    Ok(InputWindow::Poisson { frames })
}

/// T identical analog frames.
pub fn direct_encode<F: Scalar>(image: &Tensor<F>, steps: usize) -> Result<InputWindow<F>> {
    if steps == 0 {
        return Err(Error::Config("encoding needs at least one time step".into()));
    }
    Ok(InputWindow::Direct {
        frame: image.clone(),
        steps,
    })
}

//! Trainable patch embedder producing the dense visual token set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// An RGB image with an optional depth plane, values row-major `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<T>,
    pub depth: Option<Vec<T>>,
    pub index: usize,
}

impl<T: Scalar> Frame<T> {
    pub fn new(height: usize, width: usize, rgb: Vec<T>, depth: Option<Vec<T>>, index: usize) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::shape("frame", &[height, width, 3], &[rgb.len()]));
        }
        if rgb.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("rgb values must lie in [0, 1]"));
        }
        if let Some(d) = &depth {
            if d.len() != height * width {
                return Err(Error::shape("frame depth", &[height, width], &[d.len()]));
            }
            if d.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(Error::invalid("depth must be finite and non-negative"));
            }
        }
        Ok(Frame {
            height,
            width,
            rgb,
            depth,
            index,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Frame {
            height,
            width,
            rgb: vec![T::zero(); height * width * 3],
            depth: None,
            index: 0,
        }
    }

    pub fn channels(&self) -> usize {
        if self.depth.is_some() {
            4
        } else {
            3
        }
    }

    fn sample(&self, y: usize, x: usize, c: usize) -> T {
        if c < 3 {
            self.rgb[(y * self.width + x) * 3 + c]
        } else {
            self.depth.as_ref().expect("depth plane")[y * self.width + x]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense token set `N×d` with its patch layout.
#[derive(Clone, Copy, Debug)]
pub struct DenseTokens<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub grid: PatchGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            height: 64,
            width: 64,
            patch: 8,
            channels: 3,
            dim: 64,
        }
    }
}

impl FrontendConfig {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            rows: self.height / self.patch,
            cols: self.width / self.patch,
            patch: self.patch,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().len()
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: FrontendConfig,
    pub proj: Linear,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: FrontendConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.patch == 0 || cfg.height % cfg.patch != 0 || cfg.width % cfg.patch != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch {}",
                cfg.height, cfg.width, cfg.patch
            )));
        }
        let fan_in = cfg.patch * cfg.patch * cfg.channels;
        let proj = Linear::new(store, "frontend.proj", fan_in, cfg.dim, true, rng);
        let pos = store.add(
            "frontend.pos",
            Tensor::randn([cfg.num_tokens(), cfg.dim], 0.5, rng),
        );
        Ok(PatchEmbed { cfg, proj, pos })
    }

    /// Flattens each `p×p` patch (row, column, channel order) into one row.
    pub fn patchify<T: Scalar>(&self, frame: &Frame<T>) -> Result<Tensor<T>> {
        let c = &self.cfg;
        if frame.height != c.height || frame.width != c.width {
            return Err(Error::shape(
                "patch_embed",
                &[c.height, c.width],
                &[frame.height, frame.width],
            ));
        }
        if frame.height % c.patch != 0 || frame.width % c.patch != 0 {
            return Err(Error::invalid("frame extents not divisible by patch size"));
        }
        if frame.channels() != c.channels {
            return Err(Error::invalid(format!(
                "frame has {} channels, embedder expects {}",
                frame.channels(),
                c.channels
            )));
        }
        let grid = c.grid();
        let p = c.patch;
        let mut out = Vec::with_capacity(grid.len() * p * p * c.channels);
        for gr in 0..grid.rows {
            for gc in 0..grid.cols {
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c.channels {
                            out.push(frame.sample(gr * p + dy, gc * p + dx, ch));
                        }
                    }
                }
            }
        }
        Tensor::new([grid.len(), p * p * c.channels], out)
    }

    pub fn forward<'t, T: Scalar>(&self, bd: &Binder<'t, '_, T>, frame: &Frame<T>) -> Result<DenseTokens<'t, T>> {
        let patches = bd.constant(self.patchify(frame)?)?;
        let tokens = self.proj.forward(bd, patches)?.add(bd.p(self.pos)?)?;
        Ok(DenseTokens {
            tokens,
            grid: self.cfg.grid(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_arithmetic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pe = PatchEmbed::new(&mut store, FrontendConfig::default(), &mut rng).unwrap();
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &store);
        let dense = pe.forward(&bd, &Frame::zeros(64, 64)).unwrap();
        assert_eq!(dense.tokens.shape(), vec![64, 64]);
        assert_eq!(dense.grid.len(), 64);
    }

    #[test]
    fn zero_frame_with_zero_projection_yields_positions() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pe = PatchEmbed::new(&mut store, FrontendConfig::default(), &mut rng).unwrap();
        store.zero_prefix("frontend.proj");
        let tape = Tape::new();
        let bd = Binder::inference(&tape, &store);
        let dense = pe.forward(&bd, &Frame::zeros(64, 64)).unwrap();
        assert_eq!(dense.tokens.value().data(), store.get(pe.pos).data());
    }

    #[test]
    fn non_divisible_extents_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = FrontendConfig {
            height: 60,
            ..FrontendConfig::default()
        };
        assert!(PatchEmbed::new(&mut store, cfg, &mut rng).is_err());
    }

    #[test]
    fn depth_is_a_fourth_plane() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FrontendConfig {
            channels: 4,
            ..FrontendConfig::default()
        };
        let pe = PatchEmbed::new(&mut store, cfg, &mut rng).unwrap();
        let mut f = Frame::<f64>::zeros(64, 64);
        assert!(pe.patchify(&f).is_err());
        f.depth = Some(vec![2.0; 64 * 64]);
        let p = pe.patchify(&f).unwrap();
        assert_eq!(p.cols(), 8 * 8 * 4);
        assert_eq!(p.at(0, 3), 2.0);
    }
}

//! Minimal neural-network substrate: layers with hand-written forward and
//! backward passes over `ndarray`, generic over `f32`/`f64`.
//!
//! Convolutions run through im2col + GEMM. Backward passes come in two
//! flavors: input-gradient only (for attacks and prompt gradients) and full
//! (parameters too, for training). Models stay immutable during backward;
//! parameter gradients accumulate into caller-owned buffers.

pub mod adam;
pub mod ops;

pub use adam::Adam;
pub use ops::*;

use rand_chacha::ChaCha12Rng;

/// Element type for network math. Implemented for `f32` and `f64`.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// One standard-normal draw.
    fn randn(rng: &mut ChaCha12Rng) -> Self;
    /// One uniform draw in [0, 1).
    fn rand01(rng: &mut ChaCha12Rng) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn randn(rng: &mut ChaCha12Rng) -> Self {
        use rand::Rng;
        rng.sample::<f32, _>(rand_distr::StandardNormal)
    }
    fn rand01(rng: &mut ChaCha12Rng) -> Self {
        use rand::Rng;
        rng.random::<f32>()
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn randn(rng: &mut ChaCha12Rng) -> Self {
        use rand::Rng;
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }
    fn rand01(rng: &mut ChaCha12Rng) -> Self {
        use rand::Rng;
        rng.random::<f64>()
    }
}

/// Shorthand for lifting an `f64` constant into the element type.
#[inline]
pub fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x)
}

/// Borrowed view of one named parameter array.
pub enum ParamView<'a, F> {
    D1(&'a ndarray::Array1<F>),
    D2(&'a ndarray::Array2<F>),
}

pub enum ParamViewMut<'a, F> {
    D1(&'a mut ndarray::Array1<F>),
    D2(&'a mut ndarray::Array2<F>),
}

impl<F: Scalar> ParamView<'_, F> {
    pub fn len(&self) -> usize {
        match self {
            ParamView::D1(a) => a.len(),
            ParamView::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64_dyn(&self) -> ndarray::ArrayD<f64> {
        match self {
            ParamView::D1(a) => a.mapv(|v| v.to_f64()).into_dyn(),
            ParamView::D2(a) => a.mapv(|v| v.to_f64()).into_dyn(),
        }
    }
}

/// Concatenate all parameter elements into one flat vector (row-major,
/// declaration order).
pub fn flatten_params<F: Scalar>(views: &[(String, ParamView<'_, F>)]) -> Vec<F> {
    let total: usize = views.iter().map(|(_, v)| v.len()).sum();
    let mut out = Vec::with_capacity(total);
    for (_, v) in views {
        match v {
            ParamView::D1(a) => out.extend(a.iter().cloned()),
            ParamView::D2(a) => out.extend(a.iter().cloned()),
        }
    }
    out
}

/// Write a flat vector back into parameter arrays. Panics on length mismatch.
pub fn assign_from_flat<F: Scalar>(views: Vec<(String, ParamViewMut<'_, F>)>, data: &[F]) {
    let mut pos = 0usize;
    for (_, v) in views {
        match v {
            ParamViewMut::D1(a) => {
                for x in a.iter_mut() {
                    *x = data[pos];
                    pos += 1;
                }
            }
            ParamViewMut::D2(a) => {
                for x in a.iter_mut() {
                    *x = data[pos];
                    pos += 1;
                }
            }
        }
    }
    assert_eq!(pos, data.len(), "flat parameter length mismatch");
}

/// Load named f64 arrays (e.g. from a checkpoint) into parameter views.
pub fn load_named<F: Scalar>(
    views: Vec<(String, ParamViewMut<'_, F>)>,
    named: &std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
) -> Result<(), String> {
    for (name, v) in views {
        let src = named
            .get(&name)
            .ok_or_else(|| format!("missing parameter {name}"))?;
        match v {
            ParamViewMut::D1(a) => {
                if src.shape() != a.shape() {
                    return Err(format!("shape mismatch for {name}"));
                }
                for (dst, s) in a.iter_mut().zip(src.iter()) {
                    *dst = c(*s);
                }
            }
            ParamViewMut::D2(a) => {
                if src.shape() != a.shape() {
                    return Err(format!("shape mismatch for {name}"));
                }
                for (dst, s) in a.iter_mut().zip(src.iter()) {
                    *dst = c(*s);
                }
            }
        }
    }
    Ok(())
}

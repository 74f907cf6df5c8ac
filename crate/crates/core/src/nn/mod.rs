//! Minimal CPU neural-network toolkit for the completion networks.
//!
//! Activations use a `(C, N, H, W)` layout so that an im2col convolution is
//! one matrix product whose result already has the output layout. Layers are
//! plain structs holding [`ParamId`]s into a shared [`ParamStore`]; forward
//! passes return caches and backward passes accumulate into a [`Grads`].
//! Everything is generic over [`Real`] so the gradient check can run in f64.

pub mod clstm;
pub mod layers;
pub mod net;
pub mod unet;

use std::fmt::Debug;

use ndarray::{Array1, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use clstm::{fuse_embeddings, Clstm, ClstmCache};
pub use layers::{Conv2d, UpConv2};
pub use net::{
    load_checkpoint, save_checkpoint, Arch, CheckpointHeader, CompletionNet, Modality, NetConfig,
};
pub use unet::Unet;

/// Floating-point scalar usable by the layers.
pub trait Real:
    Float + FromPrimitive + NumAssign + LinalgScalar + ScalarOperand + Send + Sync + Debug + Default + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One named parameter tensor stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    pub info: Vec<ParamInfo>,
    pub values: Vec<Array1<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            info: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Array1<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.info.push(ParamInfo {
            name: name.into(),
            shape,
        });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-uniform initialization: U(-b, b) with `b = sqrt(6 / fan_in)`.
    pub fn add_he(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let v = Array1::from_shape_fn(n, |_| real::<T>(rng.random_range(-bound..bound)));
        self.add(name, shape, v)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, Array1::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn vec(&self, id: ParamId) -> &Array1<T> {
        &self.values[id.0]
    }

    /// The parameter viewed as `shape[0] x rest`.
    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, T> {
        let rows = self.info[id.0].shape[0];
        let v = &self.values[id.0];
        v.view().into_shape_with_order((rows, v.len() / rows)).expect("contiguous")
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads(self.values.iter().map(|v| Array1::zeros(v.len())).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            info: self.info.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero)))
                .collect(),
        }
    }
}

/// Gradient accumulators parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T>(pub Vec<Array1<T>>);

impl<T: Real> Grads<T> {
    pub fn vec_mut(&mut self, id: ParamId) -> &mut Array1<T> {
        &mut self.0[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId, rows: usize) -> ArrayViewMut2<'_, T> {
        let v = &mut self.0[id.0];
        let cols = v.len() / rows;
        v.view_mut().into_shape_with_order((rows, cols)).expect("contiguous")
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.0 {
            g.fill(T::zero());
        }
    }
}

/// Adam optimizer with the usual bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array1<T>>,
    v: Vec<Array1<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = params.zero_grads().0;
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let (b1, b2) = (real::<T>(self.beta1), real::<T>(self.beta2));
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = real::<T>(self.lr * c2.sqrt() / c1);
        let eps = real::<T>(self.eps * c2.sqrt());
        for ((p, g), (m, v)) in params
            .values
            .iter_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_bounds_and_determinism() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let ida = a.add_he("w", vec![4, 27], 27, &mut ChaCha8Rng::seed_from_u64(1));
        b.add_he("w", vec![4, 27], 27, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.values, b.values);
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(a.vec(ida).iter().all(|v| v.abs() <= bound));
        assert_eq!(a.mat(ida).dim(), (4, 27));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", vec![2], Array1::from(vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..2000 {
            let mut g = ps.zero_grads();
            *g.vec_mut(id) = ps.vec(id).mapv(|x| 2.0 * (x - 1.0));
            opt.update(&mut ps, &g);
        }
        assert!(ps.vec(id).iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", vec![1], Array1::from(vec![0.0]));
        let mut opt = Adam::new(&ps, 0.01);
        let mut g = ps.zero_grads();
        g.vec_mut(id)[0] = 123.0;
        opt.update(&mut ps, &g);
        assert!((ps.vec(id)[0] + 0.01).abs() < 1e-9);
    }
}

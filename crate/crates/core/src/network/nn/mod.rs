//! Minimal dense-tensor layer library with hand-written backward passes.
//!
//! Everything is generic over [`Scalar`] so gradient checks run in f64 while
//! training runs in f32. Layers register their parameters in a central
//! [`ParamStore`]; forward passes push saved activations onto a LIFO
//! [`Tape`] that the matching backward pass pops in reverse order.

pub mod layers;
pub mod ops;
pub mod optim;
pub mod unet;

use ndarray::{ArrayD, NdFloat};
use rand_chacha::ChaCha8Rng;

/// Element type usable by the layer stack.
pub trait Scalar: NdFloat + Send + Sync + 'static {
    #[allow(clippy::too_many_arguments)]
    /// Raw gemm on row-major buffers: `c = alpha * a.dot(b) + beta * c`.
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        Self::from(v).unwrap()
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Index of a parameter tensor within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Central registry of named parameter tensors and their gradients.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    grads: Vec<ArrayD<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(grad);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(F::zero());
        }
    }

    /// Flatten all parameter values in registration order.
    pub fn flatten_values(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n_elements());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Overwrite all parameters from a flat buffer (inverse of
    /// [`Self::flatten_values`]).
    pub fn load_flat(&mut self, flat: &[F]) {
        let mut off = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = flat[off];
                off += 1;
            }
        }
        assert_eq!(off, flat.len(), "flat buffer length mismatch");
    }

    /// Convert every parameter to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64(x.to_f64().unwrap())))
                .collect(),
            grads: self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// LIFO store of activations saved by forward passes.
///
/// Each layer pushes in forward order and pops in exactly reversed order in
/// its backward pass; composite modules run their children's backwards in
/// reverse, so the discipline holds globally.
#[derive(Debug, Default)]
pub struct Tape<F: Scalar> {
    stack: Vec<ArrayD<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { stack: Vec::new() }
    }

    pub fn push(&mut self, a: ArrayD<F>) {
        self.stack.push(a);
    }

    pub fn pop(&mut self) -> ArrayD<F> {
        self.stack.pop().expect("tape underflow: backward order does not mirror forward")
    }

    pub fn is_balanced(&self) -> bool {
        self.stack.is_empty()
    }
}

/// Uniform Kaiming-style init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn kaiming_uniform<F: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<F> {
    use rand::Rng;
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| F::from_f64(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn store_roundtrip_flat() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.register("a", ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let b = ps.register("b", ArrayD::from_elem(IxDyn(&[3]), -0.5));
        let flat = ps.flatten_values();
        assert_eq!(flat.len(), 7);
        let mut ps2 = ps.clone();
        ps2.value_mut(a).fill(0.0);
        ps2.value_mut(b).fill(0.0);
        ps2.load_flat(&flat);
        assert_eq!(ps2.value(a), ps.value(a));
        assert_eq!(ps2.value(b), ps.value(b));
    }

    #[test]
    fn cast_preserves_values() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("w", ArrayD::from_elem(IxDyn(&[2]), 0.25f32));
        let ps64 = ps.cast::<f64>();
        assert_eq!(ps64.value(ParamId(0))[[0]], 0.25f64);
    }
}

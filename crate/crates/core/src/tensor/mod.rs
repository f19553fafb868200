//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable op records a backward closure that is itself written
//! in terms of differentiable ops. Running [`grad`] with `create_graph = true`
//! therefore yields gradients that carry their own graph nodes, which is what
//! a gradient penalty needs to be optimized with respect to critic weights.

mod autograd;
mod conv;
mod linalg;
mod ops;
pub mod par;

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use autograd::{finite_difference_gradient, grad};
pub use conv::{inject_conv_backward_sign_flip, Conv2dGeometry};
pub use ops::Activation;

/// Storage precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }
}

/// Floating point element type a [`Tensor`] can hold.
pub trait Element:
    Float + FromPrimitive + Default + Send + Sync + Sum + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a * b + beta * c` for strided row/column-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, a_strides) as usize <= a.len(), "gemm: a too short");
                assert!(span(k, n, b_strides) as usize <= b.len(), "gemm: b too short");
                assert!(span(m, n, c_strides) as usize <= c.len(), "gemm: c too short");
                // SAFETY: the asserts above bound every strided access.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Whether ops on this thread currently record graph nodes.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched to `enabled`, restoring the
/// previous mode afterwards (also on panic).
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

pub(crate) struct GradFn<T: Element> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// An immutable N-dimensional array, optionally attached to a gradient graph.
///
/// Cloning is cheap (reference counted). Parameters are replaced, never mutated:
/// an optimizer step builds fresh leaf tensors.
pub struct Tensor<T: Element> {
    node: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape);
        if self.numel() <= 16 {
            d.field("data", &self.node.data);
        }
        if let Some(gf) = &self.node.grad_fn {
            d.field("op", &gf.name);
        }
        d.field("requires_grad", &self.node.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn make(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// A constant tensor. Fails if `data.len()` does not match `shape`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self::make(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Constant built from `f64` values, converted to `T`.
    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub(crate) fn constant(data: Vec<T>, shape: Vec<usize>) -> Self {
        Self::make(shape, Rc::new(data), false, None)
    }

    /// A differentiable leaf (parameter or input under differentiation).
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.into_leaf(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::constant(vec![value; numel_of(shape)], shape.to_vec())
    }

    /// Rank-0 constant.
    pub fn scalar(value: T) -> Self {
        Self::constant(vec![value], Vec::new())
    }

    /// Fresh leaf sharing this tensor's values, with the given grad flag.
    pub fn into_leaf(self, requires_grad: bool) -> Self {
        Self::make(self.node.shape.clone(), Rc::clone(&self.node.data), requires_grad, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        self.clone().into_leaf(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it is a graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NonScalarOutput(self.shape().to_vec()));
        }
        Ok(self.node.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.node.data)
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<T>> {
        self.node.grad_fn.as_ref()
    }

    /// Builds the result of an op. A graph node is attached only when
    /// recording is enabled and some input requires grad.
    pub(crate) fn from_op<F>(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Self
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        Self::from_shared_op(Rc::new(data), shape, name, inputs, backward)
    }

    pub(crate) fn from_shared_op<F>(
        data: Rc<Vec<T>>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Self
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        let record = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = record.then(|| GradFn {
            name,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Self::make(shape, data, record, grad_fn)
    }
}

impl<T: Element> GradFn<T> {
    pub(crate) fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }
}

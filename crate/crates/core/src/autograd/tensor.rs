use std::fmt;
use std::rc::Rc;

use super::meter::{self, Allocation, Category};
use super::tape::Tape;
use super::TensorError;

/// Metered f32 payload.
pub struct Buffer {
    data: Vec<f32>,
    alloc: Allocation,
}

impl Buffer {
    pub fn new(data: Vec<f32>, category: Category) -> Self {
        let alloc = Allocation::new(category, data.len() * std::mem::size_of::<f32>());
        Buffer { data, alloc }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn category(&self) -> Category {
        self.alloc.category()
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone(), self.alloc.category())
    }
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer").field("len", &self.data.len()).field("category", &self.alloc.category()).finish()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
    pub(crate) generation: u64,
}

/// Dense row-major f32 tensor. Cloning shares the payload.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Buffer>,
    node: Option<NodeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor::from_vec_unchecked(shape.to_vec(), data))
    }

    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data: Rc::new(Buffer::new(data, meter::current_category())), node: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Buffer>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn with_category(shape: &[usize], data: Vec<f32>, category: Category) -> Result<Self, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(Buffer::new(data, category)), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec_unchecked(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor::from_vec_unchecked(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::from_vec_unchecked(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.data().len()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<f32>()
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.data().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape.clone() });
        }
        Ok(self.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Tape-node id when the tensor is recorded.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same payload, no tape node.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Bitwise payload and shape equality.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data().len() == other.data().len()
            && self.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn category(&self) -> Category {
        self.data.category()
    }

    pub(crate) fn buffer(&self) -> &Rc<Buffer> {
        &self.data
    }

    pub(crate) fn node(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn buffer_mut(&mut self) -> &mut Buffer {
        Rc::make_mut(&mut self.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

//! Dense-tensor reverse-mode autodiff core.
//!
//! Just enough machinery for the segmentation networks: CHW tensors, a flat
//! named parameter store, a tape-style [`Graph`] over a fixed op set, Adam,
//! and a finite-difference gradient checker. Training runs in `f32`; the
//! checker runs the same graphs in `f64`.

mod adam;
mod check;
mod graph;

pub use adam::{adam_step, AdamParams, AdamState};
pub use check::{central_difference, compare_against_fd, grad_check, CheckOptions, GradCheckReport};
pub use graph::{masked_bce_value, masked_dice_value, Graph, Gradients, NodeId, Op, DICE_EPSILON};

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("duplicate parameter slot name {0}")]
    DuplicateSlot(String),
    #[error("unknown parameter slot {0}")]
    UnknownSlot(String),
    #[error("graph state: {0}")]
    GraphState(String),
    #[error("invalid operation: {0}")]
    InvalidOp(String),
}

/// Scalar type the engine is generic over; implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense CHW tensor. A scalar is `(1, 1, 1)`; flat vectors are `(1, 1, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != channels * height * width {
            return Err(NnError::ShapeMismatch(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("tensor construction"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn scalar(v: T) -> Self {
        Self { channels: 1, height: 1, width: 1, data: vec![v] }
    }

    pub fn flat(data: Vec<T>) -> Result<Self, NnError> {
        let n = data.len();
        Self::new(1, 1, n, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// One channel plane as a `height * width` slice.
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Identifier of one named slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub(crate) usize);

/// One named flat parameter array plus its logical dims (e.g. a conv kernel
/// is `[c_out, c_in, k, k]`, a bias `[c_out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Named flat learnable-parameter storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new(), index: HashMap::new() }
    }

    pub fn add_slot(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        data: Vec<T>,
    ) -> Result<SlotId, NnError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateSlot(name));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(NnError::ShapeMismatch(format!(
                "slot {name}: data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("parameter slot"));
        }
        let id = SlotId(self.slots.len());
        self.index.insert(name.clone(), id.0);
        self.slots.push(Slot { name, dims, data });
        Ok(id)
    }

    pub fn slot(&self, id: SlotId) -> &Slot<T> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: SlotId) -> &mut Slot<T> {
        &mut self.slots[id.0]
    }

    /// Two distinct slots borrowed mutably at once (conv weight + bias).
    pub fn pair_mut(&mut self, a: SlotId, b: SlotId) -> (&mut Slot<T>, &mut Slot<T>) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct slots");
        if a.0 < b.0 {
            let (lo, hi) = self.slots.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.slots.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn lookup(&self, name: &str) -> Result<SlotId, NnError> {
        self.index
            .get(name)
            .map(|&i| SlotId(i))
            .ok_or_else(|| NnError::UnknownSlot(name.to_string()))
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn total_count(&self) -> usize {
        self.slots.iter().map(|s| s.data.len()).sum()
    }

    /// Same slot names and dims, all values zero.
    pub fn zeros_like(&self) -> Self {
        let slots: Vec<Slot<T>> = self
            .slots
            .iter()
            .map(|s| Slot { name: s.name.clone(), dims: s.dims.clone(), data: vec![T::zero(); s.data.len()] })
            .collect();
        Self { slots, index: self.index.clone() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    dims: s.dims.clone(),
                    data: s.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that `other` has identical slot layout.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|(a, b)| a.name == b.name && a.dims == b.dims && a.data.len() == b.data.len())
    }
}

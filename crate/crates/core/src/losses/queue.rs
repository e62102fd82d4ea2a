use candle_core::{Device, Tensor};

use crate::error::{CmidError, Result};

/// Fixed-capacity FIFO of teacher keys. Slots are overwritten oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    buffer: Vec<f32>,
    cursor: usize,
    filled: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue needs positive capacity and width");
        Self {
            capacity,
            dim,
            buffer: vec![0.0; capacity * dim],
            cursor: 0,
            filled: 0,
        }
    }

    pub fn from_parts(
        capacity: usize,
        dim: usize,
        buffer: Vec<f32>,
        cursor: usize,
        filled: usize,
    ) -> Result<Self> {
        if buffer.len() != capacity * dim || cursor >= capacity.max(1) || filled > capacity {
            return Err(CmidError::Checkpoint("inconsistent queue state".into()));
        }
        Ok(Self {
            capacity,
            dim,
            buffer,
            cursor,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn buffer(&self) -> &[f32] {
        &self.buffer
    }

    pub fn row(&self, slot: usize) -> &[f32] {
        &self.buffer[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Writes each key at the cursor and advances it modulo the capacity.
    pub fn enqueue(&mut self, keys: &[Vec<f32>]) -> Result<()> {
        if let Some(bad) = keys.iter().find(|k| k.len() != self.dim) {
            return Err(CmidError::Shape(format!(
                "key width {} does not match queue width {}",
                bad.len(),
                self.dim
            )));
        }
        for key in keys {
            let start = self.cursor * self.dim;
            self.buffer[start..start + self.dim].copy_from_slice(key);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    pub fn enqueue_tensor(&mut self, keys: &Tensor) -> Result<()> {
        let rows = keys.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
        self.enqueue(&rows)
    }

    /// Stored keys from oldest to newest.
    pub fn ordered(&self) -> Vec<Vec<f32>> {
        let start = if self.filled < self.capacity { 0 } else { self.cursor };
        (0..self.filled)
            .map(|i| self.row((start + i) % self.capacity).to_vec())
            .collect()
    }

    /// Filled rows as a `len x dim` tensor (storage order), or `None` when
    /// empty.
    pub fn keys(&self, device: &Device) -> Result<Option<Tensor>> {
        if self.filled == 0 {
            return Ok(None);
        }
        let data = self.buffer[..self.filled * self.dim].to_vec();
        Ok(Some(Tensor::from_vec(data, (self.filled, self.dim), device)?))
    }
}

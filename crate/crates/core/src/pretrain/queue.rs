use spmm_nn::Tensor;

/// Fixed-capacity FIFO of feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    len: usize,
    /// Next slot to overwrite.
    cursor: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FeatureQueue {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, rows: &Tensor) {
        assert_eq!(rows.cols(), self.dim, "queue feature width");
        if self.capacity == 0 {
            return;
        }
        for r in 0..rows.rows() {
            let c = self.cursor;
            self.data[c * self.dim..(c + 1) * self.dim].copy_from_slice(rows.row(r));
            self.cursor = (c + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
    }

    /// Stored rows, oldest first.
    pub fn features(&self) -> Tensor {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity.max(1);
            out.extend_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]);
        }
        Tensor::from_vec(self.len, self.dim, out)
    }

    /// `(capacity, dim, len, cursor)` and the raw buffer, for checkpoints.
    pub fn to_parts(&self) -> ([usize; 4], Tensor) {
        (
            [self.capacity, self.dim, self.len, self.cursor],
            Tensor::from_vec(self.capacity, self.dim, self.data.clone()),
        )
    }

    pub fn from_parts(meta: [usize; 4], buffer: Tensor) -> Option<Self> {
        let [capacity, dim, len, cursor] = meta;
        let ok = buffer.shape() == (capacity, dim) && len <= capacity && (cursor < capacity || capacity == 0);
        ok.then(|| FeatureQueue {
            capacity,
            dim,
            data: buffer.into_data(),
            len,
            cursor,
        })
    }
}

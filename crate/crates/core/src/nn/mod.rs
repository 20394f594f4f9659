//! Small neural-network building blocks shared by both correction stages.

pub mod cnn;
pub mod mlp;

/// Adam optimizer over a list of flat parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update; `params[i]` and `grads[i]` have matching lengths.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= step_size * *mi / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }

    /// Clears the moment estimates (used after rolling back to a snapshot).
    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.fill(0.0);
        }
    }
}

/// Per-feature affine standardization `z = (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Mean / standard deviation of each column of a row-major `rows × cols` table.
    pub fn fit(data: &[f64], cols: usize) -> Self {
        let rows = data.len() / cols;
        let mut shift = vec![0.0; cols];
        for row in data.chunks_exact(cols) {
            for (s, &v) in shift.iter_mut().zip(row) {
                *s += v;
            }
        }
        shift.iter_mut().for_each(|s| *s /= rows as f64);
        let mut var = vec![0.0; cols];
        for row in data.chunks_exact(cols) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&shift) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift, scale }
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            shift: vec![0.0; cols],
            scale: vec![1.0; cols],
        }
    }

    pub fn forward(&self, data: &[f64]) -> Vec<f64> {
        let cols = self.shift.len();
        data.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.shift[i % cols]) / self.scale[i % cols])
            .collect()
    }

    pub fn inverse(&self, data: &[f64]) -> Vec<f64> {
        let cols = self.shift.len();
        data.iter()
            .enumerate()
            .map(|(i, &v)| v * self.scale[i % cols] + self.shift[i % cols])
            .collect()
    }
}

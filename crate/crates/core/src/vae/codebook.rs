use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K x d` table of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    embeddings: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    /// Codebook rows gathered by `indices`, shaped like the input.
    pub quantized: Tensor,
    /// `mean(sg(Z) - q)^2 + beta * mean(Z - sg(q))^2`, evaluated.
    pub commit_loss: f64,
}

impl Codebook {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        let [k, d] = embeddings.shape() else {
            return Err(Error::shape(
                "codebook",
                format!("expected [K, d], got {:?}", embeddings.shape()),
            ));
        };
        if *k < 2 || *d == 0 {
            return Err(Error::invalid(format!("codebook needs K >= 2 and d >= 1, got [{k}, {d}]")));
        }
        Ok(Codebook { embeddings })
    }

    pub(crate) fn from_slice(values: &[f32], d: usize) -> Result<Self> {
        let k = if d == 0 { 0 } else { values.len() / d };
        Codebook::new(Tensor::new(&[k, d], values.to_vec())?)
    }

    pub fn size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f32] {
        self.embeddings.row(k)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Row-normalized copy; a zero row has no direction and is an error.
    pub fn normalized(&self) -> Result<Vec<Vec<f32>>> {
        (0..self.size())
            .map(|k| {
                let row = self.row(k);
                let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid(format!("codebook row {k} has zero norm")));
                }
                Ok(row.iter().map(|v| (*v as f64 / norm) as f32).collect())
            })
            .collect()
    }

    /// Index of the closest row by squared distance, lowest index on ties.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self
                .row(k)
                .iter()
                .zip(z)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub(crate) fn nearest_all(&self, z: &[f32]) -> Vec<usize> {
        z.chunks(self.dim()).map(|row| self.nearest(row)).collect()
    }
}

/// Nearest-neighbour quantization of the rows of `z` (`[n, d]`).
pub fn quantize(z: &Tensor, cb: &Codebook, beta: f64) -> Result<QuantizeResult> {
    match z.shape() {
        [_, d] if *d == cb.dim() => {}
        s => {
            return Err(Error::shape(
                "quantize",
                format!("features {s:?} against codebook dim {}", cb.dim()),
            ))
        }
    }
    let indices = cb.nearest_all(z.data());
    let quantized = dequantize(&indices, cb)?;
    let sq: f64 = z
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / z.numel().max(1) as f64;
    Ok(QuantizeResult {
        indices,
        quantized,
        commit_loss: (1.0 + beta) * sq,
    })
}

/// Gathers codebook rows into an `[n, d]` grid.
pub fn dequantize(indices: &[usize], cb: &Codebook) -> Result<Tensor> {
    let mut out = Vec::with_capacity(indices.len() * cb.dim());
    for &i in indices {
        if i >= cb.size() {
            return Err(Error::TokenOutOfRange {
                token: i,
                vocab: cb.size(),
            });
        }
        out.extend_from_slice(cb.row(i));
    }
    Tensor::new(&[indices.len(), cb.dim()], out)
}

use super::EmbeddingError;

/// Unit-norm embedding. Construction normalizes and rejects degenerate input.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub const MIN_DIM: usize = 2;

    /// L2-normalizes `values`.
    pub fn normalized(values: &[f32]) -> Result<Self, EmbeddingError> {
        let as_f64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        Self::from_f64(&as_f64)
    }

    /// L2-normalizes `values` in double precision and stores the result as f32.
    pub fn from_f64(values: &[f64]) -> Result<Self, EmbeddingError> {
        if values.len() < Self::MIN_DIM {
            return Err(EmbeddingError::BadVector(format!("dim {} < {}", values.len(), Self::MIN_DIM)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::BadVector("non-finite component".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::BadVector("zero vector".into()));
        }
        Ok(Self { values: values.iter().map(|v| (v / norm) as f32).collect() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

use crate::error::{Error, Result};

/// Dense row-major float32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one dimension".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("zero dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        })
    }

    pub fn from_vec(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("tensor values must be finite".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.values
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row width for a 2-D tensor; the full length for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.values.len() / self.shape[0]
        } else {
            self.values.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f32) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[]), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::from_vec(&[2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(Tensor::from_vec(&[1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn rows_and_cols() {
        let t = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.row(1), &[4., 5., 6.]);
        assert_eq!(t.cols(), 3);
        assert_eq!(Tensor::zeros(&[5]).unwrap().cols(), 5);
    }
}

use rand::Rng;

/// Dense fp64 n-dimensional array.
///
/// `values.len()` always equals the product of `shape`. A scalar is
/// represented as shape `[1]`. `grad`, when present, has the same length
/// as `values`; the trainer fills it from accumulated batch gradients
/// before an optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "tensor shape {:?} implies {} values, got {}",
            shape,
            numel,
            values.len()
        );
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {:?}",
            shape
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor::new(vec![values.len()], values)
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(1 / fan_in),
    /// marked trainable.
    pub fn glorot<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        let mut t = Tensor::new(shape, values);
        t.requires_grad = true;
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar contents; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_value_length_checked() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "implies 6 values")]
    fn mismatched_length_panics() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn scalar_roundtrip() {
        assert_eq!(Tensor::scalar(4.25).item(), 4.25);
    }
}

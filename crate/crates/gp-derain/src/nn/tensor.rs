use crate::error::{Error, Result};

/// Tensor layout: either a channels-first image block or a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// (channels, height, width), row-major within each channel.
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn count(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Chw(c, h, w) => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(n) => write!(f, "[{n}]"),
        }
    }
}

/// Dense f64 tensor. Plain data; gradients live on the tape, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.count() != values.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction".into(),
                expected: format!("{} values for {shape}", shape.count()),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            values: vec![0.0; shape.count()],
        }
    }

    pub fn flat(values: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Flat(values.len()),
            values,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same data under a different shape with equal element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.values.clone())
    }
}

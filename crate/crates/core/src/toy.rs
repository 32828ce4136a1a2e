//! Single-weight model whose loss is a lookup over quantized codes.
//!
//! Because the loss depends on `Q(w)` only, the toy isolates the optimizer
//! dynamics the lockstep bounds talk about, with no data noise.

use crate::bisim::{Evaluation, Model, TensorView, TensorViewMut};
use crate::error::{Error, Result};
use crate::estimator::EstimatorSpec;
use crate::quantizer::QuantizerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarToy {
    pub weight: [f64; 1],
    pub quantizer: QuantizerConfig,
    pub estimator: EstimatorSpec,
    /// Loss per code, indexed from the lowest code.
    pub loss_by_code: Vec<f64>,
    /// `∂loss/∂Q(w)` per code.
    pub grad_by_code: Vec<f64>,
}

impl ScalarToy {
    pub fn new(
        w0: f64,
        quantizer: QuantizerConfig,
        estimator: EstimatorSpec,
        loss_by_code: Vec<f64>,
        grad_by_code: Vec<f64>,
    ) -> Result<Self> {
        quantizer.validate()?;
        estimator.validate()?;
        let codes = quantizer.code_values().len();
        if loss_by_code.len() != codes || grad_by_code.len() != codes {
            return Err(Error::Shape(format!(
                "lookup tables need {codes} entries, got {} and {}",
                loss_by_code.len(),
                grad_by_code.len()
            )));
        }
        Ok(Self {
            weight: [w0],
            quantizer,
            estimator,
            loss_by_code,
            grad_by_code,
        })
    }

    /// `½(Q(w) - target)²` tabulated over the codes, with its derivative.
    pub fn quadratic(
        w0: f64,
        target: f64,
        quantizer: QuantizerConfig,
        estimator: EstimatorSpec,
    ) -> Result<Self> {
        let values = quantizer.code_values();
        let loss = values.iter().map(|q| 0.5 * (q - target).powi(2)).collect();
        let grad = values.iter().map(|q| q - target).collect();
        Self::new(w0, quantizer, estimator, loss, grad)
    }

    fn index(&self) -> Result<usize> {
        let q = &self.quantizer;
        let c = q
            .code(self.weight[0])
            .map_err(|e| Error::Diverged(e.to_string()))?;
        Ok(if q.binary {
            usize::from(c > 0)
        } else {
            (c - q.l) as usize
        })
    }
}

impl Model for ScalarToy {
    type Batch = ();

    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![TensorView {
            values: &self.weight[..],
            quant: Some((&self.quantizer, &self.estimator)),
        }]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![TensorViewMut {
            values: &mut self.weight[..],
            estimator: Some(&mut self.estimator),
        }]
    }

    fn evaluate(&self, _: &()) -> Result<Evaluation> {
        let i = self.index()?;
        Ok(Evaluation {
            loss: self.loss_by_code[i],
            grads: vec![vec![self.grad_by_code[i]]],
        })
    }
}

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::var::Var;

/// A model's parameters: named layer tensors in a fixed, architecture-defined
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    layers: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(layers: Vec<(String, Tensor)>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[(String, Tensor)] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.layers[i].1
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// All parameters as one vector, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in &self.layers {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_params() {
            return Err(TensorError::BadElementCount {
                shape: vec![self.num_params()],
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (name, t) in &self.layers {
            let n = t.numel();
            layers.push((
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            ));
            offset += n;
        }
        Ok(ParamSet { layers })
    }

    /// Same names and shapes, new tensors.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<ParamSet> {
        if tensors.len() != self.layers.len() {
            return Err(TensorError::Invalid(format!(
                "expected {} layer tensors, got {}",
                self.layers.len(),
                tensors.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(tensors)
            .map(|((name, old), new)| {
                old.same_shape(&new, "with_tensors")?;
                Ok((name.clone(), new))
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet { layers })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros_like(t)))
                .collect(),
        }
    }

    /// Differentiable leaves, one per layer.
    pub fn to_leaves(&self) -> Vec<Var> {
        self.tensors().map(|t| Var::leaf(t.clone())).collect()
    }

    pub fn to_constants(&self) -> Vec<Var> {
        self.tensors().map(|t| Var::constant(t.clone())).collect()
    }

    pub fn from_vars(&self, vars: &[Var]) -> Result<ParamSet> {
        self.with_tensors(vars.iter().map(|v| v.value().clone()).collect())
    }

    /// `self += alpha * other`, layer by layer.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for ((_, a), (_, b)) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * alpha)))
                .collect(),
        }
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        self.tensors().zip(other.tensors()).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.tensors()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        self.tensors()
            .zip(other.tensors())
            .try_fold(0.0f64, |acc, (a, b)| Ok(acc.max(a.max_abs_diff(b)?)))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|((na, a), (nb, b))| na != nb || a.shape() != b.shape())
        {
            return Err(TensorError::Invalid(
                "parameter sets have different layouts".into(),
            ));
        }
        Ok(())
    }
}

//! Named trainable parameters and flat parameter collections.

use rand::RngCore;

use super::{Element, Tensor};
use crate::{rng, Error, Result};

/// A trainable tensor with a unique dotted path, e.g.
/// `"global.3.msa.head0.wq"`.
#[derive(Clone)]
pub struct Parameter<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
}

/// Flat list of parameters in a fixed construction order. Names are unique;
/// the order is what optimizers and checkpoints key on.
pub struct ParamSet<E: Element> {
    params: Vec<Parameter<E>>,
}

/// Plain-value image of a parameter set; `Send`, so it can cross threads or
/// be written to a checkpoint.
pub type Snapshot<E> = Vec<(String, Vec<usize>, Vec<E>)>;

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        ParamSet { params: Vec::new() }
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        let name = name.into();
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(true);
        self.params.push(Parameter { name, tensor });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<E>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn snapshot(&self) -> Snapshot<E> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape(), p.tensor.value()))
            .collect()
    }

    /// Loads values by name. Every entry must match an existing parameter in
    /// name and shape, and every parameter must be covered.
    pub fn restore(&self, snapshot: &Snapshot<E>) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Format(format!(
                "snapshot has {} parameters, model has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (name, shape, data) in snapshot {
            let p = self.get(name).ok_or_else(|| {
                Error::Format(format!("snapshot parameter {name} not in model"))
            })?;
            if &p.tensor.shape() != shape {
                return Err(Error::Format(format!(
                    "snapshot parameter {name}: shape {:?} != model {:?}",
                    shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_value(data.clone());
        }
        Ok(())
    }
}

/// Xavier/Glorot uniform init for a [fan_in, fan_out] projection.
pub fn xavier_uniform<E: Element>(
    rng: &mut impl RngCore,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<E> = (0..fan_in * fan_out)
        .map(|_| E::from_f64(rng::uniform(rng, -bound, bound)))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("xavier shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut set = ParamSet::<f32>::new();
        set.push("w", Tensor::zeros(&[2]));
        set.push("w", Tensor::zeros(&[2]));
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut set = ParamSet::<f32>::new();
        set.push("a", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        set.push("b", Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let snap = set.snapshot();

        set.get("a").unwrap().tensor.set_value(vec![9.0, 9.0]);
        set.restore(&snap).unwrap();
        assert_eq!(set.get("a").unwrap().tensor.value(), vec![1.0, 2.0]);

        let mut other = ParamSet::<f32>::new();
        other.push("a", Tensor::zeros(&[2]));
        assert!(other.restore(&snap).is_err());
    }

    #[test]
    fn params_require_grad() {
        let mut set = ParamSet::<f32>::new();
        set.push("w", Tensor::zeros(&[4]));
        assert!(set.get("w").unwrap().tensor.requires_grad());
        assert_eq!(set.numel(), 4);
    }

    #[test]
    fn xavier_bound_respected() {
        let mut r = rng::from_seed(1);
        let t = xavier_uniform::<f32>(&mut r, 8, 8);
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(t.value().iter().all(|v| v.abs() <= bound));
    }
}

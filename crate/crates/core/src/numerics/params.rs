use indexmap::IndexMap;
use rand::Rng;

use super::matrix::Real;
use crate::error::{Error, Result};

/// Read access to named parameter tensors, shared by the live store and its target copy.
pub trait ParamSource<T> {
    fn lookup(&self, name: &str) -> Option<(&[usize], &[T])>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

/// Named, shaped, differentiable parameters with gradient accumulators.
///
/// Entries keep insertion order, which fixes the checkpoint layout and the
/// optimizer's iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T = f32> {
    entries: IndexMap<String, Param<T>>,
    pub step_count: u64,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<T>) -> Result<()> {
        let size: usize = shape.iter().product();
        if size != value.len() {
            return Err(Error::dim(name, size, value.len()));
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            Param {
                shape,
                grad: vec![T::zero(); value.len()],
                value,
            },
        );
        Ok(())
    }

    /// Registers a `(out, in)` weight and `(out)` bias pair under `name.w` / `name.b`.
    /// Weights are uniform in ±1/√fan_in, biases start at zero.
    pub fn add_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = if input == 0 { 0.0 } else { 1.0 / (input as f64).sqrt() };
        let weights = (0..input * output)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        self.insert(&format!("{name}.w"), vec![output, input], weights)?;
        self.insert(&format!("{name}.b"), vec![output], vec![T::zero(); output])
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale · grads` into the accumulators. Unknown names are an error.
    pub fn accumulate<U: Real>(&mut self, grads: &Gradients<U>, scale: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self.get_mut(name)?;
            if p.grad.len() != g.len() {
                return Err(Error::dim(name, p.grad.len(), g.len()));
            }
            for (acc, v) in p.grad.iter_mut().zip(g) {
                *acc += T::from_f64_lossy(v.to_f64_lossy() * scale);
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Copy with every value converted to another scalar type; grads are reset.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    Param {
                        shape: p.shape.clone(),
                        value: p.value.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                        grad: vec![U::zero(); p.value.len()],
                    },
                )
            })
            .collect();
        ParameterStore {
            entries,
            step_count: self.step_count,
        }
    }

    /// Overwrites every value with a uniform draw in `[-scale, scale]`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for p in self.entries.values_mut() {
            for v in &mut p.value {
                *v = T::from_f64_lossy(rng.gen_range(-scale..=scale));
            }
        }
    }

    /// Flattened coordinate access used by finite differences.
    pub fn coordinates(&self) -> Vec<(String, usize)> {
        self.entries
            .iter()
            .flat_map(|(k, p)| (0..p.value.len()).map(move |i| (k.clone(), i)))
            .collect()
    }
}

impl<T> ParamSource<T> for ParameterStore<T> {
    fn lookup(&self, name: &str) -> Option<(&[usize], &[T])> {
        self.entries
            .get(name)
            .map(|p| (p.shape.as_slice(), p.value.as_slice()))
    }
}

/// Values-only copy of a [`ParameterStore`] tracked by Polyak averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStore<T = f32> {
    entries: IndexMap<String, (Vec<usize>, Vec<T>)>,
}

impl<T: Real> TargetStore<T> {
    pub fn from_store(source: &ParameterStore<T>) -> Self {
        Self {
            entries: source
                .iter()
                .map(|(k, p)| (k.to_string(), (p.shape.clone(), p.value.clone())))
                .collect(),
        }
    }

    pub fn values(&self, name: &str) -> Option<&[T]> {
        self.entries.get(name).map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// `θ′ := (1−ρ)θ′ + ρθ` for every entry.
    pub fn polyak_update(&mut self, source: &ParameterStore<T>, rho: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Consistency(format!("polyak coefficient {rho} outside [0, 1]")));
        }
        if self.entries.len() != source.len() || source.names().any(|n| !self.entries.contains_key(n)) {
            return Err(Error::Consistency(
                "target and source parameter names differ".into(),
            ));
        }
        let rho_t = T::from_f64_lossy(rho);
        let keep = T::from_f64_lossy(1.0 - rho);
        for (name, p) in source.iter() {
            let (shape, target) = self.entries.get_mut(name).expect("checked above");
            if *shape != p.shape {
                return Err(Error::dim(name, format!("{shape:?}"), format!("{:?}", p.shape)));
            }
            if rho == 1.0 {
                target.copy_from_slice(&p.value);
            } else if rho > 0.0 {
                for (t, s) in target.iter_mut().zip(&p.value) {
                    *t = keep * *t + rho_t * *s;
                }
            }
        }
        Ok(())
    }

    /// L2 distance to the source values.
    pub fn distance(&self, source: &ParameterStore<T>) -> f64 {
        source
            .iter()
            .filter_map(|(name, p)| self.values(name).map(|t| (t, &p.value)))
            .flat_map(|(t, s)| t.iter().zip(s.iter()))
            .map(|(a, b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl<T> ParamSource<T> for TargetStore<T> {
    fn lookup(&self, name: &str) -> Option<(&[usize], &[T])> {
        self.entries
            .get(name)
            .map(|(s, v)| (s.as_slice(), v.as_slice()))
    }
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    entries: IndexMap<String, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn insert_or_add(&mut self, name: &str, grad: &[T]) {
        match self.entries.get_mut(name) {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += *g;
                }
            }
            None => {
                self.entries.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .map(|g| g.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().flatten().all(|g| *g == T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f32]) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("p", vec![values.len()], values.to_vec()).unwrap();
        s
    }

    #[test]
    fn missing_name_is_an_error() {
        let s = store_with(&[1.0]);
        assert!(matches!(s.get("q"), Err(Error::MissingParameter(_))));
    }

    #[test]
    fn duplicate_and_shape_checks() {
        let mut s = store_with(&[1.0]);
        assert!(matches!(
            s.insert("p", vec![1], vec![0.0]),
            Err(Error::DuplicateParameter(_))
        ));
        assert!(s.insert("q", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn polyak_examples() {
        let source = store_with(&[1.0]);
        let mut target = TargetStore::from_store(&store_with(&[0.0]));
        target.polyak_update(&source, 0.005).unwrap();
        assert!((target.values("p").unwrap()[0] - 0.005).abs() < 1e-9);

        let mut target = TargetStore::from_store(&store_with(&[0.0]));
        target.polyak_update(&source, 0.5).unwrap();
        target.polyak_update(&source, 0.5).unwrap();
        assert_eq!(target.values("p").unwrap()[0], 0.75);

        let mut target = TargetStore::from_store(&store_with(&[0.3]));
        target.polyak_update(&source, 1.0).unwrap();
        assert_eq!(target.values("p").unwrap()[0], 1.0);

        let mut target = TargetStore::from_store(&store_with(&[0.3]));
        target.polyak_update(&source, 0.0).unwrap();
        assert_eq!(target.values("p").unwrap()[0], 0.3);
    }

    #[test]
    fn polyak_rejects_key_mismatch() {
        let mut other = store_with(&[1.0]);
        other.insert("extra", vec![1], vec![0.0]).unwrap();
        let mut target = TargetStore::from_store(&store_with(&[0.0]));
        assert!(matches!(
            target.polyak_update(&other, 0.5),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn polyak_distance_decays_geometrically() {
        let source = store_with(&[1.0, -2.0, 4.0]);
        let mut target = TargetStore::from_store(&store_with(&[0.0, 0.0, 0.0]));
        let rho = 0.1;
        let mut prev = target.distance(&source);
        for _ in 0..20 {
            target.polyak_update(&source, rho).unwrap();
            let d = target.distance(&source);
            assert!((d / prev - (1.0 - rho)).abs() < 1e-5);
            prev = d;
        }
    }
}

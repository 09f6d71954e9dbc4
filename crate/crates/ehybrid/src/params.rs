//! Named parameter storage and seeded initialization.
//!
//! Every tensor a model owns lives here under a unique name: trainable
//! weights and the non-trainable batch-norm running statistics. Each
//! parameter draws its initial values from its own random stream keyed by
//! `(store seed, name)`, so two models that share a layer name initialize
//! that layer identically regardless of what else they contain or in which
//! order layers were registered.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
struct ParamEntry {
    value: Tensor,
    trainable: bool,
}

/// Map from parameter name to tensor, with a frozen initialization seed.
///
/// Iteration is name-sorted, which fixes checkpoint layout and update order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, ParamEntry>,
}

/// Folds the store seed and a parameter name into one stream seed (FNV-1a).
fn stream_seed(seed: u64, name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Draws from a normal with the given std, resampling anything beyond two
/// standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Usage(format!(
                "parameter {name} is already registered"
            )));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
        Ok(())
    }

    /// Registers a trainable kernel initialized with a truncated normal of
    /// std `sqrt(2 / fan_in)`, where `fan_in = C·Kh·Kw` of the kernel shape.
    /// That convention covers dense conv `(C_out, C_in, k, k)`, depthwise
    /// `(C, 1, k, k)` and fully-connected `(K, C, 1, 1)` kernels alike.
    pub fn conv_init(&mut self, name: &str, shape: Shape) -> Result<()> {
        let fan_in = shape.c * shape.h * shape.w;
        if fan_in == 0 {
            return Err(Error::Shape(format!(
                "parameter {name} has zero fan-in shape {shape}"
            )));
        }
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, name));
        let values = (0..shape.count())
            .map(|_| truncated_normal(&mut rng, std))
            .collect();
        self.insert(name, Tensor::from_vec(shape, values)?, true)
    }

    /// Registers a constant-filled tensor (biases, BN affine terms and
    /// running statistics).
    pub fn const_init(
        &mut self,
        name: &str,
        shape: Shape,
        value: f64,
        trainable: bool,
    ) -> Result<()> {
        let t = Tensor::from_vec(shape, vec![value; shape.count()])?;
        self.insert(name, t, trainable)
    }

    /// Registers the four batch-norm tensors under `prefix`: trainable
    /// `gamma` (ones) and `beta` (zeros), non-trainable `running_mean`
    /// (zeros) and `running_var` (ones), all shaped `(1, C, 1, 1)`.
    pub fn bn_init(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let shape = Shape::new(1, channels, 1, 1);
        self.const_init(&format!("{prefix}.gamma"), shape, 1.0, true)?;
        self.const_init(&format!("{prefix}.beta"), shape, 0.0, true)?;
        self.const_init(&format!("{prefix}.running_mean"), shape, 0.0, false)?;
        self.const_init(&format!("{prefix}.running_var"), shape, 1.0, false)
    }

    /// Registers an externally produced tensor (checkpoint restore).
    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        self.insert(name, value, trainable)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.trainable)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a parameter's values in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {}, refusing to store {}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Applies `v <- (1 - momentum)·v + momentum·batch` to a running
    /// statistic.
    pub fn update_running(&mut self, name: &str, batch: &Tensor, momentum: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if entry.trainable {
            return Err(Error::Usage(format!(
                "parameter {name} is trainable, not a running statistic"
            )));
        }
        if entry.value.shape() != batch.shape() {
            return Err(Error::Shape(format!(
                "running stat {name} has shape {}, got update of shape {}",
                entry.value.shape(),
                batch.shape()
            )));
        }
        let data = entry.value.data_mut();
        for (v, b) in data.iter_mut().zip(batch.data()) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
        Ok(())
    }

    /// Name-sorted view of every entry.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.as_str(), &e.value, e.trainable))
    }

    /// Name-sorted trainable names.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over trainable entries.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.shape().count())
            .sum()
    }
}

/// One forward pass worth of tape leaves for a store's parameters.
///
/// Each parameter becomes a tape leaf on first use and is reused afterwards,
/// so the gradient map after `backward` carries one entry per touched
/// parameter, recoverable by name.
pub struct TapeBindings<'s> {
    store: &'s ParamStore,
    vars: HashMap<String, Var>,
}

impl<'s> TapeBindings<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        TapeBindings {
            store,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape leaf for `name`, created on first call. Trainable parameters
    /// request gradients; running statistics do not.
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = tape.leaf(value, self.store.is_trainable(name)?);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Name → leaf map accumulated so far.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.vars
    }
}

//! Named trainable parameters and safetensors checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated to two standard deviations.
    TruncNormal {
        std: f64,
    },
}

/// Parameters keyed by dotted names, in the layout of the reference
/// checkpoints (`(out, in, kh, kw)` convolutions, `(out, in)` linears).
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers (or returns the existing) parameter `name`.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::WeightShape {
                    name: name.into(),
                    expected: shape.to_vec(),
                    found: v.dims().to_vec(),
                });
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut self.rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters from `tensors`. Names absent from the store are
    /// ignored; with `strict`, store entries absent from `tensors` are errors.
    /// Returns the names that were loaded.
    pub fn load_from(
        &self,
        tensors: &HashMap<String, Tensor>,
        strict: bool,
    ) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (name, var) in &self.vars {
            match tensors.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::WeightShape {
                            name: name.clone(),
                            expected: var.dims().to_vec(),
                            found: t.dims().to_vec(),
                        });
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                    loaded.push(name.clone());
                }
                None if strict => return Err(Error::MissingWeight(name.clone())),
                None => {}
            }
        }
        Ok(loaded)
    }

    /// Writes every parameter plus string `metadata` to a safetensors file.
    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let tensors: BTreeMap<&str, &Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_tensor()))
            .collect();
        safetensors::serialize_to_file(tensors, Some(metadata), path)?;
        Ok(())
    }
}

/// Tensors and string metadata of a safetensors file.
pub fn read_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors, metadata))
}

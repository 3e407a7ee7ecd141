//! Optimizer plumbing and tensor/ndarray conversion.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array4};

use crate::error::{Error, Result};

pub fn adamw(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Sums parameter gradients over several backward passes and applies their
/// mean in one optimizer step.
pub struct GradAccumulator {
    vars: Vec<Var>,
    grads: GradStore,
    count: usize,
}

impl GradAccumulator {
    pub fn new(vars: Vec<Var>) -> Self {
        Self {
            vars,
            grads: GradStore::default(),
            count: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Backpropagates `loss` and adds the parameter gradients.
    pub fn accumulate(&mut self, loss: &Tensor) -> Result<()> {
        let mut all = loss.backward()?;
        for v in &self.vars {
            if let Some(g) = all.remove(v.as_tensor()) {
                let g = match self.grads.remove(v.as_tensor()) {
                    Some(prev) => (prev + g)?,
                    None => g,
                };
                self.grads.insert(v.as_tensor(), g.detach());
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Steps `opt` with the mean gradient. No-op when nothing is pending.
    pub fn step<O: Optimizer>(&mut self, opt: &mut O) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        let scale = 1.0 / self.count as f64;
        let mut mean = GradStore::default();
        for v in &self.vars {
            if let Some(g) = self.grads.remove(v.as_tensor()) {
                let g = (g * scale)?;
                let finite = g
                    .abs()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?
                    .is_finite();
                if !finite {
                    return Err(Error::NonFinite("gradients".into()));
                }
                mean.insert(v.as_tensor(), g);
            }
        }
        opt.step(&mean)?;
        self.grads = GradStore::default();
        self.count = 0;
        Ok(())
    }
}

/// Stacks equally sized planes into a `(B, 1, H, W)` tensor.
pub fn batch_from_planes(planes: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w) = planes
        .first()
        .map(|p| p.dim())
        .ok_or(Error::Config("empty batch".into()))?;
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.dim() != (h, w) {
            return Err(Error::Config(format!(
                "batch planes differ in size: {:?} vs {:?}",
                p.dim(),
                (h, w)
            )));
        }
        data.extend(p.iter().copied());
    }
    Ok(Tensor::from_vec(data, (planes.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f32>> {
    let dims = t.dims4()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array4::from_shape_vec(dims, data).expect("element count matches dims"))
}

pub fn array4_to_tensor(a: &Array4<f32>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulated_step_equals_mean_gradient_step() {
        let x1 = Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let x2 = Tensor::new(&[3.0f64, -1.0], &Device::Cpu).unwrap();
        let run = |accumulate: bool| {
            let w = Var::new(&[0.5f64, -0.5], &Device::Cpu).unwrap();
            let mut opt = adamw(vec![w.clone()], 0.1, 0.0).unwrap();
            let loss = |x: &Tensor| {
                (w.as_tensor() * x)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .sqr()
                    .unwrap()
            };
            if accumulate {
                let mut acc = GradAccumulator::new(vec![w.clone()]);
                acc.accumulate(&loss(&x1)).unwrap();
                acc.accumulate(&loss(&x2)).unwrap();
                assert_eq!(acc.pending(), 2);
                acc.step(&mut opt).unwrap();
                assert_eq!(acc.pending(), 0);
            } else {
                let mean = ((loss(&x1) + loss(&x2)).unwrap() * 0.5).unwrap();
                opt.step(&mean.backward().unwrap()).unwrap();
            }
            w.as_tensor().to_vec1::<f64>().unwrap()
        };
        let (a, b) = (run(true), run(false));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn array_round_trip() {
        let a = Array4::from_shape_fn((1, 2, 3, 4), |(_, c, y, x)| (c * 100 + y * 10 + x) as f32);
        let t = array4_to_tensor(&a, DType::F64).unwrap();
        assert_eq!(tensor_to_array4(&t).unwrap(), a);
    }
}

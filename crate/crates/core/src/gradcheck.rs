//! Central finite-difference checks of every training objective in double
//! precision.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{global_contrastive, token_contrastive};
use crate::error::{Error, Result};
use crate::gendec::{distill_logits, lm_loss, Branch, DecoderConfig, ParallelDecoder};
use crate::nn::ParamStore;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one objective's check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// concatenated gradient vector.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rel_error <= TOLERANCE
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares autodiff gradients of `f` with respect to every input against
/// central differences with step [`STEP`].
pub fn check(name: &'static str, inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<GradReport> {
    let vars = inputs
        .iter()
        .map(|t| Var::from_tensor(&t.to_dtype(DType::F64)?))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&ts)?.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let g = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; v.elem_count()],
        };
        analytic.extend(g);
        let base = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let shape = v.as_tensor().shape().clone();
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut x = base.clone();
                x[i] += delta;
                let mut args = ts.clone();
                args[k] = Tensor::from_vec(x, shape.clone(), &Device::Cpu)?;
                Ok(f(&args)?.to_scalar::<f64>()?)
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = l2(&analytic).max(l2(&numeric));
    if !scale.is_finite() {
        return Err(Error::NonFinite(format!("{name} gradient")));
    }
    Ok(GradReport {
        name,
        rel_error: if scale == 0.0 { 0.0 } else { l2(&diff) / scale },
        max_abs_error: diff.iter().fold(0.0f64, |m, d| m.max(d.abs())),
        n_checked: analytic.len(),
    })
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
}

fn unit_rows(rng: &mut ChaCha8Rng, dims: &[usize]) -> Result<Tensor> {
    Ok(crate::nn::l2_normalize(&randn(rng, dims)?)?)
}

fn tiny_decoder(seed: u64) -> Result<ParallelDecoder> {
    let store = ParamStore::new(DType::F64, Device::Cpu, seed);
    let cfg = DecoderConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab_size: 6,
        sum_memory_dim: 8,
        cap_memory_dim: 8,
    };
    ParallelDecoder::new(&store.root().pp("dec"), &cfg)
}

/// Checks of the global contrast, token contrast, both language-modelling
/// objectives (through a small decoder branch) and distillation.
pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, t, v) = (4usize, 8usize, 4usize, 6usize);
    let mut out = Vec::new();

    let tau = Tensor::new(0.5f64, &Device::Cpu)?;
    let xg = unit_rows(&mut rng, &[n, d])?;
    let yg = unit_rows(&mut rng, &[n, d])?;
    out.push(check("global_contrastive", &[xg, yg, tau.clone()], |a| {
        global_contrastive(&a[0], &a[1], &a[2])
    })?);

    let xt = unit_rows(&mut rng, &[n, 3, d])?;
    let zt = unit_rows(&mut rng, &[n, t, d])?;
    let mask = Tensor::new(
        &[[1.0f64, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
        &Device::Cpu,
    )?;
    out.push(check("token_contrastive", &[xt, zt, tau], |a| {
        token_contrastive(&a[0], &a[1], &mask, &a[2])
    })?);

    let dec = tiny_decoder(seed)?;
    let target = Tensor::new(&[[1u32, 3, 5, 2], [4, 0, 2, 0]], &Device::Cpu)?;
    let tmask = Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 0.0]], &Device::Cpu)?;
    let inputs = randn(&mut rng, &[2, t, 8])?;
    let memory = randn(&mut rng, &[2, 3, 8])?;
    let mem_mask = Tensor::new(&[[1.0f64, 1.0, 1.0], [1.0, 1.0, 0.0]], &Device::Cpu)?;
    for (name, branch) in [("summarization", Branch::Summarize), ("captioning", Branch::Caption)] {
        out.push(check(name, &[inputs.clone(), memory.clone()], |a| {
            let o = dec.forward(branch, &a[0], &a[1], &mem_mask)?;
            lm_loss(&o.logits, &target, &tmask)
        })?);
    }

    let teacher = (randn(&mut rng, &[2, t, v])? * 2.0)?;
    let student = (randn(&mut rng, &[2, t, v])? * 2.0)?;
    out.push(check("distillation", &[student], |a| distill_logits(&teacher, &a[0], &tmask))?);
    Ok(out)
}

/// Largest absolute gradient reaching the teacher logits through
/// distillation. Exactly zero when the teacher is detached.
pub fn teacher_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Var::from_tensor(&randn(&mut rng, &[2, 4, 6])?)?;
    let student = Var::from_tensor(&randn(&mut rng, &[2, 4, 6])?)?;
    let mask = Tensor::ones((2, 4), DType::F64, &Device::Cpu)?;
    let loss = distill_logits(teacher.as_tensor(), student.as_tensor(), &mask)?;
    let grads = loss.backward()?;
    match grads.get(teacher.as_tensor()) {
        None => Ok(0.0),
        Some(g) => Ok(g.abs()?.max_all()?.to_scalar::<f64>()?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_objective_passes() {
        for r in run_all(5).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.n_checked > 0);
        }
    }

    #[test]
    fn teacher_gets_no_gradient() {
        assert_eq!(teacher_gradient(1).unwrap(), 0.0);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // sum(x^2) with a custom forward that detaches half the input.
        let x = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let r = check("broken", &[x], |a| {
            let y = (a[0].detach() * &a[0])?;
            Ok(y.sum_all()?)
        })
        .unwrap();
        assert!(!r.passed());
    }
}

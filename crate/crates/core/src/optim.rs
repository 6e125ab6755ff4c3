//! First-order optimizers, selectable by name.

use voxpart_autodiff::{ParamSet, Tensor};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Hyper-parameters handed to every optimizer factory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update. `grads` is aligned with the parameter order;
    /// `None` leaves a parameter (and its moments) untouched.
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()>;

    /// Replaces the learning rate, for schedules.
    fn set_lr(&mut self, lr: f64);
}

fn check(params: &ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for {name}")));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
    }
    Ok(())
}

/// Plain gradient descent.
pub struct Sgd {
    lr: f64,
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        check(params, grads)?;
        for (p, g) in params.values_mut().zip(grads) {
            if let Some(g) = g {
                p.axpy(-self.lr, g);
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; step counts are tracked per parameter.
pub struct Adam {
    cfg: OptimConfig,
    state: Vec<Option<(Vec<f64>, Vec<f64>, i32)>>,
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        check(params, grads)?;
        self.state.resize(params.len(), None);
        let c = self.cfg;
        for ((p, g), st) in params.values_mut().zip(grads).zip(self.state.iter_mut()) {
            let Some(g) = g else { continue };
            let (m, v, t) = st.get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()], 0));
            *t += 1;
            let (bc1, bc2) = (1.0 - c.beta1.powi(*t), 1.0 - c.beta2.powi(*t));
            for (((w, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                *w -= c.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

pub fn registry() -> Registry<dyn Optimizer, OptimConfig> {
    Registry::new("optimizer")
        .with("sgd", |c: &OptimConfig| Box::new(Sgd { lr: c.lr }) as Box<dyn Optimizer>)
        .with("adam", |c: &OptimConfig| {
            Box::new(Adam {
                cfg: *c,
                state: Vec::new(),
            }) as Box<dyn Optimizer>
        })
}

pub fn create(name: &str, cfg: OptimConfig) -> Result<Box<dyn Optimizer>> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    registry().create(name, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_run(name: &str, lr: f64) -> f64 {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_slice(&[3.0, -2.0]));
        let mut opt = create(name, OptimConfig::with_lr(lr)).unwrap();
        for _ in 0..500 {
            let g = ps.by_name("x").unwrap().scale(2.0);
            opt.step(&mut ps, &[Some(g)]).unwrap();
        }
        ps.by_name("x").unwrap().norm()
    }

    #[test]
    fn both_minimise_a_quadratic() {
        assert!(quadratic_run("sgd", 0.1) < 1e-6);
        assert!(quadratic_run("adam", 0.05) < 1e-2);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_slice(&[1.0, 1.0]));
        let mut opt = create("adam", OptimConfig::with_lr(0.1)).unwrap();
        opt.step(&mut ps, &[Some(Tensor::from_slice(&[5.0, -0.01]))]).unwrap();
        let x = ps.by_name("x").unwrap().data().to_vec();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn none_gradient_leaves_parameter_bit_identical() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::from_slice(&[0.3]));
        ps.insert("b", Tensor::from_slice(&[0.7]));
        let mut opt = create("adam", OptimConfig::with_lr(0.1)).unwrap();
        opt.step(&mut ps, &[None, Some(Tensor::from_slice(&[1.0]))]).unwrap();
        assert_eq!(ps.by_name("a").unwrap().data()[0].to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(create("momentum", OptimConfig::with_lr(0.1)).is_err());
        assert!(create("sgd", OptimConfig::with_lr(0.0)).is_err());
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::from_slice(&[0.3]));
        let mut opt = create("sgd", OptimConfig::with_lr(0.1)).unwrap();
        let err = opt.step(&mut ps, &[Some(Tensor::from_slice(&[f64::NAN]))]).unwrap_err();
        assert!(err.is_numeric());
    }
}

//! Central finite differences as an independent check on the analytic
//! gradients.

use serde::{Deserialize, Serialize};

use super::{block_backward, BlockGradients, ProjectionGrad};
use crate::blocks::{block_forward, BlockConfig, BlockKind, BlockWeights, Projection};
use crate::error::{Error, Result};
use crate::par::map_indices;
use crate::tensor::{rng::derive_seed, Distribution, Shape3, Tensor};

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn central_difference<F>(f: &F, x: &Tensor, i: usize, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64> + ?Sized,
{
    let v = x.data()[i];
    let plus = f(&x.with_element(i, v + eps))?;
    let minus = f(&x.with_element(i, v - eps))?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!(
            "objective is not finite around element {i}: f(+)={plus}, f(-)={minus}"
        )));
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Central-difference gradient of a scalar function of a tensor.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + ?Sized,
{
    if eps <= 0.0 {
        return Err(Error::Parameter(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let grad = (0..x.len())
        .map(|i| central_difference(f, x, i, eps))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(x.shape(), grad)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `x`, with a denominator floor of `1e-12`.
pub fn finite_difference_check<F>(f: &F, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64> + ?Sized,
{
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "analytic gradient {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, 1e-12))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
}

/// One differentiable tensor of a block evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    High,
    Low,
    Weight(Role),
    Bias(Role),
}

impl Slot {
    pub fn name(self) -> String {
        let role = |r: Role| match r {
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
            Role::Output => "output",
        };
        match self {
            Slot::High => "input".into(),
            Slot::Low => "low_input".into(),
            Slot::Weight(r) => format!("{}.weight", role(r)),
            Slot::Bias(r) => format!("{}.bias", role(r)),
        }
    }
}

/// Inputs and parameters of one block evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCase {
    pub kind: BlockKind,
    pub cfg: BlockConfig,
    pub high: Tensor,
    pub low: Option<Tensor>,
    pub weights: BlockWeights,
}

impl BlockCase {
    /// Uniform(−1, 1) inputs and parameters, which give better-conditioned
    /// gradients than the small gaussian initialization.
    pub fn random(
        kind: BlockKind,
        cfg: &BlockConfig,
        high: Shape3,
        low: Option<Shape3>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(kind)?;
        let fill = |shape: &[usize], label: u64| {
            Tensor::seeded_fill(shape, derive_seed(seed, label), Distribution::Uniform)
        };
        let proj = |out: usize, inp: usize, label: u64| -> Result<Projection> {
            Ok(Projection::new(
                fill(&[out, inp], label)?,
                if cfg.bias {
                    Some(fill(&[out], label + 1)?)
                } else {
                    None
                },
            ))
        };
        let (e, c, cl) = (cfg.embed_channels, cfg.in_channels, cfg.key_channels());
        let weights = BlockWeights {
            query: proj(e, c, 10)?,
            key: proj(e, cl, 20)?,
            value: if cfg.share_key_value {
                None
            } else {
                Some(proj(e, cl, 30)?)
            },
            output: proj(cfg.out(), e, 40)?,
        };
        let low = if kind.is_fusion() {
            let shape = low.unwrap_or(high).with_channels(cl);
            Some(fill(&shape.dims(), 2)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            cfg: cfg.clone(),
            high: fill(&high.with_channels(c).dims(), 1)?,
            low,
            weights,
        })
    }

    pub fn forward(&self) -> Result<Tensor> {
        block_forward(
            self.kind,
            &self.high,
            self.low.as_ref(),
            &self.cfg,
            &self.weights,
        )
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<BlockGradients> {
        block_backward(
            self.kind,
            &self.high,
            self.low.as_ref(),
            &self.cfg,
            &self.weights,
            grad_out,
        )
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut slots = vec![Slot::High];
        if self.low.is_some() {
            slots.push(Slot::Low);
        }
        let mut roles = vec![Role::Query, Role::Key];
        if self.weights.value.is_some() {
            roles.push(Role::Value);
        }
        roles.push(Role::Output);
        for role in roles {
            slots.push(Slot::Weight(role));
            if self.cfg.bias {
                slots.push(Slot::Bias(role));
            }
        }
        slots
    }

    fn projection(&self, role: Role) -> Option<&Projection> {
        match role {
            Role::Query => Some(&self.weights.query),
            Role::Key => Some(&self.weights.key),
            Role::Value => self.weights.value.as_ref(),
            Role::Output => Some(&self.weights.output),
        }
    }

    fn projection_mut(&mut self, role: Role) -> Option<&mut Projection> {
        match role {
            Role::Query => Some(&mut self.weights.query),
            Role::Key => Some(&mut self.weights.key),
            Role::Value => self.weights.value.as_mut(),
            Role::Output => Some(&mut self.weights.output),
        }
    }

    pub fn get(&self, slot: Slot) -> Option<&Tensor> {
        match slot {
            Slot::High => Some(&self.high),
            Slot::Low => self.low.as_ref(),
            Slot::Weight(r) => self.projection(r).map(|p| &p.weight),
            Slot::Bias(r) => self.projection(r).and_then(|p| p.bias.as_ref()),
        }
    }

    /// Copy of the case with `slot` replaced.
    pub fn with_slot(&self, slot: Slot, value: Tensor) -> Self {
        let mut out = self.clone();
        let target = match slot {
            Slot::High => Some(&mut out.high),
            Slot::Low => out.low.as_mut(),
            Slot::Weight(r) => out.projection_mut(r).map(|p| &mut p.weight),
            Slot::Bias(r) => out.projection_mut(r).and_then(|p| p.bias.as_mut()),
        };
        if let Some(t) = target {
            *t = value;
        }
        out
    }
}

fn gradient_for(grads: &BlockGradients, slot: Slot) -> Option<&Tensor> {
    let proj = |r: Role| -> Option<&ProjectionGrad> {
        match r {
            Role::Query => Some(&grads.query),
            Role::Key => Some(&grads.key),
            Role::Value => grads.value.as_ref(),
            Role::Output => Some(&grads.output),
        }
    };
    match slot {
        Slot::High => Some(&grads.high),
        Slot::Low => grads.low.as_ref(),
        Slot::Weight(r) => proj(r).map(|p| &p.weight),
        Slot::Bias(r) => proj(r).and_then(|p| p.bias.as_ref()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    /// Seed of the random upstream gradient.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-4,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub block: BlockKind,
    pub options: GradcheckOptions,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `Σ R ⊙ block(case)` against central
/// differences for every input and parameter element. `R` is a uniform
/// random upstream gradient drawn from `opts.seed`.
pub fn gradcheck_block(case: &BlockCase, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let output = case.forward()?;
    let upstream = Tensor::seeded_fill(output.shape(), opts.seed, Distribution::Uniform)?;
    let grads = case.backward(&upstream)?;
    let objective = |c: &BlockCase| -> Result<f64> { Ok(c.forward()?.mul(&upstream)?.sum()) };

    let mut tensors = Vec::new();
    for slot in case.slots() {
        let primal = case.get(slot).expect("slot listed by case");
        let analytic = gradient_for(&grads, slot)
            .ok_or_else(|| Error::Shape(format!("no gradient for {}", slot.name())))?;
        if analytic.shape() != primal.shape() {
            return Err(Error::Shape(format!(
                "gradient of {} is {:?}, primal is {:?}",
                slot.name(),
                analytic.shape(),
                primal.shape()
            )));
        }
        let f = |t: &Tensor| objective(&case.with_slot(slot, t.clone()));
        let numeric = map_indices(primal.len(), |i| {
            central_difference(&f, primal, i, opts.eps)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for (&a, &n) in analytic.data().iter().zip(&numeric) {
            rel = rel.max(relative_error(a, n, opts.floor));
            abs = abs.max((a - n).abs());
        }
        tensors.push(TensorCheck {
            name: slot.name(),
            shape: primal.shape().to_vec(),
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        block: case.kind,
        options: *opts,
        tensors,
        max_rel_error,
        passed: max_rel_error < opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient() {
        let x = Tensor::seeded_fill(&[3, 4], 1, Distribution::Uniform).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum());
        let err = finite_difference_check(&f, &x, &x.scale(2.0), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::seeded_fill(&[5], 2, Distribution::Uniform).unwrap();
        let c = Tensor::from_values(&[5], &[1.0, -2.0, 0.5, 4.0, -0.25]).unwrap();
        let f = |t: &Tensor| Ok(t.mul(&c)?.sum());
        for eps in [1e-3, 1e-5, 0.5] {
            let err = finite_difference_check(&f, &x, &c, eps).unwrap();
            assert!(err < 1e-9, "eps {eps}: {err}");
        }
    }

    #[test]
    fn softmax_sum_has_vanishing_gradient() {
        let x = Tensor::seeded_fill(&[3, 4], 3, Distribution::Uniform).unwrap();
        let f = |t: &Tensor| Ok(t.softmax_rows()?.sum());
        let numeric = numeric_gradient(&f, &x, 1e-5).unwrap();
        assert!(numeric.data().iter().all(|v| v.abs() < 1e-9));
        let analytic = crate::autograd::backward_softmax_rows(
            &Tensor::full(&[3, 4], 1.0).unwrap(),
            &x.softmax_rows().unwrap(),
        )
        .unwrap();
        assert!(analytic.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Tensor::from_values(&[1], &[0.0]).unwrap();
        let f = |t: &Tensor| Ok(1.0 / t.data()[0].abs().max(0.0));
        let g = Tensor::from_values(&[1], &[0.0]).unwrap();
        // 1/|±eps| is finite; force a NaN instead.
        let nan = |_: &Tensor| Ok(f64::NAN);
        assert!(finite_difference_check(&f, &x, &g, 1e-5).is_ok());
        assert!(matches!(
            finite_difference_check(&nan, &x, &g, 1e-5),
            Err(Error::Numeric(_))
        ));
        assert!(numeric_gradient(&f, &x, 0.0).is_err());
    }

    #[test]
    fn small_nb_passes() {
        let cfg = BlockConfig::new(2, 2);
        let case = BlockCase::random(BlockKind::Nb, &cfg, Shape3::new(2, 3, 3), None, 1).unwrap();
        let report = gradcheck_block(&case, &GradcheckOptions::default()).unwrap();
        assert!(report.passed, "{report:#?}");
        assert_eq!(report.tensors.len(), 1 + 2 * 4);
    }
}

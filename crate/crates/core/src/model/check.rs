//! Finite-difference check of every network parameter.

use std::collections::BTreeMap;

use crate::autodiff::{check_gradients_with, CheckReport, Stencil, Var};
use crate::error::{ForwardError, GradCheckError, ShapeError};
use crate::rng::Rng;
use crate::tensor::{FillSpec, Tensor};

use super::{init_weights, model_forward, ModelConfig, ParamVars};

const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: CheckReport,
    /// Parameter names in input order.
    pub params: Vec<String>,
}

impl ModelGradCheck {
    pub fn worst_param(&self) -> Option<&str> {
        self.report.worst.as_ref().map(|w| self.params[w.input].as_str())
    }
}

/// The small network the gradient check runs on by default.
pub fn gradcheck_config() -> ModelConfig {
    let mut c = ModelConfig::preset(super::Preset::Tiny, 2);
    c.channels = 8;
    c.heads = 2;
    c.blocks = 1;
    c.window = 4;
    c
}

/// Compare tape gradients of `sum(model(x) ⊙ r)` with five-point differences
/// in 64-bit for every parameter, on a `size`×`size` input. `corrupt` adds a
/// unit error to one gradient entry as a negative control.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    size: usize,
    seed: u64,
    tol: f64,
    corrupt: bool,
) -> Result<ModelGradCheck, GradCheckError> {
    cfg.validate().map_err(|e| ShapeError::Invalid { op: "gradcheck", msg: e.to_string() })?;
    let ws = init_weights(cfg, seed);
    let names: Vec<String> = ws.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = ws.iter().map(|(_, t)| t.cast()).collect();
    let mut rng = Rng::new(seed ^ 0x5eed);
    let img = Tensor::<f64>::new([1, 3, size, size], FillSpec::Uniform { rng: &mut rng, lo: 0.0, hi: 1.0 })?;
    let s = cfg.scale;
    let probe = Tensor::<f64>::new([1, 3, s * size, s * size], FillSpec::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 })?;
    let (img, probe) = (Var::constant(img), Var::constant(probe));

    let report = check_gradients_with(
        |tape, xs| {
            let map: BTreeMap<String, Var<f64>> = names.iter().cloned().zip(xs.iter().cloned()).collect();
            let params = ParamVars::from_map(map);
            let y = model_forward(tape, &img, &params, cfg).map_err(|e| match e {
                ForwardError::Shape(s) => s,
                ForwardError::Config(c) => ShapeError::Invalid { op: "gradcheck", msg: c.to_string() },
            })?;
            let y = tape.mul(&y, &probe)?;
            Ok(tape.sum(&y))
        },
        &inputs,
        FD_STEP,
        tol,
        Stencil::FivePoint,
        |i, g| {
            if corrupt && i == 0 {
                g.data_mut()[0] += 1.0;
            }
        },
    )?;
    Ok(ModelGradCheck { report, params: names })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut cfg = gradcheck_config();
        cfg.channels = 4;
        let clean = gradcheck_model(&cfg, 8, 1, 1e-3, false).unwrap();
        assert!(clean.report.pass, "{:?}", clean.report.worst);
        let bad = gradcheck_model(&cfg, 8, 1, 1e-3, true).unwrap();
        assert!(!bad.report.pass);
        assert_eq!(bad.worst_param(), Some(bad.params[0].as_str()));
    }
}

//! Finite-difference verification of tape gradients in f64.
//!
//! Each probe perturbs one scalar and compares the analytic derivative with
//! a five-point central difference. Probes whose stencil crosses a ReLU kink
//! (the tape's ReLU signature changes) are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Fx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator, so derivatives near
    /// zero are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            probes: 100,
            step: 1e-3,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// Parameter name or input index.
    pub target: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Draws rejected because the stencil crossed a ReLU kink.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::shape("gradcheck", format!("loss must be a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Probe driver shared by the tape-level and model-level entry points.
/// `targets` lists (name, numel) of every probe-able tensor; `eval(t, i, d)`
/// returns the loss and ReLU signature with element `i` of target `t`
/// shifted by `d`.
fn run(
    cfg: &GradCheck,
    targets: &[(String, usize)],
    analytic: &[Option<Tensor<f64>>],
    base_sig: u64,
    mut eval: impl FnMut(usize, usize, f64) -> Result<(f64, u64)>,
) -> Result<GradCheckReport> {
    let live: Vec<usize> = (0..targets.len()).filter(|&t| targets[t].1 > 0).collect();
    if live.is_empty() {
        return Err(Error::Config("gradcheck: nothing to probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let max_draws = cfg.probes * 20;
    let h = cfg.step;
    for _ in 0..max_draws {
        if report.probes.len() == cfg.probes {
            break;
        }
        let t = live[rng.gen_range(0..live.len())];
        let i = rng.gen_range(0..targets[t].1);
        let mut f = [0.0; 4];
        let mut kink = false;
        for (slot, d) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
            let (v, sig) = eval(t, i, d * h)?;
            kink |= sig != base_sig;
            f[slot] = v;
        }
        if kink {
            report.kinks += 1;
            continue;
        }
        let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
        let a = analytic[t].as_ref().map_or(0.0, |g| g.data()[i]);
        report.probes.push(Probe {
            target: targets[t].0.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric, cfg.floor),
        });
    }
    if report.probes.len() < cfg.probes {
        return Err(Error::Numeric(format!(
            "gradcheck: only {} of {} probes avoided ReLU kinks",
            report.probes.len(),
            cfg.probes
        )));
    }
    Ok(report)
}

/// Checks `f`'s gradient with respect to every input tensor. `f` receives
/// one leaf per input and must return a scalar.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let forward = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = forward(inputs)?;
    scalar(tape.value(out))?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
    let targets: Vec<(String, usize)> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| (format!("input{i}"), x.numel()))
        .collect();
    let mut work = inputs.to_vec();
    run(cfg, &targets, &analytic, tape.relu_signature(), |t, i, d| {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + d;
        let r = forward(&work);
        work[t].data_mut()[i] = orig;
        let (tape, _, out) = r?;
        Ok((scalar(tape.value(out))?, tape.relu_signature()))
    })
}

/// Checks the gradient of a model loss with respect to every trainable
/// parameter in `store`. The loss is built in deterministic mode.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Fx<'_, f64>) -> Result<Var>,
{
    let (analytic, base_sig) = {
        let mut fx = Fx::deterministic(store);
        let out = f(&mut fx)?;
        scalar(fx.tape.value(out))?;
        let mut g = fx.tape.backward(out)?;
        (fx.param_grads(&mut g), fx.tape.relu_signature())
    };
    let targets: Vec<(String, usize)> = store
        .entries()
        .map(|(_, e)| (e.name.clone(), if e.trainable { e.value.numel() } else { 0 }))
        .collect();
    let ids: Vec<_> = store.entries().map(|(id, _)| id).collect();
    let mut work = store.clone();
    run(cfg, &targets, &analytic, base_sig, |t, i, d| {
        let id = ids[t];
        let orig = work.value(id).data()[i];
        work.value_mut(id).data_mut()[i] = orig + d;
        let r = {
            let mut fx = Fx::eval(&work);
            f(&mut fx).and_then(|out| Ok((scalar(fx.tape.value(out))?, fx.tape.relu_signature())))
        };
        work.value_mut(id).data_mut()[i] = orig;
        r
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(vec![1, 3], &[0.5, -1.0, 2.0]).unwrap();
        let cfg = GradCheck {
            probes: 10,
            ..GradCheck::default()
        };
        let r = check_inputs(
            &[x],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &cfg,
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-10, "{:?}", r.worst());
    }

    #[test]
    fn relative_error_uses_the_floor() {
        assert!((relative_error(1.0, 2.0, 1e-6) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn kinks_are_redrawn() {
        // Element 0 sits on the kink; element 1 is far from it.
        let x = Tensor::from_f64(vec![1, 2], &[0.0, 1.0]).unwrap();
        let cfg = GradCheck {
            probes: 20,
            ..GradCheck::default()
        };
        let r = check_inputs(
            &[x],
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &cfg,
        )
        .unwrap();
        assert!(r.kinks > 0);
        assert!(r.probes.iter().all(|p| p.index == 1));
    }
}

//! Central-difference gradient checking against the tape.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst per-tensor relative error `|a - n| / max(|a|, |n|)` over the
    /// checked coordinates.
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

/// Compares tape gradients of `build` (which must return a scalar-producing
/// graph) with central differences, for up to `per_tensor` coordinates of
/// every tensor in `store`. Tensors whose analytic and numeric gradients
/// both sit below the central-difference roundoff floor are skipped.
pub fn check_store<F>(store: &ParamStore<f64>, per_tensor: usize, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let mut rng = stream_rng(0x6c6b, 0);
    let probe = Tensor::<f64>::randn(g.value(out).shape(), 1.0, &mut rng);
    let loss = g.weighted_sum(out, &probe);
    let loss_abs = g.value(loss).data()[0].abs();
    let grads = g.backward(loss).params(&g);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        let l = g.weighted_sum(out, &probe);
        Ok(g.value(l).data()[0])
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        checked: 0,
    };
    let mut perturbed = store.clone();
    for (name, t) in store.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("`{name}` not used by the graph")))?;
        let n = t.numel();
        let idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &idx {
            let orig = t.data()[i];
            perturbed.get_mut(name).expect("same keys").data_mut()[i] = orig + eps;
            let up = eval(&perturbed)?;
            perturbed.get_mut(name).expect("same keys").data_mut()[i] = orig - eps;
            let down = eval(&perturbed)?;
            perturbed.get_mut(name).expect("same keys").data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            diff += (a - num).powi(2);
            an += a * a;
            nn += num * num;
        }
        report.checked += idx.len();
        let scale = an.sqrt().max(nn.sqrt());
        // each difference carries roughly eps_mach * |loss| / eps of roundoff
        let floor = 1e-10_f64.max(100.0 * f64::EPSILON * loss_abs.max(1.0) / eps * (idx.len() as f64).sqrt());
        if scale < floor {
            continue;
        }
        let rel = diff.sqrt() / scale;
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_tensor = name.clone();
        }
    }
    Ok(report)
}

//! Finite-difference checks of the backward pass.
//!
//! Differences are taken on an unmasked copy of the network whose weights are
//! the current effective weights, so the mask is held fixed.

use crate::error::Result;
use crate::layers::{build_network, Architecture, Network, NetworkInit, ThresholdSpec};
use crate::rng::SeededRng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest per-layer `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, NORM_FLOOR)`.
    pub max_rel_error: f64,
    /// Score gradients equal `grad_effective ⊙ W` bit for bit.
    pub ste_exact: bool,
    pub checked_entries: usize,
}

/// Gradient norms below this are rounding noise of an O(1) loss, e.g. a layer
/// whose only downstream path shifts all logits equally.
pub const NORM_FLOOR: f64 = 1e-8;

fn loss(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(tensor::softmax_xent(&net.predict(x)?, labels)?.0)
}

/// Compares backprop against central differences with step `h`.
pub fn check_network(
    name: &str,
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let (logits, cache) = net.forward(x)?;
    let (_, dlogits) = tensor::softmax_xent(&logits, labels)?;
    let grads = net.backward(&cache, &dlogits)?;

    let mut ste_exact = true;
    for (g, w) in grads.iter().zip(net.weights()) {
        if net.is_masked() {
            let expect: Vec<u64> = g
                .effective
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| (a * b).to_bits())
                .collect();
            let got: Vec<u64> = g.param.data().iter().map(|v| v.to_bits()).collect();
            ste_exact &= expect == got;
        }
    }

    let mut probe = net.to_unmasked();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (l, g) in grads.iter().enumerate() {
        let n = g.effective.len();
        let mut fd = vec![0.0; n];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = probe.params_mut()[l].data()[i];
            probe.params_mut()[l].data_mut()[i] = orig + h;
            let lp = loss(&probe, x, labels)?;
            probe.params_mut()[l].data_mut()[i] = orig - h;
            let lm = loss(&probe, x, labels)?;
            probe.params_mut()[l].data_mut()[i] = orig;
            *slot = (lp - lm) / (2.0 * h);
        }
        let diff: f64 = g
            .effective
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = g.effective.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        let denom = na.max(nb).max(NORM_FLOOR);
        max_rel = max_rel.max(diff / denom);
        checked += n;
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        ste_exact,
        checked_entries: checked,
    })
}

/// Smallest [`Network::kink_margin`] accepted by [`run_suite`]. Central
/// differences straddling an ELU input of 0 or a pooling tie measure a
/// one-sided mixture, so such draws are replaced.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

/// Random dense (≤ 3 layers) and conv (2 conv layers) networks, widths ≤ 8,
/// each checked with `h = 1e-5`.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::new(seed);
    let mut reports = Vec::with_capacity(2 * cases);
    let init = NetworkInit {
        thresholds: ThresholdSpec::InitialPruningRate(0.3),
        ..NetworkInit::default()
    };
    let pick =
        |lo: usize, hi: usize, r: &mut SeededRng| lo + (r.unit() * (hi - lo + 1) as f64) as usize;
    for case in 0..cases {
        let input = pick(2, 8, &mut rng);
        let depth = pick(1, 3, &mut rng);
        let mut layers: Vec<String> = (1..depth)
            .map(|_| format!("dense:{}", pick(2, 8, &mut rng)))
            .collect();
        layers.push(format!("dense:{}", pick(2, 5, &mut rng)));
        let arch = Architecture::custom(&input.to_string(), &layers.join(","))?;
        let batch = pick(1, 4, &mut rng);
        let classes = *arch.weight_shapes()?.last().unwrap().last().unwrap();
        let (net, x) = loop {
            let net = build_network(&arch, &init, rng.next_u64())?;
            let x = Tensor::from_fn([batch, input], |_| rng.normal());
            if net.kink_margin(&x)? > MIN_KINK_MARGIN {
                break (net, x);
            }
        };
        let labels: Vec<usize> = (0..batch).map(|_| pick(0, classes - 1, &mut rng)).collect();
        reports.push(check_network(
            &format!("dense-{case} [{input}:{}]", layers.join(",")),
            &net,
            &x,
            &labels,
            1e-5,
        )?);

        let (c1, c2) = (pick(1, 8, &mut rng), pick(1, 8, &mut rng));
        let cin = pick(1, 3, &mut rng);
        let spec = format!("conv:{c1},conv:{c2},pool,flatten,dense:3");
        let arch = Architecture::custom(&format!("4x4x{cin}"), &spec)?;
        let (net, x) = loop {
            let net = build_network(&arch, &init, rng.next_u64())?;
            let x = Tensor::from_fn([2, 4, 4, cin], |_| rng.normal());
            if net.kink_margin(&x)? > MIN_KINK_MARGIN {
                break (net, x);
            }
        };
        let labels = vec![pick(0, 2, &mut rng), pick(0, 2, &mut rng)];
        reports.push(check_network(
            &format!("conv-{case} [4x4x{cin}:{spec}]"),
            &net,
            &x,
            &labels,
            1e-5,
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_networks_pass() {
        let reports = run_suite(1, 2).unwrap();
        for r in &reports {
            assert!(r.max_rel_error <= 1e-6, "{}: {}", r.name, r.max_rel_error);
            assert!(r.ste_exact, "{}", r.name);
            assert!(r.checked_entries > 0);
        }
    }
}

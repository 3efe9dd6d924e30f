#![allow(dead_code)]

use icreg::tasks::{generate_dataset, Prompt, SeededRng, TaskSampler};
use icreg::training::{
    backward, forward_loss, init_model, relu_pattern, Architecture, HeadPolicy,
    TrainableModelConfig,
};
use icreg::transformer::TransformerNetwork;

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

pub fn small_model(arch: Architecture, ffn: bool, seed: u64) -> TransformerNetwork {
    let cfg = TrainableModelConfig {
        architecture: arch,
        num_blocks: 2,
        heads: HeadPolicy::Fixed(2),
        ffn,
        d_embed: 9,
        init_std: 0.4,
        n: 4,
    };
    init_model(&cfg, &mut SeededRng::new(seed)).unwrap()
}

pub fn small_batch(seed: u64) -> Vec<Prompt> {
    generate_dataset(&TaskSampler::Poly { d: 2 }, 4, 3, seed).prompts
}

fn set_param(net: &mut TransformerNetwork, slot: usize, idx: usize, v: f64) {
    net.param_slices_mut()[slot][idx] = v;
}

/// Central differences with step `h` against the analytic gradient of every parameter.
///
/// Relative error uses `max(|numeric|, |analytic|, 1e-6 · largest gradient entry)` as denominator.
pub fn finite_difference_check(net: &TransformerNetwork, batch: &[Prompt], h: f64) -> GradCheck {
    let (_, cache) = forward_loss(net, batch).unwrap();
    let grads = backward(net, &cache).unwrap();
    let base_pattern = relu_pattern(net, batch).unwrap();
    // exactly-zero derivatives (e.g. softmax shift invariance) leave only rounding in the quotient
    let floor = 1e-6
        * grads
            .param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(f64::MIN_POSITIVE, |m, g| m.max(g.abs()));
    let mut probe = net.clone();
    let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    let mut out = GradCheck {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for (slot, &len) in sizes.iter().enumerate() {
        for idx in 0..len {
            let orig = net.param_slices()[slot][idx];
            set_param(&mut probe, slot, idx, orig + h);
            let plus_pattern = relu_pattern(&probe, batch).unwrap();
            let lp = forward_loss(&probe, batch).unwrap().0;
            set_param(&mut probe, slot, idx, orig - h);
            let minus_pattern = relu_pattern(&probe, batch).unwrap();
            let lm = forward_loss(&probe, batch).unwrap().0;
            set_param(&mut probe, slot, idx, orig);
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                out.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.param_slices()[slot][idx];
            // rounding in the two loss values bounds what the difference quotient can resolve
            let noise = 4.0 * f64::EPSILON * lp.abs().max(lm.abs()) / (2.0 * h);
            let scale = numeric.abs().max(analytic.abs()).max(floor);
            let rel = ((numeric - analytic).abs() - noise).max(0.0) / scale;
            out.worst = out.worst.max(rel);
            out.checked += 1;
        }
    }
    out
}

//! Finite-difference checks of whole network pieces: one residual block,
//! the set encoder and a tiny end-to-end fusion network.

use nav_tensor::{gradient_check, GradCheckCase, GradCheckOptions, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{build_network, Builder};
use super::{init_weights, Arch, Batch, ForwardOptions, ModelWeights, NetConfig, NetsError, Result};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("length matches shape")
}

fn to_tensor_error(e: NetsError) -> TensorError {
    match e {
        NetsError::Tensor(t) => t,
        other => TensorError::GradCheck(other.to_string()),
    }
}

/// Checks the parameters of `weights` whose names start with `prefix`,
/// with every other entry held constant. `build` maps a builder to an
/// output that is regressed onto a fixed random target.
fn check_entries<F>(name: &'static str, weights: &ModelWeights, prefix: &str, build: F, opts: &GradCheckOptions) -> Result<GradCheckCase>
where
    F: Fn(&mut Builder) -> Result<Var>,
{
    let names: Vec<String> = weights
        .iter()
        .filter(|(n, _)| n.starts_with(prefix) && !ModelWeights::is_buffer(n))
        .map(|(n, _)| n.to_string())
        .collect();
    let params: Vec<Tensor> = names.iter().map(|n| weights.get(n).cloned()).collect::<Result<_>>()?;
    let fwd = ForwardOptions {
        track_params: false,
        ..ForwardOptions::train(0, 0.5)
    };
    let f = |tape: &mut Tape, vars: &[Var]| -> nav_tensor::Result<Var> {
        let leaves = names.iter().cloned().zip(vars.iter().copied()).collect();
        let mut b = Builder::new(tape, weights, fwd).with_leaves(leaves);
        let y = build(&mut b).map_err(to_tensor_error)?;
        let shape = b.tape.shape(y)?.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0x7a);
        let target = b.tape.constant(random(&mut rng, &shape, 1.0))?;
        b.tape.mse(y, target)
    };
    let report = gradient_check(f, &params, opts)?;
    Ok(GradCheckCase { name, report })
}

/// Composite checks at the tiny configuration, in train mode (batch
/// statistics, dropout active with a fixed mask).
pub fn model_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let cfg = NetConfig::tiny();
    let weights = init_weights(Arch::Nmfnet, &cfg, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let mut out = Vec::new();

    let x = random(&mut rng, &[2, cfg.widths[0], 6, 6], 1.0);
    out.push(check_entries(
        "residual block",
        &weights,
        "rgb.b2.",
        |b| {
            let x = b.input("x", &x)?;
            b.block("rgb.b2", x)
        },
        opts,
    )?);

    let cloud = random(&mut rng, &[2, 9, 3], 1.0);
    out.push(check_entries(
        "set encoder",
        &weights,
        "cloud.",
        |b| {
            let c = b.input("cloud", &cloud)?;
            b.pointnet(c)
        },
        opts,
    )?);

    // Four samples: with two, the 1x1 fusion batchnorm sees two values per
    // channel and becomes too steep for central differences.
    let n = 4;
    let batch = Batch {
        rgb: random(&mut rng, &[n, 3, cfg.rgb_height, cfg.rgb_width], 1.0),
        cloud: Some(random(&mut rng, &[n, cfg.points, 3], 1.0)),
        dmap: Some(random(&mut rng, &[n, 1, cfg.dmap_height, cfg.dmap_width], 1.0)),
    };
    // The zero-initialised head would hide every upstream gradient.
    let mut w = weights.clone();
    let head = w.get_mut("head.w")?;
    let len = head.len();
    head.data_mut().copy_from_slice(random(&mut rng, &[len], 0.5).data());
    out.push(check_entries("tiny fusion network", &w, "", |b| build_network(b, Arch::Nmfnet, &batch), opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composites_match_finite_differences() {
        let opts = GradCheckOptions {
            max_coords: Some(16),
            ..GradCheckOptions::default()
        };
        for c in model_suite(&opts).unwrap() {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
        }
    }
}

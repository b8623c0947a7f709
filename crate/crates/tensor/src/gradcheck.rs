//! Central finite-difference validation of taped gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::layer::{BatchNormStats, LayerSpec, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Seed used for every evaluation, so dropout masks repeat between the
/// analytic pass and the perturbed passes.
const CHECK_SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f32,
    pub tol: f64,
    /// Lower bound of the relative-error denominator. Coordinates whose
    /// gradient is below this are compared in absolute terms; f32 forward
    /// passes leave ~1e-5 of noise in the central differences.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-3,
            floor: 0.1,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Coordinates where the central difference straddled a kink (a ReLU
    /// sign or max-pool winner changed) and a shorter or one-sided
    /// difference was used.
    pub kinked: usize,
    /// Coordinates with kinks on both sides, left unchecked.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn probe<F>(f: &F, work: &mut [Tensor], pi: usize, coord: usize, value: f32) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let orig = work[pi].data()[coord];
    work[pi].data_mut()[coord] = value;
    let out = evaluate(f, work, false);
    work[pi].data_mut()[coord] = orig;
    let (v, tape, ..) = out?;
    Ok((v, tape.kink_signature()))
}

fn evaluate<F>(f: &F, params: &[Tensor], with_grad: bool) -> Result<(f64, Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(CHECK_SEED);
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad(with_grad)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar_f64(out)?;
    Ok((value, tape, out, vars))
}

/// Compares analytic gradients of the scalar function `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`, one coordinate at a time.
///
/// The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, floor)`; the check passes iff the maximum over
/// all checked coordinates is at most `tol`.
///
/// A central difference that crosses a kink measures a blend of two slopes.
/// Such coordinates retry with a central difference of half the step, then
/// fall back to the second-order one-sided difference
/// `(-3f(θ) + 4f(θ±ε) - f(θ±2ε)) / ±2ε` on a side that stays on the same
/// linear piece, and are skipped when neither side does.
pub fn gradient_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::GradCheck(format!("eps must be positive, got {}", opts.eps)));
    }
    let (first, mut tape, out, vars) = evaluate(&f, params, true)?;
    let (second, ..) = evaluate(&f, params, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out)?;

    let mut report = Vec::with_capacity(params.len());
    let mut worst = 0f64;
    for (pi, (param, var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; param.len()]);
        let n = param.len();
        let stride = match opts.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            param: pi,
            checked: 0,
            kinked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut work = params.to_vec();
        for coord in (0..n).step_by(stride) {
            let orig = param.data()[coord];
            let (plus, minus) = (orig + opts.eps, orig - opts.eps);
            let (fp, sp) = probe(&f, &mut work, pi, coord, plus)?;
            let (fm, sm) = probe(&f, &mut work, pi, coord, minus)?;
            let numeric = if sp == base_sig && sm == base_sig {
                (fp - fm) / (plus as f64 - minus as f64)
            } else {
                let mut found = None;
                let (hp, hm) = (orig + opts.eps / 2.0, orig - opts.eps / 2.0);
                let (fhp, shp) = probe(&f, &mut work, pi, coord, hp)?;
                let (fhm, shm) = probe(&f, &mut work, pi, coord, hm)?;
                if shp == base_sig && shm == base_sig {
                    found = Some((fhp - fhm) / (hp as f64 - hm as f64));
                }
                for (dir, f1, s1) in [(1f32, fp, sp), (-1f32, fm, sm)] {
                    if found.is_some() || s1 != base_sig {
                        continue;
                    }
                    let far = orig + 2.0 * dir * opts.eps;
                    let (f2, s2) = probe(&f, &mut work, pi, coord, far)?;
                    if s2 == base_sig {
                        let h = (far as f64 - orig as f64) / 2.0;
                        found = Some((-3.0 * first + 4.0 * f1 - f2) / (2.0 * h));
                        break;
                    }
                }
                match found {
                    Some(n) => {
                        check.kinked += 1;
                        n
                    }
                    None => {
                        check.skipped += 1;
                        continue;
                    }
                }
            };
            let a = analytic[coord] as f64;
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            check.checked += 1;
            if rel > check.max_rel_error || check.checked == 1 {
                check.max_rel_error = rel;
                check.worst_coord = coord;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        worst = worst.max(check.max_rel_error);
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        max_rel_error: worst,
        tol: opts.tol,
        passed: worst <= opts.tol,
    })
}

/// Outcome of one named check in a suite.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Distinct values 0.01 apart and at least 0.005 away from zero, so no
/// finite-difference step crosses a ReLU kink or flips a max winner.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01 + 0.005).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

fn target(tape: &mut Tape, seed: u64, shape: &[usize]) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.constant(random(&mut rng, shape, 1.0))
}

/// One check per layer kind and per structural op, each ending in MSE
/// against a fixed random target.
pub fn layer_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, params: Vec<Tensor>| -> Result<()> {
        let report = gradient_check(f, &params, opts)?;
        out.push(GradCheckCase { name, report });
        Ok(())
    };

    let (x, w, b) = (random(&mut rng, &[5, 8], 1.0), random(&mut rng, &[4, 8], 0.5), random(&mut rng, &[4], 0.5));
    run(
        "dense",
        &|t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            let g = target(t, 1, &[5, 4])?;
            t.mse(y, g)
        },
        vec![x, w, b],
    )?;

    let (x, w, b) = (random(&mut rng, &[2, 2, 7, 6], 1.0), random(&mut rng, &[3, 2, 3, 3], 0.5), random(&mut rng, &[3], 0.2));
    run(
        "conv2d 3x3 stride 2 pad 1",
        &|t, v| {
            let y = t.layer_forward(&LayerSpec::conv2d(2, 3, 3, 2, 1), v[0], &[v[1], v[2]], None, Mode::Train)?;
            let g = target(t, 2, &[2, 3, 4, 3])?;
            t.mse(y, g)
        },
        vec![x, w, b],
    )?;

    let (x, w) = (random(&mut rng, &[2, 3, 5, 5], 1.0), random(&mut rng, &[2, 3, 5, 5], 0.5));
    run(
        "conv2d 5x5 stride 2 pad 2 no bias",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 2)?;
            let g = target(t, 3, &[2, 2, 3, 3])?;
            t.mse(y, g)
        },
        vec![x, w],
    )?;

    let (x, gamma, beta) = (random(&mut rng, &[3, 2, 3, 4], 1.0), random(&mut rng, &[2], 1.0), random(&mut rng, &[2], 0.5));
    run(
        "batchnorm train, spatial",
        &|t, v| {
            let mut stats = BatchNormStats::identity(2);
            let y = t.layer_forward(&LayerSpec::batchnorm(2), v[0], &[v[1], v[2]], Some(&mut stats), Mode::Train)?;
            let g = target(t, 4, &[3, 2, 3, 4])?;
            t.mse(y, g)
        },
        vec![x, gamma, beta],
    )?;

    let (x, gamma, beta) = (random(&mut rng, &[6, 4], 1.0), random(&mut rng, &[4], 1.0), random(&mut rng, &[4], 0.5));
    run(
        "batchnorm train, features",
        &|t, v| {
            let mut stats = BatchNormStats::identity(4);
            let y = t.layer_forward(&LayerSpec::batchnorm(4), v[0], &[v[1], v[2]], Some(&mut stats), Mode::Train)?;
            let g = target(t, 5, &[6, 4])?;
            t.mse(y, g)
        },
        vec![x, gamma, beta],
    )?;

    let (x, gamma, beta) = (random(&mut rng, &[2, 3, 2, 2], 1.0), random(&mut rng, &[3], 1.0), random(&mut rng, &[3], 0.5));
    run(
        "batchnorm eval",
        &|t, v| {
            let mut stats = BatchNormStats {
                mean: vec![0.1, -0.2, 0.0],
                var: vec![0.5, 1.5, 2.0],
            };
            let y = t.layer_forward(&LayerSpec::batchnorm(3), v[0], &[v[1], v[2]], Some(&mut stats), Mode::Eval)?;
            let g = target(t, 6, &[2, 3, 2, 2])?;
            t.mse(y, g)
        },
        vec![x, gamma, beta],
    )?;

    let x = separated(&mut rng, &[3, 10]);
    run(
        "relu",
        &|t, v| {
            let y = t.layer_forward(&LayerSpec::Relu, v[0], &[], None, Mode::Train)?;
            let g = target(t, 7, &[3, 10])?;
            t.mse(y, g)
        },
        vec![x],
    )?;

    let x = random(&mut rng, &[4, 6], 1.0);
    run(
        "dropout",
        &|t, v| {
            let y = t.layer_forward(&LayerSpec::Dropout { rate: 0.5 }, v[0], &[], None, Mode::Train)?;
            let g = target(t, 8, &[4, 6])?;
            t.mse(y, g)
        },
        vec![x],
    )?;

    let x = separated(&mut rng, &[2, 2, 6, 5]);
    run(
        "maxpool2d 3x3 stride 2 pad 1",
        &|t, v| {
            let y = t.layer_forward(&LayerSpec::MaxPool2d { kernel: 3, stride: 2, pad: 1 }, v[0], &[], None, Mode::Train)?;
            let g = target(t, 9, &[2, 2, 3, 3])?;
            t.mse(y, g)
        },
        vec![x],
    )?;

    let x = random(&mut rng, &[2, 3, 4, 5], 1.0);
    run(
        "global average pool",
        &|t, v| {
            let y = t.layer_forward(&LayerSpec::GlobalAvgPool, v[0], &[], None, Mode::Train)?;
            let g = target(t, 10, &[2, 3])?;
            t.mse(y, g)
        },
        vec![x],
    )?;

    let x = separated(&mut rng, &[2, 7, 3]);
    run(
        "set max pool",
        &|t, v| {
            let y = t.max_pool_set(v[0])?;
            let g = target(t, 11, &[2, 3])?;
            t.mse(y, g)
        },
        vec![x],
    )?;

    let (a, b) = (random(&mut rng, &[2, 3], 1.0), random(&mut rng, &[2, 4], 1.0));
    run(
        "concat, add, reshape, sum",
        &|t, v| {
            let cat = t.concat(v[0], v[1], 1)?;
            let r = t.reshape(cat, &[7, 2])?;
            let s = t.add(r, r)?;
            let total = t.sum(s)?;
            let flat = t.reshape(s, &[14])?;
            let g = target(t, 12, &[14])?;
            let m = t.mse(flat, g)?;
            let tot = t.reshape(total, &[1])?;
            let z = t.constant(Tensor::zeros(&[1]))?;
            let m2 = t.mse(tot, z)?;
            t.add(m, m2)
        },
        vec![a, b],
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let w = Tensor::from_slice(&[1], &[3.0]).unwrap();
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..GradCheckOptions::default()
        };
        let report = gradient_check(
            |tape, v| {
                // w^2 = mse(w, 0) with one element
                let zero = tape.constant(Tensor::zeros(&[1]))?;
                tape.mse(v[0], zero)
            },
            &[w],
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!((report.params[0].analytic - 6.0).abs() < 1e-6);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let w = Tensor::from_slice(&[1], &[1.0]).unwrap();
        let err = gradient_check(
            |tape, v| {
                calls.set(calls.get() + 1);
                let t = tape.constant(Tensor::full(&[1], calls.get() as f32))?;
                tape.mse(v[0], t)
            },
            &[w],
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }
}

//! Central finite-difference verification of every tape kernel.
//!
//! The harness reduces a kernel's output to a scalar through a fixed random
//! weighting, runs the analytic backward pass, and compares each input
//! gradient against `(f(x+h) - f(x-h)) / 2h` in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely at the same tolerance.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Worst relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn finite_diff_check<F>(builder: F, inputs: &[Tensor], h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor], weights: &mut Option<Tensor>| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = builder(&mut tape, &ids)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tensor::zeros(tape.value(out).shape());
            for v in t.data_mut() {
                // magnitudes in [0.5, 1.5] with random sign keep the scalar
                // sensitive to every output element
                let mag: f64 = rng.random_range(0.5..1.5);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                *v = mag * sign;
            }
            t
        });
        let scalar = tape.weighted_sum(out, w.clone())?;
        tape.backward(scalar)?;
        let grads = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
            })
            .collect();
        Ok((tape.value(scalar).scalar(), grads))
    };

    let mut weights: Option<Tensor> = None;
    let (_, analytic) = eval(inputs, &mut weights)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let (f_plus, _) = eval(&work, &mut weights)?;
            work[ti].data_mut()[ei] = orig - h;
            let (f_minus, _) = eval(&work, &mut weights)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti].data()[ei], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub name: &'static str,
    /// Linear kernels must agree with central differences to 1e-9.
    pub linear: bool,
    pub max_rel_err: f64,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Run every kernel through `configs` random shapes and report the worst
/// error seen for each.
pub fn run_kernel_suite(configs: usize, seed: u64) -> Result<Vec<KernelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<KernelCheck> = Vec::new();
    let record = |name: &'static str, linear: bool, err: f64, results: &mut Vec<KernelCheck>| {
        if let Some(slot) = results.iter_mut().find(|k| k.name == name) {
            slot.max_rel_err = slot.max_rel_err.max(err);
        } else {
            results.push(KernelCheck {
                name,
                linear,
                max_rel_err: err,
            });
        }
    };

    for c in 0..configs {
        let b = rng.random_range(1..=3usize);
        let l = 2 * rng.random_range(2..=5usize); // even lengths for stride 2
        let c_in = rng.random_range(1..=4usize);
        let c_out = rng.random_range(1..=4usize);
        let cseed = seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);

        // conv1d, stride 1 and 2, kernel 3
        for stride in [1usize, 2] {
            let inputs = vec![
                randn(&[b, c_in, l], &mut rng),
                randn(&[c_out, c_in, 3], &mut rng),
                randn(&[c_out], &mut rng),
            ];
            let err = finite_diff_check(
                |t, ids| t.conv1d(ids[0], ids[1], ids[2], stride),
                &inputs,
                1e-5,
                cseed,
            )?;
            record(
                if stride == 1 { "conv1d_s1" } else { "conv1d_s2" },
                true,
                err,
                &mut results,
            );
        }

        // transposed-conv upsample
        let inputs = vec![
            randn(&[b, c_in, l], &mut rng),
            randn(&[c_in, c_out, 2], &mut rng),
            randn(&[c_out], &mut rng),
        ];
        let err = finite_diff_check(
            |t, ids| t.conv_transpose_2x(ids[0], ids[1], ids[2]),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("conv_transpose_2x", true, err, &mut results);

        // linear-interp upsample
        let inputs = vec![randn(&[b, c_in, l], &mut rng)];
        let err = finite_diff_check(|t, ids| t.upsample_linear_2x(ids[0]), &inputs, 1e-5, cseed)?;
        record("upsample_linear_2x", true, err, &mut results);

        // dense over the last axis
        let d_in = rng.random_range(2..=5usize);
        let d_out = rng.random_range(2..=5usize);
        let inputs = vec![
            randn(&[b, d_in], &mut rng),
            randn(&[d_out, d_in], &mut rng),
            randn(&[d_out], &mut rng),
        ];
        let err = finite_diff_check(
            |t, ids| t.linear(ids[0], ids[1], ids[2]),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("dense", true, err, &mut results);

        // group norm
        let groups = *[1usize, 2, 4][..].iter().filter(|&&g| 8 % g == 0).collect::<Vec<_>>()
            [rng.random_range(0..3)];
        let cgn = groups * rng.random_range(1..=3usize);
        let inputs = vec![
            randn(&[b, cgn, l], &mut rng),
            randn(&[cgn], &mut rng),
            randn(&[cgn], &mut rng),
        ];
        let err = finite_diff_check(
            |t, ids| t.group_norm(ids[0], ids[1], ids[2], groups, 1e-5),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("group_norm", false, err, &mut results);

        // gelu
        let inputs = vec![randn(&[b, 6], &mut rng)];
        let err = finite_diff_check(|t, ids| Ok(t.gelu(ids[0])), &inputs, 1e-5, cseed)?;
        record("gelu", false, err, &mut results);

        // attention: self and cross token counts
        let heads = rng.random_range(1..=2usize);
        let dh = rng.random_range(2..=3usize);
        let d = heads * dh;
        let t_q = rng.random_range(2..=4usize);
        let t_k = rng.random_range(2..=4usize);
        let inputs = vec![
            randn(&[b, t_q, d], &mut rng),
            randn(&[b, t_k, d], &mut rng),
            randn(&[b, t_k, d], &mut rng),
        ];
        let err = finite_diff_check(
            |t, ids| t.attention(ids[0], ids[1], ids[2], heads),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("attention", false, err, &mut results);

        // structural ops
        let inputs = vec![randn(&[b, 3, l], &mut rng), randn(&[b, 2, l], &mut rng)];
        let err = finite_diff_check(
            |t, ids| t.concat_channels(ids[0], ids[1]),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("concat_channels", true, err, &mut results);

        let inputs = vec![randn(&[b, 3, 4], &mut rng)];
        let err = finite_diff_check(|t, ids| t.swap_axes_12(ids[0]), &inputs, 1e-5, cseed)?;
        record("swap_axes_12", true, err, &mut results);

        let inputs = vec![randn(&[b, 4, 3], &mut rng)];
        let err = finite_diff_check(|t, ids| t.mean_axis1(ids[0]), &inputs, 1e-5, cseed)?;
        record("mean_axis1", true, err, &mut results);

        let inputs = vec![randn(&[b, 3, 4], &mut rng), randn(&[3, 4], &mut rng)];
        let err = finite_diff_check(
            |t, ids| t.add_batch_bcast(ids[0], ids[1]),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("add_batch_bcast", true, err, &mut results);

        let inputs = vec![randn(&[b, 3, 4], &mut rng), randn(&[b, 4], &mut rng)];
        let err = finite_diff_check(
            |t, ids| t.add_seq_bcast(ids[0], ids[1]),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("add_seq_bcast", true, err, &mut results);

        // masked mse (nonlinear in pred)
        let n = rng.random_range(3..=6usize);
        let target = randn(&[n], &mut rng);
        let mut mask = Tensor::zeros(&[n]);
        for (i, v) in mask.data_mut().iter_mut().enumerate() {
            *v = if i == 0 || rng.random::<bool>() { 1.0 } else { 0.0 };
        }
        let inputs = vec![randn(&[n], &mut rng)];
        let err = finite_diff_check(
            move |t, ids| t.masked_mse(ids[0], target.clone(), mask.clone()),
            &inputs,
            1e-5,
            cseed,
        )?;
        record("masked_mse", false, err, &mut results);
    }
    Ok(results)
}

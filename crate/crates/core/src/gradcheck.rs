//! Finite-difference gradient checking.
//!
//! The harness compares tape gradients against central finite differences
//! with step `h = 1e-4 * max(1, |theta|)` and reports the worst error
//! `|g_a - g_fd| / max(1, |g_a|, |g_fd|)` over every element of every input.
//! The registry lists one small, seeded check per differentiable module so
//! the whole suite can run from the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar-valued differentiable program over a list of input tensors.
pub type Program = dyn Fn(&mut Tape<f64>, &[Value]) -> Result<Value>;

/// Worst finite-difference error of `f`'s gradients w.r.t. every input.
pub fn check_gradients(inputs: &[Tensor<f64>], f: &Program) -> Result<f64> {
    let mut tape = Tape::new();
    let vals: Vec<Value> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vals)?;
    let mut grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vals: Vec<Value> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let loss = f(&mut tape, &vals)?;
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.take(vals[i]).ok_or_else(|| {
            Error::InvalidArgument(format!("input {i} received no gradient"))
        })?;
        for j in 0..input.numel() {
            let theta = input.data()[j];
            let h = 1e-4 * theta.abs().max(1.0);
            perturbed[i].data_mut()[j] = theta + h;
            let up = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = theta - h;
            let down = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = theta;
            let fd = (up - down) / (2.0 * h);
            let ga = analytic.data()[j];
            let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// One registered gradient check.
pub struct CheckCase {
    pub name: &'static str,
    /// Maximum acceptable error for this case.
    pub threshold: f64,
    pub run: Box<dyn Fn() -> Result<f64>>,
}

/// Evenly spread sample of up to `k` element indices of an `n`-element
/// tensor (finite differences over every element of a whole network would
/// be quadratic in cost).
fn sampled_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|j| j * n / k).collect()
}

/// Gradient check of a forward program that reads parameters from a store.
/// Analytic gradients come from one taped pass; finite differences probe a
/// sampled subset of elements of every bound parameter and of the input.
pub fn check_store_gradients(
    cfg: &crate::net::ModelConfig,
    input: &Tensor<f64>,
    build: &dyn Fn(&mut crate::net::Forward<f64>, Value) -> Result<Value>,
    max_per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    use crate::net::{init_params, Forward, Mode};
    let mut store = init_params::<f64>(cfg)?;

    let eval = |store: &crate::net::ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut fw = Forward::new(store, Mode::Train);
        let xv = fw.tape.leaf(x.clone(), false);
        let out = build(&mut fw, xv)?;
        let loss = project_to_scalar(&mut fw.tape, out, seed)?;
        fw.tape.value(loss).item()
    };

    // Analytic pass.
    let mut fw = Forward::new(&store, Mode::Train);
    let xv = fw.tape.leaf(input.clone(), true);
    let out = build(&mut fw, xv)?;
    let loss = project_to_scalar(&mut fw.tape, out, seed)?;
    let (tape, bindings, _) = fw.finish();
    let mut grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut check_elem = |analytic: f64, up: f64, down: f64, h: f64| {
        let fd = (up - down) / (2.0 * h);
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
        if err > worst {
            worst = err;
        }
    };

    // Input gradient.
    let gx = grads
        .take(xv)
        .ok_or_else(|| Error::InvalidArgument("input received no gradient".into()))?;
    let mut x_mut = input.clone();
    for j in sampled_indices(input.numel(), max_per_tensor) {
        let theta = input.data()[j];
        let h = 1e-4 * theta.abs().max(1.0);
        x_mut.data_mut()[j] = theta + h;
        let up = eval(&store, &x_mut)?;
        x_mut.data_mut()[j] = theta - h;
        let down = eval(&store, &x_mut)?;
        x_mut.data_mut()[j] = theta;
        check_elem(gx.data()[j], up, down, h);
    }

    // Parameter gradients (only trainable entries receive gradients).
    for (idx, v) in bindings {
        if !store.entry(idx).trainable {
            continue;
        }
        let ga = grads.take(v).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "parameter {} received no gradient",
                store.entry(idx).name
            ))
        })?;
        let n = ga.numel();
        for j in sampled_indices(n, max_per_tensor) {
            let theta = store.entry(idx).value.data()[j];
            let h = 1e-4 * theta.abs().max(1.0);
            store.value_mut(idx).data_mut()[j] = theta + h;
            let up = eval(&store, input)?;
            store.value_mut(idx).data_mut()[j] = theta - h;
            let down = eval(&store, input)?;
            store.value_mut(idx).data_mut()[j] = theta;
            check_elem(ga.data()[j], up, down, h);
        }
    }
    Ok(worst)
}

/// Every registered gradient check: leaf ops at 1e-5, composites at 1e-4.
pub fn registry() -> Vec<CheckCase> {
    use crate::net::ModelConfig;
    use crate::tensor::ops::{Activation, ConvSpec, PoolKind};

    fn case(
        name: &'static str,
        threshold: f64,
        run: impl Fn() -> Result<f64> + 'static,
    ) -> CheckCase {
        CheckCase {
            name,
            threshold,
            run: Box::new(run),
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            depth: 2,
            ssm_state: 2,
            image_size: 16,
            ..ModelConfig::default()
        }
    }

    vec![
        case("conv2d", 1e-5, || {
            let mut r = rng(101);
            let x = rand_tensor(&mut r, &[2, 3, 4, 4]);
            let w = rand_tensor(&mut r, &[4, 3, 3, 3]);
            let b = rand_tensor(&mut r, &[4]);
            let xg = rand_tensor(&mut r, &[1, 4, 5, 5]);
            let wg = rand_tensor(&mut r, &[4, 2, 3, 3]);
            check_gradients(&[x, w, b, xg, wg], &|tape, v| {
                let spec = ConvSpec::same(3, 4, 3, 3, 1, 1)?;
                let y1 = tape.conv2d(v[0], v[1], Some(v[2]), &spec)?;
                let grouped = ConvSpec {
                    in_channels: 4,
                    out_channels: 4,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 2,
                    dilation: 2,
                    groups: 2,
                    pad_h: 2,
                    pad_w: 2,
                };
                let y2 = tape.conv2d(v[3], v[4], None, &grouped)?;
                let p1 = project_to_scalar(tape, y1, 101)?;
                let p2 = project_to_scalar(tape, y2, 102)?;
                tape.add(p1, p2)
            })
        }),
        case("pool_max", 1e-5, || {
            let mut r = rng(103);
            let x = rand_tensor(&mut r, &[1, 2, 5, 5]);
            check_gradients(&[x], &|tape, v| {
                let a = tape.pool2d(v[0], PoolKind::Max, 3, 1, 1)?;
                let b = tape.pool2d(v[0], PoolKind::Max, 2, 2, 0)?;
                let pa = project_to_scalar(tape, a, 103)?;
                let pb = project_to_scalar(tape, b, 104)?;
                tape.add(pa, pb)
            })
        }),
        case("pool_avg", 1e-5, || {
            let mut r = rng(105);
            let x = rand_tensor(&mut r, &[1, 2, 5, 5]);
            check_gradients(&[x], &|tape, v| {
                let y = tape.pool2d(v[0], PoolKind::Avg, 3, 1, 1)?;
                project_to_scalar(tape, y, 105)
            })
        }),
        case("upsample", 1e-5, || {
            let mut r = rng(106);
            let x = rand_tensor(&mut r, &[1, 3, 3, 4]);
            check_gradients(&[x], &|tape, v| {
                let y = tape.upsample2x(v[0])?;
                project_to_scalar(tape, y, 106)
            })
        }),
        case("linear", 1e-5, || {
            let mut r = rng(107);
            let x = rand_tensor(&mut r, &[2, 3, 4]);
            let w = rand_tensor(&mut r, &[5, 4]);
            let b = rand_tensor(&mut r, &[5]);
            check_gradients(&[x, w, b], &|tape, v| {
                let y = tape.linear(v[0], v[1], Some(v[2]))?;
                project_to_scalar(tape, y, 107)
            })
        }),
        case("layer_norm", 1e-5, || {
            let mut r = rng(108);
            let x = rand_tensor(&mut r, &[2, 5, 4]);
            let g = rand_pos_tensor(&mut r, &[4]);
            let b = rand_tensor(&mut r, &[4]);
            check_gradients(&[x, g, b], &|tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project_to_scalar(tape, y, 108)
            })
        }),
        case("batch_norm", 1e-5, || {
            let mut r = rng(109);
            let x = rand_tensor(&mut r, &[2, 3, 4, 4]);
            let g = rand_pos_tensor(&mut r, &[3]);
            let b = rand_tensor(&mut r, &[3]);
            let rm = rand_tensor(&mut r, &[3]);
            let rv = rand_pos_tensor(&mut r, &[3]);
            check_gradients(&[x, g, b], &move |tape, v| {
                let (y1, _, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let y2 = tape.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                let p1 = project_to_scalar(tape, y1, 109)?;
                let p2 = project_to_scalar(tape, y2, 110)?;
                tape.add(p1, p2)
            })
        }),
        case("activations", 1e-5, || {
            let mut r = rng(111);
            let x = rand_tensor(&mut r, &[3, 5]);
            check_gradients(&[x], &|tape, v| {
                let mut total = None;
                for (i, kind) in [
                    Activation::Relu,
                    Activation::Gelu,
                    Activation::Silu,
                    Activation::Sigmoid,
                    Activation::Softplus,
                ]
                .into_iter()
                .enumerate()
                {
                    let y = tape.activation(v[0], kind);
                    let p = project_to_scalar(tape, y, 111 + i as u64)?;
                    total = Some(match total {
                        None => p,
                        Some(t) => tape.add(t, p)?,
                    });
                }
                Ok(total.unwrap())
            })
        }),
        case("selective_scan", 1e-5, || {
            let mut r = rng(120);
            let p = crate::scan::SsmParams::<f64>::init(3, 2, &mut r);
            let x = rand_tensor(&mut r, &[6, 3]);
            check_gradients(
                &[x, p.a_log, p.d_skip, p.proj_bcdt, p.dt_bias],
                &|tape, v| {
                    let pv = crate::scan::SsmParamsV {
                        a_log: v[1],
                        d_skip: v[2],
                        proj_bcdt: v[3],
                        dt_bias: v[4],
                    };
                    let y = tape.selective_scan(v[0], &pv)?;
                    project_to_scalar(tape, y, 120)
                },
            )
        }),
        case("ss2d", 1e-5, || {
            let mut r = rng(121);
            let c = 3;
            let ps: Vec<crate::scan::SsmParams<f64>> =
                (0..4).map(|_| crate::scan::SsmParams::init(c, 2, &mut r)).collect();
            let x = rand_tensor(&mut r, &[1, c, 3, 4]);
            let mut inputs = vec![x];
            for p in &ps {
                inputs.extend([
                    p.a_log.clone(),
                    p.d_skip.clone(),
                    p.proj_bcdt.clone(),
                    p.dt_bias.clone(),
                ]);
            }
            check_gradients(&inputs, &|tape, v| {
                let mk = |o: usize| crate::scan::SsmParamsV {
                    a_log: v[1 + 4 * o],
                    d_skip: v[2 + 4 * o],
                    proj_bcdt: v[3 + 4 * o],
                    dt_bias: v[4 + 4 * o],
                };
                let y = tape.ss2d_forward(v[0], &[mk(0), mk(1), mk(2), mk(3)])?;
                project_to_scalar(tape, y, 121)
            })
        }),
        case("wtconv", 1e-5, || {
            let mut r = rng(122);
            let c = 2;
            let x = rand_tensor(&mut r, &[1, c, 4, 4]);
            let p = crate::wavelet::WtConvParams::<f64>::init(c, &mut r);
            check_gradients(&[x, p.base_dw, p.subband_dw], &|tape, v| {
                let y = tape.wtconv_forward(v[0], v[1], v[2])?;
                project_to_scalar(tape, y, 122)
            })
        }),
        case("eca", 1e-5, || {
            let mut r = rng(123);
            let x = rand_tensor(&mut r, &[1, 4, 3, 3]);
            let k = rand_tensor(&mut r, &[3]);
            check_gradients(&[x, k], &|tape, v| {
                let y = tape.eca_forward(v[0], v[1])?;
                project_to_scalar(tape, y, 123)
            })
        }),
        case("cam", 1e-5, || {
            let mut r = rng(124);
            let x = rand_tensor(&mut r, &[1, 4, 3, 3]);
            let p = crate::attention::CamParams::<f64>::init(4, &mut r);
            check_gradients(&[x, p.w1, p.w2], &|tape, v| {
                let pv = crate::attention::CamParamsV { w1: v[1], w2: v[2] };
                let y = tape.cam_forward(v[0], &pv)?;
                project_to_scalar(tape, y, 124)
            })
        }),
        case("sam", 1e-5, || {
            let mut r = rng(125);
            let x = rand_tensor(&mut r, &[1, 3, 4, 4]);
            let p = crate::attention::SamParams::<f64>::init(&mut r);
            check_gradients(&[x, p.conv7], &|tape, v| {
                let y = tape.sam_forward(v[0], v[1])?;
                project_to_scalar(tape, y, 125)
            })
        }),
        case("ffrm", 1e-5, || {
            let mut r = rng(126);
            let x = rand_tensor(&mut r, &[1, 4, 3, 3]);
            let cam = crate::attention::CamParams::<f64>::init(4, &mut r);
            let sam = crate::attention::SamParams::<f64>::init(&mut r);
            check_gradients(&[x, cam.w1, cam.w2, sam.conv7], &|tape, v| {
                let pv = crate::attention::CamParamsV { w1: v[1], w2: v[2] };
                let y = tape.ffrm_forward(v[0], &pv, v[3])?;
                project_to_scalar(tape, y, 126)
            })
        }),
        case("attention_gate", 1e-5, || {
            let mut r = rng(127);
            let skip = rand_tensor(&mut r, &[1, 4, 3, 3]);
            let gate = rand_tensor(&mut r, &[1, 4, 3, 3]);
            let p = crate::attention::AgParams::<f64>::init(4, 4, &mut r);
            check_gradients(
                &[skip, gate, p.wg, p.bg, p.wx, p.bx, p.psi, p.bpsi],
                &|tape, v| {
                    let pv = crate::attention::AgParamsV {
                        wg: v[2],
                        bg: v[3],
                        wx: v[4],
                        bx: v[5],
                        psi: v[6],
                        bpsi: v[7],
                    };
                    let y = tape.attention_gate(v[0], v[1], &pv)?;
                    project_to_scalar(tape, y, 127)
                },
            )
        }),
        case("dice_loss", 1e-5, || {
            let mut r = rng(128);
            let pred = Tensor::from_fn(vec![8], |_| r.gen_range(0.1..0.9));
            let target = Tensor::from_fn(vec![8], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
            check_gradients(&[pred], &move |tape, v| {
                crate::train::dice_loss(tape, v[0], &target, 1e-5)
            })
        }),
        case("msdam", 1e-4, || {
            let mut r = rng(130);
            let cfg = tiny_cfg();
            let x = rand_tensor(&mut r, &[1, 4, 6, 6]);
            check_store_gradients(
                &cfg,
                &x,
                &|fw, xv| crate::net::msdam_forward(fw, xv, "enc1.block.msdam"),
                4,
                130,
            )
        }),
        case("davssm", 1e-4, || {
            let mut r = rng(131);
            let cfg = tiny_cfg();
            let x = rand_tensor(&mut r, &[1, 4, 4, 4]);
            check_store_gradients(
                &cfg,
                &x,
                &move |fw, xv| crate::net::davssm_forward(fw, xv, "enc1.block.davssm", &tiny_cfg()),
                4,
                131,
            )
        }),
        case("octa_mamba_block", 1e-4, || {
            let mut r = rng(132);
            let cfg = tiny_cfg();
            let x = rand_tensor(&mut r, &[1, 4, 4, 4]);
            check_store_gradients(
                &cfg,
                &x,
                &move |fw, xv| crate::net::octa_mamba_block(fw, xv, "enc1.block", &tiny_cfg()),
                4,
                132,
            )
        }),
        case("network", 1e-4, || {
            let mut r = rng(133);
            let cfg = tiny_cfg();
            let x = Tensor::from_fn(vec![1, 1, 16, 16], |_| r.gen_range(0.0..1.0));
            check_store_gradients(
                &cfg,
                &x,
                &move |fw, xv| crate::net::network_forward(fw, xv, &tiny_cfg()),
                2,
                133,
            )
        }),
    ]
}

/// Seeded RNG for check instances.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with entries away from activation kinks.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        v + 0.15 * v.signum()
    })
}

/// Random strictly positive tensor.
pub fn rand_pos_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.2..1.2))
}

/// Project a tensor-valued output to a scalar with fixed pseudo-random
/// weights so every output element influences the loss.
pub fn project_to_scalar(
    tape: &mut Tape<f64>,
    out: Value,
    seed: u64,
) -> Result<Value> {
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj = Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0));
    let pv = tape.constant(proj);
    let prod = tape.mul(out, pv)?;
    tape.sum_all(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{Activation, ConvSpec, PoolKind};

    #[test]
    fn linear_program_has_exact_fd() {
        let mut r = rng(1);
        let x = rand_tensor(&mut r, &[3, 4]);
        let w = rand_tensor(&mut r, &[5, 4]);
        let b = rand_tensor(&mut r, &[5]);
        let err = check_gradients(&[x, w, b], &|tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2]))?;
            project_to_scalar(tape, y, 1)
        })
        .unwrap();
        assert!(err <= 1e-9, "linear fd error {err}");
    }

    #[test]
    fn conv2d_grads_match_fd() {
        let mut r = rng(2);
        let x = rand_tensor(&mut r, &[2, 3, 4, 4]);
        let w = rand_tensor(&mut r, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut r, &[4]);
        let spec = ConvSpec::same(3, 4, 3, 3, 1, 1).unwrap();
        let err = check_gradients(&[x, w, b], &move |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), &spec)?;
            project_to_scalar(tape, y, 2)
        })
        .unwrap();
        assert!(err <= 1e-5, "conv2d fd error {err}");
    }

    #[test]
    fn conv2d_strided_grouped_grads_match_fd() {
        let mut r = rng(3);
        let x = rand_tensor(&mut r, &[1, 4, 5, 5]);
        let w = rand_tensor(&mut r, &[4, 2, 3, 3]);
        let spec = ConvSpec {
            in_channels: 4,
            out_channels: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            dilation: 1,
            groups: 2,
            pad_h: 1,
            pad_w: 1,
        };
        let err = check_gradients(&[x, w], &move |tape, v| {
            let y = tape.conv2d(v[0], v[1], None, &spec)?;
            project_to_scalar(tape, y, 3)
        })
        .unwrap();
        assert!(err <= 1e-5, "strided/grouped conv fd error {err}");
    }

    #[test]
    fn pool_grads_match_fd() {
        let mut r = rng(4);
        let x = rand_tensor(&mut r, &[1, 2, 4, 4]);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let err = check_gradients(&[x.clone()], &move |tape, v| {
                let y = tape.pool2d(v[0], kind, 3, 1, 1)?;
                project_to_scalar(tape, y, 4)
            })
            .unwrap();
            assert!(err <= 1e-5, "{kind:?} pool fd error {err}");
        }
    }

    #[test]
    fn upsample_grads_match_fd() {
        let mut r = rng(5);
        let x = rand_tensor(&mut r, &[1, 2, 3, 3]);
        let err = check_gradients(&[x], &|tape, v| {
            let y = tape.upsample2x(v[0])?;
            project_to_scalar(tape, y, 5)
        })
        .unwrap();
        assert!(err <= 1e-5, "upsample fd error {err}");
    }

    #[test]
    fn norm_grads_match_fd() {
        let mut r = rng(6);
        let x = rand_tensor(&mut r, &[2, 3, 4]);
        let gamma = rand_pos_tensor(&mut r, &[4]);
        let beta = rand_tensor(&mut r, &[4]);
        let err = check_gradients(&[x, gamma, beta], &|tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project_to_scalar(tape, y, 6)
        })
        .unwrap();
        assert!(err <= 1e-5, "layer_norm fd error {err}");

        let xb = rand_tensor(&mut r, &[2, 3, 4, 4]);
        let gamma = rand_pos_tensor(&mut r, &[3]);
        let beta = rand_tensor(&mut r, &[3]);
        let err = check_gradients(&[xb.clone(), gamma.clone(), beta.clone()], &|tape, v| {
            let (y, _, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project_to_scalar(tape, y, 7)
        })
        .unwrap();
        assert!(err <= 1e-5, "batch_norm train fd error {err}");

        let rm = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let rv = Tensor::new(vec![3], vec![1.1, 0.9, 1.3]).unwrap();
        let err = check_gradients(&[xb, gamma, beta], &move |tape, v| {
            let y = tape.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
            project_to_scalar(tape, y, 8)
        })
        .unwrap();
        assert!(err <= 1e-5, "batch_norm eval fd error {err}");
    }

    #[test]
    fn activation_grads_match_fd() {
        let mut r = rng(7);
        let x = rand_tensor(&mut r, &[2, 5]);
        for kind in [
            Activation::Relu,
            Activation::Gelu,
            Activation::Silu,
            Activation::Sigmoid,
            Activation::Softplus,
        ] {
            let err = check_gradients(&[x.clone()], &move |tape, v| {
                let y = tape.activation(v[0], kind);
                project_to_scalar(tape, y, 9)
            })
            .unwrap();
            assert!(err <= 1e-6, "{kind:?} fd error {err}");
        }
    }

    #[test]
    fn structural_op_grads_match_fd() {
        let mut r = rng(8);
        let a = rand_tensor(&mut r, &[2, 3, 2, 2]);
        let b = rand_tensor(&mut r, &[2, 2, 2, 2]);
        let err = check_gradients(&[a, b], &|tape, v| {
            let c = tape.concat(&[v[0], v[1]], 1)?;
            let s = tape.slice(c, 1, 1, 4)?;
            let p = tape.permute(s, &[0, 2, 3, 1])?;
            let rsh = tape.reshape(p, &[2, 4, 3])?;
            let rev = tape.reverse_axis(rsh, 1)?;
            project_to_scalar(tape, rev, 10)
        })
        .unwrap();
        assert!(err <= 1e-9, "structural ops fd error {err}");
    }

    #[test]
    fn reduction_and_broadcast_grads_match_fd() {
        let mut r = rng(9);
        let x = rand_tensor(&mut r, &[2, 3, 3, 3]);
        let s = rand_tensor(&mut r, &[2, 3]);
        let v1 = rand_tensor(&mut r, &[3]);
        let m = rand_tensor(&mut r, &[2, 1, 3, 3]);
        let err = check_gradients(&[x, s, v1, m], &|tape, v| {
            let g1 = tape.gap(v[0])?;
            let g2 = tape.gmp(v[0])?;
            let bc = tape.broadcast_nc(v[1], 3, 3)?;
            let cv = tape.broadcast_channel_vec(v[2], 2, 3, 3)?;
            let sm = tape.broadcast_spatial_map(v[3], 3)?;
            let t1 = tape.mul(bc, cv)?;
            let t2 = tape.mul(t1, sm)?;
            let sum1 = tape.sum_all(t2)?;
            let gg = tape.mul(g1, g2)?;
            let sum2 = tape.sum_all(gg)?;
            tape.add(sum1, sum2)
        })
        .unwrap();
        assert!(err <= 1e-6, "reduction/broadcast fd error {err}");
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let mut r = rng(10);
        let a = rand_tensor(&mut r, &[6]);
        let b = rand_pos_tensor(&mut r, &[6]);
        let err = check_gradients(&[a, b], &|tape, v| {
            let m = tape.mul(v[0], v[1])?;
            let d = tape.div(m, v[1])?;
            let e = tape.exp(d);
            let s = tape.sub(e, v[0])?;
            let f = tape.affine(s, 0.7, 0.1);
            project_to_scalar(tape, f, 11)
        })
        .unwrap();
        assert!(err <= 1e-6, "elementwise fd error {err}");
    }

    #[test]
    fn conv1d_and_expand_grads_match_fd() {
        let mut r = rng(11);
        let x = rand_tensor(&mut r, &[2, 6]);
        let k = rand_tensor(&mut r, &[3]);
        let d = rand_tensor(&mut r, &[2, 4, 1]);
        let v1 = rand_tensor(&mut r, &[5]);
        let err = check_gradients(&[x, k, d, v1], &|tape, v| {
            let c = tape.conv1d_channels(v[0], v[1])?;
            let e = tape.expand_last(v[2], 5)?;
            let b = tape.broadcast_vec_rows(v[3], &[2, 4])?;
            let eb = tape.mul(e, b)?;
            let s1 = tape.sum_all(eb)?;
            let s2 = tape.sum_all(c)?;
            tape.add(s1, s2)
        })
        .unwrap();
        assert!(err <= 1e-6, "conv1d/expand fd error {err}");
    }
}

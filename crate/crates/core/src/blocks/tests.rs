use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::gradcheck::check_registry_fn;
use crate::tensor::Tensor;

const D: usize = 8;

fn cfg(d: usize, heads: usize, base: usize) -> BlockConfig {
    BlockConfig {
        d,
        heads,
        dylinear_base: base,
    }
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    rng::normal_tensor(&mut rng::seeded(seed), shape, 1.0)
}

/// Overwrites every parameter with small random values so no branch is
/// trivially zero.
fn scramble(reg: &mut ParameterRegistry, seed: u64, std: Scalar) {
    let mut r = rng::seeded(seed);
    for (_, p) in reg.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = rng::normal_tensor(&mut r, &shape, std);
    }
}

fn attention(seed: u64, heads: usize) -> (ParameterRegistry, Attention) {
    let mut reg = ParameterRegistry::new();
    let mut r = rng::seeded(seed);
    let a = Attention::register(&mut reg, &mut r, "attn", D, heads).unwrap();
    scramble(&mut reg, seed + 1, 0.5);
    (reg, a)
}

/// Row-vector affine map `x·W + b` straight from registry values.
fn affine(reg: &ParameterRegistry, lin: &Linear, x: &[Scalar]) -> Vec<Scalar> {
    let w = reg.value(&lin.weight).unwrap();
    let b = reg.value(lin.bias.as_ref().unwrap()).unwrap();
    (0..lin.dout)
        .map(|o| b.data()[o] + (0..lin.din).map(|i| x[i] * w.get(&[i, o])).sum::<Scalar>())
        .collect()
}

fn token(z: &Tensor, b: usize, l: usize, v: usize) -> Vec<Scalar> {
    (0..z.shape()[3]).map(|c| z.get(&[b, l, v, c])).collect()
}

fn softmax(xs: &[Scalar]) -> Vec<Scalar> {
    let m = xs.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    let e: Vec<Scalar> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: Scalar = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn run(reg: &ParameterRegistry, z: &Tensor, f: impl Fn(&mut Session, Var) -> Result<Var>) -> Tensor {
    let mut s = Session::new(reg);
    let x = s.constant(z.clone());
    let y = f(&mut s, x).unwrap();
    s.value(y).clone()
}

fn brute_time_mhsa(reg: &ParameterRegistry, a: &Attention, z: &Tensor) -> Tensor {
    let [b, l, v, d] = [z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]];
    let dh = d / a.heads;
    let scale = 1.0 / (dh as Scalar).sqrt();
    let mut out = Tensor::zeros(z.shape());
    for bi in 0..b {
        for vi in 0..v {
            let q: Vec<_> = (0..l).map(|t| affine(reg, &a.q, &token(z, bi, t, vi))).collect();
            let k: Vec<_> = (0..l).map(|t| affine(reg, &a.k, &token(z, bi, t, vi))).collect();
            let val: Vec<_> = (0..l).map(|t| affine(reg, &a.v, &token(z, bi, t, vi))).collect();
            for t in 0..l {
                let mut merged = vec![0.0; d];
                for h in 0..a.heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<Scalar> = (0..l)
                        .map(|u| r.clone().map(|c| q[t][c] * k[u][c]).sum::<Scalar>() * scale)
                        .collect();
                    let w = softmax(&scores);
                    for c in r {
                        merged[c] = (0..l).map(|u| w[u] * val[u][c]).sum();
                    }
                }
                let o = affine(reg, &a.out, &merged);
                for c in 0..d {
                    out.data_mut()[((bi * l + t) * v + vi) * d + c] = o[c];
                }
            }
        }
    }
    out
}

fn brute_variable_mhsa(reg: &ParameterRegistry, a: &Attention, z: &Tensor) -> Tensor {
    let [b, l, v, d] = [z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]];
    let dh = d / a.heads;
    let scale = 1.0 / (dh as Scalar).sqrt();
    let mut out = Tensor::zeros(z.shape());
    for bi in 0..b {
        let mut qbar = vec![vec![0.0; d]; v];
        let mut kbar = vec![vec![0.0; d]; v];
        for vi in 0..v {
            for t in 0..l {
                let q = affine(reg, &a.q, &token(z, bi, t, vi));
                let k = affine(reg, &a.k, &token(z, bi, t, vi));
                for c in 0..d {
                    qbar[vi][c] += q[c] / l as Scalar;
                    kbar[vi][c] += k[c] / l as Scalar;
                }
            }
        }
        for t in 0..l {
            let val: Vec<_> = (0..v).map(|u| affine(reg, &a.v, &token(z, bi, t, u))).collect();
            for vi in 0..v {
                let mut merged = vec![0.0; d];
                for h in 0..a.heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<Scalar> = (0..v)
                        .map(|u| r.clone().map(|c| qbar[vi][c] * kbar[u][c]).sum::<Scalar>() * scale)
                        .collect();
                    let w = softmax(&scores);
                    for c in r {
                        merged[c] = (0..v).map(|u| w[u] * val[u][c]).sum();
                    }
                }
                let o = affine(reg, &a.out, &merged);
                for c in 0..d {
                    out.data_mut()[((bi * l + t) * v + vi) * d + c] = o[c];
                }
            }
        }
    }
    out
}

#[test]
fn config_validation() {
    assert!(cfg(8, 2, 4).validate().is_ok());
    assert!(matches!(cfg(8, 3, 4).validate(), Err(Error::Config(_))));
    assert!(matches!(cfg(6, 2, 4).validate().and(cfg(9, 3, 4).validate()), Err(Error::Config(_))));
    let mut reg = ParameterRegistry::new();
    let err = UniTSBlock::register(&mut reg, &mut rng::seeded(0), "b", cfg(10, 4, 4));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn time_mhsa_matches_pairwise_loops() {
    let (reg, a) = attention(3, 2);
    let z = random(4, &[2, 5, 3, D]);
    let got = run(&reg, &z, |s, x| a.time_mhsa(s, x));
    let want = brute_time_mhsa(&reg, &a, &z);
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn time_mhsa_single_token_is_value_projection() {
    let (reg, a) = attention(5, 4);
    let z = random(6, &[1, 1, 2, D]);
    let got = run(&reg, &z, |s, x| a.time_mhsa(s, x));
    let want = run(&reg, &z, |s, x| {
        let v = a.v.forward(s, x)?;
        a.out.forward(s, v)
    });
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn time_mhsa_identical_tokens_give_identical_outputs() {
    let (reg, a) = attention(7, 2);
    let row = random(8, &[1, 1, 1, D]);
    let z = Tensor::stack(&[&row, &row]).unwrap().reshape(&[1, 2, 1, D]).unwrap();
    let got = run(&reg, &z, |s, x| a.time_mhsa(s, x));
    assert_eq!(token(&got, 0, 0, 0), token(&got, 0, 1, 0));
}

#[test]
fn variable_mhsa_matches_explicit_loops() {
    let (reg, a) = attention(9, 2);
    let z = random(10, &[2, 4, 3, D]);
    let got = run(&reg, &z, |s, x| a.variable_mhsa(s, x));
    let want = brute_variable_mhsa(&reg, &a, &z);
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn variable_mhsa_single_variable_is_value_projection() {
    let (reg, a) = attention(11, 2);
    let z = random(12, &[1, 5, 1, D]);
    let got = run(&reg, &z, |s, x| a.variable_mhsa(s, x));
    let want = run(&reg, &z, |s, x| {
        let v = a.v.forward(s, x)?;
        a.out.forward(s, v)
    });
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn variable_attention_of_twin_variables_is_uniform() {
    let (reg, a) = attention(13, 2);
    let one = random(14, &[3, D]);
    let z = Tensor::from_fn(&[1, 3, 2, D], |i| {
        let (t, c) = (i / (2 * D), i % D);
        one.get(&[t, c])
    });
    let map = run(&reg, &z, |s, x| a.variable_attention_map(s, x));
    assert_eq!(map.shape(), &[2, 2, 2]);
    for p in map.data() {
        assert!((p - 0.5).abs() < 1e-15);
    }
}

#[test]
fn variable_attention_is_shared_across_positions() {
    // With V replaced by a one-hot probe per variable, the output at each
    // time position reads the attention rows directly.
    let (mut reg, a) = attention(15, 1);
    let v = 3;
    let mut z = random(16, &[1, 4, v, D]);
    for t in 0..4 {
        for vi in 0..v {
            for c in 0..D {
                z.data_mut()[((t * v) + vi) * D + c] += if c == vi { 5.0 } else { 0.0 };
            }
        }
    }
    reg.set_value(&a.v.weight, Tensor::identity(D)).unwrap();
    reg.set_value(a.v.bias.as_ref().unwrap(), Tensor::zeros(&[D])).unwrap();
    reg.set_value(&a.out.weight, Tensor::identity(D)).unwrap();
    reg.set_value(a.out.bias.as_ref().unwrap(), Tensor::zeros(&[D])).unwrap();
    let map = run(&reg, &z, |s, x| a.variable_attention_map(s, x));
    let out = run(&reg, &z, |s, x| a.variable_mhsa(s, x));
    for t in 0..4 {
        for i in 0..v {
            let expect: Scalar = (0..v).map(|u| map.get(&[0, i, u]) * z.get(&[0, t, u, 0])).sum();
            assert!((out.get(&[0, t, i, 0]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gate_zero_init_halves_and_saturates() {
    let mut reg = ParameterRegistry::new();
    let g = Gate::register(&mut reg, &mut rng::seeded(0), "gate", D).unwrap();
    let z = random(17, &[2, 3, 2, D]);
    let half = run(&reg, &z, |s, x| g.forward(s, x));
    for (o, i) in half.data().iter().zip(z.data()) {
        assert_eq!(*o, 0.5 * i);
    }
    reg.set_value(g.proj.bias.as_ref().unwrap(), Tensor::full(&[1], 50.0)).unwrap();
    let open = run(&reg, &z, |s, x| g.forward(s, x));
    assert!(open.max_abs_diff(&z) < 1e-10);
}

#[test]
fn gate_never_amplifies() {
    let mut reg = ParameterRegistry::new();
    let g = Gate::register(&mut reg, &mut rng::seeded(0), "gate", D).unwrap();
    scramble(&mut reg, 18, 3.0);
    let z = random(19, &[2, 6, 3, D]);
    let out = run(&reg, &z, |s, x| g.forward(s, x));
    for (o, i) in out.data().iter().zip(z.data()) {
        assert!(o.abs() <= i.abs());
    }
}

fn ffn(l: usize) -> (ParameterRegistry, DynamicFfn) {
    let mut reg = ParameterRegistry::new();
    let f = DynamicFfn::register(&mut reg, &mut rng::seeded(20), "ffn", D, l).unwrap();
    scramble(&mut reg, 21, 0.5);
    (reg, f)
}

fn set_delta_conv(reg: &mut ParameterRegistry, f: &DynamicFfn) {
    let delta = Tensor::from_fn(&[3, D, D], |i| {
        let (tap, r) = (i / (D * D), i % (D * D));
        if tap == 1 && r / D == r % D { 1.0 } else { 0.0 }
    });
    reg.set_value(&f.conv_weight, delta).unwrap();
    reg.set_value(&f.conv_bias, Tensor::zeros(&[D])).unwrap();
}

#[test]
fn dynamic_ffn_composed_identities() {
    let spans = Spans {
        prompt: 0,
        sample: 4,
        gen: 0,
        cls: 0,
    };
    let (mut reg, f) = ffn(4);
    set_delta_conv(&mut reg, &f);
    for dy in [&f.dy_prompt, &f.dy_sample] {
        reg.set_value(&dy.weight, Tensor::identity(4)).unwrap();
        reg.set_value(&dy.bias, Tensor::zeros(&[4])).unwrap();
    }
    reg.set_value(&f.out.weight, Tensor::identity(D)).unwrap();
    reg.set_value(f.out.bias.as_ref().unwrap(), Tensor::zeros(&[D])).unwrap();
    let z = random(22, &[2, 4, 3, D]);
    let out = run(&reg, &z, |s, x| f.forward(s, x, spans));
    assert!(out.max_abs_diff(&z) < 1e-14);
}

#[test]
fn dynamic_ffn_cls_row_ignores_dylinear_weights() {
    let spans = Spans {
        prompt: 2,
        sample: 3,
        gen: 0,
        cls: 1,
    };
    let (mut reg, f) = ffn(4);
    let z = random(23, &[1, 6, 2, D]);
    let before = run(&reg, &z, |s, x| f.forward(s, x, spans));
    for (k, dy) in [&f.dy_prompt, &f.dy_sample].into_iter().enumerate() {
        reg.set_value(&dy.weight, random(24 + k as u64, &[4, 4])).unwrap();
        reg.set_value(&dy.bias, random(26 + k as u64, &[4])).unwrap();
    }
    let after = run(&reg, &z, |s, x| f.forward(s, x, spans));
    for v in 0..2 {
        assert_eq!(token(&before, 0, 5, v), token(&after, 0, 5, v));
        assert_ne!(token(&before, 0, 1, v), token(&after, 0, 1, v));
    }
}

#[test]
fn dynamic_ffn_zero_output_linear_is_zero() {
    let spans = Spans {
        prompt: 1,
        sample: 3,
        gen: 2,
        cls: 0,
    };
    let (mut reg, f) = ffn(4);
    reg.set_value(&f.out.weight, Tensor::zeros(&[D, D])).unwrap();
    reg.set_value(f.out.bias.as_ref().unwrap(), Tensor::zeros(&[D])).unwrap();
    let out = run(&reg, &random(28, &[2, 6, 2, D]), |s, x| f.forward(s, x, spans));
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn dynamic_ffn_rejects_span_mismatch() {
    let (reg, f) = ffn(4);
    let spans = Spans {
        prompt: 1,
        sample: 2,
        gen: 0,
        cls: 0,
    };
    let mut s = Session::new(&reg);
    let x = s.constant(random(29, &[1, 4, 1, D]));
    assert!(matches!(f.forward(&mut s, x, spans), Err(Error::Dimension { .. })));
}

fn zero_branches(reg: &mut ParameterRegistry) {
    let names: Vec<String> = reg
        .names()
        .filter(|n| n.contains(".out.") || n.contains(".ffn.out."))
        .map(String::from)
        .collect();
    for n in names {
        let shape = reg.value(&n).unwrap().shape().to_vec();
        reg.set_value(&n, Tensor::zeros(&shape)).unwrap();
    }
}


#[test]
fn zero_branches_leave_tokens_unchanged() {
    let mut reg = ParameterRegistry::new();
    let bb = Backbone::register(&mut reg, &mut rng::seeded(30), "backbone", 3, cfg(D, 2, 8)).unwrap();
    zero_branches(&mut reg);
    let spans = Spans {
        prompt: 2,
        sample: 4,
        gen: 1,
        cls: 1,
    };
    let z = random(31, &[2, 8, 3, D]);
    let mut s = Session::new(&reg);
    let x = s.constant(z.clone());
    let out = bb.forward(&mut s, SegmentedTokens { data: x, spans }).unwrap();
    assert_eq!(out.spans, spans);
    assert_eq!(s.value(out.data), &z);
}

#[test]
fn backbone_is_shape_polymorphic() {
    let mut reg = ParameterRegistry::new();
    let bb = Backbone::register(&mut reg, &mut rng::seeded(32), "backbone", 2, cfg(D, 2, 8)).unwrap();
    let n_params = reg.len();
    let layouts = |l: usize| {
        [
            Spans { prompt: 1, sample: l - 2, gen: 1, cls: 0 },
            Spans { prompt: 1, sample: l - 2, gen: 0, cls: 1 },
            Spans { prompt: 0, sample: l, gen: 0, cls: 0 },
        ]
    };
    for l in [4, 9, 19] {
        for v in [1, 3, 7] {
            for spans in layouts(l) {
                let mut s = Session::new(&reg);
                let x = s.constant(random((l * 10 + v) as u64, &[1, l, v, D]));
                let out = bb.forward(&mut s, SegmentedTokens { data: x, spans }).unwrap();
                assert_eq!(s.tape.shape(out.data), &[1, l, v, D]);
                assert_eq!(out.spans, spans);
                assert!(s.value(out.data).is_finite());
            }
        }
    }
    assert_eq!(reg.len(), n_params);
}

#[test]
fn one_block_gradients_match_finite_differences() {
    let mut reg = ParameterRegistry::new();
    let block = UniTSBlock::register(&mut reg, &mut rng::seeded(33), "block", cfg(D, 2, 4)).unwrap();
    scramble(&mut reg, 34, 0.4);
    let spans = Spans {
        prompt: 2,
        sample: 4,
        gen: 1,
        cls: 1,
    };
    let z = random(35, &[1, 8, 2, D]);
    let target = random(36, &[1, 8, 2, D]);
    let report = check_registry_fn(&reg, 1e-5, |s| {
        let x = s.constant(z.clone());
        let y = s.constant(target.clone());
        let out = block.forward(s, SegmentedTokens { data: x, spans })?;
        s.tape.mse(out.data, y)
    })
    .unwrap();
    assert_eq!(report.per_param.len(), reg.len());
    assert!(report.max_error() < 1e-4, "{:?}", report.worst());
}

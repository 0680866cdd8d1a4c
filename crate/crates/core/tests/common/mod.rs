#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselgan::nn::{generator_forward, GeneratorConfig, Network};
use vesselgan::{Tape, Tensor};

/// Direct cross-correlation sum, one output site at a time.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = x.dims4("oracle").unwrap();
    let (co, _, kh, kw) = w.dims4("oracle").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((s * ci + c) * h + iy as usize) * wd + ix as usize];
                                acc += xv * ws[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

pub fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap(), t.constant(b.clone()).unwrap());
    let o = t.conv2d(xv, wv, bv, stride, pad).unwrap();
    t.value(o).clone()
}

pub fn conv_t(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap(), t.constant(b.clone()).unwrap());
    let o = t.conv_transpose2d(xv, wv, bv, stride, pad).unwrap();
    t.value(o).clone()
}

pub fn grid() -> Vec<(usize, usize, usize)> {
    let mut g = Vec::new();
    for stride in [1, 2] {
        for pad in [0, 1, 2] {
            for k in 1..=4 {
                g.push((stride, pad, k));
            }
        }
    }
    g
}

/// The input gradient of `<conv2d(z, w), g>` with respect to `z`.
pub fn conv_input_gradient(g: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, _, h, wd) = g.dims4("oracle").unwrap();
    let (_, co, kh, kw) = w.dims4("oracle").unwrap();
    let zh = (h - 1) * stride + kh - 2 * pad;
    let zw = (wd - 1) * stride + kw - 2 * pad;
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(&[n, co, zh, zw]).with_grad()).unwrap();
    let wv = tape.constant(w.clone()).unwrap();
    let bv = tape.constant(Tensor::zeros(&[w.shape()[0]])).unwrap();
    let out = tape.conv2d(z, wv, bv, stride, pad).unwrap();
    assert_eq!(tape.value(out).shape(), g.shape());
    let gv = tape.constant(g.clone()).unwrap();
    let prod = tape.mul(out, gv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    Tensor::new(&[n, co, zh, zw], tape.grad(z).unwrap().to_vec()).unwrap()
}

/// Largest deviation of `conv2d` from [`naive_conv`] over fifty seeded cases
/// cycling through every (stride, pad, kernel) in the grid.
pub fn conv2d_grid_error(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let combos = grid();
    for case in 0..50 {
        let (stride, pad, k) = combos[case % combos.len()];
        let n = rng.random_range(1..=2);
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let h = rng.random_range(k.max(3)..=7);
        let w = rng.random_range(k.max(3)..=7);
        let x = Tensor::randn(&[n, ci, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[co, ci, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[co], 1.0, &mut rng);
        let got = conv(&x, &wt, &b, stride, pad);
        let want = naive_conv(&x, &wt, &b, stride, pad);
        assert_eq!(got.shape(), want.shape(), "case {case}");
        assert_eq!(got.shape()[2], (h + 2 * pad - k) / stride + 1);
        worst = worst.max(got.max_abs_diff(&want));
    }
    worst
}

/// Largest deviation of `conv_transpose2d` from the conv input gradient plus
/// bias, over every grid entry with pad < kernel.
pub fn conv_transpose_grid_error(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (stride, pad, k) in grid().into_iter().filter(|&(_, p, k)| p < k) {
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let g = Tensor::randn(&[2, ci, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[ci, co, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[co], 1.0, &mut rng);
        let mut want = conv_input_gradient(&g, &w, stride, pad);
        let hw = want.shape()[2] * want.shape()[3];
        for (i, v) in want.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / hw) % co];
        }
        let got = conv_t(&g, &w, &b, stride, pad);
        assert_eq!(got.shape()[2], 2 * stride + k - 2 * pad);
        assert_eq!(got.shape(), want.shape());
        worst = worst.max(got.max_abs_diff(&want));
    }
    worst
}

pub fn run_generator(net: &mut Network, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bind = net.bind(&mut tape, false).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let out = generator_forward(net, &mut tape, &bind, xv).unwrap();
    tape.value(out).clone()
}

/// Closed-form parameter count from the channel schedule alone.
pub fn closed_form_generator_params(cfg: &GeneratorConfig) -> usize {
    let enc = |i: usize| cfg.base_channels * (1 << i.min(3));
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    let mut c_in = cfg.input_channels;
    for i in 0..cfg.depth {
        let c = enc(i);
        total += conv(c_in, c, 4) + bn(c);
        total += conv(c, c / 2, 1) + bn(c / 2) + conv(c / 2, c, 3) + bn(c);
        c_in = c;
    }
    let d = cfg.depth;
    let mut prev = 0;
    for j in 0..d {
        let skip = enc(d - 1 - j);
        let ci = prev + skip;
        let co = if j + 1 < d { enc(d - 2 - j) } else { cfg.base_channels };
        total += conv(ci, co, 4) + bn(co);
        prev = co;
    }
    total + conv(cfg.base_channels, cfg.output_channels, 1)
}

pub fn unit_forward(net: &mut Network, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bind = net.bind(&mut tape, false).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let out = net.forward(&mut tape, &bind, xv).unwrap();
    tape.value(out).clone()
}

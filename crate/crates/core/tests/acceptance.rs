//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 1 4 8`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcsnet::data::synth::SynthCity;
use rcsnet::data::{build_splits, Dataset, NormStats, RawCity, WindowSpec};
use rcsnet::decoder::DecoderParams;
use rcsnet::evaluate::{evaluate_baseline, evaluate_model};
use rcsnet::fusion::FusionParams;
use rcsnet::gradcheck::{self, GradCheckOptions};
use rcsnet::layers::GruCell;
use rcsnet::loss::{self, LossWeights};
use rcsnet::metrics::{self, MetricConfig};
use rcsnet::model::prior_batch;
use rcsnet::temporal::{receptive_field, validate_branches, BranchSpec, Horizon, DEFAULT_BRANCHES};
use rcsnet::topology::{extract_prior, RoadMap};
use rcsnet::trainer::{cosine_lr, train, TrainConfig, Trainer};
use rcsnet::{ConvGeometry, Graph, Init, ModelConfig, ParamStore, PriorMode, RcsNet, Resample, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn small_branches() -> [BranchSpec; 3] {
    [
        BranchSpec::new(Horizon::Short, 1, 1),
        BranchSpec::new(Horizon::Mid, 3, 1),
        BranchSpec::new(Horizon::Long, 3, 1),
    ]
}

fn random_road(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w], |_| match rng.gen_range(0..4) {
        0 => 1.0,
        1 => rng.gen_range(0.0..1.0),
        _ => 0.0,
    })
}

// ------------------------------------------------------------------ 1

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        base_channels: 4,
        hidden: 6,
        t_in: 4,
        t_out: 4,
        road_branch_width: 4,
        branches: small_branches(),
        ..Default::default()
    };
    let mut model = RcsNet::<f64>::new(cfg, 7).map_err(|e| e.to_string())?;
    // Move off the initial point so the zero-initialised fusion output
    // layer does not mask upstream gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let x = rand_tensor(&mut rng, &[1, 8, 4, 8, 8], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[1, 4, 8, 8, 8], -1.0, 1.0);
    let road = random_road(&mut rng, 8, 8);
    let prior = prior_batch(&extract_prior(&RoadMap::new(road.clone()).unwrap(), 5).unwrap()).unwrap();
    let w = LossWeights::default();
    let report = gradcheck::check(
        &model.store,
        |g, p| {
            let xv = g.constant(&x)?;
            let pv = g.constant(&prior)?;
            let yv = g.constant(&y)?;
            let out = model.forward(g, p, xv, pv)?;
            Ok(loss::total_loss(g, out.forecast, yv, &road, &w)?.total)
        },
        GradCheckOptions { step: 1e-3, samples: 240, min_grad: 1e-8, seed: 3 },
    )
    .map_err(|e| e.to_string())?;
    let covered = report.params_covered();
    let modules: Vec<&str> = ["road.", "temporal.", "fusion.", "decoder."]
        .into_iter()
        .filter(|m| !covered.iter().any(|n| n.starts_with(m)))
        .collect();
    let unsampled: Vec<&str> = model.store.iter().map(|(n, _)| n).filter(|n| !covered.contains(n)).collect();
    let fails = report.failures(1e-3);
    let detail = format!(
        "{} samples over {}/{} tensors ({} set aside across relu/abs kinks, {} below 1e-8), max rel err {:.2e}, {:.1}s; tensors without a smooth sample {:?}",
        report.checked(),
        covered.len(),
        model.store.len(),
        report.kinked,
        report.skipped,
        report.max_rel_err(),
        t0.elapsed().as_secs_f64(),
        unsampled
    );
    ensure(report.checked() >= 200, || format!("only {} samples; {detail}", report.checked()))?;
    ensure(modules.is_empty(), || format!("modules without samples {modules:?}; {detail}"))?;
    ensure(fails.is_empty(), || format!("{} samples above 1e-3, e.g. {:?}; {detail}", fails.len(), fails[0]))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs <= 120.0, || format!("too slow; {detail}"))?;
    Ok(detail)
}

// ------------------------------------------------------------------ 2

fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let out_len = |len: usize, k: usize, a: usize| (len + 2 * pad[a] - dil[a] * (k - 1) - 1) / stride[a] + 1;
    let (ot, oh, ow) = (out_len(t, kt, 0), out_len(h, kh, 1), out_len(wd, kw, 2));
    let mut out = Vec::new();
    for bi in 0..n {
        for co in 0..cout {
            for a in 0..ot {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for p in 0..kt {
                                for q in 0..kh {
                                    for r in 0..kw {
                                        let ta = (a * stride[0] + p * dil[0]) as isize - pad[0] as isize;
                                        let ti = (i * stride[1] + q * dil[1]) as isize - pad[1] as isize;
                                        let tj = (j * stride[2] + r * dil[2]) as isize - pad[2] as isize;
                                        if ta < 0 || ti < 0 || tj < 0 || ta >= t as isize || ti >= h as isize || tj >= wd as isize {
                                            continue;
                                        }
                                        s += x.at(&[bi, ci, ta as usize, ti as usize, tj as usize]) * w.at(&[co, ci, p, q, r]);
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    (vec![n, cout, ot, oh, ow], out)
}

fn half_pixel(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0).min((n_in - 1) as f64);
    let i0 = src.floor() as usize;
    (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 60;
    let mut worst = [0.0f64; 8];
    let names = ["conv2d", "conv3d", "avg_pool2d", "down", "up", "gap", "linear", "gru"];
    for _ in 0..cases {
        // conv2d: stride, padding and dilation all vary
        {
            let (n, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let k = [1, 2, 3, 5][rng.gen_range(0..4)];
            let (s, p, d) = (rng.gen_range(1..3), rng.gen_range(0..3), rng.gen_range(1..3));
            let h = rng.gen_range(d * (k - 1) + 1..d * (k - 1) + 6);
            let wd = rng.gen_range(d * (k - 1) + 1..d * (k - 1) + 6);
            let x = rand_tensor(&mut rng, &[n, cin, h, wd], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
            let y = g.conv2d(xv, wv, Some(bv), s, p, d).unwrap();
            let (shape, want) = conv_oracle(
                &x.clone().reshape(&[n, cin, 1, h, wd]).unwrap(),
                &w.clone().reshape(&[cout, cin, 1, k, k]).unwrap(),
                b.data(),
                [1, s, s],
                [0, p, p],
                [1, d, d],
            );
            ensure(g.shape(y) == [shape[0], shape[1], shape[3], shape[4]], || "conv2d shape".into())?;
            worst[0] = worst[0].max(max_abs(g.data(y), &want));
        }
        // conv3d with temporal and spatial dilation
        {
            let (n, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
            let (kt, ks) = ([1, 3][rng.gen_range(0..2)], [1, 3][rng.gen_range(0..2)]);
            let (dt, ds) = (rng.gen_range(1..4), rng.gen_range(1..3));
            let t = rng.gen_range(1..8);
            let (h, wd) = (rng.gen_range(2..6), rng.gen_range(2..6));
            let geom = ConvGeometry::same([kt, ks, ks], [dt, ds, ds]);
            let x = rand_tensor(&mut rng, &[n, cin, t, h, wd], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[cout, cin, kt, ks, ks], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
            let y = g.conv3d(xv, wv, Some(bv), geom).unwrap();
            let (shape, want) = conv_oracle(&x, &w, b.data(), geom.stride, geom.padding, geom.dilation);
            ensure(g.shape(y) == shape.as_slice(), || "conv3d shape".into())?;
            ensure(shape[2..] == [t, h, wd], || "conv3d same padding changed the size".into())?;
            worst[1] = worst[1].max(max_abs(g.data(y), &want));
        }
        // avg_pool2d: zero padding, divisor k²
        {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let (c, h, wd) = (rng.gen_range(1..3), rng.gen_range(1..9), rng.gen_range(1..9));
            let x = rand_tensor(&mut rng, &[c, h, wd], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let y = g.avg_pool2d(xv, k).unwrap();
            let r = (k / 2) as isize;
            let mut want = Vec::new();
            for ci in 0..c {
                for i in 0..h as isize {
                    for j in 0..wd as isize {
                        let mut s = 0.0;
                        for di in -r..=r {
                            for dj in -r..=r {
                                let (a, bb) = (i + di, j + dj);
                                if a >= 0 && bb >= 0 && a < h as isize && bb < wd as isize {
                                    s += x.at(&[ci, a as usize, bb as usize]);
                                }
                            }
                        }
                        want.push(s / (k * k) as f64);
                    }
                }
            }
            worst[2] = worst[2].max(max_abs(g.data(y), &want));
        }
        // block-mean downsampling
        {
            let f = [1, 2, 4][rng.gen_range(0..3)];
            let (c, h, wd) = (rng.gen_range(1..3), f * rng.gen_range(1..4), f * rng.gen_range(1..4));
            let x = rand_tensor(&mut rng, &[1, c, h, wd], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let y = g.resample2d(xv, Resample::DownAverage(f)).unwrap();
            let mut want = Vec::new();
            for ci in 0..c {
                for i in 0..h / f {
                    for j in 0..wd / f {
                        let mut s = 0.0;
                        for a in 0..f {
                            for bb in 0..f {
                                s += x.at(&[0, ci, i * f + a, j * f + bb]);
                            }
                        }
                        want.push(s / (f * f) as f64);
                    }
                }
            }
            ensure(g.shape(y) == [1, c, h / f, wd / f], || "downsample shape".into())?;
            worst[3] = worst[3].max(max_abs(g.data(y), &want));
        }
        // linear upsampling, half-pixel centres clamped at the border
        {
            let f = [2, 4][rng.gen_range(0..2)];
            let (c, h, wd) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
            let x = rand_tensor(&mut rng, &[1, c, h, wd], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let y = g.resample2d(xv, Resample::UpLinear(f)).unwrap();
            let (oh, ow) = (h * f, wd * f);
            let mut want = Vec::new();
            for ci in 0..c {
                for i in 0..oh {
                    let (y0, y1, fy) = half_pixel(i, h, oh);
                    for j in 0..ow {
                        let (x0, x1, fx) = half_pixel(j, wd, ow);
                        let v = |a: usize, bb: usize| x.at(&[0, ci, a, bb]);
                        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                        want.push(top * (1.0 - fy) + bot * fy);
                    }
                }
            }
            worst[4] = worst[4].max(max_abs(g.data(y), &want));
        }
        // global average pooling
        {
            let (n, c, h, wd) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let x = rand_tensor(&mut rng, &[n, c, h, wd], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let y = g.gap(xv).unwrap();
            let want: Vec<f64> = x.data().chunks(h * wd).map(|p| p.iter().sum::<f64>() / (h * wd) as f64).collect();
            worst[5] = worst[5].max(max_abs(g.data(y), &want));
        }
        // linear: x Wᵀ + b
        {
            let (n, i_n, o_n) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let x = rand_tensor(&mut rng, &[n, i_n], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[o_n, i_n], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[o_n], -1.0, 1.0);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w), g.leaf(&b));
            let y = g.linear(xv, wv, Some(bv)).unwrap();
            let mut want = Vec::new();
            for r in 0..n {
                for o in 0..o_n {
                    want.push(b.data()[o] + (0..i_n).map(|k| x.at(&[r, k]) * w.at(&[o, k])).sum::<f64>());
                }
            }
            worst[6] = worst[6].max(max_abs(g.data(y), &want));
        }
        // GRU step
        {
            let (n, i_n, hid) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
            let mut store = ParamStore::<f64>::new();
            let cell = GruCell::new(&mut store, &mut Init::new(rng.gen()), "gru", i_n, hid);
            let x = rand_tensor(&mut rng, &[n, i_n], -2.0, 2.0);
            let h = rand_tensor(&mut rng, &[n, hid], -1.0, 1.0);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (xv, hv) = (g.leaf(&x), g.leaf(&h));
            let out = cell.step(&mut g, &p, xv, hv).unwrap();
            let affine = |lin: &rcsnet::layers::Linear, v: &Tensor<f64>, r: usize, o: usize| {
                let w = store.get(lin.weight);
                let m = w.shape()[1];
                lin.bias.map_or(0.0, |b| store.get(b).data()[o]) + (0..m).map(|k| v.at(&[r, k]) * w.at(&[o, k])).sum::<f64>()
            };
            let mut want = Vec::new();
            for r in 0..n {
                for o in 0..hid {
                    let z = sigmoid(affine(&cell.wz, &x, r, o) + affine(&cell.uz, &h, r, o));
                    let rr = sigmoid(affine(&cell.wr, &x, r, o) + affine(&cell.ur, &h, r, o));
                    let nn = (affine(&cell.wn, &x, r, o) + rr * affine(&cell.un, &h, r, o)).tanh();
                    want.push((1.0 - z) * nn + z * h.at(&[r, o]));
                }
            }
            ensure(cell.uz.bias.is_none() && cell.ur.bias.is_none() && cell.un.bias.is_none(), || "recurrent maps carry a bias".into())?;
            worst[7] = worst[7].max(max_abs(g.data(out), &want));
        }
    }
    let detail = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.iter().all(|&w| w <= 1e-5), || detail.clone())?;
    Ok(format!("{cases} cases each; max abs err: {detail}"))
}

// ------------------------------------------------------------------ 3

fn topology_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (16usize, 16usize);
    let mut worst = 0.0f64;
    let mut max_ori = 0.0f64;
    for _ in 0..20 {
        let road = random_road(&mut rng, h, w);
        let prior = extract_prior(&RoadMap::new(road.clone()).unwrap(), 5).map_err(|e| e.to_string())?;
        ensure(prior.tensor().shape() == [7, h, w], || format!("prior shape {:?}", prior.tensor().shape()))?;

        let at = |m: &[f64], i: isize, j: isize| if i < 0 || j < 0 || i >= h as isize || j >= w as isize { 0.0 } else { m[i as usize * w + j as usize] };
        let stencil = |m: &[f64], k: [[f64; 3]; 3]| {
            let mut out = vec![0.0; h * w];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut s = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            s += k[a][b] * at(m, i + a as isize - 1, j + b as isize - 1);
                        }
                    }
                    out[i as usize * w + j as usize] = s;
                }
            }
            out
        };
        let pool = |m: &[f64]| {
            let mut out = vec![0.0; h * w];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut s = 0.0;
                    for a in -2..=2 {
                        for b in -2..=2 {
                            s += at(m, i + a, j + b);
                        }
                    }
                    out[i as usize * w + j as usize] = s / 25.0;
                }
            }
            out
        };
        let occ = road.data().to_vec();
        let gx = stencil(&occ, [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
        let gy = stencil(&occ, [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
        let lap = stencil(&occ, [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]);
        let con = pool(&occ);
        let cen = pool(&con);
        let edge: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b + 1e-6).sqrt()).collect();
        let ori_x: Vec<f64> = gx.iter().zip(&edge).map(|(a, e)| a / e).collect();
        let ori_y: Vec<f64> = gy.iter().zip(&edge).map(|(a, e)| a / e).collect();
        let int: Vec<f64> = con.iter().zip(&lap).map(|(c, l)| c * l.abs()).collect();
        for (c, want) in [occ, cen, edge, ori_x.clone(), ori_y.clone(), con, int].iter().enumerate() {
            worst = worst.max(max_abs(prior.channel(c), want));
        }
        for (a, b) in prior.channel(3).iter().zip(prior.channel(4)) {
            max_ori = max_ori.max(a * a + b * b);
        }
    }
    let detail = format!("20 maps, max abs err {worst:.1e}, max ori² {max_ori:.9}");
    ensure(worst <= 1e-5, || detail.clone())?;
    ensure(max_ori < 1.0, || detail.clone())?;
    ensure(rcsnet::topology::PRIOR_CHANNELS == 7, || "prior channel count".into())?;
    Ok(detail)
}

// ------------------------------------------------------------------ 4

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [2, 4, 8, 6, 6];
    let w = LossWeights::default();
    let mut worst_total = 0.0f64;
    let mut worst_vanish = 0.0f64;
    for _ in 0..20 {
        let yhat = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let y = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let road = random_road(&mut rng, 6, 6);
        let b = loss::evaluate(&yhat, &y, &road, &w).unwrap();
        let expect = b.pred + 0.5 * b.r#struct + 0.2 * b.temp + 0.1 * b.edge;
        worst_total = worst_total.max(rel(b.total, expect));

        let flat = loss::evaluate(&yhat, &y, &road, &LossWeights { gamma: 1.0, ..w }).unwrap();
        ensure(rel(flat.r#struct, flat.pred) <= 1e-12, || format!("γ=1: struct {} vs pred {}", flat.r#struct, flat.pred))?;
        let empty = loss::evaluate(&yhat, &y, &Tensor::zeros(&[6, 6]), &w).unwrap();
        ensure(rel(empty.r#struct, empty.pred) <= 1e-12, || format!("empty road: struct {} vs pred {}", empty.r#struct, empty.pred))?;

        let mut last = f64::NEG_INFINITY;
        for gamma in [1.0, 1.5, 2.0, 5.0, 10.0] {
            let s = loss::evaluate(&yhat, &y, &road, &LossWeights { gamma, ..w }).unwrap().r#struct;
            ensure(s > last, || format!("struct not increasing at γ={gamma}: {s} <= {last}"))?;
            last = s;
        }

        let same = loss::evaluate(&y, &y, &road, &w).unwrap();
        let c = rng.gen_range(-3.0..3.0);
        let shifted = loss::evaluate(&y.map(|v| v + c), &y, &road, &w).unwrap();
        for v in [same.temp, same.edge, shifted.temp, shifted.edge] {
            worst_vanish = worst_vanish.max(v.abs());
        }
    }
    let detail = format!("max rel total err {worst_total:.1e}, max temp/edge at Ŷ=Y or offset {worst_vanish:.1e}");
    ensure(worst_total <= 1e-6, || detail.clone())?;
    ensure(worst_vanish <= 1e-12, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ 5

fn fusion_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (s, (c_t, c_r)) in [(4, 2), (8, 4), (16, 8)].into_iter().enumerate() {
        let mut store = ParamStore::<f32>::new();
        let fusion = FusionParams::new(&mut store, &mut Init::new(s as u64), c_r, c_t);
        let temporal = Tensor::<f32>::from_fn(&[2, c_t, 8, 8], |_| rng.gen_range(-3.0..3.0));
        let road = Tensor::<f32>::from_fn(&[1, c_r, 8, 8], |_| rng.gen_range(-3.0..3.0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (tv, rv) = (g.input(&temporal).unwrap(), g.input(&road).unwrap());
        let out = fusion.forward(&mut g, &p, tv, rv).map_err(|e| e.to_string())?;
        let same = g.data(out.fused).iter().zip(temporal.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("fused output differs from the temporal feature (C_t={c_t})"))?;
    }
    Ok("3 configurations, bit-identical".into())
}

// ------------------------------------------------------------------ 6

fn decoder_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // shape
    let mut store = ParamStore::<f64>::new();
    let dec = DecoderParams::new(&mut store, &mut Init::new(1), 6, 5);
    let fused = rand_tensor(&mut rng, &[3, 6, 5, 7], -1.0, 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let fv = g.input(&fused).unwrap();
    let y = dec.forward(&mut g, &p, fv, 4).map_err(|e| e.to_string())?;
    ensure(g.shape(y) == [3, 4, 8, 5, 7], || format!("decoder shape {:?}", g.shape(y)))?;

    // bias-only heads
    let mut store2 = store.clone();
    for head in [&dec.volume_head, &dec.speed_head] {
        store2.get_mut(head.weight).fill(0.0);
    }
    store2.set(dec.volume_head.bias, Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    store2.set(dec.speed_head.bias, Tensor::from_f64(&[4], &[11.0, 12.0, 13.0, 14.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let p = store2.bind(&mut g);
    let fv = g.input(&fused).unwrap();
    let yv = dec.forward(&mut g, &p, fv, 4).unwrap();
    let y = g.value(yv);
    let order = [1.0, 11.0, 2.0, 12.0, 3.0, 13.0, 4.0, 14.0];
    for b in 0..3 {
        for t in 0..4 {
            for (c, &v) in order.iter().enumerate() {
                ensure(y.at(&[b, t, c, 2, 3]) == v, || format!("channel {c} holds {} not {v}", y.at(&[b, t, c, 2, 3])))?;
            }
        }
    }

    // scalar configuration against a hand recurrence
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut store = ParamStore::<f64>::new();
        let dec = DecoderParams::new(&mut store, &mut Init::new(seed), 1, 1);
        let f0 = rng.gen_range(-1.0..1.0);
        let t_out = 5;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fv = g.input(&Tensor::from_f64(&[1, 1, 1, 1], &[f0]).unwrap()).unwrap();
        let gv = dec.forward(&mut g, &p, fv, t_out).unwrap();
        let got = g.value(gv);

        let v = |id| store.get(id).data()[0];
        let centre = |c: &rcsnet::layers::Conv2d, o: usize| store.get(c.weight).at(&[o, 0, c.kernel / 2, c.kernel / 2]);
        let bias_at = |c: &rcsnet::layers::Conv2d, o: usize| store.get(c.bias).data()[o];
        let lin = |l: &rcsnet::layers::Linear, x: f64| v(l.weight) * x + l.bias.map_or(0.0, |b| v(b));
        let ctx = centre(&dec.context2, 0) * (centre(&dec.context1, 0) * f0 + bias_at(&dec.context1, 0)).max(0.0) + bias_at(&dec.context2, 0);
        let mut z = ctx;
        let mut h = lin(&dec.init_state, z).tanh();
        let gru = &dec.gru;
        for t in 0..t_out {
            let zg = sigmoid(lin(&gru.wz, z) + lin(&gru.uz, h));
            let rg = sigmoid(lin(&gru.wr, z) + lin(&gru.ur, h));
            let n = (lin(&gru.wn, z) + rg * lin(&gru.un, h)).tanh();
            h = (1.0 - zg) * n + zg * h;
            let s = ctx + lin(&dec.embed, h);
            let q = (centre(&dec.shared, 0) * s + bias_at(&dec.shared, 0)).max(0.0);
            for d in 0..4 {
                let vol = centre(&dec.volume_head, d) * q + bias_at(&dec.volume_head, d);
                let spd = centre(&dec.speed_head, d) * q + bias_at(&dec.speed_head, d);
                worst = worst.max((got.at(&[0, t, 2 * d, 0, 0]) - vol).abs());
                worst = worst.max((got.at(&[0, t, 2 * d + 1, 0, 0]) - spd).abs());
            }
            z = s;
        }
    }
    ensure(worst <= 1e-5, || format!("scalar recurrence max abs err {worst:.1e}"))?;
    Ok(format!("shape ok, interleave ok, scalar recurrence max abs err {worst:.1e}"))
}

// ------------------------------------------------------------------ 7

fn receptive_fields() -> Outcome {
    let r: Vec<usize> = DEFAULT_BRANCHES.iter().map(receptive_field).collect();
    ensure(r == [3, 5, 9], || format!("default receptive fields {r:?}"))?;
    for b in &DEFAULT_BRANCHES {
        ensure(receptive_field(b) == 1 + (b.k - 1) * b.d, || format!("{b:?}"))?;
    }
    ensure(validate_branches(&DEFAULT_BRANCHES, 12).is_ok(), || "defaults rejected at T_in=12".into())?;
    ensure(validate_branches(&DEFAULT_BRANCHES, 9).is_ok(), || "defaults rejected at T_in=9".into())?;
    ensure(validate_branches(&DEFAULT_BRANCHES, 8).is_err(), || "R=9 accepted at T_in=8".into())?;
    let cfg = ModelConfig { t_in: 4, ..Default::default() };
    ensure(RcsNet::<f32>::new(cfg, 0).is_err(), || "model built with R > T_in".into())?;
    Ok(format!("R = {r:?}, R > T_in rejected"))
}

// ------------------------------------------------------------------ 8

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut bump = |a: f64, b: f64| worst = worst.max((a - b).abs());
    let (tau, theta) = (0.05, 1e-3);
    for _ in 0..20 {
        let (t, c, h, w) = (rng.gen_range(2..7), rng.gen_range(1..4), rng.gen_range(7..11), rng.gen_range(7..11));
        let shape = [t, c, h, w];
        // sparse fields so that activity thresholds bite
        let sparse = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(&shape, |_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..2.0) });
        let yhat = sparse(&mut rng);
        let y = sparse(&mut rng);
        let road = random_road(&mut rng, h, w);
        let n = yhat.numel() as f64;

        let err: Vec<f64> = yhat.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
        let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n;
        let mse = err.iter().map(|e| e * e).sum::<f64>() / n;
        let s = metrics::error_stats(&yhat, &y).unwrap();
        bump(s.mae, mae);
        bump(s.mse, mse);
        bump(s.rmse, mse.sqrt());
        ensure(s.rmse * s.rmse == s.mse || rel(s.rmse * s.rmse, s.mse) < 1e-15, || format!("rmse² {} vs mse {}", s.rmse * s.rmse, s.mse))?;

        // horizons: cumulative over the first ceil(m / 5) frames
        let fsz = c * h * w;
        let horizons: Vec<usize> = [5, 10, 15, 20, 25, 30].into_iter().filter(|m: &usize| m.div_ceil(5) <= t).collect();
        let rows = metrics::horizon_slice(&yhat, &y, 5, &horizons).unwrap();
        for (row, &m) in rows.iter().zip(&horizons) {
            let frames = m.div_ceil(5);
            let e = &err[..frames * fsz];
            ensure(row.frames == frames, || format!("{m} min -> {} frames", row.frames))?;
            bump(row.mae, e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64);
            bump(row.mse, e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64);
        }

        // road structure by enumeration
        let (mut road_abs, mut road_n, mut act, mut act_off, mut gt_road, mut both) = (0.0, 0, 0, 0, 0, 0);
        for f in 0..t {
            for i in 0..h * w {
                let on = road.data()[i] > tau;
                let (mut mp, mut mg) = (0.0, 0.0);
                for k in 0..c {
                    let idx = (f * c + k) * h * w + i;
                    mp += yhat.data()[idx] / c as f64;
                    mg += y.data()[idx] / c as f64;
                    if on {
                        road_abs += (yhat.data()[idx] - y.data()[idx]).abs();
                        road_n += 1;
                    }
                }
                let (ap, ag) = (mp > theta, mg > theta);
                act += ap as usize;
                act_off += (ap && !on) as usize;
                gt_road += (ag && on) as usize;
                both += (ag && on && ap) as usize;
            }
        }
        let rs = metrics::road_structure_metrics(&yhat, &y, &road, tau, theta).unwrap();
        bump(rs.road_mae, road_abs / road_n.max(1) as f64);
        bump(rs.offroad_activation_rate, act_off as f64 / act.max(1) as f64);
        bump(rs.road_coverage_recall, both as f64 / gt_road.max(1) as f64);

        // non-zero cells and SSIM on the first frame's channel means
        let frame = |m: &Tensor<f64>, f: usize| Tensor::new(&[c, h, w], m.data()[f * fsz..(f + 1) * fsz].to_vec()).unwrap();
        let mean_map = |m: &Tensor<f64>| -> Vec<f64> { (0..h * w).map(|i| (0..c).map(|k| m.data()[k * h * w + i]).sum::<f64>() / c as f64).collect() };
        let (fp, fg) = (frame(&yhat, 0), frame(&y, 0));
        let (mp, mg) = (mean_map(&fp), mean_map(&fg));
        let nz = mp.iter().filter(|&&v| v > theta).count();
        ensure(metrics::nonzero_cells(&fp, theta).unwrap() == nz, || "non-zero cell count".into())?;
        bump(metrics::frame_ssim(&fp, &fg).unwrap(), ssim_oracle(&mp, &mg, h, w));
        let copy = metrics::frame_ssim(&fg, &fg).unwrap();
        bump(copy, 1.0);

        // Historical Average
        let t_in = rng.gen_range(1..6);
        let x = Tensor::<f64>::from_fn(&[c, t_in, h, w], |_| rng.gen_range(0.0..1.0));
        let ha = metrics::historical_average(&x, 3).unwrap();
        ensure(ha.shape() == [3, c, h, w], || "HA shape".into())?;
        for k in 0..c {
            for i in 0..h * w {
                let m = (0..t_in).map(|ti| x.data()[(k * t_in + ti) * h * w + i]).sum::<f64>() / t_in as f64;
                for f in 0..3 {
                    bump(ha.data()[(f * c + k) * h * w + i], m);
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs err {worst:.1e}"))?;
    Ok(format!("20 cases, max abs err {worst:.1e}, rmse² == mse"))
}

/// Two-pass windowed SSIM, 7x7 uniform window over valid positions.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let l = b.iter().cloned().fold(1e-6, f64::max);
    let (c1, c2) = ((0.01 * l) * (0.01 * l), (0.03 * l) * (0.03 * l));
    let mut vals = Vec::new();
    for i in 0..=h - 7 {
        for j in 0..=w - 7 {
            let idx: Vec<usize> = (i..i + 7).flat_map(|y| (j..j + 7).map(move |x| y * w + x)).collect();
            let mean = |m: &[f64]| idx.iter().map(|&k| m[k]).sum::<f64>() / 49.0;
            let (ma, mb) = (mean(a), mean(b));
            let va = idx.iter().map(|&k| (a[k] - ma).powi(2)).sum::<f64>() / 49.0;
            let vb = idx.iter().map(|&k| (b[k] - mb).powi(2)).sum::<f64>() / 49.0;
            let cov = idx.iter().map(|&k| (a[k] - ma) * (b[k] - mb)).sum::<f64>() / 49.0;
            vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

// ------------------------------------------------------------------ 9

fn desk_model() -> ModelConfig {
    ModelConfig { base_channels: 8, hidden: 32, ..Default::default() }
}

fn overfit_run() -> Result<Vec<f64>, String> {
    let city = SynthCity::new(42, 32, 32, Default::default()).map_err(|e| e.to_string())?;
    let movie = city.movie::<f32>(0, 48).map_err(|e| e.to_string())?;
    let raw = RawCity { name: "synth".into(), road: city.road_map(), movies: vec![movie] };
    let stats = NormStats::fit(&raw.movies).map_err(|e| e.to_string())?;
    let ds = Dataset::build(&[raw], &stats, 12, 12, 6, 5).map_err(|e| e.to_string())?;
    let b = ds.batch(&[0, 1, 2, 3], 0).map_err(|e| e.to_string())?;
    let prior = prior_batch(&ds.cities[0].prior).map_err(|e| e.to_string())?;
    let road = ds.cities[0].road.grid().clone();
    let cfg = TrainConfig { model: desk_model(), seed: 42, ..Default::default() };
    let mut tr = Trainer::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let steps = 300;
    let mut losses = Vec::with_capacity(steps + 1);
    for s in 0..steps {
        let (br, _) = tr.train_step(&b.x, &b.y, &prior, &road, cosine_lr(s, steps, cfg.lr0)).map_err(|e| e.to_string())?;
        losses.push(br.total);
    }
    // loss after the final update
    let mut g = Graph::inference();
    let p = tr.model.store.bind(&mut g);
    let (xv, yv, pv) = (g.input(&b.x).unwrap(), g.input(&b.y).unwrap(), g.input(&prior).unwrap());
    let out = tr.model.forward(&mut g, &p, xv, pv).map_err(|e| e.to_string())?;
    let terms = loss::total_loss(&mut g, out.forecast, yv, &road, &cfg.loss).map_err(|e| e.to_string())?;
    losses.push(terms.breakdown(&g).total);
    Ok(losses)
}

fn training_dynamics() -> Outcome {
    let t0 = Instant::now();
    let a = overfit_run()?;
    let b = overfit_run()?;
    let ratio = a.last().unwrap() / a[0];
    let identical = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let detail = format!(
        "loss {:.4} -> {:.4} ({:.1}% of initial), runs identical: {identical}, {:.0}s",
        a[0],
        a.last().unwrap(),
        100.0 * ratio,
        t0.elapsed().as_secs_f64()
    );
    ensure(ratio <= 0.10 && identical, || detail.clone())?;
    Ok(detail)
}

// ----------------------------------------------------------------- 10

fn road_conditioning() -> Outcome {
    let t0 = Instant::now();
    let city = SynthCity::new(42, 32, 32, Default::default()).map_err(|e| e.to_string())?;
    let movies = (0..20u64).map(|d| city.movie::<f32>(d, 78)).collect::<rcsnet::Result<Vec<_>>>().map_err(|e| e.to_string())?;
    let raw = [RawCity { name: "synth".into(), road: city.road_map(), movies }];
    let win = WindowSpec { t_in: 12, t_out: 12, stride: 6, pool_k: 5 };
    let splits = build_splits(&raw, 42, win).map_err(|e| e.to_string())?;
    let total = splits.train.len() + splits.val.len() + splits.test.len();
    ensure(total == 200, || format!("{total} samples"))?;
    let train_set = Arc::new(splits.train);
    let metric = MetricConfig::default();
    let ha = evaluate_baseline(&splits.val, &metric).map_err(|e| e.to_string())?;

    let run = |prior: PriorMode| -> Result<metrics::MetricReport, String> {
        let cfg = TrainConfig {
            model: ModelConfig { prior, ..desk_model() },
            epochs: 10,
            batch: 2,
            lr0: 3e-3,
            seed: 42,
            ..Default::default()
        };
        let out = train(&cfg, train_set.clone(), &splits.val, None).map_err(|e| e.to_string())?;
        let model = out.best.model().map_err(|e| e.to_string())?;
        evaluate_model(&model, &splits.val, cfg.batch, &metric).map_err(|e| e.to_string())
    };
    let full = run(PriorMode::Topology)?;
    let zero = run(PriorMode::Zeros)?;
    let line = |r: &metrics::MetricReport| format!("road-MAE {:.4} off-road {:.4}", r.road_mae, r.offroad_activation_rate);
    let detail = format!(
        "{} val windows; full {} | HA {} | zero-prior {} | {:.0}s",
        splits.val.len(),
        line(&full),
        line(&ha),
        line(&zero),
        t0.elapsed().as_secs_f64()
    );
    let mut failed = Vec::new();
    for (name, other) in [("HA", &ha), ("zero-prior", &zero)] {
        if !(full.road_mae < other.road_mae) {
            failed.push(format!("road-MAE not below {name}"));
        }
        if !(full.offroad_activation_rate < other.offroad_activation_rate) {
            failed.push(format!("off-road rate not below {name}"));
        }
    }
    ensure(failed.is_empty(), || format!("{}; {detail}", failed.join(", ")))?;
    Ok(detail)
}

// ----------------------------------------------------------------- 11

const PIPELINE_CONFIG: &str = r#"
split = "test"

[synth]
seed = 7
hw = 16
t = 40
files = 4
city = "toy"

[train]
epochs = 2
batch = 2
seed = 7
stride = 4

[train.model]
base_channels = 4
hidden = 8
road_branch_width = 4
t_in = 6
t_out = 4
branches = [{ name = "short", k = 1, d = 1 }, { name = "mid", k = 3, d = 1 }, { name = "long", k = 3, d = 2 }]
"#;

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["rcsnet"];
    full.extend_from_slice(args);
    match rcsnet::cli::run(full.iter().copied()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn pipeline(root: &Path, config: &str) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let (data, run, eval, pred, topo) = (p("data"), p("run"), p("eval"), p("pred"), p("topo"));
    cli(&["synth", "--config", config, "--out", &data])?;
    cli(&["topology", "--config", config, "--road", &p("data/toy/road.gtc"), "--out", &topo])?;
    cli(&["train", "--config", config, "--data", &data, "--out", &run])?;
    cli(&["eval", "--config", config, "--data", &data, "--checkpoint", &p("run/best"), "--out", &eval])?;
    cli(&["predict", "--config", config, "--data", &data, "--checkpoint", &p("run/best"), "--out", &pred, "--dump-gates"])
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    fs::write(&config, PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let config = config.to_string_lossy().into_owned();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &config)?;
    pipeline(&b, &config)?;
    let files = [
        "topo/prior.gtc",
        "run/best/manifest.json",
        "run/train_log.jsonl",
        "eval/report.json",
        "eval/horizons.csv",
        "pred/forecast.gtc",
        "pred/error_heatmap.gtc",
        "pred/gate_direction.gtc",
    ];
    for f in files {
        let (x, y) = (fs::read(a.join(f)), fs::read(b.join(f)));
        let (x, y) = (x.map_err(|e| format!("{f}: {e}"))?, y.map_err(|e| format!("{f}: {e}"))?);
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("synth → topology → train → eval → predict twice; {} artifacts byte-identical", files.len()))
}

// ------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("kernel oracles", kernel_oracles),
        ("topology oracle", topology_oracle),
        ("loss identities", loss_identities),
        ("fusion residual identity", fusion_identity),
        ("decoder contracts", decoder_contracts),
        ("receptive-field law", receptive_fields),
        ("metric oracles", metric_oracles),
        ("training dynamics", training_dynamics),
        ("road conditioning", road_conditioning),
        ("end-to-end reproducibility", reproducibility),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Library results against straight-line reference computations written
//! independently of the implementation.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpfnet::metrics::{ce_loss, segmentation_metrics};
use stpfnet::msff::{channel_weights, BranchFeatures, FcHead, Msff, Pooling};
use stpfnet::nn::{Ctx, ParamStore};
use stpfnet::temporal::{memory_read, AttentionConfig, MemoryBank, Similarity};
use stpfnet::{PoolMode, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, r)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 5)] {
        let a = rand_tensor(&[m, k], &mut r);
        let b = rand_tensor(&[k, n], &mut r);
        let tape = Tape::no_grad();
        let got = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        close(got.data(), &want, 1e-12);
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(2);
    for (cin, cout, h, w, k, stride, pad) in [(1, 2, 5, 5, 3, 1, 1), (3, 4, 8, 6, 3, 2, 1), (2, 3, 4, 4, 1, 1, 0), (2, 2, 7, 7, 3, 2, 0)] {
        let x = rand_tensor(&[cin, h, w], &mut r);
        let wt = rand_tensor(&[cout, cin, k, k], &mut r);
        let b = rand_tensor(&[cout], &mut r);
        let tape = Tape::no_grad();
        let got = tape
            .constant(x.clone())
            .conv2d(&tape.constant(wt.clone()), &tape.constant(b.clone()), stride, pad)
            .unwrap()
            .value();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        assert_eq!(got.shape(), &[cout, ho, wo]);
        let mut want = Vec::new();
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt.get(&[o, c, ky, kx]) * x.get(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    want.push(acc);
                }
            }
        }
        close(got.data(), &want, 1e-12);
    }
}

#[test]
fn bilinear_upsample_matches_coordinate_formula() {
    let mut r = rng(3);
    let (c, h, w) = (2, 3, 5);
    let x = rand_tensor(&[c, h, w], &mut r);
    let tape = Tape::no_grad();
    let got = tape.constant(x.clone()).upsample_bilinear2x().unwrap().value();
    let sample = |ch: usize, fy: f64, fx: f64| {
        let clampi = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        let (fy, fx) = (clampi(fy, h), clampi(fx, w));
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let v = |y, xx| x.get(&[ch, y, xx]);
        (1.0 - dy) * ((1.0 - dx) * v(y0, x0) + dx * v(y0, x1)) + dy * ((1.0 - dx) * v(y1, x0) + dx * v(y1, x1))
    };
    let mut want = Vec::new();
    for ch in 0..c {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                want.push(sample(ch, (oy as f64 + 0.5) / 2.0 - 0.5, (ox as f64 + 0.5) / 2.0 - 0.5));
            }
        }
    }
    close(got.data(), &want, 1e-12);
}

#[test]
fn memory_read_matches_per_position_softmax() {
    let mut r = rng(4);
    for similarity in [Similarity::Softmax, Similarity::DoubleExp] {
        let (t, ck, cv, h, w) = (3, 4, 2, 3, 2);
        let mut bank = MemoryBank::new(None);
        for _ in 0..t {
            bank.append(rand_tensor(&[ck, h, w], &mut r), rand_tensor(&[cv, h, w], &mut r)).unwrap();
        }
        let query = rand_tensor(&[ck, h, w], &mut r);
        let cfg = AttentionConfig { similarity, key_scaling: true };
        let tape = Tape::no_grad();
        let got = memory_read(&bank.lift(&tape), tape.constant(query.clone()), cfg).unwrap().value();

        let mut want = vec![0.0; cv * h * w];
        for qy in 0..h {
            for qx in 0..w {
                let mut scores = Vec::new();
                let mut vals = Vec::new();
                for (k, v) in bank.keys().iter().zip(bank.values()) {
                    for my in 0..h {
                        for mx in 0..w {
                            let dot: f64 = (0..ck).map(|c| query.get(&[c, qy, qx]) * k.get(&[c, my, mx])).sum();
                            let s = dot / (ck as f64).sqrt();
                            scores.push(if similarity == Similarity::Softmax { s } else { s.exp() });
                            vals.push((0..cv).map(|c| v.get(&[c, my, mx])).collect::<Vec<_>>());
                        }
                    }
                }
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..cv {
                    want[(c * h + qy) * w + qx] = scores.iter().zip(&vals).map(|(s, v)| s.exp() / z * v[c]).sum();
                }
            }
        }
        close(got.data(), &want, 1e-12);
    }
}

/// `sigmoid(W2 · relu(W1 · stats + b1) + b2)` evaluated by hand.
fn head_oracle(store: &ParamStore, name: &str, x: &Tensor, pooling: Pooling) -> Vec<f64> {
    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let plane = |ch: usize| &x.data()[ch * hw..(ch + 1) * hw];
    let avg: Vec<f64> = (0..c).map(|ch| plane(ch).iter().sum::<f64>() / hw as f64).collect();
    let max: Vec<f64> = (0..c).map(|ch| plane(ch).iter().copied().fold(f64::MIN, f64::max)).collect();
    let stats = match pooling {
        Pooling::Avg => avg,
        Pooling::Max => max,
        Pooling::Both => avg.into_iter().chain(max).collect(),
    };
    let get = |suffix: &str| store.get(store.id_of(&format!("{name}.{suffix}")).unwrap()).clone();
    let dense = |w: &Tensor, b: &Tensor, v: &[f64]| -> Vec<f64> {
        (0..w.shape()[0])
            .map(|o| b.data()[o] + (0..w.shape()[1]).map(|i| w.get(&[o, i]) * v[i]).sum::<f64>())
            .collect()
    };
    let hidden: Vec<f64> = dense(&get("fc1.weight"), &get("fc1.bias"), &stats).into_iter().map(|v| v.max(0.0)).collect();
    dense(&get("fc2.weight"), &get("fc2.bias"), &hidden)
        .into_iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect()
}

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(shape, -0.8, 0.8, r));
    }
}

#[test]
fn channel_weights_match_hand_computation() {
    for (seed, pooling) in [(5, Pooling::Both), (6, Pooling::Avg), (7, Pooling::Max)] {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let head = FcHead::new(&mut store, "h", 8, 4, pooling, &mut r);
        randomize(&mut store, &mut r);
        let x = rand_tensor(&[8, 3, 4], &mut r);
        let tape = Tape::no_grad();
        let got = channel_weights(&Ctx::new(&tape, &store), tape.constant(x.clone()), &head)
            .unwrap()
            .value();
        close(got.data(), &head_oracle(&store, "h", &x, pooling), 1e-12);
    }
}

#[test]
fn fuse_matches_brute_force() {
    let mut r = rng(8);
    let (c, h, w) = (16, 2, 3);
    let (cv, ck) = (c / 2, c / 8);
    let mut store = ParamStore::new();
    let msff = Msff::new(&mut store, c, 4, Pooling::Both, true, &mut r);
    randomize(&mut store, &mut r);
    let (y, z, wc) = (
        rand_tensor(&[cv, h, w], &mut r),
        rand_tensor(&[cv, h, w], &mut r),
        rand_tensor(&[ck, h, w], &mut r),
    );
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &store);
    let b = BranchFeatures {
        y: tape.constant(y.clone()),
        z: Some(tape.constant(z.clone())),
        w: tape.constant(wc.clone()),
    };
    let got = msff.fuse(&ctx, &b).unwrap().value();

    let lw = store.get(store.id_of("msff.w_lift.weight").unwrap());
    let lb = store.get(store.id_of("msff.w_lift.bias").unwrap());
    let mut lifted = vec![0.0; cv * h * w];
    for o in 0..cv {
        for p in 0..h * w {
            lifted[o * h * w + p] = lb.data()[o] + (0..ck).map(|i| lw.get(&[o, i, 0, 0]) * wc.data()[i * h * w + p]).sum::<f64>();
        }
    }
    let lifted = Tensor::new([cv, h, w], lifted).unwrap();
    let wy = head_oracle(&store, "msff.y_head", &y, Pooling::Both);
    let wz = head_oracle(&store, "msff.z_head", &z, Pooling::Both);
    let ww = head_oracle(&store, "msff.w_head", &lifted, Pooling::Both);
    let mut want = vec![0.0; cv * h * w];
    for ch in 0..cv {
        for p in 0..h * w {
            let i = ch * h * w + p;
            want[i] = wy[ch] * y.data()[i] + wz[ch] * z.data()[i] + ww[ch] * lifted.data()[i];
        }
    }
    close(got.data(), &want, 1e-12);
}

#[test]
fn global_pools_match_plane_statistics() {
    let mut r = rng(9);
    let x = rand_tensor(&[3, 4, 5], &mut r);
    let tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let avg = xv.global_pool(PoolMode::Avg).unwrap().value();
    let max = xv.global_pool(PoolMode::Max).unwrap().value();
    for ch in 0..3 {
        let plane = &x.data()[ch * 20..(ch + 1) * 20];
        assert!((avg.data()[ch] - plane.iter().sum::<f64>() / 20.0).abs() < 1e-15);
        assert_eq!(max.data()[ch], plane.iter().copied().fold(f64::MIN, f64::max));
    }
}

/// Counts over explicit pixel index sets.
fn set_metrics(prob: &Tensor, gt: &Tensor) -> [f64; 4] {
    let sr: HashSet<usize> = prob.data().iter().enumerate().filter(|(_, &p)| p >= 0.5).map(|(i, _)| i).collect();
    let g: HashSet<usize> = gt.data().iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect();
    let inter = sr.intersection(&g).count() as f64;
    let union = sr.union(&g).count() as f64;
    let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
    let mae = prob.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum::<f64>() / prob.numel() as f64;
    [
        ratio(2.0 * inter, (sr.len() + g.len()) as f64),
        ratio(inter, union),
        ratio(inter, g.len() as f64),
        mae,
    ]
}

#[test]
fn metrics_match_index_sets() {
    let mut r = rng(10);
    for case in 0..200 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let density: f64 = if case % 17 == 0 { 0.0 } else { r.random() };
        let gt = Tensor::uniform([1, h, w], 0.0, 1.0, &mut r).map(|v| f64::from(u8::from(v < density)));
        let scale = if case % 13 == 0 { 0.4 } else { 1.0 };
        let prob = Tensor::uniform([1, h, w], 0.0, 1.0, &mut r).map(|v| v * scale);
        let m = segmentation_metrics(&prob, &gt, 0.5).unwrap();
        close(&[m.dice, m.iou, m.recall, m.mae], &set_metrics(&prob, &gt), 1e-15);
    }
}

#[test]
fn ce_loss_matches_formula() {
    let mut r = rng(11);
    let p2 = Tensor::uniform([1, 3, 3], 0.0, 1.0, &mut r);
    let p3 = Tensor::new([1, 3, 3], vec![0.0, 1.0, 0.5, 1e-9, 0.99, 0.3, 0.7, 0.2, 1.0]).unwrap();
    let g2 = Tensor::uniform([1, 3, 3], 0.0, 1.0, &mut r).map(|v| f64::from(u8::from(v > 0.5)));
    let g3 = Tensor::new([1, 3, 3], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let bce = |p: &Tensor, g: &Tensor| {
        p.data()
            .iter()
            .zip(g.data())
            .map(|(&p, &g)| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / p.numel() as f64
    };
    let tape = Tape::no_grad();
    let loss = ce_loss(&[(tape.constant(p2.clone()), &g2), (tape.constant(p3.clone()), &g3)])
        .unwrap()
        .value()
        .item();
    assert!((loss - (bce(&p2, &g2) + bce(&p3, &g3))).abs() < 1e-12);
}

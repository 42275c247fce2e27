//! Acceptance criteria. Runs as a plain binary so that every criterion prints
//! its own PASS or FAIL line even when another one fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cast_core::model::{train_ctx, BoundModel, CastConfig, CastModel, Variant};
use cast_core::nn::{self, Conv2dParams, Ctx, Linear, MhsaParams, Mode, PointwiseProj};
use cast_core::preprocess::{compute_interval, select_frames, write_clip, FrameClip, SamplingPlan, Split};
use cast_core::runner::{self, ExperimentConfig};
use cast_core::synth::{dataset_clip, generate_split, SynthConfig};
use cast_core::tensor::grad_check;
use cast_core::train::{self, accuracy, bce_with_logits, roc_auc, TrainConfig};
use cast_core::{Fill, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `x` is `[n, i]` row-major, `w` is `[o, i]`.
fn affine(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = b.data()[c];
            for k in 0..i {
                s += x[r * i + k] * w.get(&[c, k]);
            }
            out[r * o + c] = s;
        }
    }
    out
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    files
}

// ---- 1: gradients -----------------------------------------------------------

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let w = g.constant(rand_t(g.shape(v), 1000 + seed));
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

fn grad_check_model_config() -> CastConfig {
    CastConfig {
        channels: vec![4, 8, 8],
        d: 8,
        heads: 2,
        fusion_heads: 2,
        encoder_layers: 1,
        ffn_dim: Some(16),
        clip_len: 2,
        height: 8,
        width: 8,
        ..CastConfig::default()
    }
}

/// Smallest |pre-activation| over the backbone rectifiers.
fn relu_margin(m: &CastModel, clip: &Tensor) -> f64 {
    let mut g = Graph::new();
    let b = m.bind_frozen(&mut g);
    let mut x = g.constant(clip.clone());
    let mut margin = f64::INFINITY;
    for i in 0..m.config.channels.len() {
        let p = Conv2dParams::bind(&b.bound, &format!("backbone.{i}"), 2, 1).unwrap();
        let y = nn::conv2d(&mut g, x, &p).unwrap();
        margin = g.value(y).data().iter().fold(margin, |m, v| m.min(v.abs()));
        x = g.relu(y).unwrap();
    }
    margin
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[3, 4], 2);
    let row = rand_t(&[4], 3);
    type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> cast_core::Result<Var>>;
    let ops: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        ("add", vec![a.clone(), row.clone()], Box::new(|g, p| g.add(p[0], p[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, p| g.sub(p[0], p[1]))),
        ("mul", vec![a.clone(), row.clone()], Box::new(|g, p| g.mul(p[0], p[1]))),
        ("scale", vec![a.clone()], Box::new(|g, p| g.scale(p[0], 0.6))),
        ("sigmoid", vec![a.clone()], Box::new(|g, p| g.sigmoid(p[0]))),
        ("exp", vec![a.clone()], Box::new(|g, p| g.exp(p[0]))),
        ("log", vec![a.map(|x| x.abs() + 0.5)], Box::new(|g, p| g.log(p[0]))),
        ("relu", vec![a.clone()], Box::new(|g, p| g.relu(p[0]))),
        ("matmul", vec![a.clone(), rand_t(&[4, 2], 4)], Box::new(|g, p| g.matmul(p[0], p[1]))),
        ("matmul_nt", vec![a.clone(), b.clone()], Box::new(|g, p| g.matmul_nt(p[0], p[1]))),
        ("transpose", vec![a.clone()], Box::new(|g, p| g.transpose(p[0]))),
        ("mean", vec![a.clone()], Box::new(|g, p| g.mean(p[0]))),
        ("mean_last", vec![a.clone()], Box::new(|g, p| g.mean_last(p[0]))),
        ("mean_first", vec![rand_t(&[3, 2, 4], 5)], Box::new(|g, p| g.mean_first(p[0]))),
        ("permute", vec![rand_t(&[2, 3, 4], 6)], Box::new(|g, p| g.permute(p[0], &[2, 0, 1]))),
        ("reshape", vec![a.clone()], Box::new(|g, p| g.reshape(p[0], &[6, 2]))),
        ("slice_last", vec![a.clone()], Box::new(|g, p| g.slice_last(p[0], 1, 2))),
        ("concat_last", vec![a.clone(), rand_t(&[3, 2], 7)], Box::new(|g, p| g.concat_last(&[p[0], p[1]]))),
        ("softmax", vec![a.clone()], Box::new(|g, p| g.softmax_last(p[0]))),
        (
            "layer_norm",
            vec![a.clone(), rand_t(&[4], 8), rand_t(&[4], 9)],
            Box::new(|g, p| g.layer_norm(p[0], p[1], p[2], 1e-5)),
        ),
        (
            "conv2d",
            vec![rand_t(&[2, 2, 5, 5], 10), rand_t(&[3, 2, 3, 3], 11), rand_t(&[3], 12)],
            Box::new(|g, p| g.conv2d(p[0], p[1], p[2], 2, 1)),
        ),
        ("avg_pool2d", vec![rand_t(&[2, 4, 4], 13)], Box::new(|g, p| g.avg_pool2d(p[0], 2))),
        ("dropout", vec![a.clone()], Box::new(|g, p| g.dropout(p[0], 0.3, true, 14))),
        (
            "bce_with_logits",
            vec![rand_t(&[6], 15)],
            Box::new(|g, p| g.bce_with_logits(p[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])),
        ),
        (
            "pointwise_project",
            vec![rand_t(&[5, 3, 3], 16), rand_t(&[4, 5], 17), rand_t(&[4], 18)],
            Box::new(|g, p| nn::pointwise_project(g, p[0], &PointwiseProj { weight: p[1], bias: p[2] })),
        ),
        ("global_avg_pool", vec![rand_t(&[3, 4, 4], 19)], Box::new(|g, p| nn::global_avg_pool(g, p[0]))),
    ];
    let mut worst_op = (String::new(), 0.0f64);
    for (i, (name, params, op)) in ops.into_iter().enumerate() {
        let report = grad_check(&params, 1e-5, |g, p| {
            let out = op(g, p)?;
            Ok(weighted_sum(g, out, i as u64))
        })
        .map_err(|e| format!("{name}: {e}"))?;
        if report.max_rel_error > worst_op.1 {
            worst_op = (name.to_string(), report.max_rel_error);
        }
    }

    // multi-head self-attention with train-mode dropout on its weights
    let mut set = ParamSet::new();
    nn::init_mhsa(&mut set, "att", 4, 2, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
    let mut params: Vec<Tensor> = set.tensors().cloned().collect();
    params.push(rand_t(&[3, 4], 21));
    let names: Vec<String> = set.names().map(str::to_owned).collect();
    let report = grad_check(&params, 1e-5, |g, p| {
        let lin = |prefix: &str| {
            let i = names.iter().position(|n| n == &format!("{prefix}.weight")).unwrap();
            Linear { weight: p[i], bias: p[i + 1] }
        };
        let mp = MhsaParams { q: lin("att.q"), k: lin("att.k"), v: lin("att.v"), out: lin("att.out"), heads: 2 };
        let out = nn::mhsa(g, p[p.len() - 1], &mp, &mut Ctx::new(Mode::Train, 0.3, 22))?;
        Ok(weighted_sum(g, out.output, 23))
    })
    .map_err(|e| format!("mhsa: {e}"))?;
    if report.max_rel_error > worst_op.1 {
        worst_op = ("mhsa".into(), report.max_rel_error);
    }
    ensure(worst_op.1 < 1e-6, || format!("component op {} rel error {:.3e} >= 1e-6", worst_op.0, worst_op.1))?;

    let cfg = grad_check_model_config();
    let clip = rand_t(&[2, 3, 8, 8], 43);
    let model = (42..).map(|s| CastModel::init(cfg.clone(), s).unwrap()).find(|m| relu_margin(m, &clip) > 1e-4).unwrap();
    let params: Vec<Tensor> = model.params.tensors().cloned().collect();
    let full = grad_check(&params, 1e-5, |g, p| {
        let b = BoundModel { cfg: &model.config, bound: model.params.attach(p)? };
        let x = g.constant(clip.clone());
        let out = b.forward(g, x, &mut train_ctx(&cfg, 44))?;
        g.bce_with_logits(out.clip_logit, &[1.0])
    })
    .map_err(|e| format!("full model: {e}"))?;
    ensure(full.max_rel_error < 1e-4, || format!("full model rel error {:.3e} >= 1e-4 at {:?}", full.max_rel_error, full.worst))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "worst op {} {:.2e}; full model {:.2e} over {} entries",
        worst_op.0, worst_op.1, full.max_rel_error, full.entries_checked
    ))
}

// ---- 2: oracles -------------------------------------------------------------

fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b.data()[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.get(&[ci, iy as usize, ix as usize]) * k.get(&[co, ci, ky, kx]);
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

fn mhsa_oracle(set: &ParamSet, x: &Tensor, heads: usize) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let p = |part: &str, kind: &str| set.get(&format!("att.{part}.{kind}")).unwrap();
    let q = affine(x.data(), n, p("q", "weight"), p("q", "bias"));
    let k = affine(x.data(), n, p("k", "weight"), p("k", "bias"));
    let v = affine(x.data(), n, p("v", "weight"), p("v", "bias"));
    let dh = d / heads;
    let mut mixed = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for j in 0..n {
                for c in 0..dh {
                    mixed[i * d + h * dh + c] += a[j] * v[j * d + h * dh + c];
                }
            }
        }
    }
    affine(&mixed, n, p("out", "weight"), p("out", "bias"))
}

fn fusion_oracle(z: &Tensor, s: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (f, n, d) = (z.shape()[0], s.shape()[0], z.shape()[1]);
    let mut attn = Vec::with_capacity(f * n);
    let mut sum = z.data().to_vec();
    for i in 0..f {
        let scores: Vec<f64> =
            (0..n).map(|j| (0..d).map(|c| z.get(&[i, c]) * s.get(&[j, c])).sum::<f64>() / (d as f64).sqrt()).collect();
        let a = softmax(&scores);
        for j in 0..n {
            for c in 0..d {
                sum[i * d + c] += a[j] * s.get(&[j, c]);
            }
        }
        attn.extend(a);
    }
    let fused = sum
        .chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(move |v| (v - mean) / (var + nn::LAYER_NORM_EPS).sqrt()).collect::<Vec<_>>()
        })
        .collect();
    (fused, attn)
}

fn criterion_oracles() -> Outcome {
    const INSTANCES: u64 = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 5];
    for i in 0..INSTANCES {
        let seed = 100 * i;
        // conv2d
        let (c_in, c_out) = (rng.random_range(1..4), rng.random_range(1..5));
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let (x, kern, bias) = (rand_t(&[c_in, h, w], seed), rand_t(&[c_out, c_in, k, k], seed + 1), rand_t(&[c_out], seed + 2));
        let mut g = Graph::new();
        let p = Conv2dParams { kernel: g.constant(kern.clone()), bias: g.constant(bias.clone()), stride, padding: pad };
        let xv = g.constant(x.clone());
        let y = nn::conv2d(&mut g, xv, &p).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(max_diff(g.value(y).data(), &conv_oracle(&x, &kern, &bias, stride, pad)));

        // pointwise projection
        let (c, d) = (rng.random_range(1..9), rng.random_range(1..9));
        let (fmap, wt, bt) = (rand_t(&[c, h, w], seed + 3), rand_t(&[d, c], seed + 4), rand_t(&[d], seed + 5));
        let xv = g.constant(fmap.clone());
        let p = PointwiseProj { weight: g.constant(wt.clone()), bias: g.constant(bt.clone()) };
        let y = nn::pointwise_project(&mut g, xv, &p).map_err(|e| e.to_string())?;
        let mut want = vec![0.0; d * h * w];
        for o in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = bt.data()[o];
                    for ci in 0..c {
                        s += wt.get(&[o, ci]) * fmap.get(&[ci, yy, xx]);
                    }
                    want[(o * h + yy) * w + xx] = s;
                }
            }
        }
        worst[1] = worst[1].max(max_diff(g.value(y).data(), &want));

        // global average pool
        let y = nn::global_avg_pool(&mut g, xv).map_err(|e| e.to_string())?;
        let want: Vec<f64> = (0..c)
            .map(|ci| {
                let mut s = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        s += fmap.get(&[ci, yy, xx]);
                    }
                }
                s / (h * w) as f64
            })
            .collect();
        worst[2] = worst[2].max(max_diff(g.value(y).data(), &want));

        // multi-head self-attention
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..5);
        let n = rng.random_range(1..7);
        let mut set = ParamSet::new();
        nn::init_mhsa(&mut set, "att", d, heads, &mut ChaCha8Rng::seed_from_u64(seed + 6)).unwrap();
        for (j, (_, t)) in set.iter_mut().enumerate() {
            *t = rand_t(t.shape(), seed + 10 + j as u64);
        }
        let x = rand_t(&[n, d], seed + 7);
        let mut g = Graph::new();
        let b = set.bind_frozen(&mut g);
        let p = MhsaParams::bind(&b, "att", heads).map_err(|e| e.to_string())?;
        let xv = g.constant(x.clone());
        let out = nn::mhsa(&mut g, xv, &p, &mut Ctx::eval()).map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(max_diff(g.value(out.output).data(), &mhsa_oracle(&set, &x, heads)));

        // cross-attention fusion, full variant, one head, identity projections
        let d = 8;
        let mut m = CastModel::<f64>::init(
            CastConfig { channels: vec![4, 8, 8], d, heads: 1, fusion_heads: 1, clip_len: 4, height: 16, width: 16, ..CastConfig::default() },
            seed,
        )
        .unwrap();
        for part in ["q", "k", "v", "out"] {
            let mut eye = Tensor::zeros(&[d, d]);
            for r in 0..d {
                eye.data_mut()[r * d + r] = 1.0;
            }
            *m.params.get_mut(&format!("fusion.attn.{part}.weight")).unwrap() = eye;
            *m.params.get_mut(&format!("fusion.attn.{part}.bias")).unwrap() = Tensor::zeros(&[d]);
        }
        let (f, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let (z, s) = (rand_t(&[f, d], seed + 8), rand_t(&[n, d], seed + 9));
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g);
        let (zv, sv) = (g.constant(z.clone()), g.constant(s.clone()));
        let fusion = b.fuse(&mut g, zv, sv, &mut Ctx::eval()).map_err(|e| e.to_string())?;
        let (want_fused, want_attn) = fusion_oracle(&z, &s);
        let attn = fusion.attention.ok_or("full variant returned no attention")?;
        worst[4] = worst[4].max(max_diff(g.value(fusion.fused).data(), &want_fused)).max(max_diff(attn.data(), &want_attn));
    }
    let names = ["conv2d", "pointwise_project", "global_avg_pool", "mhsa", "cross_attention_fuse"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w < 1e-10, || format!("{name} differs from its oracle by {w:.3e}"))?;
    }
    Ok(format!(
        "{INSTANCES} instances each; max diffs {}",
        names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

// ---- 3: metrics -------------------------------------------------------------

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(2..=100);
        let levels = if rng.random_bool(0.5) { rng.random_range(2..8) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| if levels > 0 { rng.random_range(0..levels) as f64 / levels as f64 } else { rng.random::<f64>() })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let p = labels.iter().filter(|&&y| y).count() as u64;
        let q = n as u64 - p;
        if p == 0 || q == 0 {
            continue;
        }
        // twice the Mann-Whitney statistic: a win counts 2, a tie 1
        let mut twice = 0u64;
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let roc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let exact = roc.auc_numer as u128 * (2 * p * q) as u128 == twice as u128 * roc.auc_denom as u128;
        let brute = twice as f64 / (2 * p * q) as f64;
        ensure(exact && roc.auc == brute, || format!("instance {done}: auc {} vs brute force {brute}", roc.auc))?;
        done += 1;
    }
    let c = accuracy(&[0.9, 0.8, 0.6, 0.4, 0.2, 0.1], &[true, true, true, true, false, false]).map_err(|e| e.to_string())?;
    ensure((c.tp, c.fn_, c.tn, c.fp) == (3, 1, 2, 0), || format!("confusion {c:?}"))?;
    ensure(c.accuracy == 5.0 / 6.0, || format!("accuracy {}", c.accuracy))?;
    Ok(format!("200 AUC instances exact; accuracy fixture {:.4}", c.accuracy))
}

// ---- 4: loss ----------------------------------------------------------------

fn criterion_loss() -> Outcome {
    let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
    // 1 - σ(z) written as σ(-z); the literal subtraction loses ~1e-8 near |z| = 20
    let naive = |z: f64, y: f64| -(y * sigma(z).ln() + (1.0 - y) * sigma(-z).ln());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let z = rng.random_range(-20.0..=20.0);
        let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        worst = worst.max((bce_with_logits(z, y) - naive(z, y)).abs());
    }
    ensure(worst < 1e-9, || format!("naive form differs by {worst:.3e}"))?;
    let mut g = Graph::<f64>::new();
    for z in [1e4, -1e4] {
        for y in [0.0, 1.0] {
            let v = bce_with_logits(z, y);
            let zv = g.constant(Tensor::from_f64(&[1], &[z]).unwrap());
            let t = g.bce_with_logits(zv, &[y]).map_err(|e| e.to_string())?;
            let tv = g.value(t).item();
            ensure(v.is_finite() && tv.is_finite(), || format!("non-finite loss at z={z}, y={y}"))?;
        }
    }
    let ln2 = bce_with_logits(0.0, 1.0);
    let two = bce_with_logits(2.0, 0.0);
    ensure((ln2 - std::f64::consts::LN_2).abs() < 1e-6, || format!("(0,1) -> {ln2}"))?;
    ensure((two - 2.126928).abs() < 1e-6, || format!("(2,0) -> {two}"))?;
    Ok(format!("max naive diff {worst:.1e}; (0,1) {ln2:.6}; (2,0) {two:.6}"))
}

// ---- 5: frame sampling ------------------------------------------------------

fn criterion_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let f_orig = rng.random_range(1.0..120.0);
        let r = rng.random_range(0.5..60.0);
        let len = rng.random_range(1..3000);
        let plan = SamplingPlan::new(f_orig, r, len, 16).map_err(|e| format!("case {case}: {e}"))?;
        let delta = compute_interval(f_orig, r).map_err(|e| e.to_string())?;
        let idx = &plan.selected_indices;
        ensure(delta >= 1 && plan.delta == delta, || format!("case {case}: delta {delta}"))?;
        ensure(plan.candidate_count == len / delta, || format!("case {case}: {} candidates", plan.candidate_count))?;
        ensure(idx.len() == 16 && idx.iter().all(|&i| i < len), || format!("case {case}: {idx:?} for L={len}"))?;
        ensure(idx.windows(2).all(|w| w[0] <= w[1]), || format!("case {case}: {idx:?} decreases"))?;
        if plan.candidate_count >= 16 {
            ensure(idx.windows(2).all(|w| w[0] < w[1]), || format!("case {case}: {idx:?} repeats"))?;
        }
    }
    let fixture: Vec<usize> = (0..16).map(|k| 18 * k).collect();
    let got = select_frames(300, 3, 16).map_err(|e| e.to_string())?;
    ensure(got == fixture, || format!("L=300 fixture gave {got:?}"))?;
    Ok("1000 random plans; L=300 fixture matches".into())
}

// ---- 6: learnability --------------------------------------------------------

fn criterion_learnability() -> Outcome {
    let synth = SynthConfig::default();
    let train_set = generate_split(&synth, Split::Train).map_err(|e| e.to_string())?;
    let val_set = generate_split(&synth, Split::Val).map_err(|e| e.to_string())?;
    let tc = TrainConfig { max_epochs: 15, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let out = train::train::<f64>(&CastConfig::default(), &train_set, &val_set, &tc, dir.path(), &mut |_| {})
        .map_err(|e| e.to_string())?;
    let (epoch, auc) = out
        .history
        .iter()
        .map(|r| (r.epoch, r.val_auc))
        .find(|&(_, a)| a >= 0.95)
        .ok_or_else(|| format!("val AUC never reached 0.95: {:?}", out.history.iter().map(|r| r.val_auc).collect::<Vec<_>>()))?;
    Ok(format!("val AUC {auc:.4} at epoch {epoch} of 15"))
}

// ---- 7: ablation ------------------------------------------------------------

fn criterion_ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { base_dir: dir.path().to_path_buf(), ..ExperimentConfig::default() };
    let outcome = runner::cmd_ablate(&cfg, &cfg.ablate_dir(), &mut std::io::sink(), &mut std::io::sink())
        .map_err(|e| e.to_string())?;
    ensure(outcome.failures.is_empty(), || {
        outcome.failures.iter().map(|f| format!("{} seed {}: {}", f.variant, f.seed, f.error)).collect::<Vec<_>>().join("; ")
    })?;
    ensure(outcome.rows.len() == Variant::ALL.len() * 3, || format!("{} runs completed", outcome.rows.len()))?;
    let (_, full) = outcome.mean(Variant::Full).ok_or("no full rows")?;
    let (_, no_cross) = outcome.mean(Variant::NoCrossAttention).ok_or("no no_cross_attention rows")?;
    ensure(full >= no_cross - 0.02, || format!("shifted AUC full {full:.4} < no_cross_attention {no_cross:.4} - 0.02"))?;
    Ok(format!("all 18 runs completed; mean shifted AUC full {full:.4}, no_cross_attention {no_cross:.4}"))
}

// ---- 8: determinism ---------------------------------------------------------

fn criterion_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let text = "[synth]\nn_train = 32\nn_val = 16\nn_test = 16\n[training]\nmax_epochs = 2\n";
    let cfg = ExperimentConfig::parse(text, root.path()).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(PathBuf, PathBuf), String> {
        let data = root.path().join(name).join("data");
        let train_dir = root.path().join(name).join("train");
        let manifest = runner::cmd_gen(&cfg.synth, &data, &mut std::io::sink()).map_err(|e| e.to_string())?;
        runner::cmd_train(&cfg, &manifest, &train_dir, &mut std::io::sink(), &mut std::io::sink())
            .map_err(|e| e.to_string())?;
        Ok((data, train_dir))
    };
    let (data_a, train_a) = run("a")?;
    let (data_b, train_b) = run("b")?;
    let (da, db) = (files_under(&data_a), files_under(&data_b));
    ensure(da == db, || "datasets differ".into())?;
    let (ta, tb) = (files_under(&train_a), files_under(&train_b));
    ensure(ta == tb, || "history or checkpoint differ".into())?;
    ensure(ta.iter().any(|(p, _)| p.ends_with(train::HISTORY_FILE)), || "no history file".into())?;
    ensure(ta.iter().any(|(p, _)| p.ends_with(train::CHECKPOINT_FILE)), || "no checkpoint".into())?;
    Ok(format!("{} dataset files and {} training files byte-identical", da.len(), ta.len()))
}

// ---- 9: loss scaling --------------------------------------------------------

fn criterion_loss_scale() -> Outcome {
    let synth = SynthConfig { n_train: 32, n_val: 16, ..SynthConfig::default() };
    let train_set = generate_split(&synth, Split::Train).map_err(|e| e.to_string())?;
    let val_set = generate_split(&synth, Split::Val).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let run = |scale: f64| {
        let tc = TrainConfig { max_epochs: 3, loss_scale: scale, ..TrainConfig::default() };
        train::train::<f64>(&CastConfig::default(), &train_set, &val_set, &tc, &dir.path().join(format!("s{scale}")), &mut |_| {})
            .map_err(|e| e.to_string())
    };
    let (a, b) = (run(1.0)?, run(1024.0)?);
    let diff = a.last.params.max_abs_diff(&b.last.params);
    ensure(diff < 1e-9, || format!("final parameters differ by {diff:.3e}"))?;
    Ok(format!("max parameter diff {diff:.1e} after 3 epochs"))
}

// ---- 10: structural invariants ----------------------------------------------

fn criterion_structure() -> Outcome {
    let synth = SynthConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let clips: Vec<FrameClip> = (0..50)
        .map(|_| dataset_clip(&synth, Split::Test, rng.random_range(0..10_000)).unwrap())
        .collect();
    let mut worst_row = 0.0f64;
    let mut worst_mean = 0.0f64;
    for variant in Variant::ALL {
        let model = CastModel::<f64>::init(CastConfig { variant, ..CastConfig::default() }, 10).unwrap();
        for clip in &clips {
            let out = model.forward(clip).map_err(|e| e.to_string())?;
            let f = out.frame_logits.data();
            worst_mean = worst_mean.max((out.clip_logit - f.iter().sum::<f64>() / f.len() as f64).abs());
            if let Some(a) = &out.attention {
                for row in a.rows() {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    ensure(worst_row < 1e-6, || format!("attention row sum off by {worst_row:.3e}"))?;
    ensure(worst_mean < 1e-10, || format!("clip logit differs from frame mean by {worst_mean:.3e}"))?;

    let model = CastModel::<f64>::init(CastConfig::default(), 11).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).map_err(|e| e.to_string())?;
    for (i, clip) in clips.iter().enumerate() {
        let clip_path = dir.path().join(format!("{i}.clip"));
        write_clip(&clip_path, clip).map_err(|e| e.to_string())?;
        let img = dir.path().join(format!("{i}.pgm"));
        runner::cmd_heatmap(&ckpt, &clip_path, i % clip.len(), &img).map_err(|e| e.to_string())?;
        let (w, h, px) = runner::decode_pgm(&std::fs::read(&img).unwrap()).map_err(|e| e.to_string())?;
        ensure((w, h) == (clip.width(), clip.height()) && px.len() == w * h, || format!("clip {i}: {w}x{h} image"))?;
    }
    Ok(format!("50 clips; max row-sum error {worst_row:.1e}; max clip/frame-mean gap {worst_mean:.1e}; 50 valid P5 heatmaps"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_gradients),
        ("oracle equivalence", criterion_oracles),
        ("metric exactness", criterion_metrics),
        ("loss contract", criterion_loss),
        ("frame sampling properties", criterion_sampling),
        ("learnability", criterion_learnability),
        ("ablation direction", criterion_ablation),
        ("determinism", criterion_determinism),
        ("loss-scale invariance", criterion_loss_scale),
        ("structural invariants", criterion_structure),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

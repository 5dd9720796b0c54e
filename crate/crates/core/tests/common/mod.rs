//! Checks shared by the unit suites and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::rc::Rc;

use qtgvqa::awmtl::{AwmtlSign, TypeState};
use qtgvqa::metrics::{ewaa, ifwaa};
use qtgvqa::model::{fuse_decoder, Bound, ModelConfig, Params};
use qtgvqa::temporal::{make_mask_plan, predict_future, reconstruct_masked, MaskPlan};
use qtgvqa::tensor::{grad_check, grad_check_many, AttnBlock, AttnSpec, Tape, Tensor, DEFAULT_STEP};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random15(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Worst relative error of every tape primitive over `instances` random cases.
pub fn primitive_suite(instances: usize) -> Vec<(&'static str, f64)> {
    type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);
    let h = DEFAULT_STEP;
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(move |rng| {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let w = random15(rng, &[m * n]);
            grad_check_many(|t, v| {
                let c = t.matmul(v[0], v[1])?;
                t.weighted_sum(c, w.data().to_vec())
            }, &[random15(rng, &[m, k]), random15(rng, &[k, n])], h).unwrap()
        })),
        ("add_sub_mul", Box::new(move |rng| {
            let n = rng.random_range(1..6);
            grad_check_many(|t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(a, v[2])?;
                let p = t.mul(s, v[0])?;
                t.sum(p)
            }, &[random15(rng, &[n]), random15(rng, &[n]), random15(rng, &[n])], h).unwrap()
        })),
        ("scale_bias_rows", Box::new(move |rng| {
            let (m, n) = (rng.random_range(1..4), rng.random_range(1..4));
            let c: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w = random15(rng, &[m * n]);
            grad_check_many(|t, v| {
                let a = t.add_bias(v[0], v[1])?;
                let b = t.scale_rows(a, c.clone())?;
                let s = t.scale(b, 0.7)?;
                t.weighted_sum(s, w.data().to_vec())
            }, &[random15(rng, &[m, n]), random15(rng, &[n])], h).unwrap()
        })),
        ("gelu", Box::new(move |rng| {
            let n = rng.random_range(1..8);
            let w = random15(rng, &[n]);
            grad_check(|t, v| {
                let g = t.gelu(v)?;
                t.weighted_sum(g, w.data().to_vec())
            }, &random15(rng, &[n]), h).unwrap()
        })),
        ("relu", Box::new(move |rng| {
            // keep inputs away from the kink
            let n = rng.random_range(1..8);
            let x: Vec<f64> = (0..n).map(|_| {
                let v: f64 = rng.random_range(0.05..1.5);
                if rng.random_bool(0.5) { v } else { -v }
            }).collect();
            grad_check(|t, v| {
                let r = t.relu(v)?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            }, &Tensor::vector(x).unwrap(), h).unwrap()
        })),
        ("softmax", Box::new(move |rng| {
            let (m, n) = (rng.random_range(1..4), rng.random_range(1..6));
            let w = random15(rng, &[m * n]);
            grad_check(|t, v| {
                let s = t.softmax(v)?;
                t.weighted_sum(s, w.data().to_vec())
            }, &random15(rng, &[m, n]), h).unwrap()
        })),
        ("layer_norm", Box::new(move |rng| {
            let (m, d) = (rng.random_range(1..4), rng.random_range(2..6));
            let w = random15(rng, &[m * d]);
            grad_check_many(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                t.weighted_sum(y, w.data().to_vec())
            }, &[random15(rng, &[m, d]), random15(rng, &[d]), random15(rng, &[d])], h).unwrap()
        })),
        ("reductions", Box::new(move |rng| {
            let (m, n) = (rng.random_range(1..4), rng.random_range(1..4));
            let w = random15(rng, &[m]);
            grad_check(|t, v| {
                let r = t.row_sum(v)?;
                let a = t.weighted_sum(r, w.data().to_vec())?;
                let sq = t.mul(v, v)?;
                let b = t.mean(sq)?;
                let c = t.add(a, b)?;
                let s = t.sum(c)?;
                t.reshape(s, vec![1])
            }, &random15(rng, &[m, n]), h).unwrap()
        })),
        ("rows", Box::new(move |rng| {
            let (m, d) = (rng.random_range(2..6), rng.random_range(1..4));
            let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..m)).collect();
            let split = rng.random_range(1..m);
            let w = random15(rng, &[(4 + 2 + m) * d]);
            grad_check_many(|t, v| {
                let g = t.gather_rows(v[0], idx.clone())?;
                let mr = t.mean_rows(v[0], vec![(0, split), (split, m - split)])?;
                let c = t.concat_rows(&[g, mr, v[1]])?;
                t.weighted_sum(c, w.data().to_vec())
            }, &[random15(rng, &[m, d]), random15(rng, &[m, d])], h).unwrap()
        })),
        ("segment_dot_hinge", Box::new(move |rng| {
            let d = rng.random_range(1..4);
            let groups = vec![(0, 3), (3, 2)];
            let answers = vec![rng.random_range(0..3), rng.random_range(0..2)];
            grad_check_many(|t, v| {
                let s = t.segment_dot(v[0], v[1], groups.clone())?;
                // large margin keeps every hinge on its linear branch
                let l = t.hinge(s, groups.clone(), answers.clone(), 25.0)?;
                t.sum(l)
            }, &[random15(rng, &[2, d]), random15(rng, &[5, d])], h).unwrap()
        })),
        ("attention", Box::new(move |rng| {
            let heads = rng.random_range(1..3);
            let d = heads * rng.random_range(1..3);
            let (lq, lk) = (rng.random_range(1..4), rng.random_range(1..4));
            let causal = rng.random_bool(0.5);
            let lk = if causal { lq.max(lk) } else { lk };
            let spec = Rc::new(AttnSpec {
                heads,
                blocks: vec![
                    AttnBlock { q_start: 0, q_len: lq, k_start: 0, k_len: lk, causal },
                    AttnBlock { q_start: lq, q_len: 1, k_start: lk, k_len: 2, causal: false },
                ],
            });
            let w = random15(rng, &[(lq + 1) * d]);
            grad_check_many(|t, v| {
                let o = t.attention(v[0], v[1], v[2], spec.clone())?;
                t.weighted_sum(o, w.data().to_vec())
            }, &[random15(rng, &[lq + 1, d]), random15(rng, &[lk + 2, d]), random15(rng, &[lk + 2, d])], h).unwrap()
        })),
        ("dropout", Box::new(move |rng| {
            let n = rng.random_range(1..6);
            let mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 }).collect();
            let w = random15(rng, &[n]);
            grad_check(|t, v| {
                let y = t.dropout_with_mask(v, mask.clone())?;
                t.weighted_sum(y, w.data().to_vec())
            }, &random15(rng, &[n]), h).unwrap()
        })),
    ];
    cases
        .into_iter()
        .map(|(name, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
            (name, (0..instances).map(|_| case(&mut rng)).fold(0.0, f64::max))
        })
        .collect()
}

pub fn fuse_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        type_dim: 3,
        d_model: 4,
        heads: 2,
        d_ff: 6,
        layers: 1,
        num_types: 3,
        frames: 8,
        pos_len: 64,
        qtg_attention: true,
        temporal_ar: false,
        scale_frames: true,
    }
}

/// Worst relative error of the fused decoder, inputs and parameters alike.
pub fn fuse_decoder_worst(instances: u64) -> f64 {
    let cfg = fuse_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let params = Params::init(&cfg, inst).unwrap();
        let w_q = rng.random_range(0.05..1.0);
        let weights = random(&mut rng, &[cfg.d_model]);
        let names = params.names();
        let mut xs = vec![random(&mut rng, &[1, 8]), random(&mut rng, &[1, 8]), random(&mut rng, &[1, 3])];
        xs.extend(params.tensors());
        let err = grad_check_many(
            |t, v| {
                let b = Bound::from_vars(&names, &v[3..]);
                let out = fuse_decoder(t, &b, &cfg, v[0], v[1], v[2], w_q)?;
                t.weighted_sum(out, weights.data().to_vec())
            },
            &xs,
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn temporal_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        type_dim: 2,
        d_model: 4,
        heads: 2,
        d_ff: 5,
        layers: 1,
        num_types: 2,
        frames: 6,
        pos_len: 16,
        qtg_attention: false,
        temporal_ar: true,
        scale_frames: true,
    }
}

/// Worst relative error through the future head or the masked head.
pub fn temporal_head_worst(masked: bool, instances: u64) -> f64 {
    let cfg = temporal_config();
    let mut rng = ChaCha8Rng::seed_from_u64(if masked { 31 } else { 30 });
    let d = cfg.feature_dim;
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let t = rng.random_range(2..5);
        let params = Params::init(&cfg, 5000 + inst).unwrap();
        let plan = make_mask_plan(t, 0.5, inst).unwrap();
        let names = params.names();
        let mut xs = vec![random(&mut rng, &[t, d]), random(&mut rng, &[1, d]), random(&mut rng, &[1, d])];
        xs.extend(params.tensors());
        let w = random(&mut rng, &[t * d]);
        let err = grad_check_many(
            |tape, v| {
                let b = Bound::from_vars(&names, &v[3..]);
                let out = if masked {
                    reconstruct_masked(tape, &b, &cfg, v[0], &plan, v[1], v[2])?.expect("nonempty plan")
                } else {
                    predict_future(tape, &b, &cfg, v[0], v[1], v[2])?
                };
                let n = tape.value(out).numel();
                tape.weighted_sum(out, w.data()[..n].to_vec())
            },
            &xs,
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn future(params: &Params, frames: &Tensor, f: &Tensor, g: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let (x, f, g) = (t.constant(frames.clone()), t.constant(f.clone()), t.constant(g.clone()));
    let out = predict_future(&mut t, &b, &temporal_config(), x, f, g).unwrap();
    t.data(out).to_vec()
}

pub fn recon(params: &Params, frames: &Tensor, plan: &MaskPlan, f: &Tensor, g: &Tensor) -> Option<Vec<f64>> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let (x, f, g) = (t.constant(frames.clone()), t.constant(f.clone()), t.constant(g.clone()));
    let out = reconstruct_masked(&mut t, &b, &temporal_config(), x, plan, f, g).unwrap();
    out.map(|v| t.data(v).to_vec())
}

/// Instances where perturbing frame `j` changed a prediction at or before `j`.
pub fn causality_failures(instances: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = temporal_config().feature_dim;
    let mut bad = Vec::new();
    for inst in 0..instances {
        let t = rng.random_range(2..7);
        let params = Params::init(&temporal_config(), inst).unwrap();
        let (frames, f, g) = (random(&mut rng, &[t, d]), random(&mut rng, &[1, d]), random(&mut rng, &[1, d]));
        let j = rng.random_range(0..t);
        let mut moved = frames.clone();
        for c in 0..d {
            moved.data_mut()[j * d + c] += rng.random_range(0.5..2.0);
        }
        let a = future(&params, &frames, &f, &g);
        let b = future(&params, &moved, &f, &g);
        // row i sees frames before i, so rows 0..=j are untouched
        if a[..(j + 1) * d] != b[..(j + 1) * d] {
            bad.push(format!("instance {inst}: rows up to {j} moved"));
        }
        if j + 1 < t && a[(j + 1) * d..] == b[(j + 1) * d..] {
            bad.push(format!("instance {inst}: later rows ignore frame {j}"));
        }
    }
    bad
}

/// Instances where a masked frame's true value leaked into the output.
pub fn isolation_failures(instances: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = temporal_config().feature_dim;
    let mut bad = Vec::new();
    let mut done = 0;
    let mut inst = 0;
    while done < instances {
        inst += 1;
        let t = rng.random_range(2..7);
        let params = Params::init(&temporal_config(), 1000 + inst).unwrap();
        let plan = make_mask_plan(t, rng.random_range(0.2..1.0), inst).unwrap();
        if plan.is_empty() {
            continue;
        }
        done += 1;
        let (frames, f, g) = (random(&mut rng, &[t, d]), random(&mut rng, &[1, d]), random(&mut rng, &[1, d]));
        let mut swapped = frames.clone();
        for &i in &plan.masked_indices {
            for c in 0..d {
                swapped.data_mut()[i * d + c] = rng.random_range(-5.0..5.0);
            }
        }
        let a = recon(&params, &frames, &plan, &f, &g).unwrap();
        let b = recon(&params, &swapped, &plan, &f, &g).unwrap();
        if a.len() != plan.masked_indices.len() * d || a != b {
            bad.push(format!("instance {inst}: masked values reached the output"));
        }
        // an unmasked frame does reach the reconstruction
        let keep = (0..t).find(|i| plan.masked_indices.binary_search(i).is_err()).unwrap();
        let mut visible = frames.clone();
        visible.data_mut()[keep * d] += 1.0;
        if a == recon(&params, &visible, &plan, &f, &g).unwrap() {
            bad.push(format!("instance {inst}: visible frame {keep} ignored"));
        }
    }
    bad
}

/// Invariant violations after every update of a refreshed state.
pub fn check_state(s: &TypeState) -> Result<(), String> {
    let sum: f64 = s.weights.iter().sum();
    if (sum - 1.0).abs() >= 1e-12 {
        return Err(format!("weights sum to {sum}"));
    }
    if s.weights.iter().any(|&w| w <= 0.0) {
        return Err("nonpositive weight".into());
    }
    for q in 0..s.num_types() {
        if s.eta[q] != s.base_lr * s.weights[q] {
            return Err(format!("eta_{q} = {} but lr·w = {}", s.eta[q], s.base_lr * s.weights[q]));
        }
    }
    let p = &s.difficulty;
    for a in 0..p.len() {
        for b in 0..p.len() {
            if p[a] > p[b] {
                let ok = match s.sign {
                    AwmtlSign::AsWritten => s.weights[a] < s.weights[b],
                    AwmtlSign::Flipped => s.weights[a] > s.weights[b],
                };
                if !ok {
                    return Err(format!("P_{a} > P_{b} but w {} vs {}", s.weights[a], s.weights[b]));
                }
            }
        }
    }
    Ok(())
}

/// Random update sequences under both signs; returns the violations found.
pub fn awmtl_failures(sequences: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut bad = Vec::new();
    for k in 0..sequences {
        let n = rng.random_range(2..7);
        let sign = if k % 2 == 0 { AwmtlSign::AsWritten } else { AwmtlSign::Flipped };
        let mut s = TypeState::new(n, rng.random_range(0.0..=1.0), 0.9, 1e-4, sign, false).unwrap();
        for _ in 0..rng.random_range(1..30) {
            let q = rng.random_range(0..n);
            s.update_stats(q, rng.random_range(0.0..3.0), rng.random_range(0.0..=1.0)).unwrap();
            s.refresh();
            if let Err(e) = check_state(&s) {
                bad.push(format!("sequence {k}: {e}"));
            }
            let c = rng.random_range(-5.0..5.0);
            let shifted: Vec<f64> = s.difficulty.iter().map(|p| p + c).collect();
            let w2 = s.compute_weights(&shifted);
            if w2.iter().zip(&s.weights).any(|(x, y)| (x - y).abs() >= 1e-12) {
                bad.push(format!("sequence {k}: softmax not shift invariant"));
            }
        }
    }
    bad
}

/// Direct evaluation of the inverse-frequency average.
pub fn brute_ifwaa(acc: &[f64], freq: &[f64]) -> f64 {
    let num: f64 = acc.iter().zip(freq).map(|(a, f)| a / f).sum();
    let den: f64 = freq.iter().map(|f| 1.0 / f).sum();
    num / den
}

/// Property suite for the two type-aware averages on random instances.
pub fn average_failures(instances: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut bad = Vec::new();
    for k in 0..instances {
        let n = rng.random_range(2..=6);
        let acc: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let freq: Vec<f64> = raw.iter().map(|f| f / total).collect();
        let a: BTreeMap<usize, f64> = acc.iter().copied().enumerate().collect();
        let f: BTreeMap<usize, f64> = freq.iter().copied().enumerate().collect();
        let i = ifwaa(&a, &f).unwrap();
        let e = ewaa(&a).unwrap();
        let lo = acc.iter().copied().fold(1.0, f64::min);
        let hi = acc.iter().copied().fold(0.0, f64::max);
        if !(lo <= i && i <= hi && lo <= e && e <= hi) {
            bad.push(format!("instance {k}: average outside [{lo}, {hi}]"));
        }
        if (i - brute_ifwaa(&acc, &freq)).abs() >= 1e-12 {
            bad.push(format!("instance {k}: IFWAA {i} vs direct {}", brute_ifwaa(&acc, &freq)));
        }
        let even: BTreeMap<usize, f64> = (0..n).map(|q| (q, 1.0 / n as f64)).collect();
        if ifwaa(&a, &even).unwrap() != e {
            bad.push(format!("instance {k}: equal frequencies do not give EWAA"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pa: BTreeMap<usize, f64> = (0..n).map(|q| (perm[q], acc[q])).collect();
        let pf: BTreeMap<usize, f64> = (0..n).map(|q| (perm[q], freq[q])).collect();
        if (ifwaa(&pa, &pf).unwrap() - i).abs() >= 1e-12 || (ewaa(&pa).unwrap() - e).abs() >= 1e-12 {
            bad.push(format!("instance {k}: depends on type labels"));
        }
    }
    bad
}

/// Masked-frame reconstruction error of a trained model against the
/// mean of each clip's unmasked frames, one masked frame per clip.
pub fn reconstruction_vs_mean(o: &qtgvqa::harness::TrainOutcome, records: &[qtgvqa::data::Record], seed: u64) -> (f64, f64) {
    use qtgvqa::model::{forward_batch, BatchInputs};
    let (mut model_err, mut base_err, mut n) = (0.0, 0.0, 0usize);
    for (k, chunk) in records.chunks(64).enumerate() {
        let refs: Vec<&qtgvqa::data::Record> = chunk.iter().collect();
        let inp = BatchInputs::from_records(&refs).unwrap();
        let (t, d) = (inp.t, inp.frames.shape()[1]);
        let masks: Vec<MaskPlan> = (0..refs.len())
            .map(|i| make_mask_plan(t, 1.0 / t as f64, seed ^ ((k * 64 + i) as u64)).unwrap())
            .collect();
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &o.params);
        let out = forward_batch(&mut tape, &b, &o.model, &inp, &o.weights, &masks, &mut None).unwrap();
        let (rec, rows) = out.recon.expect("one masked frame per clip");
        let rec = tape.data(rec).to_vec();
        let frames = inp.frames.data();
        for (j, &row) in rows.iter().enumerate() {
            let item = row / t;
            let masked = &masks[item].masked_indices;
            let mut mean = vec![0.0; d];
            let visible: Vec<usize> = (0..t).filter(|i| masked.binary_search(i).is_err()).collect();
            for &i in &visible {
                for c in 0..d {
                    mean[c] += frames[(item * t + i) * d + c] / visible.len() as f64;
                }
            }
            let truth = &frames[row * d..(row + 1) * d];
            model_err += rec[j * d..(j + 1) * d].iter().zip(truth).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / d as f64;
            base_err += mean.iter().zip(truth).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / d as f64;
            n += 1;
        }
    }
    (model_err / n as f64, base_err / n as f64)
}

mod common;

use qtgvqa::model::{Bound, ModelConfig, Params};
use qtgvqa::temporal::{make_mask_plan, predict_future, reconstruct_masked, MaskPlan};
use qtgvqa::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
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

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn future(params: &Params, frames: &Tensor, f: &Tensor, g: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let (x, f, g) = (t.constant(frames.clone()), t.constant(f.clone()), t.constant(g.clone()));
    let out = predict_future(&mut t, &b, &tiny(), x, f, g).unwrap();
    t.data(out).to_vec()
}

fn recon(params: &Params, frames: &Tensor, plan: &MaskPlan, f: &Tensor, g: &Tensor) -> Option<Vec<f64>> {
    let mut t = Tape::new();
    let b = Bound::new(&mut t, params);
    let (x, f, g) = (t.constant(frames.clone()), t.constant(f.clone()), t.constant(g.clone()));
    let out = reconstruct_masked(&mut t, &b, &tiny(), x, plan, f, g).unwrap();
    out.map(|v| t.data(v).to_vec())
}

#[test]
fn mask_plan_examples() {
    assert!(make_mask_plan(10, 0.0, 3).unwrap().is_empty());
    let full = make_mask_plan(10, 1.0, 3).unwrap();
    assert_eq!(full.masked_indices.len(), 9);
    let a = make_mask_plan(10, 0.15, 42).unwrap();
    assert_eq!(a.masked_indices.len(), 2);
    assert_eq!(a, make_mask_plan(10, 0.15, 42).unwrap());
    assert!(a.masked_indices.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(make_mask_plan(1, 1.0, 0).unwrap().masked_indices, vec![0]);
    assert!(make_mask_plan(5, 1.5, 0).is_err());
}

#[test]
fn future_prediction_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = tiny().feature_dim;
    for inst in 0..100 {
        let t = rng.random_range(2..7);
        let params = Params::init(&tiny(), inst).unwrap();
        let (frames, f, g) = (random(&mut rng, &[t, d]), random(&mut rng, &[1, d]), random(&mut rng, &[1, d]));
        let j = rng.random_range(0..t);
        let mut moved = frames.clone();
        for c in 0..d {
            moved.data_mut()[j * d + c] += rng.random_range(0.5..2.0);
        }
        let a = future(&params, &frames, &f, &g);
        let b = future(&params, &moved, &f, &g);
        // row i sees frames before i, so rows 0..=j are untouched
        assert_eq!(&a[..(j + 1) * d], &b[..(j + 1) * d], "instance {inst}");
        if j + 1 < t {
            assert_ne!(&a[(j + 1) * d..], &b[(j + 1) * d..], "instance {inst}");
        }
    }
}

#[test]
fn reconstruction_ignores_masked_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = tiny().feature_dim;
    for inst in 0..100 {
        let t = rng.random_range(2..7);
        let params = Params::init(&tiny(), 1000 + inst).unwrap();
        let plan = make_mask_plan(t, rng.random_range(0.2..1.0), inst).unwrap();
        if plan.is_empty() {
            continue;
        }
        let (frames, f, g) = (random(&mut rng, &[t, d]), random(&mut rng, &[1, d]), random(&mut rng, &[1, d]));
        let mut swapped = frames.clone();
        for &i in &plan.masked_indices {
            for c in 0..d {
                swapped.data_mut()[i * d + c] = rng.random_range(-5.0..5.0);
            }
        }
        let a = recon(&params, &frames, &plan, &f, &g).unwrap();
        let b = recon(&params, &swapped, &plan, &f, &g).unwrap();
        assert_eq!(a.len(), plan.masked_indices.len() * d);
        assert_eq!(a, b, "instance {inst}");

        // an unmasked frame does reach the reconstruction
        let keep = (0..t).find(|i| plan.masked_indices.binary_search(i).is_err()).unwrap();
        let mut visible = frames.clone();
        visible.data_mut()[keep * d] += 1.0;
        assert_ne!(a, recon(&params, &visible, &plan, &f, &g).unwrap());
    }
}

#[test]
fn degenerate_calls() {
    let params = Params::init(&tiny(), 0).unwrap();
    let d = tiny().feature_dim;
    let one = Tensor::zeros(vec![1, d]).unwrap();
    let mut t = Tape::new();
    let b = Bound::new(&mut t, &params);
    let (x, f) = (t.constant(one.clone()), t.constant(one.clone()));
    assert!(predict_future(&mut t, &b, &tiny(), x, f, f).is_err());
    let frames = Tensor::zeros(vec![4, d]).unwrap();
    assert!(recon(&params, &frames, &MaskPlan::empty(), &one, &one).is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = random(&mut rng, &[5, d]);
    assert_eq!(future(&params, &frames, &one, &one), future(&params, &frames, &one, &one));
}

#[test]
fn future_head_passes_grad_check() {
    let e = common::temporal_head_worst(false, 100);
    assert!(e < 1e-4, "max relative error {e:e}");
}

#[test]
fn masked_head_passes_grad_check() {
    let e = common::temporal_head_worst(true, 100);
    assert!(e < 1e-4, "max relative error {e:e}");
}

use qtgvqa_demo::{averages, sample_frames_js, type_weights};

#[test]
fn weights_follow_difficulty() {
    let out = type_weights(&[0.2, 0.9, 0.5], &[0.9, 0.3, 0.6], 0.5, false).unwrap();
    let (p, w) = out.split_at(3);
    assert!((p[0] - 0.5 * 0.2 - 0.5 * 0.1).abs() < 1e-12);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w[0] > w[2] && w[2] > w[1]);
    let flipped = type_weights(&[0.2, 0.9, 0.5], &[0.9, 0.3, 0.6], 0.5, true).unwrap();
    assert!(flipped[4] > flipped[5] && flipped[5] > flipped[3]);
    assert!(type_weights(&[0.2], &[0.9, 0.1], 0.5, false).is_err());
}

#[test]
fn averages_match_hand_values() {
    let v = averages(&[0.2, 0.8], &[9.0, 1.0]).unwrap();
    assert!((v[0] - 0.74).abs() < 1e-12);
    assert!((v[1] - 0.5).abs() < 1e-12);
    assert!((v[2] - 0.26).abs() < 1e-12);
}

#[test]
fn frames_cover_the_clip() {
    let v = sample_frames_js(128, 8, 16).unwrap();
    assert_eq!(v.len(), 129);
    assert_eq!(&v[..128], (0..128).collect::<Vec<u32>>().as_slice());
    assert_eq!(v[128], 0);
    let short = sample_frames_js(5, 1, 8).unwrap();
    assert_eq!(short[8], 1);
    assert_eq!(short[7], 4);
}

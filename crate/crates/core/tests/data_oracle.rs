use cmdm::data::{caption_oracle, generate_trajectory, Classification, Dataset, DatasetSpec, ShapeKind, SpeedKind, ToyCaption};

#[test]
fn oracle_survives_heavy_jitter() {
    let captions = ToyCaption::all();
    let mut hits = 0;
    let n = 1000;
    for i in 0..n {
        let c = captions[i % captions.len()];
        let x = generate_trajectory::<f64>(c, 64, 20.0, 0.05, 10_000 + i as u64);
        hits += usize::from(caption_oracle(&x).unwrap() == Classification::Caption(c));
    }
    let acc = hits as f64 / n as f64;
    assert!(acc >= 0.99, "accuracy {acc} at noise 0.05");
}

#[test]
fn clean_circle_keeps_its_radius() {
    let c = ToyCaption::new(ShapeKind::Circle, SpeedKind::Fast);
    let x = generate_trajectory::<f64>(c, 64, 20.0, 0.0, 3);
    // centre is one radius from the origin along the rotated normal; fit it from three points
    let p = |t: usize| (x.frames.get(t, 0), x.frames.get(t, 1));
    let (a, b, q) = (p(0), p(10), p(20));
    let d = 2.0 * (a.0 * (b.1 - q.1) + b.0 * (q.1 - a.1) + q.0 * (a.1 - b.1));
    let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
    let ux = (sq(a) * (b.1 - q.1) + sq(b) * (q.1 - a.1) + sq(q) * (a.1 - b.1)) / d;
    let uy = (sq(a) * (q.0 - b.0) + sq(b) * (a.0 - q.0) + sq(q) * (b.0 - a.0)) / d;
    let radii: Vec<f64> = (0..64).map(|t| (p(t).0 - ux).hypot(p(t).1 - uy)).collect();
    let (lo, hi) = radii.iter().fold((f64::MAX, f64::MIN), |(l, h), &r| (l.min(r), h.max(r)));
    assert!(hi - lo <= 1e-6, "radius varies by {}", hi - lo);
}

#[test]
fn regeneration_is_bit_identical() {
    let spec = DatasetSpec { samples_per_caption: 3, ..DatasetSpec::default() };
    let a = Dataset::<f32>::generate(&spec).unwrap();
    let b = Dataset::<f32>::generate(&spec).unwrap();
    assert_eq!(a.len(), 24);
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.caption, y.caption);
        let bits = |m: &cmdm::vae::MotionSequence<f32>| m.frames.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.motion), bits(&y.motion));
    }
    let other = Dataset::<f32>::generate(&DatasetSpec { seed: 2, ..spec }).unwrap();
    assert_ne!(other.samples[0].motion.frames, a.samples[0].motion.frames);
}

#[test]
fn velocity_channels_are_scaled_differences() {
    let c = ToyCaption::new(ShapeKind::Zigzag, SpeedKind::Slow);
    let x = generate_trajectory::<f64>(c, 16, 20.0, 0.0, 5);
    for t in 1..16 {
        let vx = (x.frames.get(t, 0) - x.frames.get(t - 1, 0)) * 20.0;
        assert!((vx - x.frames.get(t, 2)).abs() < 1e-9);
    }
}

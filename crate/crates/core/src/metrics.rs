//! Reconstruction error, transition smoothness, causality probing and
//! caption consistency.

use serde::{Deserialize, Serialize};

use crate::data::{caption_oracle, ToyCaption};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{DrawKind, RngKey};
use crate::scalar::Scalar;
use crate::vae::MotionSequence;

fn check_same<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() || a.cols() < 2 {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over frames of the Euclidean distance between the position channels
/// (0 and 1).
pub fn mpjpe<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>) -> Result<f64> {
    check_same(x, x_hat)?;
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..x.rows())
        .map(|t| {
            let dx = x.get(t, 0).as_f64() - x_hat.get(t, 0).as_f64();
            let dy = x.get(t, 1).as_f64() - x_hat.get(t, 1).as_f64();
            dx.hypot(dy)
        })
        .sum();
    Ok(total / x.rows() as f64)
}

/// Element-mean squared error over all channels.
pub fn mse<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>) -> Result<f64> {
    check_same(x, x_hat)?;
    let n = x.len().max(1) as f64;
    Ok(x.data().iter().zip(x_hat.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n)
}

/// Jerk magnitude per frame from the third-order central difference of the
/// positions, scaled by `fps^3`. Entry `t` is defined for `2 <= t < T - 2`;
/// the returned vector is indexed from frame 2.
pub fn jerk_magnitudes<S: Scalar>(x: &MotionSequence<S>) -> Vec<f64> {
    let n = x.len();
    if n < 5 {
        return Vec::new();
    }
    let p = |t: usize, c: usize| x.frames.get(t, c).as_f64();
    let f3 = x.fps.powi(3);
    (2..n - 2)
        .map(|t| {
            let j = |c| (p(t + 2, c) - 2.0 * p(t + 1, c) + 2.0 * p(t - 1, c) - p(t - 2, c)) / 2.0 * f3;
            j(0).hypot(j(1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionEval {
    pub transition: usize,
    pub window: usize,
    pub pj: f64,
    pub auj: f64,
}

/// Peak jerk and area above the out-of-window mean jerk, over frames
/// `transition - window/2 .. transition + window/2`.
pub fn jerk_metrics<S: Scalar>(x: &MotionSequence<S>, transition: usize, window: usize) -> Result<TransitionEval> {
    let n = x.len();
    let half = window / 2;
    if window < 4 || transition < half + 2 || transition + (window - half) > n.saturating_sub(2) {
        return Err(Error::Config(format!(
            "jerk window {window} around frame {transition} does not fit {n} frames"
        )));
    }
    let jerk = jerk_magnitudes(x);
    let (lo, hi) = (transition - half, transition + (window - half));
    // jerk[i] belongs to frame i + 2
    let inside = &jerk[lo - 2..hi - 2];
    let outside: Vec<f64> = jerk[..lo - 2].iter().chain(&jerk[hi - 2..]).copied().collect();
    let baseline = if outside.is_empty() { 0.0 } else { outside.iter().sum::<f64>() / outside.len() as f64 };
    let pj = inside.iter().copied().fold(0.0, f64::max);
    let auj = inside.iter().map(|j| (j - baseline).max(0.0)).sum::<f64>() / x.fps;
    Ok(TransitionEval { transition, window, pj, auj })
}

/// Largest change of output rows `< (probe + 1) * out_block` when input rows
/// `>= (probe + 1) * in_block` receive random perturbations, over `trials`.
pub fn causality_probe<S: Scalar, F>(
    forward: F,
    input: &Tensor<S>,
    probe: usize,
    (in_block, out_block): (usize, usize),
    trials: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    let cut_in = (probe + 1) * in_block;
    if cut_in > input.rows() {
        return Err(Error::Shape(format!("probe frame {probe} beyond {} rows", input.rows())));
    }
    let base = forward(input)?;
    let cut_out = ((probe + 1) * out_block).min(base.rows());
    let mut leak = 0.0f64;
    for trial in 0..trials {
        let mut x = input.clone();
        let n = (x.rows() - cut_in) * x.cols();
        let delta: Vec<S> = RngKey::new(seed, DrawKind::Data).step(trial).normals(n);
        for (v, d) in x.data_mut()[cut_in * input.cols()..].iter_mut().zip(delta) {
            *v += d;
        }
        let out = forward(&x)?;
        for (a, b) in out.data()[..cut_out * base.cols()].iter().zip(&base.data()[..cut_out * base.cols()]) {
            leak = leak.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    Ok(leak)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub accuracy: f64,
    pub per_caption: Vec<(String, f64)>,
    pub samples: Vec<ConsistencySample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySample {
    pub caption: String,
    pub predicted: Option<String>,
    pub seed: u64,
}

/// Generates `n` motions per caption with `generate(caption, seed)` and
/// scores them with the caption oracle.
pub fn consistency_eval<S: Scalar, G>(captions: &[ToyCaption], n: usize, seed: u64, mut generate: G) -> Result<ConsistencyReport>
where
    G: FnMut(ToyCaption, u64) -> Result<MotionSequence<S>>,
{
    let mut samples = Vec::with_capacity(captions.len() * n);
    let mut per_caption = Vec::with_capacity(captions.len());
    let mut hits = 0usize;
    for &c in captions {
        let mut c_hits = 0usize;
        for i in 0..n {
            let s = crate::rng::mix_seed(&[seed, c.index() as u64, i as u64]);
            let motion = generate(c, s)?;
            let pred = match caption_oracle(&motion) {
                Ok(p) => p.caption(),
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            };
            if pred == Some(c) {
                c_hits += 1;
            }
            samples.push(ConsistencySample { caption: c.to_string(), predicted: pred.map(|p| p.to_string()), seed: s });
        }
        hits += c_hits;
        per_caption.push((c.to_string(), c_hits as f64 / n.max(1) as f64));
    }
    let total = (captions.len() * n).max(1);
    Ok(ConsistencyReport { accuracy: hits as f64 / total as f64, per_caption, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_trajectory, hard_concatenation, template_positions, frames_from_positions, Pose, ShapeKind, SpeedKind};
    use crate::nn::{causal_attention, masked_attention, AttnMask};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn positions(n: usize, f: impl Fn(f64) -> (f64, f64)) -> MotionSequence<f64> {
        let pos: Vec<(f64, f64)> = (0..n).map(|t| f(t as f64)).collect();
        MotionSequence::new(frames_from_positions(&pos, 1.0), 1.0)
    }

    #[test]
    fn mpjpe_anchors() {
        let x = generate_trajectory::<f64>(ToyCaption::new(ShapeKind::Zigzag, SpeedKind::Slow), 16, 20.0, 0.0, 1).frames;
        assert_eq!(mpjpe(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        for t in 0..16 {
            y.set(t, 0, y.get(t, 0) + 0.3);
            y.set(t, 1, y.get(t, 1) - 0.4);
        }
        assert!((mpjpe(&x, &y).unwrap() - 0.5).abs() <= 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Tensor::from_fn(16, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut expect = 0.0;
        for t in 0..16 {
            expect += ((x.get(t, 0) - r.get(t, 0)).powi(2) + (x.get(t, 1) - r.get(t, 1)).powi(2)).sqrt();
        }
        assert!((mpjpe(&x, &r).unwrap() - expect / 16.0).abs() <= 1e-10);
        assert!(mpjpe(&x, &r.slice_rows(0, 3)).is_err());
    }

    #[test]
    fn jerk_anchors() {
        let line = positions(30, |t| (0.5 * t, -0.2 * t));
        let e = jerk_metrics(&line, 15, 8).unwrap();
        assert!(e.pj.abs() < 1e-12 && e.auj.abs() < 1e-12);
        let cubic = positions(30, |t| (t * t * t, 0.0));
        assert!(jerk_magnitudes(&cubic).iter().all(|&j| (j - 6.0).abs() < 1e-6));
        assert!((jerk_metrics(&cubic, 15, 8).unwrap().pj - 6.0).abs() < 1e-6);
        assert!(jerk_metrics(&cubic, 3, 8).is_err());
        assert!(jerk_metrics(&cubic, 15, 2).is_err());
    }

    #[test]
    fn concatenation_is_jerkier() {
        let a = ToyCaption::new(ShapeKind::Circle, SpeedKind::Fast);
        let b = ToyCaption::new(ShapeKind::Line, SpeedKind::Slow);
        let glued = hard_concatenation::<f64>(a, b, 32, 20.0, Pose::IDENTITY);
        let smooth = MotionSequence::new(frames_from_positions::<f64>(&template_positions(a, 64, 20.0, Pose::IDENTITY), 20.0), 20.0);
        let g = jerk_metrics(&glued, 32, 16).unwrap();
        let s = jerk_metrics(&smooth, 32, 16).unwrap();
        assert!(g.auj > s.auj, "{} vs {}", g.auj, s.auj);
    }

    #[test]
    fn probe_detects_leaks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
        let causal = |x: &Tensor<f64>| causal_attention(x, x, x, 2);
        assert_eq!(causality_probe(causal, &x, 3, (1, 1), 5, 1).unwrap(), 0.0);
        let open = |x: &Tensor<f64>| masked_attention(x, x, x, 2, &AttnMask::full(8, 8));
        assert!(causality_probe(open, &x, 3, (1, 1), 5, 1).unwrap() > 0.0);
    }

    #[test]
    fn consistency_of_ground_truth() {
        let caps = ToyCaption::all();
        let r = consistency_eval(&caps, 5, 1, |c, s| Ok(generate_trajectory::<f64>(c, 64, 20.0, 0.01, s))).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.samples.len(), 40);
    }

    proptest! {
        #[test]
        fn jerk_rigid_invariance(angle in 0.0f64..6.3, tx in -5.0f64..5.0, ty in -5.0f64..5.0, seed in 0u64..100) {
            let x = generate_trajectory::<f64>(ToyCaption::new(ShapeKind::Spiral, SpeedKind::Fast), 40, 20.0, 0.02, seed);
            let (s, c) = angle.sin_cos();
            let mut y = x.clone();
            for t in 0..40 {
                let (a, b) = (x.frames.get(t, 0), x.frames.get(t, 1));
                y.frames.set(t, 0, c * a - s * b + tx);
                y.frames.set(t, 1, s * a + c * b + ty);
            }
            let (p, q) = (jerk_metrics(&x, 20, 10).unwrap(), jerk_metrics(&y, 20, 10).unwrap());
            prop_assert!((p.pj - q.pj).abs() <= 1e-6 * p.pj.max(1.0));
            prop_assert!((p.auj - q.auj).abs() <= 1e-6 * p.auj.max(1.0));
        }
    }
}

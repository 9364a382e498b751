use cmdm::config::{parse_override, RunConfig};
use cmdm::data::{generate_trajectory, Dataset, ShapeKind, SpeedKind, ToyCaption};
use cmdm::dit::{dit_forward, DitParams, TextCondition};
use cmdm::nn::Tensor;
use cmdm::rng::{DrawKind, RngKey};
use cmdm::train::train_dit;
use cmdm::vae::{encode, MotionSequence, VaeParams};

fn cfg(sets: &[&str]) -> RunConfig {
    let over: Vec<_> = sets.iter().map(|s| parse_override(s).unwrap()).collect();
    RunConfig::from_json("{}", &over).unwrap()
}

#[test]
fn encoder_ignores_future_frames() {
    let c = cfg(&["vae.channels=8"]);
    let vae = VaeParams::<f64>::init(c.vae.clone(), 3).unwrap();
    let x = generate_trajectory::<f64>(ToyCaption::new(ShapeKind::Spiral, SpeedKind::Fast), 32, 20.0, 0.01, 9);
    let full = encode(&x, &vae).unwrap();
    for keep in [4, 12, 20] {
        let prefix = MotionSequence::new(x.frames.slice_rows(0, keep), x.fps);
        let part = encode(&prefix, &vae).unwrap();
        let n = part.mu.rows();
        assert_eq!(full.mu.slice_rows(0, n), part.mu, "mu differs with {keep} frames kept");
        assert_eq!(full.logvar.slice_rows(0, n), part.logvar);
    }
}

#[test]
fn dit_ignores_future_latents() {
    let c = cfg(&["dit.layers=2", "dit.hidden=32"]);
    let dit = DitParams::<f64>::init(c.dit.clone(), 5).unwrap().jitter(6, 0.05);
    let d = c.dit.latent_dim;
    let z = Tensor::from_vec(10, d, RngKey::new(1, DrawKind::Init).normals(10 * d)).unwrap();
    let levels: Vec<usize> = (0..10).map(|t| 100 * t).collect();
    let cond = TextCondition::caption(ToyCaption::new(ShapeKind::Line, SpeedKind::Slow));
    let full = dit_forward(&z, &levels, &cond, &dit).unwrap();
    for keep in [1, 4, 9] {
        let part = dit_forward(&z.slice_rows(0, keep), &levels[..keep], &cond, &dit).unwrap();
        assert!(full.slice_rows(0, keep).max_abs_diff(&part) < 1e-12, "prefix of {keep}");
    }
}

#[test]
fn dit_training_runs_on_either_level_scheme() {
    let base = ["data.samples_per_caption=2", "vae.channels=8", "dit.layers=1", "dit.hidden=16", "train.dit.steps=4", "train.dit.batch=4"];
    let data = Dataset::<f64>::generate(&cfg(&base).data).unwrap();
    let vae = VaeParams::<f64>::init(cfg(&base).vae, 2).unwrap();
    let mut finals = Vec::new();
    for p in ["0", "1"] {
        let mut sets = base.to_vec();
        let s = format!("train.staircase_prob={p}");
        sets.push(&s);
        let mut losses = Vec::new();
        train_dit(&cfg(&sets), &vae, &data, |l| losses.push(l.loss)).unwrap();
        assert_eq!(losses.len(), 4);
        assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
        finals.push(losses);
    }
    // same data and init, different noise levels
    assert_ne!(finals[0], finals[1]);
}

#[test]
fn staircase_probability_is_bounded() {
    let over = [parse_override("train.staircase_prob=1.5").unwrap()];
    let err = RunConfig::from_json("{}", &over).unwrap_err().to_string();
    assert!(err.contains("staircase_prob"), "{err}");
}

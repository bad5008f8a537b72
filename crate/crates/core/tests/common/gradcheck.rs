//! Central finite-difference gradient checks against the tape.

use dualharmony::params::{Bound, ParamStore};
use dualharmony::tensor::{Array, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest tolerated `|analytic − numeric| / max(|analytic|, |numeric|)`.
pub const REL_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Gradients smaller than this many rounding errors of the loss, divided by
/// the step, are indistinguishable from zero (e.g. a bias feeding a norm).
const NOISE_ULPS: f64 = 1e3;

fn noise_floor(loss: f64) -> f64 {
    NOISE_ULPS * f64::EPSILON * loss.abs().max(1.0) / STEP
}

/// Relative error, or 0 when both gradients are at noise level and agree to
/// within it.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor && d < floor {
        0.0
    } else {
        d / scale
    }
}

/// Number of checked entries, how many of them were at noise level, the
/// largest gradient seen and the worst relative error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Outcome {
    pub checked: usize,
    pub within_noise: usize,
    pub largest: f64,
    pub worst: f64,
}

impl Outcome {
    pub fn add(&mut self, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        if analytic.abs().max(numeric.abs()) < floor {
            self.within_noise += 1;
        }
        self.largest = self.largest.max(analytic.abs());
        let e = rel_err(analytic, numeric, floor);
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
    }

    pub fn merge(&mut self, other: Outcome) {
        self.checked += other.checked;
        self.within_noise += other.within_noise;
        self.largest = self.largest.max(other.largest);
        self.worst = self.worst.max(other.worst);
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < REL_TOL
    }
}

pub fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ r ⊙ x` for a fixed random `r`, so every output element contributes.
pub fn project(t: &Tape, x: &Var, seed: u64) -> Var {
    let s = x.shape();
    let r = random((s[0], s[1], s[2], s[3]), seed);
    t.sum_all(&t.mul(x, &Var::constant(r)))
}

fn sample_indices(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// Checks the gradients of trainable parameters whose names start with
/// `prefix`, sampling up to `per_tensor` entries of each.
pub fn check_params(store: &ParamStore, prefix: &str, per_tensor: usize, f: impl Fn(&Bound) -> Var) -> Outcome {
    let tape = Tape::new();
    let p = store.bind(&tape, true);
    let loss = f(&p);
    let floor = noise_floor(loss.scalar());
    let grads = p.gradients(&tape.backward(&loss));
    drop(p);
    let eval = |s: &ParamStore| {
        let t = Tape::new();
        f(&s.bind(&t, false)).scalar()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Outcome::default();
    for (name, g) in grads.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let g = g.as_standard_layout();
        for i in sample_indices(g.len(), per_tensor, &mut rng) {
            let mut s = store.clone();
            let v = s.get_mut(name).unwrap().value.as_slice_mut().unwrap();
            v[i] += STEP;
            let plus = eval(&s);
            s.get_mut(name).unwrap().value.as_slice_mut().unwrap()[i] -= 2.0 * STEP;
            let minus = eval(&s);
            out.add(g.as_slice().unwrap()[i], (plus - minus) / (2.0 * STEP), floor);
        }
    }
    out
}

/// Checks gradients with respect to the inputs of `f`.
pub fn check_inputs(inputs: &[Array], per_input: usize, f: impl Fn(&Tape, &[Var]) -> Var) -> Outcome {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars);
    let floor = noise_floor(loss.scalar());
    let grads = tape.backward(&loss);
    let eval = |xs: &[Array]| {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| Var::constant(a.clone())).collect();
        f(&t, &vs).scalar()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let mut out = Outcome::default();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(v).cloned().unwrap_or_else(|| Array::zeros(v.value().raw_dim()));
        let g = g.as_standard_layout();
        for i in sample_indices(g.len(), per_input, &mut rng) {
            let mut xs = inputs.to_vec();
            xs[k].as_slice_mut().unwrap()[i] += STEP;
            let plus = eval(&xs);
            xs[k].as_slice_mut().unwrap()[i] -= 2.0 * STEP;
            let minus = eval(&xs);
            out.add(g.as_slice().unwrap()[i], (plus - minus) / (2.0 * STEP), floor);
        }
    }
    out
}

pub mod subnets {
    //! One check per trainable sub-network: width 1/8, 32×32 generator
    //! inputs, 128×128 discriminator inputs with a 2×2 patch grid.

    use super::*;
    use dualharmony::discriminator::{
        discriminate, freq_descriptor, init_discriminator, spatial_branch, DiscriminatorConfig,
    };
    use dualharmony::generator::{
        adain, blend, blend_mask, decode, encode, init_generator, level_masks, resfft, GeneratorConfig,
    };
    use dualharmony::losses::{content_loss, style_loss};
    use dualharmony::nn::Mode;

    const SIDE: usize = 32;

    fn gcfg() -> GeneratorConfig {
        GeneratorConfig {
            width: 0.125,
            ..GeneratorConfig::default()
        }
    }

    fn dcfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            n: 2,
            width: 0.125,
            use_freq_branch: true,
        }
    }

    fn mask(b: usize, side: usize) -> Array {
        Array::from_shape_fn((b, 1, side, side), |(i, _, y, x)| {
            let (cy, cx) = (side as f64 * 0.45, side as f64 * (0.4 + 0.1 * i as f64));
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if r2 < (side as f64 * 0.25).powi(2) { 1.0 } else { 0.0 }
        })
    }

    /// Masked AdaIN with respect to both feature maps, and the style and
    /// content losses with respect to the image fed through the frozen
    /// encoder.
    pub fn adain_path() -> Outcome {
        let m = mask(2, SIDE);
        let mut out = check_inputs(&[random((2, 8, SIDE, SIDE), 1), random((2, 8, SIDE, SIDE), 2)], 40, |t, v| {
            project(t, &adain(t, &v[0], &v[1], &m).unwrap(), 3)
        });
        let cfg = gcfg();
        let store = init_generator(&cfg, 4);
        let masks = level_masks(&m).unwrap();
        let image = random((2, 3, SIDE, SIDE), 5).mapv(|v| 0.5 + 0.4 * v);
        let background = random((2, 3, SIDE, SIDE), 6).mapv(|v| 0.5 + 0.4 * v);
        let through_encoder = check_inputs(&[image], 40, |t, v| {
            let tape_store = store.bind(t, false);
            let fo = encode(&tape_store, &cfg, &v[0]).unwrap();
            let fb = encode(&tape_store, &cfg, &Var::constant(background.clone())).unwrap();
            let s = style_loss(t, &fo, &fb, &masks).unwrap();
            let c = content_loss(t, &fo[3], &fb[3]).unwrap();
            t.add(&s, &t.scale(&c, 1e-3))
        });
        out.merge(through_encoder);
        out
    }

    pub fn resfft_module() -> Outcome {
        let store = init_generator(&gcfg(), 7);
        let x = random((2, 8, SIDE, SIDE), 8);
        let mut out = check_params(&store, "g.fft1.", 6, |p| project(p.tape(), &resfft(p, 1, 1, &Var::constant(x.clone())), 9));
        let inputs = check_inputs(&[x.clone()], 30, |t, v| project(t, &resfft(&store.bind(t, false), 1, 1, &v[0]), 9));
        out.merge(inputs);
        out
    }

    fn level_features(seed: u64) -> Vec<Array> {
        [8, 16, 32, 64]
            .iter()
            .enumerate()
            .map(|(l, &c)| random((2, c, SIDE >> l, SIDE >> l), seed + l as u64).mapv(f64::abs))
            .collect()
    }

    pub fn decoder() -> Outcome {
        let store = init_generator(&gcfg(), 10);
        let feats: Vec<Var> = level_features(11).into_iter().map(Var::constant).collect();
        check_params(&store, "g.dec.", 6, |p| {
            let t = p.tape();
            let (img, hidden) = decode(p, &feats).unwrap();
            t.add(&project(t, &img, 12), &project(t, &hidden, 13))
        })
    }

    pub fn blend_layer() -> Outcome {
        let store = init_generator(&gcfg(), 14);
        let m = mask(2, SIDE);
        let hidden = Var::constant(random((2, 8, SIDE, SIDE), 15).mapv(f64::abs));
        let decoded = Var::constant(random((2, 3, SIDE, SIDE), 16).mapv(|v| 0.5 + 0.5 * v));
        let composite = Var::constant(random((2, 3, SIDE, SIDE), 17).mapv(|v| 0.5 + 0.5 * v));
        check_params(&store, "g.blend", 20, |p| {
            let t = p.tape();
            let soft = blend_mask(p, &hidden, &m);
            project(t, &blend(t, &decoded, &composite, &soft).unwrap(), 18)
        })
    }

    fn d_image() -> Var {
        Var::constant(random((2, 3, 128, 128), 19).mapv(|v| 0.5 + 0.5 * v))
    }

    pub fn d_spatial() -> Outcome {
        let cfg = dcfg();
        let store = init_discriminator(&cfg, 20);
        let img = d_image();
        check_params(&store, "d.s.", 4, |p| {
            let t = p.tape();
            let (ds, dm) = spatial_branch(p, &cfg, &img, Mode::Train).unwrap();
            t.add(&project(t, &ds, 21), &project(t, &dm, 22))
        })
    }

    pub fn d_frequency() -> Outcome {
        let store = init_discriminator(&dcfg(), 23);
        let patches = Var::constant(random((8, 32, 8, 8), 24).mapv(f64::abs));
        check_params(&store, "d.f.", 4, |p| project(p.tape(), &freq_descriptor(p, &patches, Mode::Train).unwrap(), 25))
    }

    pub fn d_head() -> Outcome {
        let cfg = dcfg();
        let store = init_discriminator(&cfg, 26);
        let img = d_image();
        check_params(&store, "d.a.", 4, |p| project(p.tape(), &discriminate(p, &cfg, &img, Mode::Train).unwrap(), 27))
    }
}

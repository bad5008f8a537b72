//! Patch discriminator with a spatial branch, a per-patch frequency branch
//! and a small convolutional head predicting an `n × n` inharmony grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generator::scaled;
use crate::nn::{self, Mode, LEAKY_SLOPE};
use crate::params::{add_conv, add_norm, Bound, Init, ParamKind, ParamStore};
use crate::tensor::{Conv2dSpec, Var};

pub const SPATIAL_WIDTHS: [usize; 6] = [64, 128, 256, 512, 512, 512];
pub const FREQ_WIDTHS: [usize; 3] = [256, 512, 512];
pub const FREQ_DESCRIPTOR: usize = 256;
pub const HEAD_HIDDEN: usize = 256;
/// The frequency branch reads the spatial branch's output after this many
/// blocks, so patches are `8 × 8`.
pub const TAP_BLOCK: usize = 3;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Patches per side.
    pub n: usize,
    pub width: f64,
    pub use_freq_branch: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            n: 4,
            width: 1.0,
            use_freq_branch: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn input_side(&self) -> usize {
        64 * self.n
    }

    fn spatial(&self) -> [usize; 6] {
        SPATIAL_WIDTHS.map(|c| scaled(c, self.width))
    }

    fn freq(&self) -> [usize; 3] {
        FREQ_WIDTHS.map(|c| scaled(c, self.width))
    }

    pub fn descriptor_channels(&self) -> usize {
        scaled(FREQ_DESCRIPTOR, self.width)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if ![2, 4, 8].contains(&self.n) {
            return Err(invalid!("patch count per side must be 2, 4 or 8, got {}", self.n));
        }
        let side = self.input_side();
        if h != side || w != side {
            return Err(invalid!(
                "discriminator input must be {side}x{side} (64·n with n={}), got {h}x{w}",
                self.n
            ));
        }
        Ok(())
    }
}

fn add_block(s: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
    add_conv(s, rng, &format!("{prefix}.conv"), cin, cout, k, Init::Normal(INIT_STD), None, ParamKind::Trainable);
    add_norm(s, &format!("{prefix}.bn"), cout, true);
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let sw = cfg.spatial();
    let mut cin = 3;
    for (k, &c) in sw.iter().enumerate() {
        add_block(&mut s, &mut rng, &format!("d.s.{k}"), cin, c, 4);
        cin = c;
    }
    let c_df = cfg.descriptor_channels();
    if cfg.use_freq_branch {
        let mut cin = 2 * sw[TAP_BLOCK - 1];
        for (k, &c) in cfg.freq().iter().enumerate() {
            add_block(&mut s, &mut rng, &format!("d.f.{k}"), cin, c, 4);
            cin = c;
        }
        add_conv(&mut s, &mut rng, "d.f.fc", cin, c_df, 1, Init::Normal(INIT_STD), Some(0.0), ParamKind::Trainable);
    }
    let hidden = scaled(HEAD_HIDDEN, cfg.width);
    let mut cin = sw[5] + if cfg.use_freq_branch { c_df } else { 0 };
    for k in 0..4 {
        add_block(&mut s, &mut rng, &format!("d.a.{k}"), cin, hidden, 3);
        cin = hidden;
    }
    add_conv(&mut s, &mut rng, "d.a.out", cin, 1, 3, Init::Normal(INIT_STD), Some(0.0), ParamKind::Trainable);
    s
}

fn block(p: &Bound, prefix: &str, x: &Var, spec: Conv2dSpec, mode: Mode, leaky: bool) -> Var {
    let t = p.tape();
    let y = nn::conv(p, &format!("{prefix}.conv"), x, spec);
    let y = nn::batch_norm(p, &format!("{prefix}.bn"), &y, mode);
    if leaky {
        t.leaky_relu(&y, LEAKY_SLOPE)
    } else {
        t.relu(&y)
    }
}

/// Bottleneck `(B, c_ds, n, n)` and the tapped map `(B, c_dm, 8n, 8n)`.
pub fn spatial_branch(p: &Bound, cfg: &DiscriminatorConfig, image: &Var, mode: Mode) -> Result<(Var, Var)> {
    let [_, _, h, w] = image.shape();
    cfg.check_input(h, w)?;
    let mut x = image.clone();
    let mut tap = None;
    for k in 0..6 {
        x = block(p, &format!("d.s.{k}"), &x, Conv2dSpec::DOWN4, mode, true);
        if k + 1 == TAP_BLOCK {
            tap = Some(x.clone());
        }
    }
    Ok((x, tap.expect("tap block within range")))
}

/// Splits `(B, C, m, m)` into `B·n²` patches of `(C, m/n, m/n)`; patch
/// `(i, j)` of item `b` is at index `b·n² + i·n + j`.
pub fn split_patches(p: &Bound, map: &Var, n: usize) -> Result<Var> {
    let [_, _, h, w] = map.shape();
    if n == 0 || h % n != 0 || w % n != 0 || h != w {
        return Err(invalid!("cannot split a {h}x{w} map into {n}x{n} patches"));
    }
    Ok(p.tape().patchify(map, n))
}

/// Frequency descriptor of each patch: full FFT, three strided blocks and a
/// fully connected layer. Returns `(P, c_df, 1, 1)`.
pub fn freq_descriptor(p: &Bound, patches: &Var, mode: Mode) -> Result<Var> {
    let [_, _, h, w] = patches.shape();
    if h != w || h % 8 != 0 {
        return Err(invalid!("patches must be square with side divisible by 8, got {h}x{w}"));
    }
    let t = p.tape();
    let mut x = t.fft2_full_packed(patches);
    for k in 0..3 {
        x = block(p, &format!("d.f.{k}"), &x, Conv2dSpec::DOWN4, mode, true);
    }
    if x.shape()[2] != 1 {
        return Err(invalid!("patch side {h} leaves a {}x{} map before the FC layer", x.shape()[2], x.shape()[3]));
    }
    Ok(nn::conv(p, "d.f.fc", &x, Conv2dSpec::new(1, 0)))
}

/// Places per-patch descriptors `(B·n², C, 1, 1)` on an `(B, C, n, n)` grid.
pub fn assemble_freq_map(p: &Bound, descriptors: &Var, n: usize) -> Result<Var> {
    let [count, _, h, w] = descriptors.shape();
    if h != 1 || w != 1 || n == 0 || count % (n * n) != 0 {
        return Err(invalid!("{count} descriptors of {h}x{w} do not form {n}x{n} grids"));
    }
    Ok(p.tape().unpatchify(descriptors, n))
}

/// Predicted `(B, 1, n, n)` inharmony grid (unbounded).
pub fn discriminate(p: &Bound, cfg: &DiscriminatorConfig, image: &Var, mode: Mode) -> Result<Var> {
    let t = p.tape();
    let (f_ds, f_dm) = spatial_branch(p, cfg, image, mode)?;
    let mut x = if cfg.use_freq_branch {
        let patches = split_patches(p, &f_dm, cfg.n)?;
        let desc = freq_descriptor(p, &patches, mode)?;
        let f_df = assemble_freq_map(p, &desc, cfg.n)?;
        t.concat_channels(&[&f_ds, &f_df])
    } else {
        f_ds
    };
    for k in 0..4 {
        x = block(p, &format!("d.a.{k}"), &x, Conv2dSpec::SAME3, mode, k < 2);
    }
    Ok(nn::conv(p, "d.a.out", &x, Conv2dSpec::SAME3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Tape};
    use rand::Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn cfg(n: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            n,
            width: 0.125,
            use_freq_branch: true,
        }
    }

    #[test]
    fn branch_shapes() {
        let c = cfg(2);
        let store = init_discriminator(&c, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (ds, dm) = spatial_branch(&p, &c, &Var::constant(random((1, 3, 128, 128), 1)), Mode::Eval).unwrap();
        assert_eq!(ds.shape(), [1, 64, 2, 2]);
        assert_eq!(dm.shape(), [1, 32, 16, 16]);
        let patches = split_patches(&p, &dm, 2).unwrap();
        assert_eq!(patches.shape(), [4, 32, 8, 8]);
        let desc = freq_descriptor(&p, &patches, Mode::Eval).unwrap();
        assert_eq!(desc.shape(), [4, 32, 1, 1]);
        assert_eq!(assemble_freq_map(&p, &desc, 2).unwrap().shape(), [1, 32, 2, 2]);
    }

    #[test]
    fn wrong_input_size_names_requirement() {
        let c = cfg(2);
        let store = init_discriminator(&c, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let err = discriminate(&p, &c, &Var::constant(random((1, 3, 96, 96), 1)), Mode::Eval)
            .unwrap_err()
            .to_string();
        assert!(err.contains("128x128"), "{err}");
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let c = cfg(2);
        let store = init_discriminator(&c, 3);
        let x = Var::constant(random((2, 3, 128, 128), 4));
        let run = || {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            discriminate(&p, &c, &x, Mode::Eval).unwrap().value().clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 1, 2, 2]);
        assert_eq!(a, run());
    }

    #[test]
    fn spatial_only_head_has_fewer_inputs() {
        let c = DiscriminatorConfig {
            use_freq_branch: false,
            ..cfg(2)
        };
        let store = init_discriminator(&c, 0);
        assert!(!store.contains("d.f.fc.weight"));
        assert_eq!(store.value("d.a.0.conv.weight").shape()[1], 64);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = discriminate(&p, &c, &Var::constant(random((1, 3, 128, 128), 1)), Mode::Eval).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
    }

    #[test]
    fn identical_constant_patches_give_identical_descriptors() {
        let c = cfg(2);
        let store = init_discriminator(&c, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let patches = Var::constant(Array::from_elem((2, 32, 8, 8), 0.3));
        let d = freq_descriptor(&p, &patches, Mode::Eval).unwrap();
        let v = d.value();
        for ch in 0..32 {
            assert_eq!(v[[0, ch, 0, 0]], v[[1, ch, 0, 0]]);
        }
    }
}

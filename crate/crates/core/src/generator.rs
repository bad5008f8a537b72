//! The harmonization generator: frozen multi-scale encoder, masked AdaIN and
//! spectral residual refinement per level, skip-connected decoder, and a
//! learned soft blending mask.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::pool_mask_batch;
use crate::error::{invalid, shape_err, Result};
use crate::imaging::{check_binary, mask_to_nchw, pad_mask_reflect, ImageTensor};
use crate::nn::{self, NORM_EPS};
use crate::params::{add_conv, add_norm, Bound, Init, ParamKind, ParamStore};
use crate::tensor::{Array, Conv2dSpec, Tape, Var};

/// Encoder channel widths at the four tapped levels, before scaling.
pub const LEVEL_CHANNELS: [usize; 4] = [64, 128, 256, 512];

/// Per-channel constants expected by ImageNet-trained encoders.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Bias of the blending layer at initialization; `sigmoid(2) ≈ 0.88`, so the
/// untrained network mostly passes the decoded image through.
pub const BLEND_BIAS_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Multiplier applied to every channel count.
    pub width: f64,
    pub use_resfft: bool,
    /// Residual blocks per ResFFT module.
    pub resfft_blocks: usize,
    /// Map inputs with [`IMAGENET_MEAN`]/[`IMAGENET_STD`] before encoding;
    /// set when pretrained encoder weights are loaded.
    pub normalize_input: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 1.0,
            use_resfft: true,
            resfft_blocks: 1,
            normalize_input: false,
        }
    }
}

/// `base · width`, rounded, at least 1.
pub fn scaled(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(1)
}

impl GeneratorConfig {
    pub fn level_channels(&self) -> [usize; 4] {
        LEVEL_CHANNELS.map(|c| scaled(c, self.width))
    }
}

/// `(name, in, out, tapped level)` for the encoder convolutions, with a
/// pooling step before each `conv{2,3,4}_1`.
fn encoder_layers(ch: [usize; 4]) -> Vec<(&'static str, usize, usize, Option<usize>)> {
    vec![
        ("conv1_1", 3, ch[0], Some(0)),
        ("conv1_2", ch[0], ch[0], None),
        ("conv2_1", ch[0], ch[1], Some(1)),
        ("conv2_2", ch[1], ch[1], None),
        ("conv3_1", ch[1], ch[2], Some(2)),
        ("conv3_2", ch[2], ch[2], None),
        ("conv3_3", ch[2], ch[2], None),
        ("conv3_4", ch[2], ch[2], None),
        ("conv4_1", ch[2], ch[3], Some(3)),
    ]
}

/// Seeded parameters for every generator part. Encoder weights are frozen.
pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ch = cfg.level_channels();
    for (name, cin, cout, _) in encoder_layers(ch) {
        add_conv(&mut s, &mut rng, &format!("g.enc.{name}"), cin, cout, 3, Init::KaimingNormal, Some(0.0), ParamKind::Frozen);
    }
    for (l, &c) in ch.iter().enumerate() {
        for k in 0..cfg.resfft_blocks {
            let p = format!("g.fft{}.{k}", l + 1);
            add_conv(&mut s, &mut rng, &format!("{p}.conv1"), 2 * c, 2 * c, 3, Init::KaimingNormal, Some(0.0), ParamKind::Trainable);
            add_norm(&mut s, &format!("{p}.norm"), 2 * c, false);
            add_conv(&mut s, &mut rng, &format!("{p}.conv2"), 2 * c, 2 * c, 3, Init::Normal(0.02), Some(0.0), ParamKind::Trainable);
        }
    }
    let dec = [
        ("d4", ch[3], ch[2]),
        ("f3", 2 * ch[2], ch[2]),
        ("d3", ch[2], ch[1]),
        ("f2", 2 * ch[1], ch[1]),
        ("d2", ch[1], ch[0]),
        ("f1", 2 * ch[0], ch[0]),
    ];
    for (name, cin, cout) in dec {
        add_conv(&mut s, &mut rng, &format!("g.dec.{name}"), cin, cout, 3, Init::KaimingNormal, Some(0.0), ParamKind::Trainable);
    }
    add_conv(&mut s, &mut rng, "g.dec.out", ch[0], 3, 3, Init::Normal(0.02), Some(0.0), ParamKind::Trainable);
    add_conv(&mut s, &mut rng, "g.blend", ch[0] + 1, 1, 3, Init::Normal(0.01), Some(BLEND_BIAS_INIT), ParamKind::Trainable);
    s
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(invalid!("image sides must be positive multiples of 8, got {h}x{w}"));
    }
    Ok(())
}

/// Features at the four tapped levels, finest first.
pub fn encode(p: &Bound, cfg: &GeneratorConfig, image: &Var) -> Result<[Var; 4]> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(shape_err!("encoder expects 3 channels, got {c}"));
    }
    check_divisible(h, w)?;
    let t = p.tape();
    let mut x = if cfg.normalize_input {
        let mean = Array::from_shape_fn((1, 3, 1, 1), |(_, c, _, _)| -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
        let inv = Array::from_shape_fn((1, 3, 1, 1), |(_, c, _, _)| 1.0 / IMAGENET_STD[c]);
        t.add(&t.mul(image, &Var::constant(inv)), &Var::constant(mean))
    } else {
        image.clone()
    };
    let mut taps: Vec<Var> = Vec::with_capacity(4);
    for (name, _, _, tap) in encoder_layers(cfg.level_channels()) {
        if name.ends_with("_1") && name != "conv1_1" {
            x = t.max_pool2(&x);
        }
        x = t.relu(&nn::conv(p, &format!("g.enc.{name}"), &x, Conv2dSpec::SAME3));
        if tap.is_some() {
            taps.push(x.clone());
        }
    }
    Ok(taps.try_into().expect("four taps"))
}

/// Per-item, per-channel statistics, `(B, C, 1, 1)` each.
pub struct ChannelStats {
    pub mean: Var,
    pub std: Var,
    /// Items whose mask selected nothing and fell back to mean 0, std 1.
    pub empty: Vec<bool>,
}

/// Mean and `sqrt(var + 1e-5)` over positions where `mask` (`(B, 1, h, w)`)
/// is 1. An empty mask yields mean 0 and std 1 for that item.
pub fn masked_mean_std(t: &Tape, feature: &Var, mask: &Array) -> Result<ChannelStats> {
    let [b, c, h, w] = feature.shape();
    if mask.shape() != [b, 1, h, w] {
        return Err(shape_err!("mask {:?} does not match feature {:?}", mask.shape(), [b, 1, h, w]));
    }
    let counts: Vec<f64> = (0..b).map(|i| mask.index_axis(ndarray::Axis(0), i).sum()).collect();
    let empty: Vec<bool> = counts.iter().map(|&n| n == 0.0).collect();
    if empty.iter().any(|&e| e) {
        log::warn!("masked statistics over an empty mask; using mean 0, std 1");
    }
    let inv = Var::constant(Array::from_shape_fn((b, 1, 1, 1), |(i, ..)| {
        if empty[i] {
            0.0
        } else {
            1.0 / counts[i]
        }
    }));
    let m = Var::constant(mask.clone());
    let mean = t.mul(&t.sum_axes(&t.mul(feature, &m), &[2, 3]), &inv);
    let centered = t.sub(feature, &mean);
    let var = t.mul(&t.sum_axes(&t.mul(&t.square(&centered), &m), &[2, 3]), &inv);
    let std = t.sqrt(&t.add_scalar(&var, NORM_EPS));
    let nonempty = Array::from_shape_fn((b, 1, 1, 1), |(i, ..)| if empty[i] { 0.0 } else { 1.0 });
    let std = t.select(&nonempty, &std, &Var::constant(Array::ones((b, c, 1, 1))));
    let mean = t.select(&nonempty, &mean, &Var::constant(Array::zeros((b, c, 1, 1))));
    Ok(ChannelStats { mean, std, empty })
}

/// Whole-map statistics with the same variance stabilizer.
pub fn mean_std(t: &Tape, feature: &Var) -> (Var, Var) {
    let mean = t.mean_axes(feature, &[2, 3]);
    let var = t.mean_axes(&t.square(&t.sub(feature, &mean)), &[2, 3]);
    (mean, t.sqrt(&t.add_scalar(&var, NORM_EPS)))
}

/// Re-normalizes the masked region of `content` to the whole-map
/// statistics of `style`; positions outside the mask are copied unchanged.
pub fn adain(t: &Tape, content: &Var, style: &Var, mask: &Array) -> Result<Var> {
    if content.shape() != style.shape() {
        return Err(shape_err!("content {:?} vs style {:?}", content.shape(), style.shape()));
    }
    let fg = masked_mean_std(t, content, mask)?;
    let (mu_s, sigma_s) = mean_std(t, style);
    let normalized = t.mul(&t.sub(content, &fg.mean), &t.recip(&fg.std));
    let restyled = t.add(&t.mul(&normalized, &sigma_s), &mu_s);
    Ok(t.select(mask, &restyled, content))
}

/// Residual refinement in the Fourier domain: real FFT, channel-packed
/// residual block(s), inverse FFT.
pub fn resfft(p: &Bound, level: usize, blocks: usize, x: &Var) -> Var {
    let t = p.tape();
    let width = x.shape()[3];
    let mut spec = t.rfft2_packed(x);
    for k in 0..blocks {
        let pre = format!("g.fft{level}.{k}");
        let r = nn::conv(p, &format!("{pre}.conv1"), &spec, Conv2dSpec::SAME3);
        let r = t.relu(&nn::instance_norm(p, &format!("{pre}.norm"), &r));
        let r = nn::conv(p, &format!("{pre}.conv2"), &r, Conv2dSpec::SAME3);
        spec = t.add(&spec, &r);
    }
    t.irfft2_packed(&spec, width)
}

/// Decodes from the bottleneck, concatenating the finer levels on the way
/// up. Returns the decoded image and the last feature map.
pub fn decode(p: &Bound, feats: &[Var]) -> Result<(Var, Var)> {
    if feats.len() != 4 {
        return Err(invalid!("decoder needs 4 levels, got {}", feats.len()));
    }
    let t = p.tape();
    let conv_relu = |name: &str, x: &Var| t.relu(&nn::conv(p, &format!("g.dec.{name}"), x, Conv2dSpec::SAME3));
    let mut x = feats[3].clone();
    for (down, fuse, skip) in [("d4", "f3", 2), ("d3", "f2", 1), ("d2", "f1", 0)] {
        x = t.upsample_nearest2(&conv_relu(down, &x));
        x = conv_relu(fuse, &t.concat_channels(&[&x, &feats[skip]]));
    }
    let out = t.sigmoid(&nn::conv(p, "g.dec.out", &x, Conv2dSpec::SAME3));
    Ok((out, x))
}

/// Soft mask in `[0, 1]` from decoder features and the hard mask.
pub fn blend_mask(p: &Bound, decoder_features: &Var, mask: &Array) -> Var {
    let t = p.tape();
    let input = t.concat_channels(&[decoder_features, &Var::constant(mask.clone())]);
    t.sigmoid(&nn::conv(p, "g.blend", &input, Conv2dSpec::SAME3))
}

/// `out · soft + composite · (1 − soft)`.
pub fn blend(t: &Tape, output: &Var, composite: &Var, soft: &Var) -> Result<Var> {
    if output.shape() != composite.shape() {
        return Err(shape_err!("output {:?} vs composite {:?}", output.shape(), composite.shape()));
    }
    let keep = t.add_scalar(&t.scale(soft, -1.0), 1.0);
    Ok(t.add(&t.mul(output, soft), &t.mul(composite, &keep)))
}

/// Everything [`harmonize`] produces.
pub struct Harmonized {
    pub image: Var,
    pub soft_mask: Var,
    pub decoded: Var,
    pub composite_features: [Var; 4],
    pub background_features: [Var; 4],
}

/// Masks pooled to the four encoder resolutions.
pub fn level_masks(mask: &Array) -> Result<[Array; 4]> {
    Ok([
        pool_mask_batch(mask, 1)?,
        pool_mask_batch(mask, 2)?,
        pool_mask_batch(mask, 4)?,
        pool_mask_batch(mask, 8)?,
    ])
}

/// Full generator pass on `(B, 3, H, W)` composites, backgrounds and
/// `(B, 1, H, W)` masks.
pub fn harmonize(p: &Bound, cfg: &GeneratorConfig, composite: &Var, background: &Var, mask: &Array) -> Result<Harmonized> {
    let t = p.tape();
    let [b, _, h, w] = composite.shape();
    if background.shape() != composite.shape() {
        return Err(shape_err!("background {:?} vs composite {:?}", background.shape(), composite.shape()));
    }
    if mask.shape() != [b, 1, h, w] {
        return Err(shape_err!("mask {:?} vs image {:?}", mask.shape(), [b, 1, h, w]));
    }
    let masks = level_masks(mask)?;
    let fc = encode(p, cfg, composite)?;
    let fb = encode(p, cfg, background)?;
    let mut harmonized = Vec::with_capacity(4);
    for l in 0..4 {
        let styled = adain(t, &fc[l], &fb[l], &masks[l])?;
        harmonized.push(if cfg.use_resfft {
            resfft(p, l + 1, cfg.resfft_blocks, &styled)
        } else {
            styled
        });
    }
    let (decoded, features) = decode(p, &harmonized)?;
    let soft_mask = blend_mask(p, &features, mask);
    let image = blend(t, &decoded, composite, &soft_mask)?;
    Ok(Harmonized {
        image,
        soft_mask,
        decoded,
        composite_features: fc,
        background_features: fb,
    })
}

/// Output of [`harmonize_image`], cropped back to the input size.
#[derive(Debug, Clone)]
pub struct HarmonizedImage {
    pub image: ImageTensor,
    pub soft_mask: Array2<f64>,
}

/// Harmonizes a single composite of any size. Sides that are not multiples
/// of 8 are reflection-padded on the bottom/right and cropped afterwards; a
/// background of a different size is resampled to the composite's.
pub fn harmonize_image(
    store: &ParamStore,
    cfg: &GeneratorConfig,
    composite: &ImageTensor,
    background: &ImageTensor,
    mask: &Array2<f64>,
) -> Result<HarmonizedImage> {
    let (h, w) = (composite.height(), composite.width());
    if mask.dim() != (h, w) {
        return Err(shape_err!("mask is {}x{} but composite is {h}x{w}", mask.dim().1, mask.dim().0));
    }
    check_binary(mask)?;
    let background = if (background.height(), background.width()) != (h, w) {
        log::info!("resizing background from {}x{} to {w}x{h}", background.width(), background.height());
        background.resize(h, w)
    } else {
        background.clone()
    };
    let (pad_h, pad_w) = ((8 - h % 8) % 8, (8 - w % 8) % 8);
    if pad_h + pad_w > 0 {
        log::info!("padding {w}x{h} input to {}x{}", w + pad_w, h + pad_h);
    }
    let comp = composite.pad_reflect(pad_h, pad_w)?;
    let bg = background.pad_reflect(pad_h, pad_w)?;
    let m = pad_mask_reflect(mask, pad_h, pad_w)?;

    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = harmonize(
        &p,
        cfg,
        &Var::constant(comp.to_nchw()),
        &Var::constant(bg.to_nchw()),
        &mask_to_nchw(&m),
    )?;
    let image = ImageTensor::from_nchw(out.image.value(), 0)?.crop(h, w);
    let soft_mask = out.soft_mask.value().slice(ndarray::s![0, 0, ..h, ..w]).to_owned();
    Ok(HarmonizedImage { image, soft_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            width: 0.125,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = small();
        let store = init_generator(&cfg, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let feats = encode(&p, &cfg, &Var::constant(random((1, 3, 64, 32), 1))).unwrap();
        let shapes: Vec<[usize; 4]> = feats.iter().map(Var::shape).collect();
        assert_eq!(shapes, vec![[1, 8, 64, 32], [1, 16, 32, 16], [1, 32, 16, 8], [1, 64, 8, 4]]);
        assert!(encode(&p, &cfg, &Var::constant(random((1, 3, 20, 32), 1))).is_err());
    }

    #[test]
    fn masked_statistics_by_hand() {
        let tape = Tape::new();
        let f = Array::from_shape_vec((1, 1, 1, 3), vec![1.0, 3.0, 100.0]).unwrap();
        let m = Array::from_shape_vec((1, 1, 1, 3), vec![1.0, 1.0, 0.0]).unwrap();
        let s = masked_mean_std(&tape, &Var::constant(f), &m).unwrap();
        assert!((s.mean.scalar() - 2.0).abs() < 1e-12);
        assert!((s.std.scalar() - (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);

        let c = Array::from_elem((1, 2, 4, 4), 7.0);
        let s = masked_mean_std(&tape, &Var::constant(c), &Array::ones((1, 1, 4, 4))).unwrap();
        assert!(s.mean.value().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        assert!(s.std.value().iter().all(|&v| (v - 1e-5f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn empty_mask_falls_back() {
        let tape = Tape::new();
        let s = masked_mean_std(&tape, &Var::constant(random((2, 3, 4, 4), 2)), &Array::zeros((2, 1, 4, 4))).unwrap();
        assert_eq!(s.empty, vec![true, true]);
        assert!(s.mean.value().iter().all(|&v| v == 0.0));
        assert!(s.std.value().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adain_with_empty_mask_is_identity() {
        let tape = Tape::new();
        let c = random((1, 4, 8, 8), 3);
        let out = adain(&tape, &Var::constant(c.clone()), &Var::constant(random((1, 4, 8, 8), 4)), &Array::zeros((1, 1, 8, 8))).unwrap();
        assert_eq!(out.value(), &c);
    }

    #[test]
    fn adain_self_normalization_fixed_point() {
        let tape = Tape::new();
        let c = Var::constant(random((1, 3, 8, 8), 5));
        let out = adain(&tape, &c, &c, &Array::ones((1, 1, 8, 8))).unwrap();
        assert!((out.value() - c.value()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)) < 1e-9);
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let tape = Tape::new();
        let o = Var::constant(random((1, 3, 4, 4), 6));
        let c = Var::constant(random((1, 3, 4, 4), 7));
        let at = |v: f64| Var::constant(Array::from_elem((1, 1, 4, 4), v));
        assert_eq!(blend(&tape, &o, &c, &at(0.0)).unwrap().value(), c.value());
        assert_eq!(blend(&tape, &o, &c, &at(1.0)).unwrap().value(), o.value());
        let mid = blend(&tape, &o, &c, &at(0.5)).unwrap();
        let avg = (o.value() + c.value()) * 0.5;
        assert!((mid.value() - &avg).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn zero_residual_resfft_is_identity() {
        let cfg = small();
        let mut store = init_generator(&cfg, 0);
        for (name, param) in store.iter_mut() {
            if name.starts_with("g.fft") && name.contains(".conv") {
                param.value.fill(0.0);
            }
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = random((1, 64, 32, 16), 8);
        let y = resfft(&p, 4, 1, &Var::constant(x.clone()));
        assert_eq!(y.shape(), [1, 64, 32, 16]);
        assert!((y.value() - &x).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)) < 1e-5);
    }

    #[test]
    fn zero_features_with_zero_output_layer_decode_to_half_gray() {
        let cfg = small();
        let mut store = init_generator(&cfg, 0);
        store.get_mut("g.dec.out.weight").unwrap().value.fill(0.0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let ch = cfg.level_channels();
        let feats: Vec<Var> = (0..4)
            .map(|l| Var::constant(Array::zeros((1, ch[l], 32 >> l, 32 >> l))))
            .collect();
        let (out, features) = decode(&p, &feats).unwrap();
        assert_eq!(out.shape(), [1, 3, 32, 32]);
        assert_eq!(features.shape(), [1, ch[0], 32, 32]);
        assert!(out.value().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn initial_soft_mask_is_near_sigmoid_of_bias() {
        let cfg = small();
        let store = init_generator(&cfg, 1);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = Var::constant(random((1, 3, 32, 32), 9));
        let mut mask = Array::zeros((1, 1, 32, 32));
        mask.slice_mut(ndarray::s![.., .., 8..20, 8..20]).fill(1.0);
        let out = harmonize(&p, &cfg, &x, &Var::constant(random((1, 3, 32, 32), 10)), &mask).unwrap();
        let m = out.soft_mask.value();
        assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = m.mean().unwrap();
        assert!((mean - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 0.05, "{mean}");
    }
}

//! Encoder-decoder generator with control-map modulation, per-site learned
//! noise, and foreground/blend-map heads.

use defectgan_autograd::{Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controlmap::AttributeControlMap;
use crate::datamodel::NUM_CATEGORIES;
use crate::error::{Error, Result};
use crate::nn::{instance_norm, AffineInstanceNorm, Bound, Conv2d, ConvTranspose2d, ParamId, ParamStore, IN_EPS};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub conv_dim: usize,
    pub res_blocks: usize,
    /// Hidden width of the modulation branch.
    pub spade_hidden: usize,
    /// Control map injected through modulation in every decoder block (SCC).
    /// When off, the map is concatenated to the input image instead.
    pub spade: bool,
    /// Learned-scale noise after every convolutional block (ANI).
    pub noise: bool,
    /// Foreground + blend-map composition (LWC). When off the foreground head
    /// output is the translated image.
    pub composition: bool,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Invalid(format!("generator input size {} is not divisible by 4", self.image_size)));
        }
        if self.conv_dim == 0 || self.spade_hidden == 0 {
            return Err(Error::Invalid("generator channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// How noise sites draw their perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// Standard normal draws keyed by this seed and the site index.
    Seeded(u64),
    /// Skip every noise site.
    Frozen,
}

/// Foreground `f` in [-1, 1] (`[N, 3, H, W]`) and, with composition enabled,
/// blend map `m` in [0, 1] (`[N, 1, H, W]`).
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub foreground: Var,
    pub map: Option<Var>,
}

/// A translated batch with the raw head outputs that produced it.
#[derive(Debug, Clone)]
pub struct Translation {
    pub image: Var,
    pub foreground: Var,
    pub map: Option<Var>,
}

/// Modulated instance norm: `IN(x) · (1 + γ(A)) + β(A)`.
///
/// The branch convolutions carry no bias, so an all-zero map leaves the
/// normalized features untouched.
#[derive(Debug, Clone)]
pub struct Spade {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl Spade {
    pub fn new(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, channels: usize, hidden: usize) -> Self {
        Spade {
            shared: Conv2d::new(store, rng, &format!("{name}.shared"), NUM_CATEGORIES, hidden, 3, 1, 1, false),
            gamma: Conv2d::new(store, rng, &format!("{name}.gamma"), hidden, channels, 3, 1, 1, false),
            beta: Conv2d::new(store, rng, &format!("{name}.beta"), hidden, channels, 3, 1, 1, false),
        }
    }

    /// `a` must already match the spatial size of `x`.
    pub fn forward(&self, b: &Bound, x: &Var, a: &Var) -> Var {
        let h = self.shared.forward(b, a).relu();
        let gamma = self.gamma.forward(b, &h);
        let beta = self.beta.forward(b, &h);
        instance_norm(x, IN_EPS).mul(&gamma.add_scalar(1.0)).add(&beta)
    }
}

#[derive(Debug, Clone)]
enum Norm {
    Spade(Spade),
    Affine(AffineInstanceNorm),
}

impl Norm {
    fn forward(&self, b: &Bound, x: &Var, a: &Var) -> Var {
        match self {
            Norm::Spade(s) => s.forward(b, x, a),
            Norm::Affine(n) => n.forward(b, x),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: Norm,
    noise1: Option<ParamId>,
    conv2: Conv2d,
    norm2: Norm,
    noise2: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: ConvTranspose2d,
    norm: Norm,
    noise: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv: Conv2d,
    norm: AffineInstanceNorm,
    noise: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    /// Convolution of the control map concatenated at the input (SCC off).
    input_map: Option<Conv2d>,
    down: Vec<DownBlock>,
    res: Vec<ResBlock>,
    up: Vec<UpBlock>,
    fg_head: Conv2d,
    map_head: Option<Conv2d>,
    noise_sites: Vec<ParamId>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, &[seed::STREAM_INIT_G]);
        let mut p = ParamStore::new();
        let mut noise_sites = Vec::new();
        let mut site = |p: &mut ParamStore, name: String| {
            config.noise.then(|| {
                let id = p.add(name, Tensor::zeros(&[1, 1, 1, 1]));
                noise_sites.push(id);
                id
            })
        };
        let w = config.conv_dim;
        let c = NUM_CATEGORIES;

        let mut down = Vec::new();
        let input_map = (!config.spade)
            .then(|| Conv2d::new(&mut p, &mut rng, "enc0.map", c, w, 7, 1, 3, false));
        down.push(DownBlock {
            conv: Conv2d::new(&mut p, &mut rng, "enc0.conv", 3, w, 7, 1, 3, true),
            norm: AffineInstanceNorm::new(&mut p, "enc0.norm", w),
            noise: site(&mut p, "enc0.noise".into()),
        });
        for i in 1..=2 {
            let (cin, cout) = (w << (i - 1), w << i);
            down.push(DownBlock {
                conv: Conv2d::new(&mut p, &mut rng, &format!("enc{i}.conv"), cin, cout, 4, 2, 1, true),
                norm: AffineInstanceNorm::new(&mut p, &format!("enc{i}.norm"), cout),
                noise: site(&mut p, format!("enc{i}.noise")),
            });
        }

        let norm = |p: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, ch: usize| {
            if config.spade {
                Norm::Spade(Spade::new(p, rng, name, ch, config.spade_hidden))
            } else {
                Norm::Affine(AffineInstanceNorm::new(p, name, ch))
            }
        };
        let bw = 4 * w;
        let mut res = Vec::new();
        for j in 0..config.res_blocks {
            let n = format!("res{j}");
            let conv1 = Conv2d::new(&mut p, &mut rng, &format!("{n}.conv1"), bw, bw, 3, 1, 1, false);
            let norm1 = norm(&mut p, &mut rng, &format!("{n}.norm1"), bw);
            let noise1 = site(&mut p, format!("{n}.noise1"));
            let conv2 = Conv2d::new(&mut p, &mut rng, &format!("{n}.conv2"), bw, bw, 3, 1, 1, false);
            let norm2 = norm(&mut p, &mut rng, &format!("{n}.norm2"), bw);
            let noise2 = site(&mut p, format!("{n}.noise2"));
            res.push(ResBlock { conv1, norm1, noise1, conv2, norm2, noise2 });
        }
        let mut up = Vec::new();
        for i in 0..2 {
            let (cin, cout) = (bw >> i, bw >> (i + 1));
            up.push(UpBlock {
                conv: ConvTranspose2d::new(&mut p, &mut rng, &format!("dec{i}.conv"), cin, cout, 4, 2, 1, false),
                norm: norm(&mut p, &mut rng, &format!("dec{i}.norm"), cout),
                noise: site(&mut p, format!("dec{i}.noise")),
            });
        }
        let fg_head = Conv2d::new(&mut p, &mut rng, "head.foreground", w, 3, 7, 1, 3, true);
        let map_head = config
            .composition
            .then(|| Conv2d::new(&mut p, &mut rng, "head.map", w, 1, 7, 1, 3, true));
        Ok(Generator { config, params: p, input_map, down, res, up, fg_head, map_head, noise_sites })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    pub fn noise_sites(&self) -> &[ParamId] {
        &self.noise_sites
    }

    /// Runs the network on `x` (`[N, 3, H, W]`) conditioned on `a` (`[N, C, H, W]`).
    pub fn forward(&self, b: &Bound, x: &Var, a: &Tensor, noise: Noise) -> Result<GeneratorOutput> {
        let s = self.config.image_size;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != s || xs[3] != s {
            return Err(Error::Shape(format!("generator expects [N, 3, {s}, {s}], got {xs:?}")));
        }
        let expected = [xs[0], NUM_CATEGORIES, s, s];
        if a.shape() != expected {
            return Err(Error::Shape(format!("control map batch {:?} does not match {:?}", a.shape(), expected)));
        }
        let mut site = 0u64;
        let mut inject = |h: Var, id: Option<ParamId>| match (id, noise) {
            (Some(id), Noise::Seeded(seed)) => {
                site += 1;
                add_noise(&h, b.var(id), seed, site - 1)
            }
            _ => h,
        };

        let a_full = Var::constant(a.clone());
        let mut h = self.down[0].conv.forward(b, x);
        if let Some(m) = &self.input_map {
            h = h.add(&m.forward(b, &a_full));
        }
        h = self.down[0].norm.forward(b, &h).relu();
        h = inject(h, self.down[0].noise);
        for blk in &self.down[1..] {
            h = blk.norm.forward(b, &blk.conv.forward(b, &h)).relu();
            h = inject(h, blk.noise);
        }

        let a_low = Var::constant(resize_nearest(a, h.shape()[2], h.shape()[3]));
        for blk in &self.res {
            let mut r = blk.norm1.forward(b, &blk.conv1.forward(b, &h), &a_low).relu();
            r = inject(r, blk.noise1);
            r = blk.norm2.forward(b, &blk.conv2.forward(b, &r), &a_low);
            r = inject(r, blk.noise2);
            h = h.add(&r);
        }
        for blk in &self.up {
            h = blk.conv.forward(b, &h);
            let a_here = Var::constant(resize_nearest(a, h.shape()[2], h.shape()[3]));
            h = blk.norm.forward(b, &h, &a_here).relu();
            h = inject(h, blk.noise);
        }
        let foreground = self.fg_head.forward(b, &h).tanh();
        let map = self.map_head.as_ref().map(|m| m.forward(b, &h).sigmoid());
        Ok(GeneratorOutput { foreground, map })
    }

    /// Translates `x` toward the conditioning `a`: with composition the blend
    /// of `x` and the foreground, otherwise the foreground itself.
    pub fn translate(&self, b: &Bound, x: &Var, a: &Tensor, noise: Noise) -> Result<Translation> {
        let out = self.forward(b, x, a, noise)?;
        let image = match &out.map {
            Some(m) => compose(x, &out.foreground, m),
            None => out.foreground.clone(),
        };
        Ok(Translation { image, foreground: out.foreground, map: out.map })
    }

    /// Adds defects described by `a` to normal images.
    pub fn deface(&self, b: &Bound, n: &Var, a: &Tensor, noise: Noise) -> Result<Translation> {
        self.translate(b, n, a, noise)
    }

    /// Repaints defect images toward normal using the restoration map.
    pub fn restore(&self, b: &Bound, d: &Var, noise: Noise) -> Result<Translation> {
        let s = self.config.image_size;
        let one = AttributeControlMap::restoration(s, s).to_tensor();
        let a = Tensor::stack_batch(&vec![one; d.shape()[0]]);
        self.translate(b, d, &a, noise)
    }
}

/// `background · (1 − m) + f · m`, with `m` (`[N, 1, H, W]`) broadcast over channels.
///
/// Panics when `m` leaves [0, 1].
pub fn compose(background: &Var, foreground: &Var, m: &Var) -> Var {
    let mv = m.value();
    assert!(mv.min() >= 0.0 && mv.max() <= 1.0, "blend map outside [0, 1]: [{}, {}]", mv.min(), mv.max());
    background.mul(&m.neg().add_scalar(1.0)).add(&foreground.mul(m))
}

/// `h + s·z` with `z` the standard normal draw for `(seed, site)` and `s` a
/// learned scalar scale.
pub fn add_noise(h: &Var, scale: &Var, seed: u64, site: u64) -> Var {
    h.add(&Var::constant(gaussian(h.shape(), seed, site)).mul(scale))
}

/// Standard normal tensor keyed by `(seed, site)`.
pub fn gaussian(shape: &[usize], seed: u64, site: u64) -> Tensor {
    let mut rng = seed::rng(seed, &[seed::STREAM_NOISE, site]);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Nearest-neighbour resampling of an NCHW tensor: output pixel `(y, x)`
/// reads source pixel `(⌊y·H/h⌋, ⌊x·W/w⌋)`.
pub fn resize_nearest(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (n, c, sh, sw) = (s[0], s[1], s[2], s[3]);
    if sh == h && sw == w {
        return t.clone();
    }
    let src = t.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let sy = y * sh / h;
            for x in 0..w {
                out.push(src[(plane * sh + sy) * sw + x * sw / w]);
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(noise: bool, spade: bool, composition: bool) -> Generator {
        let cfg = GeneratorConfig { image_size: 8, conv_dim: 4, res_blocks: 1, spade_hidden: 4, spade, noise, composition };
        Generator::new(cfg, 3).unwrap()
    }

    fn inputs(n: usize) -> (Var, Tensor) {
        let x = Tensor::from_fn(&[n, 3, 8, 8], |i| ((i * 7919) % 200) as f64 / 100.0 - 1.0);
        let a = AttributeControlMap::repeat_label(&crate::datamodel::LabelVector::one_hot(crate::datamodel::Category::Crack), 8, 8).to_tensor();
        (Var::constant(x), Tensor::stack_batch(&vec![a; n]))
    }

    #[test]
    fn output_shapes_and_ranges() {
        let g = micro(true, true, true);
        let (x, a) = inputs(2);
        let out = g.forward(&g.bind(false), &x, &a, Noise::Seeded(1)).unwrap();
        assert_eq!(out.foreground.shape(), &[2, 3, 8, 8]);
        let m = out.map.unwrap();
        assert_eq!(m.shape(), &[2, 1, 8, 8]);
        assert!(out.foreground.value().max_abs() <= 1.0);
        assert!(m.value().min() >= 0.0 && m.value().max() <= 1.0);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let g = micro(false, true, true);
        let (x, _) = inputs(1);
        let bad = Tensor::zeros(&[1, 6, 4, 4]);
        assert!(g.forward(&g.bind(false), &x, &bad, Noise::Frozen).is_err());
        let x16 = Var::constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(g.forward(&g.bind(false), &x16, &bad, Noise::Frozen).is_err());
    }

    #[test]
    fn ablated_composition_returns_foreground() {
        let g = micro(false, true, false);
        let (x, a) = inputs(1);
        let t = g.translate(&g.bind(false), &x, &a, Noise::Frozen).unwrap();
        assert!(t.map.is_none());
        assert_eq!(t.image.value(), t.foreground.value());
    }

    #[test]
    fn concatenated_map_variant_runs() {
        let g = micro(true, false, true);
        let (x, a) = inputs(1);
        let t = g.translate(&g.bind(false), &x, &a, Noise::Seeded(4)).unwrap();
        assert_eq!(t.image.shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn resize_nearest_picks_top_left_sources() {
        let t = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let r = resize_nearest(&t, 2, 2);
        assert_eq!(r.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    #[should_panic(expected = "blend map")]
    fn compose_rejects_out_of_range_map() {
        let bg = Var::constant(Tensor::zeros(&[1, 3, 1, 1]));
        let m = Var::constant(Tensor::full(&[1, 1, 1, 1], 1.5));
        compose(&bg, &bg, &m);
    }
}

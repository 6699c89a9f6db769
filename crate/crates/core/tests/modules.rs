use std::fs;

use defectgan_autograd::{Tensor, Var};
use defectgan_core::controlmap::AttributeControlMap;
use defectgan_core::datamodel::{Category, DatasetManifest, ImagePatch, LabelVector, Split};
use defectgan_core::discriminator::{Critic, Discriminator, DiscriminatorConfig};
use defectgan_core::generator::{add_noise, compose, gaussian, Generator, GeneratorConfig, Noise, Spade};
use defectgan_core::nn::{instance_norm, ParamStore, IN_EPS};
use defectgan_core::objectives::{critic_loss, generator_adv_loss};
use defectgan_core::seed;

fn write_png(path: &std::path::Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30])).save(path).unwrap();
}

#[test]
fn manifest_rows_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("a.png"));
    write_png(&dir.path().join("b.png"));
    fs::write(dir.path().join("index.csv"), "relative_path,labels\na.png,\"crack,corrosion\"\nb.png,normal\n").unwrap();
    let (m, w) = DatasetManifest::load(dir.path(), Split::Train).unwrap();
    assert_eq!(m.records.len(), 2);
    assert!(w.is_empty());
    assert_eq!(m.records[0].label.to_f64(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    fs::write(dir.path().join("index.csv"), "relative_path,labels\na.png,crack\nb.png,rust\n").unwrap();
    let (m, w) = DatasetManifest::load(dir.path(), Split::Train).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].line, 3);
}

fn micro_generator(noise: bool) -> Generator {
    let cfg = GeneratorConfig { image_size: 8, conv_dim: 4, res_blocks: 1, spade_hidden: 4, spade: true, noise, composition: true };
    Generator::new(cfg, 7).unwrap()
}

fn inputs() -> (Var, Tensor) {
    let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 31) % 17) as f64 / 8.5 - 1.0);
    let a = AttributeControlMap::batch_tensor(&[
        AttributeControlMap::repeat_label(&LabelVector::one_hot(Category::Crack), 8, 8),
        AttributeControlMap::repeat_label(&LabelVector::one_hot(Category::Corrosion), 8, 8),
    ]);
    (Var::constant(x), a)
}

#[test]
fn zero_noise_scales_ignore_the_seed() {
    let g = micro_generator(true);
    let b = g.bind(false);
    let (x, a) = inputs();
    let o1 = g.forward(&b, &x, &a, Noise::Seeded(1)).unwrap();
    let o2 = g.forward(&b, &x, &a, Noise::Seeded(2)).unwrap();
    assert_eq!(o1.foreground.value().data(), o2.foreground.value().data());
}

#[test]
fn nonzero_noise_scales_depend_on_the_seed() {
    let mut g = micro_generator(true);
    for id in g.noise_sites().to_vec() {
        g.params_mut().get_mut(id).data_mut()[0] = 0.5;
    }
    let b = g.bind(false);
    let (x, a) = inputs();
    for pair in 0..5u64 {
        let o1 = g.forward(&b, &x, &a, Noise::Seeded(2 * pair)).unwrap();
        let o2 = g.forward(&b, &x, &a, Noise::Seeded(2 * pair + 1)).unwrap();
        assert!(o1.foreground.value().max_abs_diff(o2.foreground.value()) > 0.0);
    }
}

#[test]
fn noise_injection_definition() {
    let h = Var::constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
    let zero = add_noise(&h, &Var::constant(Tensor::scalar(0.0)), 4, 0);
    assert_eq!(zero.value().data(), h.value().data());
    let z = gaussian(h.shape(), 4, 0);
    let out = add_noise(&h, &Var::constant(Tensor::scalar(1.5)), 4, 0);
    for ((o, f), zv) in out.value().data().iter().zip(h.value().data()).zip(z.data()) {
        assert!((o - f - 1.5 * zv).abs() < 1e-12);
    }
}

#[test]
fn noise_variance_matches_scale_squared() {
    let h = Var::constant(Tensor::zeros(&[1, 1, 1, 100_000]));
    let out = add_noise(&h, &Var::constant(Tensor::scalar(2.0)), 9, 3);
    let d = out.value().data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    assert!((var - 4.0).abs() < 0.2, "variance {var}");
}

#[test]
fn spade_with_zero_branches_is_plain_normalization() {
    let mut store = ParamStore::new();
    let mut rng = seed::rng(1, &[]);
    let spade = Spade::new(&mut store, &mut rng, "s", 3, 4);
    for name in ["s.gamma.weight", "s.beta.weight"] {
        let id = store.id_of(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let b = store.bind(false);
    let x = Var::constant(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64).sin()));
    let a = Var::constant(Tensor::from_fn(&[1, 6, 4, 4], |i| (i % 3) as f64 * 0.5));
    let out = spade.forward(&b, &x, &a);
    assert_eq!(out.shape(), x.shape());
    assert_eq!(out.value().data(), instance_norm(&x, IN_EPS).value().data());
}

#[test]
fn spade_output_follows_the_map() {
    let mut store = ParamStore::new();
    let mut rng = seed::rng(2, &[]);
    let spade = Spade::new(&mut store, &mut rng, "s", 2, 3);
    for name in ["s.shared.weight", "s.gamma.weight", "s.beta.weight"] {
        let id = store.id_of(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let shared = store.id_of("s.shared.weight").unwrap();
    store.get_mut(shared).data_mut()[4] = 1.0; // centre tap, input channel 0 -> hidden 0
    let gamma = store.id_of("s.gamma.weight").unwrap();
    store.get_mut(gamma).data_mut()[4] = 1.0;
    let b = store.bind(false);
    let x = Var::constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.7).cos()));
    let a1 = Var::constant(Tensor::zeros(&[1, 6, 4, 4]));
    let a2 = Var::constant(Tensor::ones(&[1, 6, 4, 4]));
    let d = spade.forward(&b, &x, &a1).value().max_abs_diff(spade.forward(&b, &x, &a2).value());
    assert!(d > 1e-3);
}

#[test]
fn compose_constant_oracle() {
    let bg = Var::constant(Tensor::full(&[1, 3, 2, 2], 0.2));
    let f = Var::constant(Tensor::full(&[1, 3, 2, 2], 0.8));
    let m = Var::constant(Tensor::full(&[1, 1, 2, 2], 0.5));
    for v in compose(&bg, &f, &m).value().data() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn blank_maps_make_the_cycle_an_identity() {
    let n = Var::constant(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.37).sin()));
    let zero = Var::constant(Tensor::zeros(&[1, 1, 4, 4]));
    let d = compose(&n, &Var::constant(Tensor::full(&[1, 3, 4, 4], 0.9)), &zero);
    let back = compose(&d, &Var::constant(Tensor::full(&[1, 3, 4, 4], -0.3)), &zero);
    assert_eq!(back.value().data(), n.value().data());
}

#[test]
fn untrained_generator_stays_in_range() {
    let g = micro_generator(true);
    let (x, a) = inputs();
    let t = g.deface(&g.bind(false), &x, &a, Noise::Seeded(0)).unwrap();
    assert_eq!(t.image.shape(), x.shape());
    assert!(t.image.value().min() >= -1.0 && t.image.value().max() <= 1.0);
}

#[test]
fn discriminator_handles_scaled_input() {
    let d = Discriminator::new(DiscriminatorConfig { image_size: 16, conv_dim: 4, stages: 3 }, 0).unwrap();
    let x = Var::constant(Tensor::from_fn(&[2, 3, 16, 16], |i| 0.5 * (i as f64 * 0.1).sin()));
    let out = d.forward(&d.bind(false), &x).unwrap();
    assert_eq!(out.src.shape(), &[2, 1, 2, 2]);
    assert_eq!(out.cls.shape(), &[2, 6]);
    assert!(out.src.value().all_finite() && out.cls.value().all_finite());
}

/// Scores each sample by a fixed per-sample value.
struct Table(Vec<f64>);

impl Critic for Table {
    fn score(&self, x: &Var) -> Var {
        let n = x.shape()[0];
        let zero = x.mul_const(&Tensor::zeros(x.shape())).sum_axes_keepdim(&[1, 2, 3]).reshape(&[n, 1, 1, 1]);
        zero.add(&Var::constant(Tensor::new(&[n, 1, 1, 1], self.0[..n].to_vec())))
    }
}

#[test]
fn critic_and_generator_adversarial_terms() {
    let x = Var::constant(Tensor::zeros(&[2, 3, 2, 2]));
    let (adv, gp) = critic_loss(&Table(vec![0.4, 0.4]), &x, &x, 0);
    assert_eq!(adv.value().item(), 0.0);
    assert!((gp.value().item() - 1.0).abs() < 1e-6);

    struct RealFake;
    impl Critic for RealFake {
        fn score(&self, x: &Var) -> Var {
            // real batches are all ones, fake all zeros
            x.mean_axes_keepdim(&[1, 2, 3])
        }
    }
    let real = Var::constant(Tensor::ones(&[2, 3, 2, 2]));
    let fake = Var::constant(Tensor::zeros(&[2, 3, 2, 2]));
    assert_eq!(critic_loss(&RealFake, &real, &fake, 0).0.value().item(), -1.0);

    assert_eq!(generator_adv_loss(&Table(vec![0.0, 0.0]), &x).value().item(), 0.0);
    assert_eq!(generator_adv_loss(&Table(vec![3.0, 3.0]), &x).value().item(), -3.0);
    assert_eq!(generator_adv_loss(&Table(vec![1.7, -1.7]), &x).value().item(), 0.0);
}

#[test]
fn image_patch_roundtrip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let p = ImagePatch::new(2, 2, (0..12).map(|i| i as f64 / 6.0 - 1.0).collect()).unwrap();
    let path = dir.path().join("p.png");
    p.save_png(&path).unwrap();
    let q = ImagePatch::load(&path, None).unwrap();
    for (a, b) in p.data().iter().zip(q.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
    }
}

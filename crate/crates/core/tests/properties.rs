use defectgan_autograd::{Tensor, Var};
use defectgan_core::controlmap::{AttributeControlMap, BoxRegion, ControlRegion};
use defectgan_core::datamodel::{Category, ImagePatch, LabelVector, NUM_CATEGORIES};
use defectgan_core::evaluation::{compute_stats, frechet_distance, Embedder, GaussianStats, StatsAccumulator};
use defectgan_core::generator::compose;
use defectgan_core::inspector::{exact_match_accuracy, grl};
use proptest::prelude::*;

fn region() -> impl Strategy<Value = ControlRegion> {
    (0usize..5, 0usize..8, 0usize..8, 1usize..8, 1usize..8, 0.05f64..1.0).prop_map(|(c, x0, y0, w, h, v)| {
        let b = BoxRegion { x0, y0, x1: (x0 + w).min(8), y1: (y0 + h).min(8) };
        ControlRegion { intensity: v, ..ControlRegion::boxed(Category::DEFECTS[c], b) }
    })
}

fn vectors(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, k), (k + 2)..(k + 12))
}

/// Embeds a patch as its first `k` pixel values.
struct FirstPixels(usize);

impl Embedder for FirstPixels {
    fn id(&self) -> String {
        "first-pixels".into()
    }
    fn dim(&self) -> usize {
        self.0
    }
    fn embed(&self, p: &ImagePatch) -> Vec<f64> {
        p.data()[..self.0].to_vec()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn painting_ignores_region_order(mut regions in prop::collection::vec(region(), 1..5)) {
        let a = AttributeControlMap::paint_regions(&regions, 8, 8).unwrap();
        regions.reverse();
        let b = AttributeControlMap::paint_regions(&regions, 8, 8).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn compose_is_affine_in_the_map(
        bg in prop::collection::vec(-1.0f64..1.0, 12),
        f in prop::collection::vec(-1.0f64..1.0, 12),
        m in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let (bg, f) = (Tensor::new(&[1, 3, 2, 2], bg), Tensor::new(&[1, 3, 2, 2], f));
        let out = compose(&Var::constant(bg.clone()), &Var::constant(f.clone()), &Var::constant(Tensor::new(&[1, 1, 2, 2], m.clone())));
        for i in 0..12 {
            let want = bg.data()[i] + m[i % 4] * (f.data()[i] - bg.data()[i]);
            prop_assert!((out.value().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_self(a in vectors(3), b in vectors(3)) {
        let (sa, sb) = (GaussianStats::from_vectors(&a).unwrap(), GaussianStats::from_vectors(&b).unwrap());
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(frechet_distance(&sa, &sa).unwrap() <= 1e-9);
    }

    #[test]
    fn fid_under_a_shared_scaling(a in vectors(2), b in vectors(2), s in 0.2f64..3.0) {
        // a common map x -> s·x multiplies every term of the distance by s²
        let scale = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|x| x * s).collect()).collect::<Vec<Vec<f64>>>();
        let base = frechet_distance(&GaussianStats::from_vectors(&a).unwrap(), &GaussianStats::from_vectors(&b).unwrap()).unwrap();
        let scaled = frechet_distance(&GaussianStats::from_vectors(&scale(&a)).unwrap(), &GaussianStats::from_vectors(&scale(&b)).unwrap()).unwrap();
        prop_assert!((scaled - s * s * base).abs() <= 1e-6 * scaled.max(1.0));
    }

    #[test]
    fn streaming_merge_is_order_insensitive(v in vectors(3), cut in 1usize..6) {
        let cut = cut.min(v.len() - 1);
        let mut left = StatsAccumulator::new(3);
        let mut right = StatsAccumulator::new(3);
        v[..cut].iter().for_each(|x| left.push(x).unwrap());
        v[cut..].iter().for_each(|x| right.push(x).unwrap());
        let mut lr = left.clone();
        lr.merge(&right).unwrap();
        right.merge(&left).unwrap();
        let (p, q) = (lr.finish().unwrap(), right.finish().unwrap());
        for (x, y) in p.covariance.iter().zip(&q.covariance) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn stats_ignore_image_order(pixels in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 3..8)) {
        let mut imgs: Vec<ImagePatch> = pixels.into_iter().map(|p| ImagePatch::new(2, 2, p).unwrap()).collect();
        let a = compute_stats(&imgs, &FirstPixels(4)).unwrap();
        imgs.reverse();
        let b = compute_stats(&imgs, &FirstPixels(4)).unwrap();
        for (x, y) in a.covariance.iter().zip(&b.covariance) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn accuracy_ignores_sample_order(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, NUM_CATEGORIES), 0usize..6), 1..20),
        rot in 0usize..20,
    ) {
        let mut preds: Vec<[f64; NUM_CATEGORIES]> = rows.iter().map(|(p, _)| p.clone().try_into().unwrap()).collect();
        let mut targets: Vec<LabelVector> = rows.iter().map(|(_, c)| LabelVector::one_hot(Category::ALL[*c])).collect();
        let before = exact_match_accuracy(&preds, &targets, 0.5);
        let r = rot % preds.len();
        preds.rotate_left(r);
        targets.rotate_left(r);
        prop_assert_eq!(before, exact_match_accuracy(&preds, &targets, 0.5));
    }

    #[test]
    fn reversal_forward_is_identity(xs in prop::collection::vec(-1e6f64..1e6, 1..16), lambda in 0.0f64..3.0) {
        let x = Var::constant(Tensor::new(&[xs.len()], xs.clone()));
        let y = grl(&x, lambda);
        prop_assert_eq!(y.value().data(), &xs[..]);
    }
}

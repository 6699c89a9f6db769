use std::fs;
use std::path::Path;

use defectgan_core::datamodel::{Category, DatasetManifest, ImagePatch, LabelVector, SampleRecord, Source, Split};
use defectgan_core::evaluation::{generate_corpus, ideal_split_fid, CategorySampler, CorpusOptions, PixelPcaEmbedder};
use defectgan_core::evaluation::fid_between;
use defectgan_core::inspector::{mix_training_data, train_inspector, Inspector, InspectorConfig, LabeledImages};
use defectgan_core::optim::Sgd;
use defectgan_core::toy::{make_toy_dataset, ToyDefectSpec};
use defectgan_core::trainer::{CycleBatch, TrainConfig, TrainData, Trainer};
use defectgan_core::Error;

fn tiny_data(size: usize) -> TrainData {
    let patch = |k: usize| ImagePatch::new(size, size, (0..3 * size * size).map(|i| ((i * 13 + k * 7) % 29) as f64 / 14.5 - 1.0).collect()).unwrap();
    let normals: Vec<ImagePatch> = (0..3).map(patch).collect();
    let defects = (0..3).map(|k| (patch(10 + k), LabelVector::one_hot(Category::DEFECTS[k]))).collect::<Vec<_>>();
    TrainData::from_patches(&normals, &defects).unwrap()
}

#[test]
fn updates_touch_only_their_own_network() {
    let data = tiny_data(8);
    let mut t = Trainer::new(TrainConfig::micro()).unwrap();
    let batch = CycleBatch::sample(&data, 2, 0, 0);
    let (g0, d0) = (t.generator().params().checksum(), t.discriminator().params().checksum());
    let r = t.train_step_d(&batch).unwrap();
    assert_eq!(t.generator().params().checksum(), g0);
    assert_ne!(t.discriminator().params().checksum(), d0);
    let names: Vec<&str> = r.entries().iter().map(|e| e.0).collect();
    for k in ["adv_d", "gp", "cls_r", "total_d"] {
        assert!(names.contains(&k), "{k} missing from {names:?}");
    }

    let d1 = t.discriminator().params().checksum();
    let r = t.train_step_g(&batch).unwrap();
    assert_eq!(t.discriminator().params().checksum(), d1);
    assert_ne!(t.generator().params().checksum(), g0);
    let names: Vec<&str> = r.entries().iter().map(|e| e.0).collect();
    for k in ["adv_g", "cls_f", "rec", "sd_cyc", "sd_con", "total_g"] {
        assert!(names.contains(&k), "{k} missing from {names:?}");
    }
}

#[test]
fn equal_seeds_give_equal_runs() {
    let data = tiny_data(8);
    let run = || {
        let mut t = Trainer::new(TrainConfig::micro()).unwrap();
        (0..12).map(|_| t.step(&data).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iter().filter(|r| r.step == defectgan_core::trainer::StepKind::G).count(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.report.max_abs_diff(&y.report) <= 1e-6);
    }
}

#[test]
fn ablated_composition_reports_zero_spatial_terms() {
    let data = tiny_data(8);
    let cfg = TrainConfig { lwc: false, ..TrainConfig::micro() };
    let mut t = Trainer::new(cfg).unwrap();
    let r = t.train_step_g(&CycleBatch::sample(&data, 2, 0, 5)).unwrap();
    assert_eq!(r.sd_cyc, Some(0.0));
    assert_eq!(r.sd_con, Some(0.0));
    let (adv, cls, rec) = (r.adv_g.unwrap(), r.cls_f.unwrap(), r.rec.unwrap());
    let total = adv + 5.0 * cls + 5.0 * rec;
    assert!((r.total_g.unwrap() - total).abs() < 1e-9);
}

fn toy(dir: &Path, per_class: u32) -> defectgan_core::toy::ToyDataset {
    make_toy_dataset(&ToyDefectSpec { samples_per_class: per_class, image_size: 16, ..Default::default() }, dir).unwrap()
}

#[test]
fn toy_dataset_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = toy(a.path(), 5);
    toy(b.path(), 5);
    assert_eq!(da.all.records.len(), 30);
    for r in &da.all.records {
        assert_eq!(fs::read(a.path().join(&r.path)).unwrap(), fs::read(b.path().join(&r.path)).unwrap());
    }
}

fn checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = TrainConfig { image_size: 16, d_stages: 2, ..TrainConfig::micro() };
    Trainer::new(cfg).unwrap().save_checkpoint(dir).unwrap()
}

#[test]
fn corpus_counts_labels_and_determinism() {
    let work = tempfile::tempdir().unwrap();
    let ds = toy(&work.path().join("toy"), 4);
    let ckpt = checkpoint(&work.path().join("run"));
    let opts = CorpusOptions {
        count: 10,
        sampler: CategorySampler::Fixed(LabelVector::one_hot(Category::Crack)),
        control: None,
        with_restorations: true,
        seed: 3,
    };
    let a = generate_corpus(&ckpt, &ds.all, &opts, &work.path().join("a")).unwrap();
    assert_eq!(a.count_source(Source::Synthetic), 10);
    assert_eq!(a.count_source(Source::Restored), 10);
    for r in &a.records {
        let want = if r.source == Source::Synthetic { LabelVector::one_hot(Category::Crack) } else { LabelVector::normal() };
        assert_eq!(r.label, want);
    }
    let b = generate_corpus(&ckpt, &ds.all, &CorpusOptions { with_restorations: false, ..opts.clone() }, &work.path().join("b")).unwrap();
    assert_eq!(b.records.len(), 10);
    for r in &b.records {
        assert_eq!(fs::read(a.image_path(r)).unwrap(), fs::read(b.image_path(r)).unwrap());
    }
    let (reloaded, warnings) = DatasetManifest::load(&work.path().join("a"), Split::Train).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(reloaded.records, a.records);
}

#[test]
fn corpus_rejects_mismatched_inputs() {
    let work = tempfile::tempdir().unwrap();
    let ds = toy(&work.path().join("toy"), 2);
    let ckpt = checkpoint(&work.path().join("run"));
    let mut defects_only = ds.all.clone();
    defects_only.records.retain(|r| !r.label.is_normal());
    let opts = CorpusOptions { count: 1, sampler: CategorySampler::UniformSingle, control: None, with_restorations: false, seed: 0 };
    assert!(matches!(generate_corpus(&ckpt, &defects_only, &opts, &work.path().join("x")), Err(Error::Invalid(_))));
    let wrong = defectgan_core::controlmap::AttributeControlMap::restoration(8, 8);
    let opts = CorpusOptions { control: Some(wrong), ..opts };
    assert!(matches!(generate_corpus(&ckpt, &ds.all, &opts, &work.path().join("y")), Err(Error::Shape(_))));
}

#[test]
fn split_baseline() {
    let work = tempfile::tempdir().unwrap();
    let ds = toy(work.path(), 20);
    let imgs = ds.all.load_images(16).unwrap();
    let embed = PixelPcaEmbedder::fit(&imgs, 8, 8).unwrap();
    let a = ideal_split_fid(&imgs, &embed, 0).unwrap();
    let b = ideal_split_fid(&imgs, &embed, 1).unwrap();
    assert!(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0);
    assert!(ideal_split_fid(&imgs[..3], &embed, 0).is_err());
    // one copy of each image on each side
    assert!(fid_between(&imgs, &imgs, &embed).unwrap() <= 1e-6);
    let same = vec![imgs[0].clone(); 2];
    let s = defectgan_core::evaluation::compute_stats(&same, &embed).unwrap();
    assert!(s.covariance.iter().all(|v| *v == 0.0));
}

fn records(n: usize, source: Source, prefix: &str) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| SampleRecord { path: format!("{prefix}{i}.png").into(), label: LabelVector::normal(), source })
        .collect()
}

#[test]
fn mixing_counts_and_duplicates() {
    let real = DatasetManifest::new("/data/real", Split::Train, records(10, Source::Real, "r"));
    let mut gen_records = records(4, Source::Synthetic, "s");
    gen_records.extend(records(4, Source::Restored, "n"));
    let generated = DatasetManifest::new("/data/gen", Split::Train, gen_records);
    let mixed = mix_training_data(&real, Some(&generated)).unwrap();
    assert_eq!(mixed.records.len(), 18);
    assert_eq!((mixed.count(Source::Real), mixed.count(Source::Synthetic), mixed.count(Source::Restored)), (10, 4, 4));
    assert!(mixed.augmented);

    let plain = mix_training_data(&real, None).unwrap();
    assert_eq!(plain.records.len(), 10);
    assert!(!plain.augmented);

    let clash = DatasetManifest::new("/data/real", Split::Train, records(2, Source::Synthetic, "r"));
    let err = mix_training_data(&real, Some(&clash)).unwrap_err().to_string();
    assert!(err.contains("r0.png") && err.contains("r1.png"), "{err}");

    let mut other = generated.clone();
    other.categories.pop();
    assert!(mix_training_data(&real, Some(&other)).is_err());
}

fn inspector_setup(work: &Path) -> (defectgan_core::inspector::MixedDataset, LabeledImages) {
    let ds = toy(&work.join("toy"), 6);
    let mut gen = ds.train.clone();
    gen.root = work.join("gen");
    fs::create_dir_all(gen.root.join("images")).unwrap();
    for (i, r) in gen.records.iter_mut().enumerate() {
        let dst = Path::new("images").join(format!("g_{i}.png"));
        fs::copy(ds.train.image_path(r), gen.root.join(&dst)).unwrap();
        r.path = dst;
        r.source = Source::Synthetic;
    }
    let mixed = mix_training_data(&ds.train, Some(&gen)).unwrap();
    let val = LabeledImages::from_manifest(&ds.val, 16).unwrap();
    (mixed, val)
}

#[test]
fn disabled_reversal_matches_a_plain_classifier() {
    let work = tempfile::tempdir().unwrap();
    let (mixed, val) = inspector_setup(work.path());
    let base = InspectorConfig { image_size: 16, width: 4, source_hidden: 4, epochs: 2, ..InspectorConfig::desk() };
    let with_head = train_inspector(&InspectorConfig { lambda_grl: 0.0, ..base.clone() }, &mixed, &val, None).unwrap();
    let plain = train_inspector(&InspectorConfig { source_head: false, ..base.clone() }, &mixed, &val, None).unwrap();
    assert!(with_head.source_head_used && !plain.source_head_used);
    for (a, b) in with_head.history.iter().zip(&plain.history) {
        assert!((a.cls_loss - b.cls_loss).abs() <= 1e-6);
        assert_eq!(a.val_accuracy, b.val_accuracy);
    }

    let out = work.path().join("insp");
    let run = train_inspector(&base, &mixed, &val, Some(&out)).unwrap();
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 2);
    let best = Inspector::load(&out.join("best")).unwrap();
    assert_eq!(best.params().checksum(), run.best.params().checksum());
}

#[test]
fn single_step_changes_parameters() {
    let work = tempfile::tempdir().unwrap();
    let (mixed, _) = inspector_setup(work.path());
    let cfg = InspectorConfig { image_size: 16, width: 4, source_hidden: 4, ..InspectorConfig::desk() };
    let mut model = Inspector::new(cfg.clone()).unwrap();
    let mut opt = Sgd::new(cfg.momentum, model.params());
    let recs = [&mixed.records[0], mixed.records.last().unwrap()];
    let imgs: Vec<ImagePatch> = recs.iter().map(|r| ImagePatch::load(&r.path, Some(16)).unwrap()).collect();
    let before = model.params().checksum();
    let l = model.train_step(&mut opt, &imgs, &[recs[0].label, recs[1].label], Some(&[0.0, 1.0]), 1.0).unwrap();
    assert!(l.cls.is_finite() && l.src.unwrap().is_finite());
    assert_ne!(model.params().checksum(), before);
}

#[test]
fn single_source_data_disables_the_source_head() {
    let work = tempfile::tempdir().unwrap();
    let ds = toy(&work.path().join("toy"), 6);
    let mixed = mix_training_data(&ds.train, None).unwrap();
    let val = LabeledImages::from_manifest(&ds.val, 16).unwrap();
    let cfg = InspectorConfig { image_size: 16, width: 4, source_hidden: 4, epochs: 1, ..InspectorConfig::desk() };
    let run = train_inspector(&cfg, &mixed, &val, None).unwrap();
    assert!(!run.source_head_used);
    assert!(run.history[0].src_loss.is_none());
}

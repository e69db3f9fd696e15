mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use fsfm::backbone::{BackboneConfig, DualBranchModel, Params, Precision, TargetView};
use fsfm::diagnostics::reconstruction_panel;
use fsfm::downstream::{build_classifier, compute_auc, video_auc, FinetuneConfig, LabeledData, ScoreRecord};
use fsfm::facedata::{load_batch, patchify_regions, DatasetManifest, Region, RegionTaxonomy};
use fsfm::fixtures::{synth_face, synth_faces, write_fixtures};
use fsfm::masking::{masked_count, sample_mask, BinaryMask, MaskConfig, MaskPair, Strategy};
use fsfm::objectives::{loss_rec_masked, loss_rec_region, loss_sim, pixel_target, LossWeights, SimLoss};
use fsfm::pretrainer::{lr_at, CheckpointReader, Plan, Pretrainer, TrainConfig, TrainData};
use fsfm::{rng, Error};
use proptest::prelude::*;
use rand::Rng;

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop::sample::select(Strategy::ALL.to_vec())
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn all_zero(t: Option<&Tensor>) -> bool {
    t.is_none_or(|g| flat(g).iter().all(|v| *v == 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn patch_table_matches_pixel_oracle(seed in any::<u64>(), big in any::<bool>()) {
        let (size, patch) = if big { (64, 8) } else { (32, 4) };
        let mut rng = rng::stream("prop_maps", &[seed]);
        let map = common::random_parsing_map(&mut rng, size);
        let taxonomy = RegionTaxonomy::standard();
        let table = patchify_regions(&map, patch, &taxonomy).unwrap();
        for i in 0..table.len() {
            let counts = table.pixel_counts(i);
            prop_assert_eq!(counts.iter().sum::<u32>() as usize, patch * patch);
            let (gx, gy) = (i % table.grid_width(), i / table.grid_width());
            let mut oracle = [0u32; Region::COUNT];
            for dy in 0..patch {
                for dx in 0..patch {
                    let l = map.get(gx * patch + dx, gy * patch + dy);
                    oracle[taxonomy.coarse_of(l).unwrap().index()] += 1;
                }
            }
            prop_assert_eq!(counts, &oracle);
            for r in Region::ALL {
                prop_assert_eq!(table.intersects(i).contains(r), oracle[r.index()] > 0);
            }
        }
    }

    #[test]
    fn mask_invariants(seed in any::<u64>(), s in strategy(), ratio in 0.1f64..0.95) {
        let mut rng = rng::stream("prop_masks", &[seed]);
        let map = common::random_parsing_map(&mut rng, 32);
        let table = patchify_regions(&map, 4, &RegionTaxonomy::standard()).unwrap();
        let cfg = MaskConfig::new(s, ratio, seed);
        let pair = sample_mask(&table, &cfg).unwrap();
        prop_assert_eq!(&pair, &sample_mask(&table, &cfg).unwrap());
        prop_assert_eq!(pair.masked(), masked_count(table.len(), ratio));
        if s.covers_region() {
            let fr = pair.covered.unwrap();
            let touching = table.patches_touching(fr);
            if touching.len() > pair.masked() {
                prop_assert!(pair.extreme);
                prop_assert_eq!(&pair.mask, &pair.region_mask);
            } else {
                prop_assert!(pair.mask.contains_all(&pair.region_mask));
                prop_assert_eq!(pair.region_mask.indices().collect::<Vec<_>>(), touching);
            }
        } else {
            prop_assert_eq!(pair.region_mask.count(), 0);
        }
        if matches!(s, Strategy::CrfrP | Strategy::Frp) {
            let mut pools: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for i in 0..table.len() {
                let r = table.primary_region(i);
                if Some(r) != pair.covered && !pair.region_mask.get(i) {
                    let e = pools.entry(r.index()).or_default();
                    e.0 += 1;
                    e.1 += usize::from(!pair.mask.get(i));
                }
            }
            for (r, (size, visible)) in pools {
                prop_assert!(size < 2 || visible > 0, "region {} fully hidden", r);
            }
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(
        scores in prop::collection::vec(-5.0f64..5.0, 4..40),
        flips in prop::collection::vec(any::<bool>(), 40),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let mut labels: Vec<u8> = scores.iter().zip(&flips).map(|(_, &f)| u8::from(f)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let base = compute_auc(&scores, &labels).unwrap();
        for map in [
            |s: f64, a: f64, b: f64| a * s + b,
            |s: f64, a: f64, b: f64| (a * s + b).exp(),
            |s: f64, a: f64, _| (a * s).tanh(),
            |s: f64, a: f64, b: f64| (a * s).powi(3) + b,
        ] {
            let t: Vec<f64> = scores.iter().map(|&s| map(s, a, b)).collect();
            // strictly increasing in exact arithmetic; skip if rounding merged scores
            let merged = scores.iter().zip(&t).any(|(s, x)| {
                scores.iter().zip(&t).any(|(s2, x2)| s < s2 && x >= x2)
            });
            if !merged {
                prop_assert_eq!(compute_auc(&t, &labels).unwrap(), base);
            }
        }
        let distinct = scores.iter().enumerate().all(|(i, s)| scores[..i].iter().all(|t| t != s));
        if distinct {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = base + compute_auc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_frame_videos_give_frame_auc() {
    let mut rng = rng::stream("video_auc", &[0]);
    let records: Vec<ScoreRecord> = (0..30)
        .map(|i| ScoreRecord {
            id: format!("f{i}"),
            video_id: Some(format!("v{i}")),
            score: rng.random(),
            label: u8::from(i % 3 == 0),
        })
        .collect();
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    assert_eq!(video_auc(&records).unwrap(), compute_auc(&scores, &labels).unwrap());
}

#[test]
fn covered_region_is_uniform() {
    let taxonomy = RegionTaxonomy::standard();
    let face = synth_face(64, 0, 0, None).unwrap();
    let table = face.region_table(8, &taxonomy).unwrap();
    let present = table.coverable_present();
    assert!(present.len() >= 4);
    let trials = 3000;
    let mut counts: BTreeMap<Region, usize> = BTreeMap::new();
    for seed in 0..trials {
        let pair = sample_mask(&table, &MaskConfig::new(Strategy::CrfrP, 0.75, seed)).unwrap();
        *counts.entry(pair.covered.unwrap()).or_default() += 1;
    }
    let expected = 1.0 / present.len() as f64;
    for r in &present {
        let freq = counts.get(r).copied().unwrap_or(0) as f64 / trials as f64;
        assert!((freq - expected).abs() <= 0.05, "{r}: {freq} vs {expected}");
    }
    assert_eq!(counts.len(), present.len());
}

#[test]
fn loading_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_fixtures(dir.path(), 6, 32, 3, true).unwrap();
    let m = DatasetManifest::load(&path).unwrap();
    let taxonomy = RegionTaxonomy::standard();
    let a = load_batch(&m, &[4, 1, 2], &taxonomy).unwrap();
    let b = load_batch(&m, &[4, 1, 2], &taxonomy).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.image.data()), bits(y.image.data()));
    }
}

#[test]
fn lr_matches_closed_form() {
    let (base, eff, warm, total) = (1.5e-4, 4096, 40 * 11, 400 * 11);
    let peak = base * eff as f64 / 256.0;
    let mut rng = rng::stream("lr_points", &[0]);
    for _ in 0..1000 {
        let k = rng.random_range(0..total + 20);
        let want = if k >= total {
            0.0
        } else if k < warm {
            peak * k as f64 / warm as f64
        } else {
            let progress = (k - warm) as f64 / (total - warm) as f64;
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        let got = lr_at(base, eff, warm, total, k);
        assert!((got - want).abs() <= 1e-12 * peak, "step {k}: {got} vs {want}");
    }
}

struct Batch {
    model: DualBranchModel,
    x: Tensor,
    masks: Vec<MaskPair>,
}

fn batch(view_seed: u64) -> Batch {
    let cfg = BackboneConfig::tiny().with_precision(Precision::F64);
    let model = DualBranchModel::new(cfg.clone(), view_seed).unwrap();
    let taxonomy = RegionTaxonomy::standard();
    let faces = synth_faces(3, cfg.image_size, view_seed, false).unwrap();
    let patches: Vec<Vec<f32>> = faces.iter().map(|f| f.image.patchify(cfg.patch_size).unwrap()).collect();
    let masks = faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let table = f.region_table(cfg.patch_size, &taxonomy).unwrap();
            sample_mask(&table, &MaskConfig::new(Strategy::CrfrP, 0.75, i as u64)).unwrap()
        })
        .collect();
    let x = model.patches_tensor(&patches).unwrap();
    Batch { model, x, masks }
}

#[test]
fn heads_are_isolated() {
    let b = batch(1);
    let w = LossWeights::default();
    let out = b.model.forward(&b.x, &b.masks, TargetView::Full, None).unwrap();
    let target = pixel_target(&b.x, true).unwrap();
    let rec = (loss_rec_masked(&out.pred, &target, &b.masks).unwrap()
        + loss_rec_region(&out.pred, &target, &b.masks).unwrap().affine(w.lambda_fr, 0.0).unwrap())
    .unwrap();
    let sim = loss_sim(&out.online, &out.target, SimLoss::AsymmetricNcs).unwrap();
    let g_rec = rec.backward().unwrap();
    let g_sim = sim.backward().unwrap();
    let mut checked = (0, 0);
    for (name, var) in b.model.online_params() {
        if name.starts_with("projector.") || name.starts_with("predictor.") {
            checked.0 += 1;
            assert!(all_zero(g_rec.get(var.as_tensor())), "{name} has a reconstruction gradient");
        }
        if name.starts_with("pixel_decoder.") {
            checked.1 += 1;
            assert!(all_zero(g_sim.get(var.as_tensor())), "{name} has a similarity gradient");
        }
    }
    assert!(checked.0 > 0 && checked.1 > 0);
    let enc = b.model.online_params().into_iter().find(|(n, _)| n.starts_with("encoder.blocks")).unwrap();
    assert!(!all_zero(g_sim.get(enc.1.as_tensor())));
    assert!(!all_zero(g_rec.get(enc.1.as_tensor())));
}

#[test]
fn covered_patches_count_in_both_reconstruction_terms() {
    let dev = Device::Cpu;
    let (n, p) = (6, 4);
    let target = Tensor::zeros((1, n, p), DType::F64, &dev).unwrap();
    let mask = BinaryMask::from_indices(n, [0, 1, 2, 3]);
    let pair = MaskPair {
        mask,
        region_mask: BinaryMask::from_indices(n, [1, 2]),
        covered: Some(Region::Eyes),
        extreme: false,
    };
    let pairs = [pair];
    let mut pred = vec![0.5f64; n * p];
    let with_error = Tensor::from_vec(pred.clone(), (1, n, p), &dev).unwrap();
    for v in &mut pred[p..3 * p] {
        *v = 0.0;
    }
    let without = Tensor::from_vec(pred, (1, n, p), &dev).unwrap();
    let s = |t: &Tensor| t.to_scalar::<f64>().unwrap();
    let m1 = s(&loss_rec_masked(&with_error, &target, &pairs).unwrap());
    let f1 = s(&loss_rec_region(&with_error, &target, &pairs).unwrap());
    let m0 = s(&loss_rec_masked(&without, &target, &pairs).unwrap());
    let f0 = s(&loss_rec_region(&without, &target, &pairs).unwrap());
    assert_eq!((m1, f1), (0.25, 0.25));
    assert_eq!((m0, f0), (0.125, 0.0));
}

#[test]
fn visible_encoding_ignores_masked_pixels() {
    let b = batch(2);
    let latent = b.model.encode_visible(&b.x, &b.masks).unwrap();
    let mut data = flat(&b.x);
    let dim = b.x.dim(2).unwrap();
    let n = b.x.dim(1).unwrap();
    for (s, pair) in b.masks.iter().enumerate() {
        for i in pair.masked_indices() {
            for v in &mut data[(s * n + i) * dim..(s * n + i + 1) * dim] {
                *v = 1.0 - *v;
            }
        }
    }
    let x2 = Tensor::from_vec(data, b.x.shape(), b.x.device()).unwrap();
    let latent2 = b.model.encode_visible(&x2, &b.masks).unwrap();
    let bits = |t: &Tensor| flat(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&latent), bits(&latent2));
}

#[test]
fn reconstruction_keeps_visible_pixels() {
    let b = batch(3);
    let face = synth_face(64, 3, 0, None).unwrap();
    let panel = reconstruction_panel(&b.model, &face.image, &b.masks[0], true).unwrap();
    let original = face.image.to_rgb8();
    assert_eq!(panel.original, original);
    let p = 8;
    let per_row = 64 / p;
    for i in b.masks[0].visible_indices() {
        let (px, py) = ((i % per_row) * p, (i / per_row) * p);
        for dy in 0..p {
            for dx in 0..p {
                let (x, y) = ((px + dx) as u32, (py + dy) as u32);
                assert_eq!(panel.reconstruction.get_pixel(x, y), original.get_pixel(x, y));
                assert_eq!(panel.masked.get_pixel(x, y), original.get_pixel(x, y));
            }
        }
    }
}

fn smoke_data(n: usize) -> TrainData {
    let faces = synth_faces(n, 64, 0, false).unwrap();
    TrainData::from_samples(&faces, &BackboneConfig::tiny(), &RegionTaxonomy::standard()).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = common::smoke_config(seed);
    cfg.backbone = cfg.backbone.with_precision(Precision::F64);
    cfg
}

#[test]
fn target_moves_only_by_the_ema_recurrence() {
    let mut trainer = Pretrainer::new(small_config(0), smoke_data(16)).unwrap();
    trainer.run(2).unwrap();
    let before: Vec<Vec<f64>> = trainer
        .model()
        .mirror_pairs()
        .unwrap()
        .iter()
        .map(|(t, _)| flat(t.as_tensor()))
        .collect();
    let record = trainer.train_step().unwrap();
    let tau = record.tau;
    for ((t, o), t0) in trainer.model().mirror_pairs().unwrap().iter().zip(&before) {
        let (t1, o1) = (flat(t.as_tensor()), flat(o.as_tensor()));
        for ((a, b), c) in t1.iter().zip(t0).zip(&o1) {
            assert_eq!(*a, b * tau + c * (1.0 - tau));
        }
    }
}

#[test]
fn identical_runs_give_identical_records() {
    let a = Pretrainer::new(small_config(4), smoke_data(16)).unwrap().run(4).unwrap();
    let b = Pretrainer::new(small_config(4), smoke_data(16)).unwrap().run(4).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.same_values(y)));
    let c = Pretrainer::new(small_config(5), smoke_data(16)).unwrap().run(1).unwrap();
    assert!(!a[0].same_values(&c[0]));
}

#[test]
fn micro_batches_accumulate_to_the_full_batch_step() {
    let full = small_config(6);
    let mut split = full.clone();
    split.micro_batch = Some(4);
    let a = Pretrainer::new(full, smoke_data(16)).unwrap().run(2).unwrap();
    let b = Pretrainer::new(split, smoke_data(16)).unwrap().run(2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.loss.total - y.loss.total).abs() < 1e-9, "{:?} vs {:?}", x.loss, y.loss);
    }
}

#[test]
fn exploding_run_reports_non_finite_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::smoke_config(0);
    cfg.base_lr = 1e36;
    cfg.warmup_epochs = 0;
    let mut trainer = Pretrainer::new(cfg, smoke_data(16)).unwrap();
    trainer.set_dump_dir(dir.path());
    match trainer.run(20) {
        Err(Error::NonFiniteLoss { step, dump }) => {
            assert!(step > 0);
            let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
            assert_eq!(report["step"], step);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn finetune_reads_only_the_online_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pre.safetensors");
    let mut trainer = Pretrainer::new(common::smoke_config(0), smoke_data(8)).unwrap();
    trainer.run(1).unwrap();
    trainer.save_checkpoint(&ckpt).unwrap();
    let cfg = FinetuneConfig::new(Some(ckpt.clone()), 1);
    let (clf, trace) = build_classifier(&cfg).unwrap();
    assert!(!trace.is_empty());
    assert!(trace.iter().all(|k| k.starts_with("online.encoder.")), "{trace:?}");
    let reader = CheckpointReader::open(&ckpt).unwrap();
    let stored = reader.tensor("online.encoder.cls_token", &Device::Cpu).unwrap();
    let loaded = clf.encoder.named_params("encoder");
    let cls = loaded.iter().find(|(n, _)| n == "encoder.cls_token").unwrap();
    assert_eq!(flat(&stored), flat(cls.1.as_tensor()));

    let mut mismatch = cfg.clone();
    mismatch.backbone = Some(BackboneConfig::desk());
    assert!(matches!(build_classifier(&mismatch), Err(Error::Config(_))));
}

#[test]
fn unlabeled_manifest_cannot_be_finetuned() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_fixtures(dir.path(), 2, 32, 0, false).unwrap();
    let m = DatasetManifest::load(&path).unwrap();
    assert!(LabeledData::from_manifest(&m, 8).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert!(CheckpointReader::open(&junk).is_err());

    let ckpt = dir.path().join("ok.safetensors");
    Pretrainer::new(common::smoke_config(0), smoke_data(8))
        .unwrap()
        .save_checkpoint(&ckpt)
        .unwrap();
    let bytes = std::fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.safetensors");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let truncated = CheckpointReader::open(&cut).and_then(|r| Pretrainer::resume(r.path(), smoke_data(8)));
    assert!(truncated.is_err());
}

#[test]
fn plan_counts_steps() {
    let cfg = common::smoke_config(0);
    let plan = Plan::new(&cfg, 32).unwrap();
    assert_eq!((plan.steps_per_epoch, plan.total_steps, plan.warmup_steps), (4, 200, 8));
}

use std::fs;
use std::path::Path;

use gcrpnet::checkpoint::Checkpoint;
use gcrpnet::config::RunConfig;
use gcrpnet::data::{synth_dataset, DatasetSpec};
use gcrpnet::metrics::{score_image, Accumulator};
use gcrpnet::nn::ParamStore;
use gcrpnet::optim::{AdamW, AdamWConfig};
use gcrpnet::train::{self, evaluate, infer, Trainer, LAST_CHECKPOINT, LOSS_LOG};
use gcrpnet::{Error, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

fn run_config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("preset = tiny\nbatch_size = 2\nlr = 1e-3\nseed = 5\n{extra}")).unwrap()
}

fn dataset(dir: &Path, n: usize) -> DatasetSpec {
    synth_dataset(n, 32, 17, dir).unwrap()
}

fn losses(out: &Path) -> Vec<f64> {
    fs::read_to_string(out.join(LOSS_LOG))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn zero_gradient_without_decay_leaves_params() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let before = store.clone();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
    for _ in 0..3 {
        opt.update(&mut store, &[Some(Tensor::zeros(&[3]))]).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn decay_alone_shrinks_magnitudes() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() }, &store);
    let mut prev: Vec<f64> = store.entries()[0].value.data().iter().map(|v| v.abs()).collect();
    for _ in 0..5 {
        opt.update(&mut store, &[None]).unwrap();
        let now: Vec<f64> = store.entries()[0].value.data().iter().map(|v| v.abs()).collect();
        assert!(now.iter().zip(&prev).all(|(a, b)| a < b));
        prev = now;
    }
}

#[test]
fn two_epoch_run_logs_finite_losses_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let data = dataset(&d.path().join("data"), 4);
    let cfg = run_config("epochs = 2\ncheckpoint_every = 3");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let sa = train::train(cfg.clone(), data.clone(), &a, None).unwrap();
    let sb = train::train(cfg, data, &b, None).unwrap();
    assert_eq!((sa.steps, sa.first_loss, sa.last_loss), (sb.steps, sb.first_loss, sb.last_loss));
    assert_eq!(sa.steps, 4);
    let la = losses(&a);
    assert_eq!(la.len(), 4);
    assert!(la.iter().all(|v| v.is_finite()));
    assert_eq!(la, losses(&b));
    assert_eq!(fs::read(a.join(LAST_CHECKPOINT)).unwrap(), fs::read(b.join(LAST_CHECKPOINT)).unwrap());
    assert!(a.join("step000003.gcrp").exists());
    let ck = Checkpoint::<f32>::load(a.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.optimizer.as_ref().unwrap().step, 4);
}

#[test]
fn epoch_order_is_a_seeded_permutation_of_sorted_stems() {
    let d = tempfile::tempdir().unwrap();
    let data = dataset(d.path(), 6);
    let stems: Vec<_> = data.samples.iter().map(|s| s.stem.clone()).collect();
    let mut sorted = stems.clone();
    sorted.sort();
    assert_eq!(stems, sorted);
    let t = Trainer::new(run_config(""), data).unwrap();
    let mut o = t.epoch_order(1);
    assert_eq!(o, t.epoch_order(1));
    assert_ne!(o, t.epoch_order(2));
    o.sort();
    assert_eq!(o, (0..6).collect::<Vec<_>>());
}

#[test]
fn resume_continues_the_loss_trajectory() {
    let d = tempfile::tempdir().unwrap();
    let data = dataset(&d.path().join("data"), 6);
    let cfg = run_config("epochs = 10\nmax_steps = 10\ncheckpoint_every = 5");
    let full = d.path().join("full");
    train::train(cfg.clone(), data.clone(), &full, None).unwrap();
    let straight = losses(&full);
    assert_eq!(straight.len(), 10);

    let part = d.path().join("part");
    let first = RunConfig { train: gcrpnet::config::TrainConfig { max_steps: Some(5), ..cfg.train.clone() }, ..cfg.clone() };
    train::train(first, data.clone(), &part, None).unwrap();
    let ckpt = part.join("step000005.gcrp");
    train::train(cfg, data, &part, Some(&ckpt)).unwrap();
    let resumed = losses(&part);
    assert_eq!(resumed.len(), 10);
    for (a, b) in straight.iter().zip(&resumed) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert_eq!(fs::read(full.join(LAST_CHECKPOINT)).unwrap(), fs::read(part.join(LAST_CHECKPOINT)).unwrap());
}

#[test]
fn nan_parameters_abort_and_keep_the_last_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let data = dataset(&d.path().join("data"), 2);
    let cfg = run_config("");
    let t = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut ck = t.checkpoint();
    ck.params[0].value.data_mut()[0] = f32::NAN;
    let bad = d.path().join("bad.gcrp");
    ck.save(&bad).unwrap();
    let out = d.path().join("out");
    let err = train::train(cfg, data, &out, Some(&bad)).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!out.join(LAST_CHECKPOINT).exists());
    assert_eq!(Checkpoint::<f32>::load(&bad).unwrap().to_bytes(), ck.to_bytes());
}

#[test]
fn infer_writes_maps_at_image_size_and_gt_scores_perfectly() {
    let d = tempfile::tempdir().unwrap();
    let images = d.path().join("images");
    fs::create_dir_all(&images).unwrap();
    RgbImage::from_fn(40, 24, |x, y| Rgb([(x * 6) as u8, (y * 9) as u8, 77])).save(images.join("wide.png")).unwrap();
    RgbImage::from_pixel(32, 32, Rgb([10, 200, 30])).save(images.join("square.jpg")).unwrap();
    let cfg = run_config("");
    let t = Trainer::new(cfg.clone(), dataset(&d.path().join("data"), 2)).unwrap();
    let out = d.path().join("pred");
    assert_eq!(infer(&cfg, &t.checkpoint(), &images, &out).unwrap(), 2);
    assert_eq!(image::open(out.join("wide.png")).unwrap().to_luma8().dimensions(), (40, 24));
    assert_eq!(image::open(out.join("square.png")).unwrap().to_luma8().dimensions(), (32, 32));

    let gt = d.path().join("data/GT");
    let r = evaluate(&gt, &gt).unwrap();
    assert_eq!(r.aggregate.mae, 0.0);
    assert_eq!(r.aggregate.f_max, 1.0);
    let report = d.path().join("rep/report.txt");
    r.write(&report).unwrap();
    assert!(fs::read_to_string(&report).unwrap().contains("mae=0.000000"));
    assert_eq!(fs::read_to_string(report.with_extension("csv")).unwrap().lines().count(), 2);
    assert_eq!(fs::read_to_string(d.path().join("rep/report_curves.csv")).unwrap().lines().count(), 257);
}

#[test]
fn report_matches_per_image_oracles() {
    let d = tempfile::tempdir().unwrap();
    let (pred, gt) = (d.path().join("pred"), d.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    let mut expect = Accumulator::new();
    let mut maes = Vec::new();
    for (i, (w, h)) in [(8u32, 8u32), (10, 6), (5, 9)].into_iter().enumerate() {
        let g = GrayImage::from_fn(w, h, |x, y| Luma([if (x + 2 * y + i as u32) % 3 == 0 { 255 } else { 0 }]));
        let p = GrayImage::from_fn(w, h, |x, y| Luma([((x * 37 + y * 11 + i as u32 * 50) % 256) as u8]));
        g.save(gt.join(format!("{i}.png"))).unwrap();
        p.save(pred.join(format!("{i}.png"))).unwrap();
        let pv: Vec<f64> = p.pixels().map(|v| v.0[0] as f64 / 255.0).collect();
        let gv: Vec<bool> = g.pixels().map(|v| v.0[0] == 255).collect();
        maes.push(score_image(&pv, &gv, h as usize, w as usize).unwrap().mae);
        expect.add(&pv, &gv, h as usize, w as usize).unwrap();
    }
    let r = evaluate(&pred, &gt).unwrap();
    assert_eq!(r.aggregate, expect.finish().unwrap());
    assert_eq!(r.per_image.iter().map(|(_, m)| *m).collect::<Vec<_>>(), maes);
    let mean = maes.iter().sum::<f64>() / 3.0;
    assert!((r.aggregate.mae - mean).abs() < 1e-15);

    fs::remove_file(gt.join("1.png")).unwrap();
    assert!(matches!(evaluate(&pred, &gt), Err(Error::Ingestion(items)) if items.len() == 1));
}

mod common;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use humanrf::config::Config;
use humanrf::diffcore::{ParamStore, Tape, Tensor};
use humanrf::losses::{LossWeights, RandomFilterDistance};
use humanrf::model::{Checkpoint, Model};
use humanrf::synthcap::{generate_dataset, sample_subject, Dataset, Split, SubjectFrames};
use humanrf::trainer::{
    frame_states, pair_loss, sample_pair, sample_rays, step_rng, train, AdamState, Schedule, LOG_HEADER,
};
use humanrf::Error;

use common::{probe, scene, tiny_config};

fn small_config() -> Config {
    let mut cfg = tiny_config();
    cfg.train_subjects = 2;
    cfg.test_subjects = 1;
    cfg.poses = 2;
    cfg.views = 2;
    cfg.epochs = 2;
    cfg
}

fn dataset(cfg: &Config, dir: &Path) -> Dataset {
    generate_dataset(cfg, dir).unwrap();
    Dataset::load(dir).unwrap()
}

#[test]
fn schedule_halves_every_epoch() {
    let s = Schedule::from_config(&Config::default());
    assert_eq!(s.epochs, 5);
    for e in 0..5 {
        assert_eq!(s.lr(e), 2e-3 * 0.5f64.powi(e as i32));
    }
}

fn single_param(v: Vec<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(vec![v.len()], v).unwrap());
    s
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let mut store = single_param(vec![1.0, -2.0, 0.5]);
    let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
    let g = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
    adam.step(&mut store, &[g.clone()], 1e-2).unwrap();
    let id = store.ids().next().unwrap();
    for ((&p, &p0), &gi) in store.get(id).data().iter().zip(&[1.0, -2.0, 0.5]).zip(g.data()) {
        let want = -1e-2 * gi / (gi.abs() + 1e-8);
        assert!(((p - p0) - want).abs() < 1e-12, "{} vs {want}", p - p0);
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut store = single_param(vec![1.0, -2.0]);
    let before = store.clone();
    let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
    for _ in 0..3 {
        adam.step(&mut store, &[Tensor::zeros(&[2])], 1e-2).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut store = single_param(vec![0.0; 16]);
        let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let g = Tensor::new(vec![16], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            adam.step(&mut store, &[g], 1e-3).unwrap();
        }
        store
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut store = single_param(vec![0.0; 4]);
    let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
    assert!(adam.step(&mut store, &[Tensor::zeros(&[3])], 1e-3).is_err());
    assert!(adam.step(&mut store, &[], 1e-3).is_err());
}

fn in_memory(subjects: usize, frames: usize) -> Dataset {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Dataset {
        resolution: cfg.resolution,
        poses: 1,
        views: frames,
        subjects: (0..subjects)
            .map(|s| SubjectFrames {
                subject: sample_subject(s, Split::Train, &mut rng),
                frames: (0..frames).map(|v| scene(&cfg, 3, v, frames.max(1)).frame).collect(),
            })
            .collect(),
    }
}

#[test]
fn single_frame_pair_is_that_frame_twice() {
    let data = in_memory(1, 1);
    let pair = sample_pair(&data, &[0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(std::ptr::eq(pair.input, pair.target));
    assert!(std::ptr::eq(pair.input, &data.subjects[0].frames[0]));
}

#[test]
fn subject_marginal_is_uniform() {
    let data = in_memory(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        let p = sample_pair(&data, &[0, 1, 2, 3], &mut rng).unwrap();
        counts[p.subject.id] += 1;
    }
    let e = n as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99th percentile of χ² with 3 degrees of freedom.
    assert!(chi2 < 11.345, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn pair_sampling_is_reproducible() {
    let data = in_memory(3, 2);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50)
            .map(|_| {
                let p = sample_pair(&data, &[0, 1, 2], &mut rng).unwrap();
                (p.subject.id, p.input as *const _, p.target as *const _)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert!(sample_pair(&data, &[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn ray_batch_is_a_patch_then_scattered_pixels() {
    let cfg = tiny_config();
    let sc = scene(&cfg, 2, 0, 8);
    let model = Model::new(&cfg).unwrap();
    let rect = model.bounds(&sc.state).project_rect(&sc.cam);
    let b = sample_rays(&sc.frame, &rect, 160, 11, 0.25, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(b.pixels.len(), 160);
    let (x0, y0) = b.pixels[0];
    for (i, &(c, r)) in b.pixels[..121].iter().enumerate() {
        assert_eq!((c, r), (x0 + i % 11, y0 + i / 11));
    }
    let scattered = &b.pixels[121..];
    let inside = scattered.iter().filter(|&&(c, r)| sc.frame.mask.get(c, r)).count();
    assert!(inside >= (0.25 * 39.0f64).round() as usize);
    assert!(scattered.iter().all(|&(c, r)| sc.frame.mask.get(c, r) || rect.contains(c, r)));
}

#[test]
fn batch_gradient_is_the_sum_of_per_ray_gradients() {
    let cfg = tiny_config();
    let model = Model::new(&cfg).unwrap();
    let input = scene(&cfg, 4, 0, 8);
    let target = scene(&cfg, 4, 1, 8);
    let rect = model.bounds(&target.state).project_rect(&target.cam);
    let (cx, cy) = ((rect.x0 + rect.x1) / 2, (rect.y0 + rect.y1) / 2);
    let rays: Vec<_> = [(cx, cy), (cx + 1, cy), (cx, cy + 2), (cx - 1, cy - 3)]
        .iter()
        .map(|&(c, r)| target.cam.pixel_ray(c, r).unwrap())
        .collect();
    let grad_of = |rays: &[humanrf::geometry::Ray], seed: u64| {
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape, true);
        let bank = model.build_bank(&mut tape, &bp, &input.frame, &input.state).unwrap();
        let c = model
            .render_rays::<ChaCha8Rng>(&mut tape, &bp, &bank, &target.state, rays, None)
            .unwrap();
        let sq = tape.square(c.color);
        let l1 = tape.sum(sq);
        let l2 = probe(&mut tape, c.opacity, seed).unwrap();
        let l = tape.add(l1, l2).unwrap();
        let g = tape.backward(l).unwrap();
        model.store.collect_grads(&bp, &g)
    };
    let whole = {
        // The opacity probe must weigh each ray the same as in the split runs.
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape, true);
        let bank = model.build_bank(&mut tape, &bp, &input.frame, &input.state).unwrap();
        let c = model
            .render_rays::<ChaCha8Rng>(&mut tape, &bp, &bank, &target.state, &rays, None)
            .unwrap();
        let sq = tape.square(c.color);
        let l1 = tape.sum(sq);
        let weights: Vec<f64> = (0..4).map(|i| common::random_tensor(&[1], -1.0, 1.0, 50 + i).data()[0]).collect();
        let w = tape.constant(Tensor::new(vec![4], weights).unwrap());
        let p = tape.mul(c.opacity, w).unwrap();
        let l2 = tape.sum(p);
        let l = tape.add(l1, l2).unwrap();
        let g = tape.backward(l).unwrap();
        model.store.collect_grads(&bp, &g)
    };
    let mut summed: Vec<Tensor> = whole.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (i, ray) in rays.iter().enumerate() {
        let g = grad_of(std::slice::from_ref(ray), 50 + i as u64);
        for (acc, gi) in summed.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    let mut worst = 0.0f64;
    for (a, b) in whole.iter().zip(&summed) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs() / x.abs().max(1e-8));
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn checkpoint_round_trip_gives_identical_renders() {
    let cfg = tiny_config();
    let model = Model::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(&model, 1, 7, None).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!((ck.epoch, ck.step), (1, 7));
    assert_eq!(ck.config_hash, cfg.hash());
    let loaded = ck.model().unwrap();
    assert_eq!(loaded.store, model.store);
    let input = scene(&cfg, 6, 0, 8);
    let target = scene(&cfg, 6, 3, 8);
    let a = model.render_view(&input.frame, &input.state, &target.cam, &target.state).unwrap();
    let b = loaded.render_view(&input.frame, &input.state, &target.cam, &target.state).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.opacity, b.opacity);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let cfg = tiny_config();
    let model = Model::new(&cfg).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::new(&model, 0, 0, None).write_to(&mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
    let truncated = &bytes[..bytes.len() / 2];
    assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
}

#[test]
fn first_logged_loss_matches_an_independent_forward_pass() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&cfg, &dir.path().join("data"));
    let mut c1 = cfg.clone();
    c1.max_steps = 1;
    let s = train(&c1, &data, &dir.path().join("run"), None).unwrap();
    let logged = s.logs[0].report;

    let model = Model::new(&c1).unwrap();
    let states = frame_states(&model, &data).unwrap();
    let mut rng = step_rng(c1.seed, 0);
    let subjects = data.split(Split::Train);
    let pair = sample_pair(&data, &subjects, &mut rng).unwrap();
    let si = pair.subject.id;
    let fi = data.subjects[si].frames.iter().position(|f| std::ptr::eq(f, pair.input)).unwrap();
    let ti = data.subjects[si].frames.iter().position(|f| std::ptr::eq(f, pair.target)).unwrap();
    let rect = model.bounds(&states[si][ti]).project_rect(&pair.target.cam);
    let batch = sample_rays(pair.target, &rect, c1.rays_per_batch, c1.patch_size, c1.interior_fraction, &mut rng);
    let (tape, terms, _) = pair_loss(
        &model,
        &RandomFilterDistance::from_config(&c1),
        &LossWeights::from_config(&c1),
        (pair.input, &states[si][fi], pair.target, &states[si][ti]),
        &batch,
        false,
        Some(&mut rng),
    )
    .unwrap();
    assert_eq!(terms.report(&tape), logged);
}

fn read_log(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let hash = lines.next().unwrap().to_string();
    assert_eq!(lines.next().unwrap(), LOG_HEADER);
    let rows = lines
        .map(|l| l.split('\t').map(|x| x.parse().unwrap()).collect())
        .collect();
    (hash, rows)
}

#[test]
fn log_embeds_the_hash_and_lr_halves_per_epoch() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&cfg, &dir.path().join("data"));
    let out = dir.path().join("run");
    let s = train(&cfg, &data, &out, None).unwrap();
    assert_eq!(s.steps_per_epoch, 2 * 2 * 2);
    assert_eq!(s.logs.len(), 16);
    let (hash, rows) = read_log(&out.join("train_log.tsv"));
    assert_eq!(hash, format!("# config_hash {}", cfg.hash()));
    for r in &rows {
        let epoch = r[0] as i32 / 8;
        assert_eq!(r[6], 2e-3 * 0.5f64.powi(epoch));
        let total = r[1] + 0.1 * r[2] + 0.01 * r[3] + 0.01 * r[4];
        assert!((r[5] - total).abs() <= 1e-8 * r[5].abs().max(1.0));
    }
    for f in ["init.ckpt", "epoch_1.ckpt", "epoch_2.ckpt", "last.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let last = Checkpoint::load(&out.join("last.ckpt")).unwrap();
    assert_eq!((last.epoch, last.step), (2, 16));
    assert_eq!(last.params, s.model.store);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_run() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&cfg, &dir.path().join("data"));
    let mut full = cfg.clone();
    full.max_steps = 3;
    let whole = train(&full, &data, &dir.path().join("whole"), None).unwrap();

    let mut first = cfg.clone();
    first.max_steps = 2;
    let split = dir.path().join("split");
    train(&first, &data, &split, None).unwrap();
    let ck = Checkpoint::load(&split.join("last.ckpt")).unwrap();
    assert_eq!(ck.step, 2);
    let rest = train(&full, &data, &split, Some(&ck)).unwrap();
    assert_eq!(rest.logs.len(), 1);
    assert_eq!(rest.logs[0], whole.logs[2]);
    assert_eq!(rest.model.store, whole.model.store);
    let (_, rows) = read_log(&split.join("train_log.tsv"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn non_finite_loss_names_the_term() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&cfg, &dir.path().join("data"));
    let mut model = Model::new(&cfg).unwrap();
    let id = model.store.find("dec.0.w").unwrap();
    model.store.get_mut(id).data_mut().fill(f64::NAN);
    let ck = Checkpoint::new(&model, 0, 0, None);
    let err = train(&cfg, &data, &dir.path().join("run"), Some(&ck)).unwrap_err();
    match &err {
        Error::NonFinite { term, step } => {
            assert_eq!(term, "L_color");
            assert_eq!(*step, 0);
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn empty_training_split_is_an_error() {
    let mut cfg = small_config();
    cfg.train_subjects = 0;
    cfg.test_subjects = 1;
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&cfg, &dir.path().join("data"));
    assert!(matches!(train(&cfg, &data, &dir.path().join("run"), None), Err(Error::Data(_))));
}

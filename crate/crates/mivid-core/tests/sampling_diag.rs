//! Scratch sampling diagnostics (removed before finalization).

use mivid_core::config::{LrSchedule, TrainingConfig};
use mivid_core::diffusion::{build_schedule, forward_noise, reverse_step, ScheduleKind, SigmaMode};
use mivid_core::engine::train;
use mivid_core::losses::diffusion_loss;
use mivid_core::masking::{Fill, MaskVector, Ramp};
use mivid_core::videodata::{load_segment, make_toy_dataset, scan_dataset, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    make_toy_dataset(&data, 14, 7, 16, 16, 7).unwrap();
    let mut cfg = TrainingConfig::default();
    cfg.data_root = data.clone();
    cfg.out_dir = dir.path().join("run");
    cfg.segment_length = 7;
    cfg.resize = (16, 16);
    cfg.channels = 1;
    cfg.t_d = 50;
    cfg.schedule_kind = ScheduleKind::Cosine;
    cfg.base_channels = 8;
    cfg.levels = 2;
    cfg.heads = 2;
    cfg.time_embed_dim = 16;
    cfg.lambda_perc = 0.0;
    cfg.lambda_lpips = 0.0;
    cfg.epochs = 200;
    cfg.batch_size = 8;
    cfg.lr = 2e-3;
    cfg.lr_schedule = LrSchedule::CosineAnneal;
    cfg.checkpoint_every = 0;
    cfg.grad_clip = 1.0;
    cfg.ramp = Ramp::Cosine;
    cfg.fill = Fill::GaussianNoise;

    let outcome = train(&cfg, None).unwrap();
    let params = &outcome.checkpoint.params;
    let sched = build_schedule(cfg.schedule_kind, cfg.t_d, cfg.beta_start, cfg.beta_end).unwrap();
    let spec = cfg.dataset_spec(Split::Train);
    let records = scan_dataset(&spec).unwrap();
    let seg = load_segment(&records[0], &spec).unwrap();
    let mask = MaskVector::from_masked_indices(7, &[3]).unwrap();

    // Per-timestep prediction quality on fresh forward noise.
    println!("t | alpha_bar | eps MSE");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in [1usize, 5, 10, 20, 30, 40, 45, 50] {
        let mut acc = 0.0;
        let reps = 5;
        for _ in 0..reps {
            let (z, eps) = forward_noise(&seg.frames, &mask, t, &sched, &mut rng).unwrap();
            let eps_hat = params.predict_noise(&z, &seg.frames, &mask, t, &sched).unwrap();
            acc += diffusion_loss(&eps, &eps_hat, &mask);
        }
        println!("{t:3} | {:.5} | {:.4}", sched.alpha_bar(t), acc / reps as f64);
    }

    // Reverse trajectory statistics on the masked frame.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut z = seg.frames.clone();
    for v in z.index_axis_mut(ndarray::Axis(0), 3).iter_mut() {
        *v = mivid_core::tensor::sample_standard_normal(&mut rng);
    }
    println!("t | masked mean | masked std | eps_hat mean | eps_hat std");
    for t in (1..=cfg.t_d).rev() {
        let eps_hat = params.predict_noise(&z, &seg.frames, &mask, t, &sched).unwrap();
        let frame: Vec<f32> = z.index_axis(ndarray::Axis(0), 3).iter().copied().collect();
        let eh: Vec<f32> = eps_hat.index_axis(ndarray::Axis(0), 3).iter().copied().collect();
        let stats = |v: &[f32]| {
            let n = v.len() as f32;
            let m = v.iter().sum::<f32>() / n;
            let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / n).sqrt();
            (m, s)
        };
        let (zm, zs) = stats(&frame);
        let (em, es) = stats(&eh);
        if t % 5 == 0 || t <= 3 {
            println!("{t:3} | {zm:+.3} | {zs:.3} | {em:+.3} | {es:.3}");
        }
        z = reverse_step(&z, &eps_hat, t, &mask, &sched, &mut rng, SigmaMode::Zero).unwrap();
    }
    let frame: Vec<f32> = z.index_axis(ndarray::Axis(0), 3).iter().copied().collect();
    let gt: Vec<f32> = seg.frames.index_axis(ndarray::Axis(0), 3).iter().copied().collect();
    let mse: f32 =
        frame.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / frame.len() as f32;
    println!("final masked-frame MSE {mse:.4}");
    println!("final frame row 8: {:?}", &frame[8 * 16..9 * 16]);
    println!("gt    frame row 8: {:?}", &gt[8 * 16..9 * 16]);
}

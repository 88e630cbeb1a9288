//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs every criterion by default. Set `PYROCAST_ACCEPTANCE=1,2,8` to run a
//! subset. Criterion 6 trains two networks and takes on the order of an
//! hour and a half on a single core; criterion 7 reuses its results.
//! `PYROCAST_EXPERIMENT_SMOKE=1` shrinks that experiment to a pipeline check
//! which cannot pass criterion 6.
//!
//! Failing criteria are reported but only change the exit status when
//! `PYROCAST_ACCEPTANCE_STRICT` is set, so the remaining test targets of a
//! workspace run still execute.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use pyrocast::ca::{CaModel, CaParams, FireGrid, CellState, TerrainLayers, WindField, BEARINGS, NEIGHBOURS};
use pyrocast::checkpoint::Checkpoint;
use pyrocast::dataset::{
    decode_dataset, encode_dataset, make_ensemble_dataset, make_training_dataset, Dataset, DatasetConfig,
    DatasetKind, FireFrame, Pair,
};
use pyrocast::diffusion::{
    ddim_from_latents, ddim_sigma, forward_sample, make_linear_schedule, Denoiser, DiffusionConfig,
};
use pyrocast::evaluate::{
    evaluate_models, frechet_feature_distance, hit_rate, kl_divergence, mse, psnr, ssim, threshold_sweep,
    EvalConfig, EvalReport, HandcraftedEmbedding,
};
use pyrocast::nn::{AdamConfig, ParamStore};
use pyrocast::rng;
use pyrocast::terrain::SyntheticTerrain;
use pyrocast::train::{diffusion_loss, DiffusionBatch, Plateau, TrainConfig, Trainer};
use pyrocast::unet::{ModelKind, NetConfig, UNet};

type Outcome = pyrocast::Result<(bool, String)>;

fn say(line: &str) {
    let mut e = std::io::stderr();
    let _ = writeln!(e, "{line}");
    let _ = e.flush();
}

fn criterion_1() -> Outcome {
    let (net, _) = UNet::build::<f32>(&NetConfig::default(), 0)?;
    let rows = net.rows();
    let find = |layer: &str| rows.iter().find(|r| r.layer.starts_with(layer)).map(|r| r.params);
    let input = find("Conv2d (input conv)");
    let time = find("Time Embedding");
    let head = rows.last().map(|r| r.params);
    let total = net.total_params();
    let rows_ok = input == Some(2_432) && time == Some(328_704) && head == Some(1_153);
    let ok = rows_ok && total == 84_049_793;
    Ok((
        ok,
        format!(
            "input conv {input:?} (2432), time embedding {time:?} (328704), output head {head:?} (1153), total {total} (84049793)"
        ),
    ))
}

fn wind_term(w: &WindField, bearing: f64) -> f64 {
    let theta = (bearing - w.direction_deg).to_radians();
    (w.c1 * w.speed).exp() * (w.speed * w.c2 * (theta.cos() - 1.0)).exp()
}

fn criterion_2() -> Outcome {
    let (w, h) = (5usize, 5usize);
    let n = w * h;
    let mut t = TerrainLayers::uniform(w, h);
    for i in 0..n {
        t.p_veg[i] = -0.4 + 0.05 * i as f64;
        t.p_den[i] = 0.3 * ((i * 7 % 5) as f64 / 4.0) - 0.2;
        t.slope_deg[i] = (i % 4) as f64 * 5.0 - 7.0;
    }
    t.unburnable[3] = true;
    let params = CaParams {
        p_h: 0.45,
        wind: WindField {
            speed: 4.0,
            direction_deg: 60.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = CaModel::new(&t, params)?;
    let mut state = FireGrid::from_terrain(&t);
    for c in [12, 8] {
        state.cells[c] = CellState::Burning;
    }
    state.cells[18] = CellState::Burnt;
    let m = 10_000;
    let est = model.ensemble_next(&state, m, 1, 99)?;
    let mut worst = 0.0f64;
    let mut ok = true;
    for cell in 0..n {
        let p = match state.cells[cell] {
            CellState::Burning | CellState::Burnt => 1.0,
            _ if t.unburnable[cell] => 0.0,
            _ => {
                let (r, c) = ((cell / w) as isize, (cell % w) as isize);
                let mut none = 1.0;
                for (d, &(dr, dc)) in NEIGHBOURS.iter().enumerate() {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    if state.cells[nr as usize * w + nc as usize] != CellState::Burning {
                        continue;
                    }
                    // fire travels from the neighbour toward this cell
                    let bearing = BEARINGS[(d + 4) % 8];
                    let pb = (params.p_h
                        * (1.0 + t.p_veg[cell])
                        * (1.0 + t.p_den[cell])
                        * wind_term(&params.wind, bearing)
                        * (params.a_slope * t.slope_deg[cell]).exp())
                    .clamp(0.0, 1.0);
                    none *= 1.0 - pb;
                }
                1.0 - none
            }
        };
        let sd = (p * (1.0 - p) / m as f64).sqrt();
        let diff = (est[cell] as f64 - p).abs();
        if sd == 0.0 {
            ok &= diff == 0.0;
        } else {
            worst = worst.max(diff / sd);
            ok &= diff <= 3.0 * sd;
        }
    }
    Ok((ok, format!("largest deviation {worst:.2} binomial sd over 25 cells")))
}

fn criterion_3() -> Outcome {
    let s = make_linear_schedule(600, 1e-4, 0.02)?;
    let x0 = [-1.0f32, 1.0, 1.0, -1.0];
    let n = 10_000;
    let mut r = rng::stream(3);
    let mut ok = true;
    let mut worst = 0.0f64;
    for t in [1usize, 300, 600] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let eps: Vec<f32> = (0..4).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
            let x = forward_sample(&x0, t, &s, &eps);
            for k in 0..4 {
                sum[k] += x[k] as f64;
                sq[k] += (x[k] as f64).powi(2);
            }
        }
        let var = 1.0 - ab;
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let v = (sq[k] - n as f64 * mean * mean) / (n as f64 - 1.0);
            let zm = (mean - ab.sqrt() * x0[k] as f64).abs() / (var / n as f64).sqrt();
            let zv = (v - var).abs() / (var * (2.0 / (n as f64 - 1.0)).sqrt());
            worst = worst.max(zm).max(zv);
            ok &= zm <= 3.0 && zv <= 3.0;
        }
    }
    let ab_t = s.alpha_bar(600);
    ok &= ab_t < 1e-3;
    Ok((ok, format!("largest deviation {worst:.2} sd; alpha_bar(600) = {ab_t:.3e}")))
}

fn small_denoiser() -> pyrocast::Result<Denoiser> {
    let cfg = NetConfig {
        base_channels: 8,
        stage_channels: vec![8, 8],
        blocks_per_stage: 1,
        attention_resolutions: vec![4],
        norm_groups: 4,
        time_embed_dim: 16,
        heads: 2,
        image_size: 8,
        dropout: 0.0,
        ..NetConfig::reduced()
    };
    let (net, mut store) = UNet::build::<f32>(&cfg, 5)?;
    randomize_output(&mut store, 6);
    Ok(Denoiser { net, store })
}

/// Replaces the zero-initialised output convolution with small random
/// weights so every parameter influences the output.
fn randomize_output<T: pyrocast::nn::Float>(store: &mut ParamStore<T>, seed: u64) {
    let mut r = rng::stream(seed);
    for p in store.params.iter_mut().filter(|p| p.name.starts_with("output_conv")) {
        p.value.iter_mut().for_each(|v| *v = T::lit(r.gen_range(-0.05..0.05)));
    }
}

fn criterion_4() -> Outcome {
    let s = make_linear_schedule(10, 1e-4, 0.02)?;
    let mut worst = 0.0f64;
    for t in 1..=10 {
        let sigma = ddim_sigma(&s, t, t - 1, 1.0);
        let post = (s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))).sqrt();
        worst = worst.max((sigma - post).abs());
    }
    let model = small_denoiser()?;
    let cfg = DiffusionConfig {
        timesteps: 10,
        sampling_steps: 10,
        eta: 0.0,
        ..Default::default()
    };
    let cond = FireFrame::new(8, 8, (0..64).map(|i| (i % 3 == 0) as u8 as f32).collect())?;
    let mut r = rng::stream(11);
    let latent: Vec<f32> = (0..64).map(|_| r.sample(StandardNormal)).collect();
    let a = ddim_from_latents(&model, &cond, &cfg, &s, vec![latent.clone()], &[1])?;
    let b = ddim_from_latents(&model, &cond, &cfg, &s, vec![latent], &[2])?;
    let rerun = a[0]
        .values
        .iter()
        .zip(&b[0].values)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let ok = worst <= 1e-12 && rerun <= 1e-12;
    Ok((ok, format!("max |sigma - posterior sd| = {worst:.2e}; eta=0 rerun difference {rerun:.2e}")))
}

fn criterion_5() -> Outcome {
    let cfg = NetConfig {
        dropout: 0.0,
        ..NetConfig::reduced()
    };
    let (net, mut store) = UNet::build::<f64>(&cfg, 21)?;
    randomize_output(&mut store, 22);
    let sched = DiffusionConfig::default().schedule()?;
    let size = cfg.image_size;
    let mut r = rng::stream(23);
    let frame = |r: &mut rand_chacha::ChaCha8Rng| {
        FireFrame::new(size, size, (0..size * size).map(|_| (r.gen::<f64>() < 0.3) as u8 as f32).collect())
    };
    let pair = Pair {
        input: frame(&mut r)?,
        target: frame(&mut r)?,
    };
    let batch = DiffusionBatch::draw(&[&pair], 600, &mut r);
    let (_, grads) = diffusion_loss(&net, &store, &batch, &sched, None)?;
    let loss_at = |store: &ParamStore<f64>| diffusion_loss(&net, store, &batch, &sched, None).map(|v| v.0);
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut attempts = 0;
    while checked < 12 && attempts < 200 {
        attempts += 1;
        let k = r.gen_range(0..store.params.len());
        let j = r.gen_range(0..store.params[k].value.len());
        let analytic = grads.values[k][j];
        if analytic.abs() < 1e-9 {
            continue;
        }
        let h = 1e-5 * store.params[k].value[j].abs().max(1.0);
        let orig = store.params[k].value[j];
        store.params[k].value[j] = orig + h;
        let up = loss_at(&store)?;
        store.params[k].value[j] = orig - h;
        let down = loss_at(&store)?;
        store.params[k].value[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    let ok = checked >= 10 && worst <= 1e-4;
    Ok((ok, format!("{checked} parameters, largest relative error {worst:.2e}")))
}

struct Experiment {
    report: EvalReport,
    diffusion_steps: u64,
    baseline_steps: u64,
    baseline_plateaued: bool,
    minutes: f64,
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("create artifact directory");
    dir
}

fn run_experiment() -> pyrocast::Result<Experiment> {
    let start = Instant::now();
    let dir = artifact_dir();
    let master = 2024;
    let smoke = std::env::var_os("PYROCAST_EXPERIMENT_SMOKE").is_some();
    let terrain = SyntheticTerrain {
        width: 32,
        height: 32,
        seed: 7,
        ..Default::default()
    }
    .generate()?;
    let params = CaParams::default();
    let train_cfg = DatasetConfig {
        n_samples: 100,
        n_steps: 25,
        stride: 5,
        ensemble_size: 1,
    };
    let (train, train_manifest) = make_training_dataset(&terrain, &params, &train_cfg, master)?;
    let test_cfg = DatasetConfig {
        n_samples: if smoke { 2 } else { 20 },
        ensemble_size: 30,
        ..train_cfg
    };
    let (test, _) = make_ensemble_dataset(&terrain, &params, &test_cfg, master, Some(&train_manifest))?;
    say(&format!("  [6] {} training pairs, {} test pairs", train.len(), test.len()));

    let diffusion = DiffusionConfig {
        sampling_steps: 20,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        steps: if smoke { 200 } else { 20_000 },
        batch_size: 2,
        optimizer: AdamConfig {
            lr: 2e-4,
            ..Default::default()
        },
        ..Default::default()
    };
    let net = NetConfig::reduced();
    let mut dm = Trainer::new(ModelKind::Diffusion, &net, diffusion, &tcfg, rng::derive_seed(master, 10))?;
    let mut window = 0.0;
    while dm.step < tcfg.steps {
        window += dm.train_step(&train)?;
        if dm.step % 1000 == 0 {
            say(&format!(
                "  [6] diffusion step {} mean loss {:.5} ({:.1} min)",
                dm.step,
                window / 1000.0,
                start.elapsed().as_secs_f64() / 60.0
            ));
            window = 0.0;
        }
    }
    let dck = Checkpoint::from_trainer(&dm, false);
    dck.save(&dir.join("diffusion.ckpt"))?;

    let mut bm = Trainer::new(ModelKind::Deterministic, &net.baseline(), diffusion, &tcfg, rng::derive_seed(master, 11))?;
    let plateau = if smoke {
        Plateau {
            window: 50,
            rel_tol: 0.01,
            min_steps: 100,
            max_steps: 200,
        }
    } else {
        Plateau {
            window: 500,
            rel_tol: 0.01,
            min_steps: 3_000,
            max_steps: 20_000,
        }
    };
    let outcome = bm.train_until_plateau(&train, &plateau, |t, _| {
        if t.step % 1000 == 0 {
            say(&format!("  [6] baseline step {} ({:.1} min)", t.step, start.elapsed().as_secs_f64() / 60.0));
        }
        Ok(())
    })?;
    say(&format!(
        "  [6] baseline stopped at step {} (window mean loss {:.5}, plateau {})",
        outcome.steps, outcome.window_mean, outcome.plateaued
    ));
    let bck = Checkpoint::from_trainer(&bm, false);
    bck.save(&dir.join("baseline.ckpt"))?;

    let eval = EvalConfig {
        ensemble_size: if smoke { 4 } else { 20 },
        batch_size: 4,
        ..Default::default()
    };
    let (report, _, _) = evaluate_models(&dck, &bck, &test, &eval, rng::derive_seed(master, 12), |i| {
        if (i + 1) % 10 == 0 {
            say(&format!("  [6] evaluated {} pairs ({:.1} min)", i + 1, start.elapsed().as_secs_f64() / 60.0));
        }
    })?;
    let _ = std::fs::write(dir.join("report.txt"), report.to_text(&[]));
    let _ = std::fs::write(dir.join("report.tsv"), report.to_tsv());
    Ok(Experiment {
        report,
        diffusion_steps: dm.step,
        baseline_steps: outcome.steps,
        baseline_plateaued: outcome.plateaued,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    })
}

fn criterion_6(e: &Experiment) -> Outcome {
    let (d, b) = (&e.report.diffusion, &e.report.baseline);
    let ok = e.diffusion_steps >= 20_000 && d.mse < b.mse && d.ssim > b.ssim;
    Ok((
        ok,
        format!(
            "MSE diffusion {:.5} vs baseline {:.5}; SSIM diffusion {:.4} vs baseline {:.4}; {} diffusion steps, {} baseline steps (plateau {}), {:.0} min",
            d.mse, b.mse, d.ssim, b.ssim, e.diffusion_steps, e.baseline_steps, e.baseline_plateaued, e.minutes
        ),
    ))
}

fn criterion_7(e: &Experiment) -> Outcome {
    let (wins, losses, p) = e.report.ensemble_sign_test;
    let (mm, m1) = (e.report.diffusion.mse, e.report.diffusion_single_mse);
    let ok = mm <= m1 && p < 0.05;
    Ok((
        ok,
        format!(
            "mean MSE M={} {mm:.5} vs M=1 {m1:.5}; sign test {wins} wins, {losses} losses, p = {p:.2e}",
            e.report.ensemble_size
        ),
    ))
}

fn criterion_8() -> Outcome {
    let mut r = rng::stream(8);
    let frames: Vec<FireFrame> = (0..30)
        .map(|_| FireFrame::new(16, 16, (0..256).map(|_| r.gen::<f32>()).collect()).unwrap())
        .collect();
    let mut ok = true;
    let mut worst_psnr = 0.0f64;
    for f in &frames {
        ok &= mse(f, f)? == 0.0;
        ok &= (ssim(f, f)? - 1.0).abs() < 1e-12;
        ok &= hit_rate(f, f, 0.2)? == 1.0;
        ok &= kl_divergence(f, f)?.abs() < 1e-12;
    }
    for pair in frames.windows(2) {
        let m = mse(&pair[0], &pair[1])?;
        worst_psnr = worst_psnr.max((psnr(&pair[0], &pair[1])? - 10.0 * (1.0 / m).log10()).abs());
    }
    ok &= worst_psnr <= 1e-9;
    let fd = frechet_feature_distance(&frames, &frames, &HandcraftedEmbedding)?;
    ok &= fd <= 1e-8;
    let p = FireFrame::new(2, 2, vec![0.9, 0.1, 0.6, 0.4])?;
    let t = FireFrame::new(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let s = &threshold_sweep(&p, &t, &[0.5])?.results[0];
    let fixture = (s.tp, s.fp, s.fn_, s.tn) == (1, 1, 1, 1)
        && s.precision == 0.5
        && s.recall == 0.5
        && s.f1 == 0.5
        && s.mcc == 0.0;
    ok &= fixture;
    Ok((ok, format!("frechet(S,S) = {fd:.1e}, psnr consistency {worst_psnr:.1e}, 2x2 fixture {fixture}")))
}

fn random_dataset(r: &mut rand_chacha::ChaCha8Rng) -> Dataset {
    let (w, h) = (r.gen_range(1..12), r.gen_range(1..12));
    let kind = if r.gen() { DatasetKind::Train } else { DatasetKind::Ensemble };
    let frame = |r: &mut rand_chacha::ChaCha8Rng| FireFrame {
        width: w,
        height: h,
        values: (0..w * h).map(|_| r.gen::<f32>()).collect(),
    };
    let n = r.gen_range(0..6);
    Dataset {
        kind,
        width: w,
        height: h,
        pairs: (0..n)
            .map(|_| Pair {
                input: frame(r),
                target: frame(r),
            })
            .collect(),
    }
}

fn criterion_9() -> Outcome {
    let terrain = SyntheticTerrain {
        width: 24,
        height: 24,
        seed: 3,
        ..Default::default()
    }
    .generate()?;
    let params = CaParams::default();
    let cfg = DatasetConfig {
        n_samples: 30,
        ensemble_size: 5,
        ..Default::default()
    };
    let (train, tm) = make_training_dataset(&terrain, &params, &cfg, 9)?;
    let (_, em) = make_ensemble_dataset(&terrain, &params, &DatasetConfig { n_samples: 10, ..cfg }, 9, Some(&tm))?;
    let growth = train
        .pairs
        .iter()
        .all(|p| p.target.values.iter().zip(&p.input.values).all(|(t, i)| t >= i));
    let per_traj = train.len() == 5 * cfg.n_samples;
    let train_seeds: std::collections::HashSet<u64> = tm.samples.iter().map(|s| s.seed).collect();
    let disjoint = em.samples.iter().all(|s| !train_seeds.contains(&s.seed));
    let mut r = rng::stream(99);
    let mut round_trip = true;
    for _ in 0..100 {
        let ds = random_dataset(&mut r);
        round_trip &= decode_dataset(&encode_dataset(&ds))? == ds;
    }
    let ok = growth && per_traj && disjoint && round_trip;
    Ok((
        ok,
        format!("growth {growth}, 5 pairs per trajectory {per_traj}, disjoint seeds {disjoint}, 100 round trips {round_trip}"),
    ))
}

fn main() {
    let selected: Vec<u32> = match std::env::var("PYROCAST_ACCEPTANCE") {
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    };
    let names = [
        "architecture conformance",
        "CA oracle equivalence",
        "forward-process statistics",
        "DDIM/DDPM identity",
        "gradient correctness",
        "diffusion ensemble beats baseline",
        "ensemble-size trend",
        "metric identities",
        "dataset contract",
    ];
    let mut failures = 0;
    let mut report = |n: u32, out: Outcome| {
        let (ok, detail) = match out {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        say(&format!(
            "criterion {n} ({}): {} | {detail}",
            names[n as usize - 1],
            if ok { "PASS" } else { "FAIL" }
        ));
    };
    let mut experiment: Option<pyrocast::Result<Experiment>> = None;
    for n in selected {
        let started = Instant::now();
        let out = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 | 7 => {
                let e = experiment.get_or_insert_with(run_experiment);
                match e {
                    Ok(e) if n == 6 => criterion_6(e),
                    Ok(e) => criterion_7(e),
                    Err(err) => Err(pyrocast::Error::InvalidConfig(format!("experiment failed: {err}"))),
                }
            }
            8 => criterion_8(),
            9 => criterion_9(),
            _ => continue,
        };
        let secs = started.elapsed().as_secs_f64();
        report(n, out.map(|(ok, d)| (ok, format!("{d} [{secs:.1}s]"))));
    }
    if failures > 0 {
        say(&format!("{failures} criteria failed"));
        if std::env::var_os("PYROCAST_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}

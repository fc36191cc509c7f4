//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p nsd-cli --test acceptance -- [NAME...]` runs the criteria
//! whose names contain any of the given substrings.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use candle_core::{DType, Device, Tensor, Var};
use http_body_util::BodyExt;
use image::DynamicImage;
use nsd_core::datapipe::{
    apply_transform, make_manifest, preprocess_scene, AugmentPolicy, InstanceMap, LabelMap, PreprocessConfig,
    RetentionRule, RoomType, SourceScene, Split, SplitSelector,
};
use nsd_core::discriminator::{Discriminator, DiscriminatorConfig};
use nsd_core::generator::{pyramid, Generator, GeneratorConfig};
use nsd_core::imaging::layout_tensor;
use nsd_core::inference::latent_from_seed;
use nsd_core::layout::{encode_layout, ClassVocabulary, Geometry, GridTransform, LayoutMode, ObjectSpec};
use nsd_core::metrics::{fid, kid, polynomial_kernel, FeatureSet, FeatureSource, KidOptions, MetricReport};
use nsd_core::nn::{Mode, ParamStore};
use nsd_core::synthetic::{left_furnished_view, render_view, synthetic_pairs, write_structured3d_scene, FixtureObject};
use nsd_core::training::{
    d_loss, ema_update, g_loss, load_checkpoint, save_checkpoint, save_generator, ModelPreset, TrainConfig, Trainer,
};
use nsd_service::api::{ClassesResponse, ErrorResponse, GenerateResponse};
use nsd_service::engine::LoadedModel;
use nsd_service::{router, AppState, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

// Layout encoding against a per-pixel evaluation of the label definitions.

fn brute_force_layout(objects: &[ObjectSpec], k: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * w * h];
    for obj in objects {
        for y in 0..h {
            for x in 0..w {
                let f = match obj.geometry {
                    Geometry::Box(b) => {
                        let (xi, yi) = (x as i32, y as i32);
                        if xi >= b.x0 && xi < b.x1 && yi >= b.y0 && yi < b.y1 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Geometry::Point(p) => (-((x as f64 - p.cx).powi(2) + (y as f64 - p.cy).powi(2)) / p.size).exp(),
                };
                out[(obj.class_id * h + y) * w + x] += f;
            }
        }
    }
    out
}

fn layout_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a);
    let mut worst_point = 0.0f64;
    for mode in [LayoutMode::Box, LayoutMode::Point] {
        for case in 0..50 {
            let k = rng.random_range(1..=4);
            let (w, h) = (rng.random_range(1..=16usize), rng.random_range(1..=16usize));
            let vocab = ClassVocabulary::new((0..k).map(|i| format!("c{i}"))).map_err(e2s)?;
            let objects: Vec<ObjectSpec> = (0..rng.random_range(0..=5))
                .map(|_| {
                    let c = rng.random_range(0..k);
                    match mode {
                        LayoutMode::Box => {
                            let x0 = rng.random_range(0..w as i32);
                            let y0 = rng.random_range(0..h as i32);
                            let x1 = x0 + rng.random_range(1..=w as i32);
                            let y1 = y0 + rng.random_range(1..=h as i32);
                            ObjectSpec::boxed(c, x0, y0, x1, y1)
                        }
                        LayoutMode::Point => ObjectSpec::point(
                            c,
                            rng.random_range(0.0..=(w - 1) as f64),
                            rng.random_range(0.0..=(h - 1) as f64),
                            rng.random_range(0.05..40.0),
                        ),
                    }
                })
                .collect();
            let got = encode_layout(&objects, mode, w, h, &vocab).map_err(e2s)?;
            let want = brute_force_layout(&objects, k, w, h);
            for (i, (a, b)) in got.data().iter().zip(&want).enumerate() {
                match mode {
                    LayoutMode::Box => ensure(a == b, || format!("box case {case} element {i}: {a} vs {b}"))?,
                    LayoutMode::Point => {
                        worst_point = worst_point.max((a - b).abs());
                        ensure((a - b).abs() <= 1e-9, || format!("point case {case} element {i}: {a} vs {b}"))?
                    }
                }
            }
        }
    }
    Ok(format!("100 random cases; box exact, point max |diff| {worst_point:.1e}"))
}

// Network shapes and parameter counts.

const K: usize = 12;

fn generator_param_oracle(latent: usize, table: &[(usize, usize, Option<usize>)]) -> usize {
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
    let mut n = latent * K + K;
    for (i, &(vi, vo, sle)) in table.iter().enumerate() {
        let hidden = vi / 2;
        n += 2 * (conv(K, hidden, 3, true) + 2 * conv(hidden, vi, 3, true));
        n += conv(vi + 3, 2 * vo, 3, false) + 2 * (2 * vo);
        if let Some(src) = sle {
            n += conv(table[src].1, vo, 4, true) + conv(vo, vo, 1, true);
        }
        if i + 1 == table.len() {
            n += conv(vo, 3, 3, true);
        }
    }
    n
}

fn discriminator_param_oracle() -> usize {
    let cbn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let adv = [(3, 32), (32, 64), (64, 128), (128, 256), (256, 512)];
    let mut n: usize = adv.iter().map(|&(vi, vo)| cbn(vi, vi, 4) + cbn(vi, vo, 3)).sum();
    n += cbn(512, 512, 4) + 512 * 16 + 1;
    n += cbn(128, 64, 1);
    let obj = [(64, 128), (128, 256), (256, 256), (256, 256)];
    n += obj.iter().map(|&(vi, vo)| cbn(vi + K, vo, 4)).sum::<usize>();
    n + 256 * 4 + 1
}

fn architecture() -> Check {
    let mut gs = ParamStore::new(DType::F32, 1);
    let g = Generator::new(&GeneratorConfig::default(), &mut gs).map_err(e2s)?;
    let bg = uniform(&[1, 3, 256, 256], -1.0, 1.0, 2, DType::F32);
    let l = uniform(&[1, K, 256, 256], 0.0, 1.0, 3, DType::F32);
    let z = latent_from_seed(4, 256, DType::F32).map_err(e2s)?;
    let (y, trace) = g.forward_traced(&bg, &l, &z, Mode::Eval).map_err(e2s)?;
    let g_shapes: Vec<(usize, Vec<usize>)> = trace.block_outputs.iter().map(|(i, t)| (*i, t.dims().to_vec())).collect();
    let want: Vec<(usize, Vec<usize>)> = [(2, 512, 8), (3, 512, 16), (4, 256, 32), (5, 128, 64), (6, 64, 128), (7, 32, 256)]
        .iter()
        .map(|&(i, c, r)| (i, vec![1, c, r, r]))
        .collect();
    ensure(g_shapes == want, || format!("generator blocks {g_shapes:?}"))?;
    ensure(y.dims() == [1, 3, 256, 256], || format!("generator output {:?}", y.dims()))?;
    let table = [(12, 512, None), (512, 512, None), (512, 256, None), (256, 128, None), (128, 64, Some(0)), (64, 32, Some(1))];
    let (g_count, g_oracle) = (gs.num_parameters(), generator_param_oracle(256, &table));
    ensure(g_count == g_oracle && g_count == 20_001_307, || format!("generator has {g_count} parameters, oracle {g_oracle}"))?;

    let mut ds = ParamStore::new(DType::F32, 1);
    let d = Discriminator::new(&DiscriminatorConfig::default(), &mut ds).map_err(e2s)?;
    let img = uniform(&[1, 3, 256, 256], -1.0, 1.0, 5, DType::F32);
    let adv = d.adv_forward(&img, None, Mode::Eval).map_err(e2s)?;
    let d_shapes: Vec<(usize, Vec<usize>)> = adv.block_outputs.iter().map(|(i, t)| (*i, t.dims().to_vec())).collect();
    let want: Vec<(usize, Vec<usize>)> = [(7, 32, 128), (6, 64, 64), (5, 128, 32), (4, 256, 16), (3, 512, 8)]
        .iter()
        .map(|&(i, c, r)| (i, vec![1, c, r, r]))
        .collect();
    ensure(d_shapes == want, || format!("discriminator blocks {d_shapes:?}"))?;
    ensure(adv.branch.dims() == [1, 128, 32, 32], || format!("branch {:?}", adv.branch.dims()))?;
    ensure(adv.logits.dims() == [1], || format!("realism logits {:?}", adv.logits.dims()))?;
    let levels = pyramid(&l, [32, 16, 8, 4]).map_err(e2s)?;
    let obj = d.obj_forward(&adv.branch, &levels, Mode::Eval).map_err(e2s)?;
    ensure(obj.dims() == [1], || format!("consistency logits {:?}", obj.dims()))?;
    let (d_count, d_oracle) = (ds.num_parameters(), discriminator_param_oracle());
    ensure(d_count == d_oracle && d_count == 10_102_520, || format!("discriminator has {d_count} parameters, oracle {d_oracle}"))?;
    Ok(format!("G 512x8x8 .. 32x256x256, {g_count} params; D 32x128x128 .. 512x8x8, {d_count} params"))
}

// Analytic gradients against central differences.

const FD_STEP: f64 = 1e-6;

struct GradSetup {
    gs: ParamStore,
    g: Generator,
    ds: ParamStore,
    d: Discriminator,
    bg: Tensor,
    layout: Tensor,
    real: Tensor,
    z: Tensor,
}

fn g_objective(s: &GradSetup) -> Tensor {
    let fake = s.g.forward(&s.bg, &s.layout, &s.z, Mode::Train).unwrap();
    let (adv, obj) = s.d.forward(&fake, &s.layout, None, Mode::Train).unwrap();
    g_loss(&adv, &obj, 1.0).unwrap()
}

fn d_objective(s: &GradSetup) -> Tensor {
    let fake = s.g.forward(&s.bg, &s.layout, &s.z, Mode::Train).unwrap().detach();
    let (adv_r, _) = s.d.forward(&s.real, &s.layout, None, Mode::Train).unwrap();
    let (adv_f, obj_f) = s.d.forward(&fake, &s.layout, None, Mode::Train).unwrap();
    d_loss(&adv_r, &adv_f, &obj_f, 1.0, None).unwrap()
}

fn nudge(var: &Var, index: usize, delta: f64) {
    let mut v = values(var.as_tensor());
    v[index] += delta;
    var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
}

fn fd_check(s: &GradSetup, store: &ParamStore, objective: fn(&GradSetup) -> Tensor, seed: u64) -> Result<f64, String> {
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = objective(s).backward().map_err(e2s)?;
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for i in rand::seq::index::sample(&mut rng, names.len(), 5) {
        let var = store.get(&names[i]).unwrap();
        let index = rng.random_range(0..var.elem_count());
        let analytic = grads.get(var.as_tensor()).map(|g| values(g)[index]).unwrap_or(0.0);
        nudge(var, index, FD_STEP);
        let up = objective(s).to_scalar::<f64>().map_err(e2s)?;
        nudge(var, index, -2.0 * FD_STEP);
        let down = objective(s).to_scalar::<f64>().map_err(e2s)?;
        nudge(var, index, FD_STEP);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / scale;
        worst = worst.max(rel);
        ensure(rel <= 1e-3, || format!("{}[{index}]: analytic {analytic:e} vs numeric {numeric:e}", names[i]))?;
        if analytic != 0.0 {
            nonzero += 1;
        }
    }
    ensure(nonzero >= 3, || "fewer than three sampled parameters had a nonzero gradient".into())?;
    Ok(worst)
}

fn gradients() -> Check {
    let mut gs = ParamStore::new(DType::F64, 101);
    let g = Generator::new(&GeneratorConfig::tiny(K), &mut gs).map_err(e2s)?;
    let mut ds = ParamStore::new(DType::F64, 202);
    let d = Discriminator::new(&DiscriminatorConfig::tiny(K), &mut ds).map_err(e2s)?;
    let mut z_rng = ChaCha8Rng::seed_from_u64(4);
    let normal = rand_distr_gauss();
    let z: Vec<f64> = (0..16).map(|_| normal(&mut z_rng)).collect();
    let s = GradSetup {
        gs,
        g,
        ds,
        d,
        bg: uniform(&[2, 3, 64, 64], -1.0, 1.0, 1, DType::F64),
        layout: uniform(&[2, K, 64, 64], 0.0, 1.0, 2, DType::F64),
        real: uniform(&[2, 3, 64, 64], -1.0, 1.0, 3, DType::F64),
        z: Tensor::from_vec(z, (2, 8), &Device::Cpu).map_err(e2s)?,
    };
    let wg = fd_check(&s, &s.gs, g_objective, 7)?;
    let wd = fd_check(&s, &s.ds, d_objective, 8)?;
    Ok(format!("5 G and 5 D parameters, worst relative error {:.1e} / {:.1e}", wg, wd))
}

// Hinge losses.

fn t1(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn sc(x: Tensor) -> f64 {
    x.to_scalar::<f64>().unwrap()
}

fn losses() -> Check {
    let d = |r: f64, f: f64, o: f64, l: f64| sc(d_loss(&t1(&[r]), &t1(&[f]), &t1(&[o]), l, None).unwrap());
    let v = d(-2.0, 0.5, 50.0, 0.01);
    ensure(v == 0.0, || format!("d example 1 gave {v}"))?;
    let v = d(0.0, 5.0, 0.0, 0.01);
    ensure(v == 1.0, || format!("d example 2 gave {v}"))?;
    let (real, fake) = ([0.3, -0.4, 2.0], [-0.2, 0.9, 1.5]);
    let plain = real.iter().map(|r: &f64| (1.0 + r).max(0.0)).sum::<f64>() / 3.0
        + fake.iter().map(|f: &f64| (1.0 - f).max(0.0)).sum::<f64>() / 3.0;
    let v = sc(d_loss(&t1(&real), &t1(&fake), &t1(&[7.0, -9.0, 3.0]), 0.0, None).unwrap());
    ensure((v - plain).abs() < 1e-15, || format!("d example 3 gave {v}, plain hinge {plain}"))?;

    let v = sc(g_loss(&t1(&[-3.0, -3.0]), &t1(&[0.0, 0.0]), 0.01).unwrap());
    ensure(v == -3.0, || format!("g example 1 gave {v}"))?;
    let v = sc(g_loss(&t1(&[0.0]), &t1(&[42.0]), 0.0).unwrap());
    ensure(v == 0.0, || format!("g example 2 gave {v}"))?;
    for (base, drop) in [(-1.5, 0.2), (0.0, 0.3), (0.4, 0.05)] {
        let g0 = sc(g_loss(&t1(&[base]), &t1(&[0.0]), 0.01).unwrap());
        let g1 = sc(g_loss(&t1(&[base - drop]), &t1(&[0.0]), 0.01).unwrap());
        let (d0, d1) = (d(-5.0, base, 0.0, 0.01), d(-5.0, base - drop, 0.0, 0.01));
        ensure(g1 < g0 && d1 > d0, || format!("monotonicity fails at {base} - {drop}"))?;
    }

    let lambda = 0.01;
    for i in 0..100 {
        let combined = -3.0 + 6.0 * i as f64 / 99.0;
        let obj = 10.0 * (i as f64 / 7.0).sin();
        let a = Var::new(&[combined - lambda * obj], &Device::Cpu).unwrap();
        let o = Var::new(&[obj], &Device::Cpu).unwrap();
        let loss = d_loss(&t1(&[-5.0]), a.as_tensor(), o.as_tensor(), lambda, None).unwrap();
        let grads = loss.backward().unwrap();
        let ga = grads.get(a.as_tensor()).map(|x| values(x)[0]).unwrap_or(0.0);
        let value = sc(loss);
        if combined >= 1.0 {
            ensure(value == 0.0 && ga == 0.0, || format!("saturated point {combined}: loss {value}, grad {ga}"))?;
        } else {
            ensure((value - (1.0 - combined)).abs() < 1e-12 && ga == -1.0, || format!("active point {combined}: loss {value}"))?;
        }
    }
    Ok("3 d_loss and 3 g_loss examples exact; 100-point saturation sweep".into())
}

// Overfitting a handful of pairs.

const OVERFIT_WIDTH: usize = 8;
const OVERFIT_LR: f64 = 1e-3;
const OVERFIT_STEPS: usize = 2000;

fn overfit() -> Check {
    let vocab = ClassVocabulary::default();
    let mut cfg = TrainConfig::with_preset(ModelPreset::Reduced64 { width: OVERFIT_WIDTH }, vocab.len());
    cfg.batch_size = 8;
    cfg.accumulation_steps = 1;
    cfg.learning_rate = OVERFIT_LR;
    let data = synthetic_pairs(8, 64, &vocab, 1).map_err(e2s)?;
    let mut t = Trainer::new(cfg, DType::F32).map_err(e2s)?;
    let batch = t.next_batch(&data, &vocab).map_err(e2s)?;
    let z = latent_from_seed(0, 32, DType::F32).map_err(e2s)?.repeat((8, 1)).map_err(e2s)?;
    let l1 = |t: &Trainer| -> Result<f64, String> {
        let y = t.inference_generator(false).forward(&batch.backgrounds, &batch.layouts, &z, Mode::Eval).map_err(e2s)?;
        Ok(values(&(y - &batch.images).map_err(e2s)?.abs().map_err(e2s)?.mean_all().map_err(e2s)?)[0])
    };
    let start = l1(&t)?;
    for i in 0..OVERFIT_STEPS {
        let r = t.train_step(&batch).map_err(e2s)?;
        ensure(!r.skipped && r.d_loss.is_finite() && r.g_loss.is_finite(), || format!("non-finite losses at step {i}"))?;
    }
    let end = l1(&t)?;
    let drop = 1.0 - end / start;
    ensure(drop >= 0.30, || format!("mean L1 {start:.4} -> {end:.4} ({:.1}% drop, need 30%)", 100.0 * drop))?;
    Ok(format!("mean L1 {start:.4} -> {end:.4} ({:.1}% drop) over {OVERFIT_STEPS} steps", 100.0 * drop))
}

// Weight averaging and resumable training.

fn ema_and_resume() -> Check {
    let decay = 0.9;
    let mut shadow_store = ParamStore::new(DType::F64, 0);
    let mut live_store = ParamStore::new(DType::F64, 0);
    let shadow = shadow_store.uniform("w".into(), &[3], 0.0).map_err(e2s)?;
    let live = live_store.uniform("w".into(), &[3], 0.0).map_err(e2s)?;
    shadow.set(&t1(&[0.0, 0.0, 0.0])).map_err(e2s)?;
    let w = [0.7, -1.3, 2.5];
    live.set(&t1(&w)).map_err(e2s)?;
    let mut worst = 0.0f64;
    for n in 1..=60 {
        ema_update(&shadow_store, &live_store, decay).map_err(e2s)?;
        let got = values(shadow.as_tensor());
        for (g, wi) in got.iter().zip(w) {
            let closed = wi * (1.0 - decay.powi(n));
            worst = worst.max((g - closed).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("EMA deviates from w(1 - decay^n) by {worst:e}"))?;

    let vocab = ClassVocabulary::default();
    let mut cfg = TrainConfig::with_preset(ModelPreset::Tiny, vocab.len());
    cfg.batch_size = 2;
    cfg.accumulation_steps = 2;
    cfg.seed = 11;
    let data = synthetic_pairs(5, cfg.generator.image_size(), &vocab, 3).map_err(e2s)?;
    let run = |t: &mut Trainer, n: usize| -> Result<Vec<(f64, f64)>, String> {
        (0..n)
            .map(|_| {
                let b = t.next_batch(&data, &vocab).map_err(e2s)?;
                let r = t.train_step(&b).map_err(e2s)?;
                Ok((r.d_loss, r.g_loss))
            })
            .collect()
    };
    let snapshot = |s: &ParamStore| -> BTreeMap<String, Vec<f64>> {
        s.iter().map(|(n, v, _)| (n.to_string(), values(v.as_tensor()))).collect()
    };
    let mut whole = Trainer::new(cfg.clone(), DType::F32).map_err(e2s)?;
    let full = run(&mut whole, 50)?;
    let mut first = Trainer::new(cfg, DType::F32).map_err(e2s)?;
    let mut parts = run(&mut first, 25)?;
    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("mid.safetensors");
    save_checkpoint(&path, &first, Some(&vocab)).map_err(e2s)?;
    drop(first);
    let (mut resumed, _) = load_checkpoint(&path).map_err(e2s)?;
    parts.extend(run(&mut resumed, 25)?);
    ensure(parts == full, || "loss sequences differ after resuming".into())?;
    ensure(snapshot(resumed.g_store()) == snapshot(whole.g_store()), || "generator weights differ".into())?;
    ensure(snapshot(resumed.d_store()) == snapshot(whole.d_store()), || "discriminator weights differ".into())?;
    ensure(snapshot(resumed.ema().store()) == snapshot(whole.ema().store()), || "averaged weights differ".into())?;
    Ok(format!("EMA max error {worst:.1e}; 25 + 25 resumed steps identical to 50"))
}

// Augmentation commutes with layout encoding.

fn augmentation() -> Check {
    const W: usize = 16;
    const H: usize = 12;
    const SHIFT: i32 = 4;
    let vocab = ClassVocabulary::new(["a", "b", "c"]).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut transforms = vec![GridTransform::flip()];
    transforms.extend((0..20).map(|_| GridTransform::translate(rng.random_range(-SHIFT..=SHIFT), rng.random_range(-SHIFT..=SHIFT))));
    for mode in [LayoutMode::Box, LayoutMode::Point] {
        let objs: Vec<ObjectSpec> = (0..5)
            .map(|_| {
                let c = rng.random_range(0..3);
                match mode {
                    LayoutMode::Box => {
                        let x0 = rng.random_range(0..W as i32);
                        let y0 = rng.random_range(0..H as i32);
                        ObjectSpec::boxed(c, x0, y0, rng.random_range(x0 + 1..=W as i32), rng.random_range(y0 + 1..=H as i32))
                    }
                    LayoutMode::Point => ObjectSpec::point(
                        c,
                        rng.random_range(SHIFT as f64..(W - 1) as f64 - SHIFT as f64),
                        rng.random_range(SHIFT as f64..(H - 1) as f64 - SHIFT as f64),
                        rng.random_range(0.5..30.0),
                    ),
                }
            })
            .collect();
        let encoded = layout_tensor(&encode_layout(&objs, mode, W, H, &vocab).map_err(e2s)?, DType::F64).map_err(e2s)?;
        for t in &transforms {
            let a = values(&apply_transform(&encoded.unsqueeze(0).map_err(e2s)?, t).map_err(e2s)?);
            let moved: Vec<ObjectSpec> = objs
                .iter()
                .map(|o| t.apply_object(o, W))
                .filter(|o| match o.geometry {
                    Geometry::Box(b) => b.clipped(W, H).is_ok(),
                    Geometry::Point(_) => true,
                })
                .collect();
            let b = values(&layout_tensor(&encode_layout(&moved, mode, W, H, &vocab).map_err(e2s)?, DType::F64).map_err(e2s)?);
            for k in 0..3 {
                for y in 0..H {
                    for x in 0..W {
                        let i = (k * H + y) * W + x;
                        let ok = match mode {
                            LayoutMode::Box => a[i] == b[i],
                            LayoutMode::Point => t.source_pixel(x, y, W, H).is_none() || (a[i] - b[i]).abs() <= 1e-6,
                        };
                        ensure(ok, || format!("{mode:?} {t:?} at ({k},{x},{y}): {} vs {}", a[i], b[i]))?;
                    }
                }
            }
        }
    }
    let _ = AugmentPolicy::default();
    Ok("hflip and 20 translations; box exact, point interior within 1e-6".into())
}

// Distances between feature sets.

fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr_gauss();
    (0..n).map(|_| (0..d).map(|_| shift + normal(&mut rng)).collect()).collect()
}

/// Standard normal sampler (Box-Muller).
fn rand_distr_gauss() -> impl Fn(&mut ChaCha8Rng) -> f64 {
    |rng| {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn features(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::from_rows(rows, FeatureSource::Real, "toy").unwrap()
}

fn metrics() -> Check {
    let a = features(&gaussian_rows(40, 4, 0.0, 1));
    let self_fid = fid(&a, &a).map_err(e2s)?;
    ensure(self_fid.abs() <= 1e-6, || format!("fid(a, a) = {self_fid:e}"))?;

    let d = [0.5, -1.0, 2.0, 0.25];
    let shifted: Vec<Vec<f64>> =
        gaussian_rows(40, 4, 0.0, 1).into_iter().map(|r| r.iter().zip(d).map(|(v, s)| v + s).collect()).collect();
    let shift_fid = fid(&a, &features(&shifted)).map_err(e2s)?;
    let norm2: f64 = d.iter().map(|v| v * v).sum();
    ensure((shift_fid - norm2).abs() <= 1e-6, || format!("mean shift gives {shift_fid}, expected {norm2}"))?;

    let x = vec![vec![0.1, 0.9], vec![-0.4, 0.3], vec![1.2, -0.7]];
    let y = vec![vec![0.5, 0.5], vec![2.0, 1.0], vec![-1.0, 0.2]];
    let mut brute = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let k = |p: &[f64], q: &[f64]| (p[0] * q[0] / 2.0 + p[1] * q[1] / 2.0 + 1.0).powi(3);
                brute += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
            }
        }
    }
    brute /= 6.0;
    let est = kid(&features(&x), &features(&y), &KidOptions::default()).map_err(e2s)?;
    ensure((est.mean - brute).abs() <= 1e-9, || format!("KID {} vs brute force {brute}", est.mean))?;
    ensure(polynomial_kernel(&x[0], &y[0]) == (0.1 * 0.5 / 2.0 + 0.9 * 0.5 / 2.0 + 1.0f64).powi(3), || "kernel".into())?;

    let report = MetricReport {
        fid: 15.108,
        kid: 0.006797,
        kid_x1000: 6.797,
        kid_std: 0.0,
        n_real: 1,
        n_fake: 1,
        extractor_id: "inception-v3".into(),
    };
    let line = report.to_string();
    ensure(line.starts_with("FID 15.108 / KIDx10^3 6.797"), || format!("report prints {line:?}"))?;
    Ok(format!("fid(a,a) {self_fid:.1e}; shift {shift_fid:.9} vs {norm2}; KID 3-point {:.3e}; \"{}\"", est.mean, &line[..27]))
}

// Crop filtering on synthetic renders.

fn scene(objects: &[FixtureObject]) -> Result<SourceScene, String> {
    let v = render_view(1280, 720, objects).map_err(e2s)?;
    Ok(SourceScene {
        scene_id: 1,
        room_id: "1".into(),
        position: "0".into(),
        room_type: RoomType::Bedroom,
        empty: v.empty,
        decorated: v.full,
        semantic: LabelMap::from_color_render(&v.semantic),
        instance: InstanceMap::from_image(&DynamicImage::ImageLuma16(v.instance)),
    })
}

fn preprocessing() -> Check {
    let vocab = ClassVocabulary::default();
    let cfg = PreprocessConfig::default();
    let classes = [4, 6, 11, 35];

    let three: Vec<FixtureObject> = left_furnished_view().into_iter().take(3).collect();
    let n = preprocess_scene(&scene(&three)?, &vocab, &cfg).map_err(e2s)?.len();
    ensure(n == 0, || format!("three objects produced {n} crops"))?;

    // Four small objects on the left and one large object centred on the
    // right edge of the leftmost window: that window keeps about half of the
    // foreground and is rejected.
    let mut split: Vec<FixtureObject> =
        (0..4).map(|i| FixtureObject::new(classes[i], i as u16 + 1, 20, 60 + 150 * i as u32, 80, 120 + 150 * i as u32)).collect();
    let centre = (256.0 * 1280.0 / 456.0f64).round() as u32;
    split.push(FixtureObject::new(6, 9, centre - 200, 60, centre + 200, 700));
    for rule in [RetentionRule::Union, RetentionRule::PerObject] {
        let pairs = preprocess_scene(&scene(&split)?, &vocab, &PreprocessConfig { retention_rule: rule, ..cfg.clone() })
            .map_err(e2s)?;
        ensure(pairs.iter().all(|p| p.crop_x != 0), || format!("{rule:?} kept the half-covered crop"))?;
    }
    let kept = preprocess_scene(&scene(&left_furnished_view())?, &vocab, &cfg).map_err(e2s)?;
    ensure(kept.first().map(|p| p.crop_x) == Some(0), || "a fully contained layout lost its left crop".into())?;

    let centred: Vec<FixtureObject> =
        (0..4).map(|i| FixtureObject::new(classes[i], i as u16 + 1, 600, 100 + 140 * i as u32, 700, 200 + 140 * i as u32)).collect();
    let pairs = preprocess_scene(&scene(&centred)?, &vocab, &cfg).map_err(e2s)?;
    let xs: Vec<u32> = pairs.iter().map(|p| p.crop_x).collect();
    ensure(xs == [0, 200], || format!("crop offsets {xs:?}"))?;
    for p in &pairs {
        ensure((p.empty.width, p.empty.height, p.decorated.width, p.decorated.height) == (256, 256, 256, 256), || {
            "crops are not 256x256".into()
        })?;
        ensure(p.objects.len() == 4, || format!("crop {} keeps {} objects", p.crop_x, p.objects.len()))?;
    }

    let dir = tempfile::tempdir().map_err(e2s)?;
    for id in [1, 2, 2999, 3000, 3001, 4000] {
        write_structured3d_scene(dir.path(), id, 1, RoomType::Bedroom, (64, 36), &[vec![]]).map_err(e2s)?;
    }
    let m = make_manifest(dir.path(), RoomType::Bedroom, SplitSelector::All).map_err(e2s)?;
    let ids = |s: Split| m.records.iter().filter(|r| r.split == s).map(|r| r.scene_id).collect::<Vec<_>>();
    ensure(ids(Split::Train) == [1, 2, 2999] && ids(Split::Test) == [3000, 3001, 4000], || {
        format!("train {:?} test {:?}", ids(Split::Train), ids(Split::Test))
    })?;
    Ok("<4 objects rejected; 50% crop rejected; 1280x720 -> 456x256 -> crops at x=0,200; split at scene 3000".into())
}

// HTTP contract on a randomly initialised full-size generator.

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(state: &Arc<AppState>, body: &Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/v1/generate")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(state, req).await
}

async fn service_checks(state: Arc<AppState>) -> Check {
    let (status, body) = call(&state, Request::get("/v1/classes").body(Body::empty()).unwrap()).await;
    ensure(status == StatusCode::OK, || format!("classes returned {status}"))?;
    let classes: ClassesResponse = serde_json::from_slice(&body).map_err(e2s)?;
    let names: Vec<&str> = classes.classes.iter().map(|c| c.name.as_str()).collect();
    ensure(names.len() == 12 && ["bed", "sofa", "picture"].iter().all(|n| names.contains(n)), || format!("classes {names:?}"))?;

    let mut png = Vec::new();
    nsd_core::synthetic::empty_room(320, 240, [100, 110, 120])
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(e2s)?;
    let layout = |class: &str| {
        json!({ "version": 1, "mode": "box", "canvas": { "width": 320, "height": 240 },
                "objects": [{ "class": "bed", "box": { "x0": 20, "y0": 100, "x1": 200, "y1": 230 } },
                            { "class": class, "box": { "x0": 220, "y0": 20, "x1": 300, "y1": 90 } }] })
    };
    let request = |seed: u64, class: &str| json!({ "background": B64.encode(&png), "layout": layout(class), "latent_seed": seed });
    let parse = |(status, body): (StatusCode, Vec<u8>)| -> Result<GenerateResponse, String> {
        ensure(status == StatusCode::OK, || format!("generate returned {status}: {}", String::from_utf8_lossy(&body)))?;
        serde_json::from_slice(&body).map_err(e2s)
    };
    let a = parse(post(&state, &request(5, "picture")).await)?;
    let b = parse(post(&state, &request(5, "picture")).await)?;
    let c = parse(post(&state, &request(6, "picture")).await)?;
    ensure(a.image == b.image, || "same seed gave different images".into())?;
    ensure(a.image != c.image, || "different seeds gave identical images".into())?;
    let img = image::load_from_memory(&B64.decode(&a.image).map_err(e2s)?).map_err(e2s)?;
    ensure((img.width(), img.height()) == (256, 256), || format!("image is {}x{}", img.width(), img.height()))?;

    let (status, body) = post(&state, &request(5, "fireplace")).await;
    ensure(status == StatusCode::BAD_REQUEST, || format!("unknown class returned {status}"))?;
    let err: ErrorResponse = serde_json::from_slice(&body).map_err(e2s)?;
    ensure(err.error.field.as_deref() == Some("layout.objects[1].class") && err.error.message.contains("fireplace"), || {
        format!("error body {err:?}")
    })?;
    Ok(format!("12 classes; seed-stable 256x256 output ({:.0} ms); 400 at {}", a.latency_ms, err.error.field.unwrap()))
}

fn service() -> Check {
    let vocab = ClassVocabulary::default();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg = GeneratorConfig::default();
    let mut store = ParamStore::new(DType::F32, 7);
    Generator::new(&cfg, &mut store).map_err(e2s)?;
    let path = dir.path().join("random.safetensors");
    save_generator(&path, &cfg, &store, LayoutMode::Box, Some(&vocab), None).map_err(e2s)?;
    let state = AppState::new(ServiceConfig::default());
    state.engine.install(LoadedModel::from_checkpoint(&path, state.engine.vocab()).map_err(e2s)?)?;
    let rt = tokio::runtime::Runtime::new().map_err(e2s)?;
    rt.block_on(service_checks(state))
}

struct Criterion {
    name: &'static str,
    /// Wall-clock limit; `None` when the limit refers to accelerator hardware
    /// and elapsed time is only reported.
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "layout-oracle-equivalence", budget: Some(Duration::from_secs(5)), run: layout_oracle },
        Criterion { name: "architecture-golden-shapes", budget: Some(Duration::from_secs(30)), run: architecture },
        Criterion { name: "gradient-integrity", budget: Some(Duration::from_secs(120)), run: gradients },
        Criterion { name: "loss-formula-checks", budget: Some(Duration::from_secs(1)), run: losses },
        Criterion { name: "overfit-smoke-test", budget: None, run: overfit },
        Criterion { name: "ema-checkpoint-determinism", budget: Some(Duration::from_secs(5 * 60)), run: ema_and_resume },
        Criterion { name: "augmentation-equivariance", budget: Some(Duration::from_secs(5)), run: augmentation },
        Criterion { name: "metric-sanity", budget: Some(Duration::from_secs(10)), run: metrics },
        Criterion { name: "preprocessing-rules", budget: Some(Duration::from_secs(10)), run: preprocessing },
        Criterion { name: "service-contract", budget: Some(Duration::from_secs(60)), run: service },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let timing = match c.budget {
            Some(b) => format!("{:.1}s of {}s", elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.1}s, budget set for accelerators", elapsed.as_secs_f64()),
        };
        match outcome {
            Ok(detail) if c.budget.is_none_or(|b| elapsed <= b) => println!("PASS {} ({timing}): {detail}", c.name),
            Ok(detail) => {
                failed += 1;
                println!("FAIL {} ({timing}): over the runtime budget; {detail}", c.name)
            }
            Err(why) => {
                failed += 1;
                println!("FAIL {} ({timing}): {why}", c.name)
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdsnet::checkpoint::Checkpoint;
use vdsnet::config::TrainConfig;
use vdsnet::core::capsule::{routing, squash, CapsVariant, CapsuleConfig};
use vdsnet::core::data::{class_stats, encode_metadata, split, Gender, ViewPosition};
use vdsnet::core::gradcheck::{check_gradients, random_projection, sample_coords};
use vdsnet::core::kernels::conv::{conv2d_im2col, conv2d_reference, ConvShape};
use vdsnet::core::kernels::{Padding, Window2d};
use vdsnet::core::layers::{self, activate, batchnorm, dense, dropout, Activation, Mode};
use vdsnet::core::loss::loss_for;
use vdsnet::core::metrics::f_beta;
use vdsnet::core::optim::{Adam, AdamConfig};
use vdsnet::core::stn::{identity_thetas, init_locnet, lambda_scale, spatial_transformer, transform};
use vdsnet::core::zoo::{capsnet, vdsnet as vdsnet_spec, vgg16_backbone, ModelId, ModelSpec, Network, OutputKind};
use vdsnet::core::{Result as CoreResult, Tape, Tensor, Var};
use vdsnet::fixtures::{sample_count_records, synthetic_set, write_synthetic_dataset, SAMPLE_CSV_ENV, SAMPLE_LABEL_COUNTS};
use vdsnet::metadata::{parse_metadata_csv, write_metadata_csv, HeaderMap};
use vdsnet::predict::Prediction;
use vdsnet::trainer::{overfit, run_training, single_threaded};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs as f64, format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()))
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn metric_formula() -> Outcome {
    let a = f_beta(0.69, 0.63, 0.5);
    let b = f_beta(0.68, 0.58, 0.5);
    ensure((0.675..=0.680).contains(&a), format!("first row {a:.5}"))?;
    ensure((0.655..=0.660).contains(&b), format!("second row {b:.5}"))?;
    Ok(format!("{a:.5}, {b:.5}"))
}

fn layer_error<F>(inputs: &[Tensor<f64>], mut f: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> CoreResult<Var>,
{
    let coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, x)| (0..x.len()).map(move |c| (i, c))).collect();
    let report = check_gradients(
        inputs,
        |t, v| {
            let y = f(t, v)?;
            random_projection(t, y, 3)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

fn worst_layer_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 2, 6, 6], -1.0, 1.0, &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = rand_tensor(&[3], -0.5, 0.5, &mut rng);
    let mut worst = 0.0f64;
    for padding in [Padding::Same, Padding::Valid] {
        worst = worst.max(layer_error(&[x.clone(), w.clone(), b.clone()], |t, v| {
            layers::conv2d(t, v[0], v[1], v[2], (1, 1), padding)
        }));
    }
    worst = worst.max(layer_error(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = layers::conv2d(t, v[0], v[1], v[2], (1, 1), Padding::Same)?;
        let y = activate(t, y, Activation::Relu)?;
        t.maxpool2d(y, (2, 2), (2, 2), Padding::Valid)
    }));
    let flat = rand_tensor(&[4, 6], -1.0, 1.0, &mut rng);
    let dw = rand_tensor(&[6, 3], -1.0, 1.0, &mut rng);
    let db = rand_tensor(&[3], -1.0, 1.0, &mut rng);
    for act in [Activation::Linear, Activation::Sigmoid, Activation::Softmax, Activation::Relu] {
        worst = worst.max(layer_error(&[flat.clone(), dw.clone(), db.clone()], |t, v| {
            let y = dense(t, v[0], v[1], v[2])?;
            activate(t, y, act)
        }));
    }
    let gamma = rand_tensor(&[2], 0.5, 1.5, &mut rng);
    let beta = rand_tensor(&[2], -0.5, 0.5, &mut rng);
    for mode in [Mode::Train, Mode::Infer] {
        worst = worst.max(layer_error(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            Ok(batchnorm(t, v[0], v[1], v[2], &[0.1, -0.1], &[1.2, 0.7], mode, 1e-5)?.0)
        }));
    }
    worst = worst.max(layer_error(&[flat], |t, v| dropout(t, v[0], 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(99))));
    worst.max(layer_error(&[x], |t, v| t.global_avg_pool(v[0])))
}

fn stn_block_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inputs = vec![
        rand_tensor(&[2, 1, 8, 8], 0.0, 1.0, &mut rng),
        rand_tensor(&[1], 0.8, 1.2, &mut rng),
        rand_tensor(&[1], -0.2, 0.2, &mut rng),
    ];
    let mut locnet = init_locnet::<f64>(1, 8, 8, &mut rng).unwrap();
    for v in locnet[6].data_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }
    locnet[7].data_mut().copy_from_slice(&[0.9, 0.1, 0.03, -0.08, 1.1, -0.04]);
    inputs.extend(locnet);
    let coords = sample_coords(&inputs, 40, &mut rng);
    let report = check_gradients(
        &inputs,
        |t, v| {
            let c = lambda_scale(t, v[0])?;
            let (bn, _) = batchnorm(t, c, v[1], v[2], &[0.0], &[1.0], Mode::Train, 1e-3)?;
            let (y, _) = spatial_transformer(t, bn, &v[3..])?;
            random_projection(t, y, 11)
        },
        &coords,
        1e-6,
    )
    .unwrap();
    assert!(report.checked > coords.len() / 2, "{report:?}");
    report.max_rel_error
}

fn network_error(net: &Network<f64>, image: Tensor<f64>, meta: Option<Tensor<f64>>, labels: &[u8], per_input: usize, seed: u64) -> f64 {
    let mut inputs = vec![image];
    inputs.extend(net.params().iter().cloned());
    let coords = sample_coords(&inputs, per_input, &mut ChaCha8Rng::seed_from_u64(seed));
    let kind = net.spec().output_kind;
    let report = check_gradients(
        &inputs,
        |t, v: &[Var]| {
            let m = meta.clone().map(|m| t.constant(m));
            let pass = net.forward_with(t, &v[1..], v[0], m, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))?;
            loss_for(t, pass.output, kind, labels)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(report.checked * 2 > coords.len(), "{report:?}");
    report.max_rel_error
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let layers = worst_layer_error();
    let stn = stn_block_error();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::<f64>::new(vdsnet_spec(8), &mut rng).unwrap();
    let p = net.params_mut();
    for v in p[8].data_mut() {
        *v = rng.gen_range(-0.02..0.02);
    }
    p[9].data_mut().copy_from_slice(&[0.95, 0.05, 0.02, -0.03, 1.05, 0.01]);
    let image = rand_tensor(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let meta = Tensor::from_f64(&[2, 5], &[1.0, 0.0, 0.4, 1.0, 0.0, 0.0, 1.0, 0.7, 0.0, 1.0]).unwrap();
    let vds = network_error(&net, image, Some(meta), &[1, 0], 6, 9);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cfg = CapsuleConfig::new(CapsVariant::Modified);
    cfg.routings = 2;
    let caps_net = Network::<f64>::new(capsnet(cfg, 3, 8), &mut rng).unwrap();
    let image = rand_tensor(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let caps = network_error(&caps_net, image, None, &[0, 1], 8, 10);

    let detail = format!("layers {layers:.1e}, stn {stn:.1e}, vdsnet {vds:.1e}, capsnet {caps:.1e}");
    ensure(layers < 1e-4 && stn < 1e-4, detail.clone())?;
    ensure(vds < 1e-3 && caps < 1e-3, detail.clone())?;
    within(start.elapsed(), 120)?;
    Ok(format!("{detail}, {:.1}s", start.elapsed().as_secs_f64()))
}

fn stn_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..20), rng.gen_range(1..20)];
        let mut t = Tape::<f64>::new();
        let x = t.constant(rand_tensor(&shape, -3.0, 3.0, &mut rng));
        let theta = t.constant(identity_thetas(shape[0]));
        let y = transform(&mut t, x, theta).unwrap();
        worst = worst.max(t.value(y).max_abs_diff(t.value(x)));
    }
    ensure(worst < 1e-6, format!("identity deviation {worst:e}"))?;
    for (c, hw) in [(1, 16), (3, 64)] {
        let locnet = init_locnet::<f64>(c, hw, hw, &mut rng).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.constant(rand_tensor(&[2, c, hw, hw], -1.0, 1.0, &mut rng));
        let vars: Vec<Var> = locnet.into_iter().map(|p| t.param(p)).collect();
        let (_, theta) = spatial_transformer(&mut t, x, &vars).unwrap();
        ensure(t.value(theta) == &identity_thetas(2), format!("locnet at init emits {:?}", t.value(theta).data()))?;
    }
    Ok(format!("max deviation {worst:.1e}, locnet emits exact identity"))
}

fn capsule_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (n, d) = (100_000, 8);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let scale = 10f64.powf(rng.gen_range(-3.0..4.0)) / norm;
        data.extend(dir.iter().map(|v| v * scale));
    }
    let mut t = Tape::<f64>::new();
    let s = t.constant(Tensor::new(&[n, d], data).unwrap());
    let v = squash(&mut t, s).unwrap();
    let max_norm = t.value(v).data().chunks(d).map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt()).fold(0.0, f64::max);
    ensure(max_norm < 1.0, format!("squash norm reached {max_norm}"))?;

    let unit = t.constant(Tensor::new(&[1, 3], vec![0.6, 0.0, 0.8]).unwrap());
    let half = squash(&mut t, unit).unwrap();
    let hn = t.value(half).data().iter().map(|a| a * a).sum::<f64>().sqrt();
    ensure((hn - 0.5).abs() < 1e-9, format!("norm at unit input {hn}"))?;

    let (inputs, outputs, dim) = (7, 3, 4);
    let mut worst_row = 0.0f64;
    let mut worst_perm = 0.0f64;
    for trial in 0..20 {
        let u = rand_tensor(&[2, inputs, outputs, dim], -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..inputs).collect();
        perm.rotate_left(trial % inputs);
        perm.swap(0, inputs - 1);
        let row = outputs * dim;
        let permuted: Vec<f64> = (0..2)
            .flat_map(|b| perm.iter().flat_map(move |&i| (0..row).map(move |k| (b, i, k))))
            .map(|(b, i, k)| u.data()[(b * inputs + i) * row + k])
            .collect();
        let mut t = Tape::<f64>::new();
        let a = t.constant(u);
        let p = t.constant(Tensor::new(&[2, inputs, outputs, dim], permuted).unwrap());
        let ra = routing(&mut t, a, 3).unwrap();
        let rp = routing(&mut t, p, 3).unwrap();
        for c in &ra.couplings {
            for r in c.data().chunks(outputs) {
                worst_row = worst_row.max((r.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst_perm = worst_perm.max(t.value(ra.output).max_abs_diff(t.value(rp.output)));
        for (ca, cp) in ra.couplings.iter().zip(&rp.couplings) {
            for b in 0..2 {
                for (slot, &i) in perm.iter().enumerate() {
                    for j in 0..outputs {
                        let x = ca.data()[(b * inputs + i) * outputs + j];
                        let y = cp.data()[(b * inputs + slot) * outputs + j];
                        worst_perm = worst_perm.max((x - y).abs());
                    }
                }
            }
        }
    }
    ensure(worst_row < 1e-6, format!("coupling row sum off by {worst_row:e}"))?;
    ensure(worst_perm < 1e-6, format!("permutation deviation {worst_perm:e}"))?;
    Ok(format!("max squash norm {max_norm:.9}, row sums {worst_row:.1e}, permutation {worst_perm:.1e}"))
}

fn parameter_counts() -> Outcome {
    let backbone = ModelSpec {
        name: "backbone".into(),
        input_shape: [3, 64, 64],
        metadata_width: 0,
        nodes: vgg16_backbone(),
        output_kind: OutputKind::Softmax2,
    };
    let count = |m: ModelId| m.spec().unwrap().param_count().unwrap();
    let bb = backbone.plan().unwrap().param_count();
    let delta = count(ModelId::VanillaRgb) - count(ModelId::VanillaGray);
    let (basic, modified) = (count(ModelId::CapsnetBasic), count(ModelId::CapsnetModified));
    ensure(bb == 14_714_688, format!("backbone {bb}"))?;
    ensure(delta == 1568, format!("rgb - gray {delta}"))?;
    ensure(modified < basic, format!("modified {modified} vs basic {basic}"))?;
    Ok(format!("backbone {bb}, rgb - gray {delta}, capsnet {modified} < {basic}"))
}

fn conv_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut cases) = (0.0f64, 0);
    while cases < 200 {
        let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let (kh, kw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let stride = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let Ok(window) = Window2d::new("conv2d", (h, w), (kh, kw), stride, padding) else {
            continue;
        };
        let s = ConvShape {
            batch: rng.gen_range(1..=4),
            in_channels: rng.gen_range(1..=4),
            filters: rng.gen_range(1..=5),
            window,
        };
        let x: Vec<f64> = (0..s.batch * s.in_channels * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..s.filters * s.in_channels * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..s.filters).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = conv2d_im2col(&x, &k, Some(&b), &s);
        let slow = conv2d_reference(&x, &k, Some(&b), &s);
        ensure(fast.len() == slow.len(), "output length differs")?;
        worst = fast.iter().zip(&slow).fold(worst, |m, (a, r)| m.max((a - r).abs()));
        cases += 1;
    }
    ensure(worst < 1e-5, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 60)?;
    Ok(format!("200 shapes, max deviation {worst:.1e}"))
}

fn tiny_overfit() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut failed = false;
    for (model, channels) in [(ModelId::Vdsnet, 3), (ModelId::VanillaGray, 1)] {
        let set = synthetic_set(32, channels, 64, 31);
        let out = overfit(model, &set, 1e-3, 32, 300, 0.97, 0).map_err(|e| format!("{model}: {e:#}"))?;
        let acc = out.train_accuracy.last().copied().unwrap_or(0.0);
        failed |= acc < 0.97;
        parts.push(format!("{model} {acc:.3} after {} epochs", out.epochs.len()));
    }
    let detail = parts.join(", ");
    ensure(!failed, detail.clone())?;
    within(start.elapsed(), 600)?;
    Ok(format!("{detail}, {:.0}s", start.elapsed().as_secs_f64()))
}

fn data_fidelity() -> Outcome {
    let (records, source) = match std::env::var(SAMPLE_CSV_ENV) {
        Ok(path) => (parse_metadata_csv(Path::new(&path), &HeaderMap::default()).map_err(|e| format!("{e:#}"))?.records, "sample CSV"),
        Err(_) => {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let path = dir.path().join("sample.csv");
            write_metadata_csv(&path, &sample_count_records()).map_err(|e| e.to_string())?;
            (parse_metadata_csv(&path, &HeaderMap::default()).map_err(|e| format!("{e:#}"))?.records, "count fixture CSV")
        }
    };
    let stats = class_stats(&records);
    for (label, n) in SAMPLE_LABEL_COUNTS {
        let got = stats.label_count(label);
        ensure(got == n, format!("{label}: {got} vs {n}"))?;
    }

    for gender in [Gender::F, Gender::M] {
        for view in [ViewPosition::AP, ViewPosition::PA] {
            let m = encode_metadata(gender, 42.0, view).unwrap();
            ensure(m[0] + m[1] == 1.0 && m[3] + m[4] == 1.0, format!("one-hot sums {m:?}"))?;
        }
    }
    let a = split(&records, 0.2, 7).map_err(|e| e.to_string())?;
    let b = split(&records, 0.2, 7).map_err(|e| e.to_string())?;
    ensure(a == b, "split differs between equal seeds")?;
    ensure(a.train.len() + a.val.len() == records.len(), "split loses records")?;
    let val_patients: std::collections::HashSet<&str> = a.val.iter().map(|&i| records[i].patient_id.as_str()).collect();
    ensure(a.train.iter().all(|&i| !val_patients.contains(records[i].patient_id.as_str())), "patient on both sides")?;
    Ok(format!("15 counts from the {source}; one-hot, patient grouping and determinism hold"))
}

fn tiny_config(dir: &Path, model: ModelId, epochs: usize) -> TrainConfig {
    TrainConfig {
        model,
        batch_size: 8,
        learning_rate: 1e-3,
        max_epochs: epochs,
        early_stop_patience: 2,
        seed: 5,
        threshold: 0.5,
        beta: 0.5,
        csv: dir.join("data/metadata.csv"),
        image_dir: dir.join("data/images"),
        output_dir: dir.join(format!("out_{model}")),
        val_fraction: 0.25,
        augment: true,
        cache_images: 128,
        headers: HeaderMap::default(),
    }
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_synthetic_dataset(&dir.path().join("data"), 16, 80, 2).map_err(|e| e.to_string())?;
    let cfg = tiny_config(dir.path(), ModelId::Vdsnet, 2);
    let run = || -> Result<Vec<u8>, String> {
        let out = single_threaded(|| run_training(&cfg, false)).and_then(|r| r).map_err(|e| format!("{e:#}"))?;
        std::fs::read(out.checkpoint).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, "checkpoints differ between equal-seed runs")?;

    let ck = Checkpoint::from_bytes(&a).map_err(|e| e.to_string())?;
    let path = dir.path().join("copy.ckpt");
    ck.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let bits = |c: &Checkpoint| -> Vec<u32> { c.params.iter().chain(&c.buffers).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    ensure(bits(&back) == bits(&ck) && back == ck, "round trip changed parameters")?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == a, "re-saved bytes differ")?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::<f32>::new(ModelId::VanillaRgb.spec().unwrap(), &mut rng).unwrap();
    let adam = Adam::new(AdamConfig::default(), net.params());
    let fresh = Checkpoint::capture(&net, &adam, None, 0, None);
    let restored = Checkpoint::from_bytes(&fresh.to_bytes()).map_err(|e| e.to_string())?;
    ensure(bits(&restored) == bits(&fresh), "fresh network round trip changed parameters")?;
    Ok(format!("{} byte checkpoints identical; save/load bit-exact", a.len()))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vdsnet")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("vdsnet {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn is_percentage(s: &str) -> bool {
    let Some((int, frac)) = s.strip_suffix('%').and_then(|p| p.split_once('.')) else {
        return false;
    };
    (1..=3).contains(&int.len()) && frac.len() == 4 && int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
}

fn end_to_end_cli() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, images) = write_synthetic_dataset(&dir.path().join("data"), 12, 72, 8).map_err(|e| e.to_string())?;
    let mut paths = Vec::new();
    for model in [ModelId::VanillaGray, ModelId::VanillaRgb] {
        let p = dir.path().join(format!("{model}.json"));
        tiny_config(dir.path(), model, 1).save(&p).map_err(|e| e.to_string())?;
        paths.push(p.to_string_lossy().into_owned());
    }
    let table = cli(&["--deterministic", "compare", "--configs", &paths[0], &paths[1]])?;
    let lines: Vec<&str> = table.lines().collect();
    ensure(lines.first() == Some(&"model,recall,precision,f05,accuracy,param_count,train_seconds"), format!("header {:?}", lines.first()))?;
    ensure(lines.len() == 3 && lines[1..].iter().all(|l| l.split(',').count() == 7), format!("table {table:?}"))?;

    let ckpt = dir.path().join("out_vanilla_gray/best.ckpt").to_string_lossy().into_owned();
    let png = std::fs::read_dir(&images).map_err(|e| e.to_string())?.next().unwrap().unwrap().path();
    let png = png.to_string_lossy().into_owned();
    let base = ["predict", "--checkpoint", ckpt.as_str(), "--image", png.as_str(), "--age", "58", "--gender", "F", "--view", "PA"];
    let line = cli(&base)?;
    let pct = line.split_whitespace().nth(1).unwrap_or_default().to_string();
    ensure(is_percentage(&pct), format!("confidence printed as {line:?}"))?;
    let score: f64 = pct.trim_end_matches('%').parse::<f64>().unwrap() / 100.0;

    let near = format!("{}", (score + 0.015).min(1.0));
    let mut args = base.to_vec();
    args.extend(["--threshold", near.as_str()]);
    let flagged = cli(&args)?;
    ensure(flagged.contains("borderline") && flagged.contains("no finding"), format!("near-threshold output {flagged:?}"))?;
    let p = Prediction::new(0.485, 0.5).map_err(|e| e.to_string())?;
    ensure(!p.positive && p.borderline, "0.485 at 0.5 not a borderline negative")?;
    Ok(format!("2-row, 7-column table; predict printed {pct}; near-threshold case flagged"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric formula", metric_formula),
        ("gradient correctness", gradient_correctness),
        ("stn identity", stn_identity),
        ("capsule invariants", capsule_invariants),
        ("parameter counts", parameter_counts),
        ("convolution oracle", conv_oracle),
        ("tiny overfit", tiny_overfit),
        ("data pipeline", data_fidelity),
        ("reproducibility", reproducibility),
        ("end-to-end cli", end_to_end_cli),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

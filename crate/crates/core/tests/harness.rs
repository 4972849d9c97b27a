use std::fs;

use gradleak::harness::io::{
    decode_tensors, encode_tensors, load_idx, load_idx_images, load_image_dir, load_tensors, load_tokens, read_image,
    save_tensors, write_image,
};
use gradleak::harness::sim::{average, Federation, Source};
use gradleak::harness::{
    attack_gradients, build_federation, run_scenario, run_sweep, run_training_stage_sweep, target, RawConfig,
    ScenarioConfig, Topology, Vantage,
};
use gradleak::models::{init_params, true_gradients, ModelSpec, TensorSet};
use gradleak::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(text: &str) -> ScenarioConfig {
    ScenarioConfig::from_raw(&RawConfig::parse(text).unwrap()).unwrap()
}

fn config_line(text: &str) -> usize {
    match RawConfig::parse(text).and_then(|r| ScenarioConfig::from_raw(&r)) {
        Err(Error::Config { line, .. }) => line,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_grammar() {
    let c = config(
        "# a comment\n\
         model.kind = convnet   # trailing comment\n\
         model.image = 1, 8, 8\n\
         model.hidden = 6, 5\n\
         \n\
         defense.kind = gaussian\n\
         defense.variance = 1e-3\n\
         seed = 9\n",
    );
    assert_eq!(c.seed, 9);
    assert!(c.model.is_image());
    assert_eq!(c.model.sample_shape(), vec![1, 8, 8]);
    assert_eq!(c.defense.name(), "gaussian");

    let empty_hidden = config("model.hidden =\n");
    assert_eq!(empty_hidden.model, ModelSpec::mlp(64, &[], 4));

    assert_eq!(config_line("seed = 1\n\nbogus.key = 3\n"), 3);
    assert_eq!(config_line("model.kind = mlp\nno equals sign\n"), 2);
    assert_eq!(config_line("sweep.nope = 1, 2\n"), 1);
    assert_eq!(config_line("seed = 1\ndefense.kind = gaussian\ndefense.variance = -1\n"), 2);
    assert_eq!(config_line("attack.iterations = many\n"), 1);

    let mut raw = RawConfig::parse("seed = 1\n").unwrap();
    raw.set_override("defense.kind=int8").unwrap();
    assert_eq!(ScenarioConfig::from_raw(&raw).unwrap().defense.name(), "int8");
    assert!(matches!(raw.set_override("bogus=1"), Err(Error::Config { line: 0, .. })));
}

#[test]
fn sweep_expansion_is_cartesian_and_ordered() {
    let raw = RawConfig::parse("sweep.defense.variance = 1e-4, 1e-3, 1e-2, 1e-1\nsweep.defense.kind = gaussian, laplacian\n")
        .unwrap();
    let points = raw.expand();
    assert_eq!(points.len(), 8);
    // the first axis varies slowest
    let first: Vec<&str> = points.iter().map(|(p, _)| p[0].1.as_str()).collect();
    assert_eq!(first, ["1e-4", "1e-4", "1e-3", "1e-3", "1e-2", "1e-2", "1e-1", "1e-1"]);
    assert_eq!(points[1].1.get("defense.kind"), Some("laplacian"));

    assert_eq!(RawConfig::parse("seed = 3\n").unwrap().expand().len(), 1);

    let lists = RawConfig::parse("sweep.model.hidden = 32; 16, 8\n").unwrap();
    let hidden: Vec<ModelSpec> = lists
        .expand()
        .iter()
        .map(|(_, r)| ScenarioConfig::from_raw(r).unwrap().model)
        .collect();
    assert_eq!(hidden, [ModelSpec::mlp(64, &[32], 4), ModelSpec::mlp(64, &[16, 8], 4)]);
}

/// IDX bytes assembled by hand, independent of the loader.
fn idx_fixture() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4];
    let pixels: Vec<u8> = (0..32).map(|i| (i * 8) as u8).collect();
    images.extend(&pixels);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
    (images, labels, pixels)
}

#[test]
fn idx_loader() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels, pixels) = idx_fixture();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    fs::write(&ip, &images).unwrap();
    fs::write(&lp, &labels).unwrap();
    let (x, y) = load_idx(&ip, &lp).unwrap();
    assert_eq!(x.shape(), [2, 1, 4, 4]);
    for (v, p) in x.data().iter().zip(&pixels) {
        assert_eq!(*v, *p as f64 / 255.0);
    }
    assert_eq!(y, [3, 7]);

    fs::write(&ip, &images[..30]).unwrap();
    let msg = load_idx_images(&ip).unwrap_err().to_string();
    assert!(msg.contains("byte offset 16"), "{msg}");
    fs::write(&ip, &images[..6]).unwrap();
    assert!(load_idx_images(&ip).unwrap_err().to_string().contains("byte offset 4"));
    // a label file is not an image file
    assert!(load_idx_images(&lp).unwrap_err().to_string().contains("bad magic"));
}

#[test]
fn pgm_and_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("half.pgm");
    write_image(&Tensor::filled(&[1, 2, 2], 0.5), &p).unwrap();
    let mut expect = b"P5\n2 2\n255\n".to_vec();
    expect.extend([128; 4]);
    assert_eq!(fs::read(&p).unwrap(), expect);

    let rgb = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let q = dir.path().join("rgb.ppm");
    write_image(&rgb, &q).unwrap();
    let bytes = fs::read(&q).unwrap();
    assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], [255, 0, 0, 0, 255, 0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in [1, 3] {
        let t = Tensor::from_fn(&[c, 5, 7], |_| rng.gen_range(-0.2..1.2));
        let path = dir.path().join(format!("r{c}.img"));
        write_image(&t, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }
    assert!(write_image(&Tensor::zeros(&[2, 2, 2]), &p).is_err());

    let imgs = dir.path().join("imgs");
    write_image(&Tensor::zeros(&[1, 3, 3]), &imgs.join("2_a.pgm")).unwrap();
    write_image(&Tensor::ones(&[1, 3, 3]), &imgs.join("0_b.pgm")).unwrap();
    let (x, y) = load_image_dir(&imgs).unwrap();
    assert_eq!(x.shape(), [2, 1, 3, 3]);
    assert_eq!(y, [0, 2]);
    assert_eq!(x.data()[0], 1.0);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut set = TensorSet::new();
    set.insert("w", Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0)));
    set.insert("odd", Tensor::new(vec![4], vec![-0.0, f64::MIN_POSITIVE / 4.0, f64::MAX, 1e-300]).unwrap());
    set.insert("s", Tensor::scalar(0.1));
    let bytes = encode_tensors(&set);
    assert!(bytes.starts_with(b"GLPK1"));
    let back = decode_tensors(&bytes, "mem".as_ref()).unwrap();
    assert!(back.bit_identical(&set));
    assert_eq!(back.names().collect::<Vec<_>>(), ["w", "odd", "s"]);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.glpk");
    save_tensors(&set, &p).unwrap();
    assert!(load_tensors(&p).unwrap().bit_identical(&set));

    let err = decode_tensors(&bytes[..bytes.len() - 3], "mem".as_ref()).unwrap_err().to_string();
    assert!(err.contains("byte offset"), "{err}");
    assert!(decode_tensors(b"GLPK2", "mem".as_ref()).is_err());
}

#[test]
fn token_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.txt");
    fs::write(&p, "# label, ids\n1\t3 4 5\n\n0\t9 9 1\n").unwrap();
    let (s, l) = load_tokens(&p).unwrap();
    assert_eq!(s, [vec![3, 4, 5], vec![9, 9, 1]]);
    assert_eq!(l, [1, 0]);
    fs::write(&p, "1 3 4 5\n").unwrap();
    assert!(load_tokens(&p).is_err());
}

fn federation(workers: usize, topology: Topology, vantage: Vantage) -> Federation {
    let mut cfg = config("data.size = 12\nmodel.hidden = 6\n");
    cfg.workers = workers;
    cfg.topology = topology;
    cfg.vantage = vantage;
    cfg.batch = 2;
    build_federation(&cfg).unwrap()
}

#[test]
fn one_worker_observes_true_gradients() {
    let mut fed = federation(1, Topology::Centralized, Vantage::PerWorker);
    let params = fed.params().clone();
    let round = fed.simulate_round().unwrap();
    assert_eq!(round.observed.len(), 1);
    let obs = &round.observed[0];
    let direct = obs.batch.gradients(&fed.spec, &params).unwrap();
    assert!(obs.grads.bit_identical(&direct));
    assert!(round.average.bit_identical(&direct));
}

#[test]
fn centralized_average_is_the_mean() {
    let mut fed = federation(2, Topology::Centralized, Vantage::PerWorker);
    let round = fed.simulate_round().unwrap();
    assert_eq!(round.observed.len(), 2);
    for (name, avg) in round.average.iter() {
        let a = round.shared[0].get(name).unwrap();
        let b = round.shared[1].get(name).unwrap();
        for i in 0..avg.numel() {
            assert_eq!(avg.data()[i], (a.data()[i] + b.data()[i]) * 0.5);
        }
    }

    let mut fed = federation(2, Topology::Centralized, Vantage::Average);
    let round = fed.simulate_round().unwrap();
    assert_eq!(round.observed.len(), 1);
    assert_eq!(round.observed[0].source, Source::Average);
    assert_eq!(round.observed[0].batch.len(), 4);
    assert!(round.observed[0].grads.bit_identical(&average(&round.shared).unwrap()));
}

#[test]
fn ring_attacker_sees_both_neighbors() {
    let mut fed = federation(3, Topology::Ring, Vantage::PerWorker);
    let params = fed.params().clone();
    let round = fed.simulate_round().unwrap();
    let sources: Vec<Source> = round.observed.iter().map(|o| o.source).collect();
    assert_eq!(sources, [Source::Worker(1), Source::Worker(2)]);
    // workers own samples j, j+3, ..; the first round uses the first two
    for (obs, j) in round.observed.iter().zip([1, 2]) {
        let batch = fed.dataset.batch(&[j, j + 3], &fed.spec).unwrap();
        let direct = batch.gradients(&fed.spec, &params).unwrap();
        assert!(obs.grads.bit_identical(&direct));
    }
}

#[test]
fn workers_stay_synchronized_and_divergence_is_caught() {
    let mut fed = federation(3, Topology::Centralized, Vantage::PerWorker);
    let start = fed.params().clone();
    for _ in 0..5 {
        fed.simulate_round().unwrap();
        let w0 = fed.workers[0].params.clone();
        assert!(fed.workers.iter().all(|w| w.params.bit_identical(&w0)));
    }
    assert!(!fed.params().bit_identical(&start));
    fed.workers[2].params.get_mut("fc0.bias").unwrap().data_mut()[0] += 1e-12;
    assert!(matches!(fed.simulate_round(), Err(Error::WorkerDivergence(2))));
}

#[test]
fn stage_zero_is_the_fresh_model_and_offline_equals_live() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("train.steps = 10\noutput.dir = {}\nworkers = 2\n", dir.path().display());
    let cfg = config(&text);
    let records = run_training_stage_sweep(&cfg, &[0.0, 0.5]).unwrap();

    let fresh = init_params(&cfg.model, gradleak::harness::derive_seed(cfg.seed, "init", 0)).unwrap();
    let saved = load_tensors(&records[0].0.params_path).unwrap();
    assert!(saved.bit_identical(&fresh));
    let grads = load_tensors(&records[0].0.grads_path).unwrap();
    let direct = true_gradients(
        &cfg.model,
        &fresh,
        &records[0].0.batch.truth(&fresh).unwrap(),
        &records[0].0.batch.targets(&cfg.model).unwrap(),
    )
    .unwrap();
    assert!(grads.bit_identical(&direct));

    for (snap, offline) in &records {
        let mut live_cfg = cfg.clone();
        live_cfg.train_stage = snap.stage;
        let (live, live_result) = run_scenario(&live_cfg, None).unwrap();
        assert_eq!(live.round, snap.round);
        assert_eq!(live.report.mse.to_bits(), offline.report.mse.to_bits());
        assert_eq!(live.final_distance.to_bits(), offline.final_distance.to_bits());

        let params = load_tensors(&snap.params_path).unwrap();
        let grads = load_tensors(&snap.grads_path).unwrap();
        let (again, _, _) = attack_gradients(&cfg, &params, &grads, &snap.batch).unwrap();
        assert!(again.x.bit_eq(&live_result.x));
        assert_eq!(again.labels, live_result.labels);
        let d = |r: &gradleak::attack::AttackResult| r.trace.iter().map(|t| t.distance.to_bits()).collect::<Vec<_>>();
        assert_eq!(d(&again), d(&live_result));
    }
}

#[test]
fn sweeps_are_deterministic_and_record_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "output.dir = {}\noutput.timing = false\nattack.iterations = 20\n\
         sweep.defense.variance = 1e-4, 1e-3, 1e-2, 1e-1\nsweep.defense.kind = gaussian, laplacian\n",
        dir.path().display()
    );
    let raw = RawConfig::parse(&text).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let serial = run_sweep(&raw, &a, 0).unwrap();
    run_sweep(&raw, &b, 4).unwrap();
    assert_eq!(serial.len(), 8);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().next().unwrap().contains("layer.fc0.weight.mse"));
    assert!(!text.contains("elapsed_ms"));

    let single = RawConfig::parse(&format!("output.dir = {}\nattack.iterations = 5\n", dir.path().display())).unwrap();
    assert_eq!(run_sweep(&single, &a, 4).unwrap().len(), 1);

    // asking for an unobserved gradient fails that row only
    let bad = RawConfig::parse(&format!(
        "output.dir = {}\nattack.iterations = 5\nsweep.target = 0, 3\n",
        dir.path().display()
    ))
    .unwrap();
    let rows = run_sweep(&bad, &a, 2).unwrap();
    assert!(rows[0].outcome.is_ok());
    assert!(rows[1].outcome.as_ref().unwrap_err().contains("target 3"));
    let csv = fs::read_to_string(&a).unwrap();
    assert!(csv.lines().nth(2).unwrap().contains("target 3"));
}

#[test]
fn observation_target_is_checked() {
    let cfg = config("workers = 2\n");
    let mut fed = build_federation(&cfg).unwrap();
    let round = fed.simulate_round().unwrap();
    assert!(target(&cfg, &round).is_ok());
    let mut far = cfg.clone();
    far.target = 2;
    assert!(target(&far, &round).is_err());
}

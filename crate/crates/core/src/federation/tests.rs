use super::*;
use crate::corpus::Label;
use crate::peft::{attach, SchemeKind, SchemeSpec};
use crate::refmodel::{init, ModelConfig};

fn sample(id: usize, ids: Vec<u32>, vulnerable: bool) -> EncodedSample {
    EncodedSample {
        sample_id: format!("t{id}"),
        ids,
        label: if vulnerable {
            Label::Vulnerable
        } else {
            Label::Secure
        },
        category: if vulnerable {
            "CWE-20".into()
        } else {
            crate::corpus::SECURE.into()
        },
    }
}

/// Samples whose label is whether token 2 occurs.
fn toy_samples(n: usize, seed: u64) -> Vec<EncodedSample> {
    let mut rng = rng::stream(seed, &[1]);
    (0..n)
        .map(|i| {
            let vulnerable = rng.random_bool(0.5);
            let len = rng.random_range(2..6);
            let mut ids: Vec<u32> = (0..len).map(|_| rng.random_range(3..20)).collect();
            if vulnerable {
                ids[0] = 2;
            }
            sample(i, ids, vulnerable)
        })
        .collect()
}

fn toy_clients(n_clients: usize, per_client: usize, seed: u64) -> Vec<ClientData> {
    (0..n_clients)
        .map(|c| ClientData {
            client_id: c,
            samples: toy_samples(per_client + c % 3, seed * 100 + c as u64),
        })
        .collect()
}

fn toy_model(kind: SchemeKind) -> ParamSet {
    let base = init(&ModelConfig {
        vocab_size: 20,
        embed_dim: 6,
        n_blocks: 1,
        hidden_dim: 8,
        n_classes: 2,
        max_len: 8,
        seed: 4,
    })
    .unwrap();
    attach(&SchemeSpec::new(kind), &base).unwrap()
}

fn toy_config(algorithm: Algorithm, rounds: usize) -> FederationConfig {
    FederationConfig {
        n_clients: 6,
        rounds,
        select_fraction: 0.5,
        local_epochs: 1,
        batch_size: 4,
        learning_rate: 0.1,
        algorithm,
        seed: 9,
        ..FederationConfig::default()
    }
}

fn bits(v: &FlatVector) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn selection_counts_and_determinism() {
    let c = FederationConfig::default();
    let s = select_clients(3, &c);
    assert_eq!(s.len(), 5);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s, select_clients(3, &c));
    let all = FederationConfig {
        select_fraction: 1.0,
        ..c.clone()
    };
    assert_eq!(select_clients(0, &all), (0..10).collect::<Vec<_>>());
    let third = FederationConfig {
        n_clients: 9,
        select_fraction: 1.0 / 3.0,
        ..c
    };
    assert_eq!(third.selection_count(), 3);
}

#[test]
fn selection_frequency_is_uniform() {
    let c = FederationConfig::default();
    let rounds = 1000;
    let mut counts = [0usize; 10];
    for r in 0..rounds {
        for id in select_clients(r, &c) {
            counts[id] += 1;
        }
    }
    let f = 0.5;
    let sd = (f * (1.0 - f) / rounds as f64).sqrt();
    for c in counts {
        assert!(
            (c as f64 / rounds as f64 - f).abs() < 3.0 * sd,
            "{counts:?}"
        );
    }
}

#[test]
fn fedprox_examples() {
    let w = FlatVector::new(vec![3.0, 1.0]);
    let g = FlatVector::new(vec![1.0, 1.0]);
    assert_eq!(
        fedprox_term(&w, &g, 0.0).unwrap(),
        (0.0, FlatVector::new(vec![0.0, 0.0]))
    );
    assert_eq!(
        fedprox_term(&w, &w, 1.5).unwrap(),
        (0.0, FlatVector::new(vec![0.0, 0.0]))
    );
    let (loss, grad) = fedprox_term(&w, &g, 2.0).unwrap();
    assert_eq!(loss, 4.0);
    assert_eq!(grad.as_slice(), &[4.0, 0.0]);
    assert!(fedprox_term(&w, &FlatVector::zeros(3), 1.0).is_err());
}

#[test]
fn moon_examples() {
    let z = [1.0, 0.0];
    let (l, _) = moon_term(&z, &[0.0, 1.0], Some(&[0.0, -1.0]), 0.5, 1.5).unwrap();
    assert!((l - 1.5 * std::f64::consts::LN_2).abs() < 1e-15);
    let (l, _) = moon_term(&z, &[2.0, 0.0], Some(&[-1.0, 0.0]), 1.0, 0.7).unwrap();
    assert!((l - 0.7 * (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
    assert_eq!(
        moon_term(&z, &[1.0, 0.0], None, 1.0, 1.0).unwrap(),
        (0.0, vec![0.0, 0.0])
    );
    assert!(matches!(
        moon_term(&z, &z, Some(&z), 0.0, 1.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn moon_gradient_matches_finite_differences() {
    let z = [0.3, -1.2, 0.8];
    let zg = [1.0, 0.5, -0.2];
    let zp = [-0.4, 0.9, 1.1];
    let (_, g) = moon_term(&z, &zg, Some(&zp), 0.5, 1.3).unwrap();
    for i in 0..3 {
        let mut a = z;
        let mut b = z;
        a[i] += 1e-6;
        b[i] -= 1e-6;
        let num = (moon_term(&a, &zg, Some(&zp), 0.5, 1.3).unwrap().0
            - moon_term(&b, &zg, Some(&zp), 0.5, 1.3).unwrap().0)
            / 2e-6;
        assert!((num - g[i]).abs() < 1e-8, "{num} vs {}", g[i]);
    }
}

fn update(id: usize, v: Vec<f64>, n: usize) -> RoundUpdate {
    RoundUpdate {
        client_id: id,
        hot_params: FlatVector::new(v),
        n_samples: n,
        train_loss: 0.5,
    }
}

#[test]
fn fedavg_examples() {
    let v = vec![0.1, -2.5, 3.0];
    let same: Vec<RoundUpdate> = (0..7).map(|i| update(i, v.clone(), i + 1)).collect();
    let out = aggregate_fedavg(&same).unwrap();
    for (a, b) in out.iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
    let out = aggregate_fedavg(&[update(0, vec![0.0], 1), update(1, vec![4.0], 3)]).unwrap();
    assert_eq!(out.as_slice(), &[3.0]);
    assert_eq!(
        aggregate_fedavg(&[update(4, v.clone(), 2)])
            .unwrap()
            .as_slice(),
        v.as_slice()
    );
    let a = [
        update(2, vec![1.0, 0.3], 3),
        update(0, vec![0.7, 0.1], 5),
        update(1, vec![0.2, 0.9], 2),
    ];
    let b = [a[1].clone(), a[2].clone(), a[0].clone()];
    assert_eq!(
        bits(&aggregate_fedavg(&a).unwrap()),
        bits(&aggregate_fedavg(&b).unwrap())
    );
    assert!(aggregate_fedavg(&[]).is_err());
}

#[test]
fn update_wire_format() {
    let u = update(3, vec![1.5, -0.25, 7.0], 12);
    let bytes = u.encode();
    assert_eq!(bytes.len(), RoundUpdate::HEADER_BYTES + 3 * 8);
    assert_eq!(RoundUpdate::HEADER_BYTES, 36);
    assert_eq!(RoundUpdate::decode(&bytes).unwrap(), u);
    let mut bad = bytes.clone();
    bad[0] = b'x';
    assert!(RoundUpdate::decode(&bad).is_err());
    assert!(RoundUpdate::decode(&bytes[..bytes.len() - 1]).is_err());
}

fn direction(axis: usize, dim: usize, jitter: f64) -> FlatVector {
    let mut v = vec![jitter; dim];
    v[axis] = 1.0;
    FlatVector::new(v)
}

#[test]
fn clusamp_one_per_separated_cluster() {
    let dirs: Vec<FlatVector> = (0..10)
        .map(|c| direction(c / 2, 6, 0.01 * (c % 2) as f64))
        .collect();
    let sizes = vec![10; 10];
    for seed in 0..20 {
        let mut rng = rng::stream(seed, &[]);
        let chosen = clusamp_select(&sizes, Some(&dirs), 5, 5, &mut rng).unwrap();
        let mut groups: Vec<usize> = chosen.iter().map(|c| c / 2).collect();
        groups.dedup();
        assert_eq!(groups, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn clusamp_equal_sizes_is_uniform() {
    let sizes = vec![7; 10];
    let trials = 2000;
    let mut counts = [0usize; 10];
    for seed in 0..trials {
        let mut rng = rng::stream(seed, &[]);
        let chosen = clusamp_select(&sizes, None, 5, 5, &mut rng).unwrap();
        assert_eq!(chosen.len(), 5);
        for c in chosen {
            counts[c] += 1;
        }
    }
    let sd = (0.25 / trials as f64).sqrt();
    for c in counts {
        assert!(
            (c as f64 / trials as f64 - 0.5).abs() < 4.0 * sd,
            "{counts:?}"
        );
    }
}

#[test]
fn clusamp_split_follows_mass() {
    // 8 clients along one direction, 2 along another, equal sizes
    let dirs: Vec<FlatVector> = (0..10)
        .map(|c| direction(usize::from(c >= 8), 3, 0.0))
        .collect();
    let sizes = vec![5; 10];
    let trials = 300u64;
    let mut in_big = 0usize;
    let mut per_client = [0usize; 10];
    for seed in 0..trials {
        let mut rng = rng::stream(seed, &[]);
        let chosen = clusamp_select(&sizes, Some(&dirs), 2, 5, &mut rng).unwrap();
        in_big += chosen.iter().filter(|&&c| c < 8).count();
        for c in chosen {
            per_client[c] += 1;
        }
    }
    // oracle: simulate slots assigned independently with probability equal to
    // the big cluster's mass share
    let mut sim = rng::stream(77, &[]);
    let mut sim_big = 0usize;
    for _ in 0..trials {
        sim_big += (0..5).filter(|_| sim.random_bool(0.8)).count();
    }
    let ours = in_big as f64 / trials as f64;
    let oracle = sim_big as f64 / trials as f64;
    assert!((ours - oracle).abs() < 0.15, "{ours} vs {oracle}");
    assert!((ours - 4.0).abs() < 1e-12);
    // within the big cluster every client is equally likely
    for c in per_client.iter().take(8) {
        let f = *c as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.12, "{per_client:?}");
    }
}

#[test]
fn clusamp_rejects_bad_quota() {
    let mut rng = rng::stream(0, &[]);
    assert!(clusamp_select(&[1, 2, 3], None, 4, 3, &mut rng).is_err());
    assert!(clusamp_select(&[1, 2, 3], None, 1, 4, &mut rng).is_err());
}

#[test]
fn slot_allocation() {
    assert_eq!(allocate_slots(5, &[80.0, 20.0], &[8, 2]), vec![4, 1]);
    assert_eq!(allocate_slots(5, &[99.0, 1.0], &[8, 2]), vec![4, 1]);
    assert_eq!(allocate_slots(5, &[10.0, 90.0], &[8, 2]), vec![3, 2]);
    let s = allocate_slots(6, &[1.0, 1.0, 1.0], &[1, 5, 5]);
    assert_eq!(s.iter().sum::<usize>(), 6);
    assert_eq!(s[0], 1);
}

#[test]
fn fedcross_examples() {
    let a = FlatVector::new(vec![0.0, 0.0]);
    let b = FlatVector::new(vec![2.0, 2.0]);
    let (pool, g) = fedcross_round(&[a.clone(), a.clone()], &[a.clone(), b.clone()], 0.5).unwrap();
    assert_eq!(pool, vec![FlatVector::new(vec![1.0, 1.0]); 2]);
    assert_eq!(g.as_slice(), &[1.0, 1.0]);

    let trained = vec![
        FlatVector::new(vec![1.0, 0.2]),
        FlatVector::new(vec![-0.3, 1.0]),
        FlatVector::new(vec![0.5, 0.5]),
    ];
    let (pool, _) = fedcross_round(&trained, &trained, 1.0).unwrap();
    assert_eq!(pool, trained);

    let same = vec![trained[0].clone(); 3];
    let (pool, g) = fedcross_round(&same, &same, 0.9).unwrap();
    for v in pool.iter().chain([&g]) {
        for (x, y) in v.iter().zip(trained[0].iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
    assert!(matches!(
        fedcross_round(&same, &trained[..2], 0.9),
        Err(Error::State(_))
    ));

    // model 0 is least similar to model 1; model 2 ties 0 and 1 ... pick by cosine
    let (pool, _) = fedcross_round(&trained, &trained, 0.0).unwrap();
    assert_eq!(pool[0], trained[1]);
    assert_eq!(pool[1], trained[0]);
    let c20 = cosine_slices(trained[2].as_slice(), trained[0].as_slice()).unwrap();
    let c21 = cosine_slices(trained[2].as_slice(), trained[1].as_slice()).unwrap();
    assert_eq!(
        pool[2],
        if c21 < c20 {
            trained[1].clone()
        } else {
            trained[0].clone()
        }
    );
}

#[test]
fn fedmut_examples() {
    let w = FlatVector::new(vec![0.5, 2.0, -1.0]);
    let delta = FlatVector::new(vec![0.3, -0.1, 0.7]);
    let mut rng = rng::stream(3, &[]);
    let none = fedmut_mutate(
        &w,
        &delta,
        5,
        0.0,
        &[3],
        MaskGranularity::Parameter,
        &mut rng,
    )
    .unwrap();
    assert_eq!(none.len(), 5);
    assert!(none.variants().iter().all(|v| *v == w));

    for n in [1, 2, 5, 6] {
        let set = fedmut_mutate(
            &w,
            &delta,
            n,
            1.0,
            &[1, 2],
            MaskGranularity::Segment,
            &mut rng,
        )
        .unwrap();
        assert_eq!(set.variants().len(), n);
        assert_eq!(bits(&set.mean()), bits(&w));
        let items: Vec<_> = set.variants();
        let items: Vec<(&FlatVector, f64)> = items.iter().map(|v| (v, 1.0)).collect();
        let numeric = weighted_sum(&items).unwrap();
        for (a, b) in numeric.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for m in &set.masks {
            assert_eq!(m[1], m[2]);
        }
    }

    // hand arithmetic: delta [1, -1], beta 1, mask (+, -) gives offset [1, 1]
    let w = FlatVector::new(vec![0.0, 0.0]);
    let delta = FlatVector::new(vec![1.0, -1.0]);
    let set = mutate_with_masks(&w, &delta, vec![vec![1.0, -1.0]], 1.0, false).unwrap();
    assert_eq!(
        set.variants(),
        vec![
            FlatVector::new(vec![1.0, 1.0]),
            FlatVector::new(vec![-1.0, -1.0])
        ]
    );

    // a seeded draw reproduces the same arithmetic from its recorded mask
    let mut rng = rng::stream(11, &[]);
    let set = fedmut_mutate(
        &w,
        &delta,
        2,
        1.0,
        &[2],
        MaskGranularity::Parameter,
        &mut rng,
    )
    .unwrap();
    let m = &set.masks[0];
    assert_eq!(set.variants()[0].as_slice(), &[m[0], -m[1]]);
    assert_eq!(set.variants()[1].as_slice(), &[-m[0], m[1]]);
}

#[test]
fn local_training_contracts() {
    let p = toy_model(SchemeKind::Full);
    let samples = toy_samples(13, 1);
    let config = toy_config(Algorithm::FedAvg, 1);
    let frozen = FederationConfig {
        learning_rate: 0.0,
        ..config.clone()
    };
    let u = local_train(0, &samples, &p, &frozen, &[], &mut rng::stream(1, &[])).unwrap();
    assert_eq!(u.hot_params, p.hot_vector());
    assert_eq!(u.n_samples, 13);

    let a = local_train(0, &samples, &p, &config, &[], &mut rng::stream(1, &[])).unwrap();
    let b = local_train(0, &samples, &p, &config, &[], &mut rng::stream(1, &[])).unwrap();
    assert_eq!(bits(&a.hot_params), bits(&b.hot_params));
    assert_ne!(a.hot_params, p.hot_vector());

    let hook = ProximalHook {
        global_hot: p.hot_vector(),
        mu: 0.0,
    };
    let c = local_train(0, &samples, &p, &config, &[&hook], &mut rng::stream(1, &[])).unwrap();
    assert_eq!(bits(&a.hot_params), bits(&c.hot_params));
    assert_eq!(a.train_loss.to_bits(), c.train_loss.to_bits());
    assert!(local_train(0, &[], &p, &config, &[], &mut rng::stream(1, &[])).is_err());
}

#[test]
fn zero_rounds_reports_initial_model() {
    let p = toy_model(SchemeKind::Lora);
    let clients = toy_clients(6, 10, 1);
    let test = toy_samples(30, 99);
    let out = run_federation(&toy_config(Algorithm::FedAvg, 0), &p, &clients, &test, None).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.report, evaluate_model(&p, &test).unwrap());
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let p = toy_model(SchemeKind::Ia3);
    let clients = toy_clients(6, 10, 2);
    let test = toy_samples(30, 98);
    for alg in Algorithm::ALL {
        let mut c = toy_config(alg, 3);
        c.workers = 1;
        let a = run_federation(&c, &p, &clients, &test, None).unwrap();
        c.workers = 4;
        let b = run_federation(&c, &p, &clients, &test, None).unwrap();
        assert_eq!(a.trace, b.trace, "{alg:?}");
        assert_eq!(
            bits(&a.state.global.hot_vector()),
            bits(&b.state.global.hot_vector())
        );
        assert_eq!(a.trace.len(), 3);
        assert!(a.trace.iter().all(|r| r.selected.len() == 3));
    }
}

#[test]
fn degenerate_algorithms_match_fedavg_bitwise() {
    let p = toy_model(SchemeKind::Full);
    let clients = toy_clients(6, 10, 3);
    let test = toy_samples(30, 97);
    let base =
        run_federation(&toy_config(Algorithm::FedAvg, 4), &p, &clients, &test, None).unwrap();
    let mut prox = toy_config(Algorithm::FedProx, 4);
    prox.algorithm_params.mu = 0.0;
    let mut moon = toy_config(Algorithm::Moon, 4);
    moon.algorithm_params.contrastive_weight = 0.0;
    for c in [prox, moon] {
        let out = run_federation(&c, &p, &clients, &test, None).unwrap();
        assert_eq!(
            bits(&out.state.global.hot_vector()),
            bits(&base.state.global.hot_vector())
        );
        for (x, y) in out.trace.iter().zip(&base.trace) {
            assert_eq!(x.mean_train_loss.to_bits(), y.mean_train_loss.to_bits());
            assert_eq!(x.f1.to_bits(), y.f1.to_bits());
        }
    }
}

#[test]
fn fedcross_without_mixing_is_independent_training() {
    let p = toy_model(SchemeKind::Full);
    let clients = toy_clients(4, 8, 4);
    let test = toy_samples(20, 96);
    let mut c = toy_config(Algorithm::FedCross, 3);
    c.n_clients = 4;
    c.select_fraction = 1.0;
    c.algorithm_params.cross_alpha = 1.0;
    let out = run_federation(&c, &p, &clients, &test, None).unwrap();
    let Extras::FedCross { pool } = &out.state.extras else {
        panic!("fedcross state expected");
    };
    for (k, client) in clients.iter().enumerate() {
        let mut model = p.clone();
        for round in 1..=3u64 {
            let mut rng = rng::stream(c.seed, &[rng::TAG_LOCAL, round, k as u64]);
            let u = local_train(k, &client.samples, &model, &c, &[], &mut rng).unwrap();
            model.set_hot_vector(&u.hot_params).unwrap();
        }
        assert_eq!(bits(&pool[k]), bits(&model.hot_vector()));
    }
}

#[test]
fn moon_and_fedmut_state() {
    let p = toy_model(SchemeKind::Full);
    let clients = toy_clients(6, 10, 5);
    let test = toy_samples(20, 95);
    let out = run_federation(&toy_config(Algorithm::Moon, 2), &p, &clients, &test, None).unwrap();
    let Extras::Moon { previous } = &out.state.extras else {
        panic!()
    };
    let trained: std::collections::BTreeSet<usize> =
        out.trace.iter().flat_map(|r| r.selected.clone()).collect();
    assert_eq!(
        previous
            .keys()
            .copied()
            .collect::<std::collections::BTreeSet<_>>(),
        trained
    );

    let out = run_federation(&toy_config(Algorithm::FedMut, 2), &p, &clients, &test, None).unwrap();
    let Extras::FedMut { previous_global } = &out.state.extras else {
        panic!()
    };
    assert_ne!(*previous_global, out.state.global.hot_vector());
}

#[test]
fn upload_size_tracks_hot_count() {
    let clients = toy_clients(6, 10, 6);
    let test = toy_samples(20, 94);
    for kind in SchemeKind::ALL {
        let p = toy_model(kind);
        let out =
            run_federation(&toy_config(Algorithm::FedAvg, 1), &p, &clients, &test, None).unwrap();
        assert_eq!(
            out.trace[0].upload_bytes,
            3 * (RoundUpdate::HEADER_BYTES + 8 * p.hot_count())
        );
    }
}

#[test]
fn checkpoints_and_validation() {
    let p = toy_model(SchemeKind::Full);
    let clients = toy_clients(6, 10, 7);
    let test = toy_samples(20, 93);
    let dir = tempfile::tempdir().unwrap();
    let mut c = toy_config(Algorithm::FedCross, 4);
    c.checkpoint_every = 2;
    run_federation(&c, &p, &clients, &test, Some(dir.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * (1 + 3));
    assert_eq!(names[0], "round-0002-pool-0.ckpt");
    assert!(names.contains(&"round-0004.ckpt".to_string()));

    assert!(matches!(
        run_federation(&c, &p, &clients[..5], &test, None),
        Err(Error::Config(_))
    ));
    let mut bad = c.clone();
    bad.select_fraction = 0.0;
    assert!(run_federation(&bad, &p, &clients, &test, None).is_err());
    let mut bad = c.clone();
    bad.algorithm_params.n_clusters = Some(4);
    assert!(bad.validate().is_err());
    let mut bad = c;
    bad.algorithm_params.tau = 0.0;
    assert!(bad.validate().is_err());
}

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedccea::aam::{aam_forward, build_inputs, extract_quality, train_aam, AamParams, AamTrainConfig};
use fedccea::baselines::{loo_values, UtilityFn, ValuationMethod};
use fedccea::config::{parse_config, RunConfig, Scenario};
use fedccea::datasets::{generate_synthetic, partition, ClassesPerClient, ClientPartition, PartitionSpec};
use fedccea::experiments::{
    cost_csv, partial_csv, partial_participation_curves, removal_csv, skewness_report, zero_exclusion_retrain, CostRow,
    MethodCci, Participation,
};
use fedccea::fl::{train_federated, FlConfig, Schedule};
use fedccea::nn::{evaluate_accuracy, init_mlp, sgd_train, MlpSpec, SgdConfig};
use fedccea::pipeline::{prepare, seed_tag, MethodValuation, FEDCCEA};
use fedccea::rng::{derive_seed, RngStream};
use fedccea::simulator::{Fingerprint, SimRecord, SimStore};

fn desk(name: &str) -> RunConfig {
    parse_config(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line evaluation of the AAM, written without ndarray algebra.
fn hand_forward(omega: &[f64], fc1: &Array2<f64>, b1: &[f64], w2: &[f64], b2: f64, psi: &Array2<f64>) -> f64 {
    let (n, rounds) = psi.dim();
    let h: Vec<f64> = (0..rounds)
        .map(|r| sigmoid((0..n).map(|i| psi[[i, r]] * omega[i]).sum()))
        .collect();
    let z: Vec<f64> = (0..b1.len())
        .map(|j| b1[j] + (0..rounds).map(|r| fc1[[j, r]] * h[r]).sum::<f64>())
        .collect();
    b2 + z.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>()
}

#[test]
fn aam_forward_matches_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let (n, rounds) = (rng.random_range(1..=7), rng.random_range(1..=6));
        let mut p = AamParams::init(n, rounds, &mut RngStream::new(case));
        p.fc1_bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.out_bias = rng.random_range(-1.0..1.0);
        let psi = Array2::from_shape_simple_fn((n, rounds), || rng.random_range(0.0..2.0));
        let expected = hand_forward(
            p.omega.as_slice().unwrap(),
            &p.fc1_weights,
            p.fc1_bias.as_slice().unwrap(),
            p.out_weights.as_slice().unwrap(),
            p.out_bias,
            &psi,
        );
        assert!((aam_forward(&p, psi.view()).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn bumping_extracted_quality_moves_the_prediction() {
    let mut p = AamParams::init(4, 3, &mut RngStream::new(8));
    let psi = Array2::from_shape_fn((4, 3), |(i, r)| if r < 2 { 0.3 + 0.1 * i as f64 } else { 0.0 });
    let before = aam_forward(&p, psi.view()).unwrap();
    let mut omega = extract_quality(&p);
    omega[2] += 0.25;
    let expected = hand_forward(
        &omega,
        &p.fc1_weights,
        p.fc1_bias.as_slice().unwrap(),
        p.out_weights.as_slice().unwrap(),
        p.out_bias,
        &psi,
    );
    p.omega = Array1::from(omega);
    let after = aam_forward(&p, psi.view()).unwrap();
    assert_ne!(before, after);
    assert!((after - expected).abs() < 1e-12);
}

#[test]
fn planted_quality_is_recovered() {
    let q = [0.9, 0.9, 0.1, 0.1];
    let (rounds, sims) = (5, 80);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut records = Vec::new();
    for s in 1..=sims {
        let mut progress = 0.0;
        for r in 1..=rounds {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            progress += x.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            // accuracy grows with quality-weighted data seen so far, normalized into [0, 1]
            let acc = 0.2 + 0.7 * progress / (rounds as f64 * q.iter().sum::<f64>());
            records.push(SimRecord { s, r, x, acc });
        }
    }
    let fingerprint = Fingerprint {
        n_clients: 4,
        rounds,
        simulations: sims,
        master_seed: 0,
        dataset_hash: "planted".into(),
    };
    let inputs = build_inputs(&SimStore::new(fingerprint, records).unwrap()).unwrap();
    let cfg = AamTrainConfig {
        lr: 0.05,
        batch_size: 4,
        ..AamTrainConfig::default()
    };
    let trained = train_aam(&inputs, &cfg).unwrap();
    let w = extract_quality(&trained.params);
    assert!(w.iter().all(|&x| x >= 0.0));
    assert!(w[0].min(w[1]) > w[2].max(w[3]), "omega {w:?}");
}

#[test]
fn centralized_training_on_tight_blobs() {
    let data = generate_synthetic(6, 400, 16, 0.05, 12).unwrap();
    let (train, test) = data.split_at(6 * 300);
    let spec = MlpSpec::new(vec![16, 32, 6]).unwrap();
    let mut params = init_mlp(&spec, &mut RngStream::new(1));
    for _ in 0..20 {
        params = sgd_train(
            params,
            train.view(),
            &SgdConfig {
                epochs: 1,
                batch_size: 32,
                lr: 0.1,
            },
        )
        .unwrap();
    }
    assert!(evaluate_accuracy(&params, &test).unwrap() >= 0.9);
}

#[test]
fn clean_simulations_improve_over_rounds() {
    let prep = prepare(desk("desk-clean.json")).unwrap();
    let mut cfg = prep.config.clone();
    cfg.simulations = 5;
    let prep = prepare(cfg).unwrap();
    let store = prep.simulate().unwrap();
    let r = store.rounds();
    for sim in store.records.chunks(r) {
        let first: f64 = sim[..3].iter().map(|x| x.acc).sum::<f64>() / 3.0;
        let last: f64 = sim[r - 3..].iter().map(|x| x.acc).sum::<f64>() / 3.0;
        assert!(last > first, "sim {}: {first} -> {last}", sim[0].s);
    }
}

fn small_fixture() -> (Vec<ClientPartition>, fedccea::datasets::LabeledDataset, FlConfig) {
    let data = generate_synthetic(3, 200, 4, 0.15, 21).unwrap();
    let (train, test) = data.split_at(3 * 100);
    let parts = partition(
        &train,
        &PartitionSpec {
            n_clients: 3,
            classes_per_client: ClassesPerClient::All,
            samples_per_client: 90,
            seed: 2,
        },
    )
    .unwrap();
    let cfg = FlConfig {
        n_clients: 3,
        rounds: 4,
        local_epochs: 1,
        batch_size: 10,
        lr: 0.1,
        model: MlpSpec::new(vec![4, 8, 3]).unwrap(),
        seed: 4,
    };
    (parts, test, cfg)
}

#[test]
fn loo_undervalues_duplicated_clients() {
    let (mut parts, test, cfg) = small_fixture();
    // client 1 becomes an exact copy of client 0, client 2 keeps only its first few samples
    parts[1] = ClientPartition {
        client_id: 1,
        ..parts[0].clone()
    };
    parts[2] = ClientPartition {
        client_id: 2,
        dataset: parts[2].dataset.select(&[0, 1, 2]),
        source_indices: parts[2].source_indices[..3].to_vec(),
        ..parts[2].clone()
    };
    let u = UtilityFn::federated(&parts, &test, &cfg);
    let loo = loo_values(&u).unwrap();
    let joint = u.value(&[0, 1, 2]).unwrap() - u.value(&[2]).unwrap();
    assert_eq!(loo.values[0], loo.values[1]);
    assert!(joint > 0.2, "the pair matters: {joint}");
    assert!(loo.values[0].abs() < joint / 4.0, "loo {:?}, joint {joint}", loo.values);
}

#[test]
fn single_remaining_client_beats_chance() {
    let (parts, test, cfg) = small_fixture();
    let entries = vec![MethodCci {
        method: "one".into(),
        cci: vec![0.0, 0.0, 1.0],
    }];
    let report = zero_exclusion_retrain(&entries, &parts, &test, &cfg).unwrap();
    let single = train_federated(&parts, &Schedule::from_members(3, &[2]), &test, &cfg).unwrap();
    assert_eq!(report.rows[0].accuracy, Some(single.final_accuracy()));
    assert!(single.final_accuracy() > 1.0 / 3.0);
}

fn header(csv: &str) -> &str {
    csv.lines().next().unwrap()
}

#[test]
fn csv_schemas() {
    let (parts, test, cfg) = small_fixture();
    let report = skewness_report(vec![MethodCci {
        method: FEDCCEA.into(),
        cci: vec![0.2, 0.3, 0.5],
    }])
    .unwrap();
    assert_eq!(header(&report.to_csv()), "method,client_id,cci");
    assert_eq!(header(&report.summary_csv()), "method,min,max,gini,zero_count");
    let [least, most] =
        fedccea::experiments::client_removal_curves(&[2, 1, 0], &parts, &test, &cfg, &[0.0, 0.34], true).unwrap();
    let removal = removal_csv(&[("m".into(), least), ("m".into(), most)], 9);
    assert_eq!(header(&removal), "method,direction,fraction,seed,accuracy");
    assert_eq!(removal.lines().count(), 5);
    assert!(removal.lines().skip(1).all(|l| l.split(',').count() == 5 && l.contains(",9,")));
    let curves = partial_participation_curves(&[0.1, 0.2, 0.3], &parts, &test, &cfg, &[0.0, 0.34], 1, true).unwrap();
    assert_eq!(header(&partial_csv(&curves, 9)), "mode,direction,fraction,seed,accuracy");
    let cost = cost_csv(&[CostRow {
        method: "loo".into(),
        n: 3,
        fl_runs: 4,
    }]);
    assert_eq!(cost, "method,n,fl_runs\nloo,3,4\n");
}

#[test]
fn partial_removal_separates_under_label_noise() {
    let mut cfg = desk("desk.json");
    cfg.experiments.fractions = vec![0.0, 0.25, 0.375, 0.5];
    let prep = prepare(cfg).unwrap();
    let store = prep.simulate().unwrap();
    let (trained, _) = prep.train_aam(&store).unwrap();
    let curves = partial_participation_curves(
        trained.params.omega.as_slice().unwrap(),
        &prep.partitions,
        &prep.test,
        &prep.fl,
        &prep.config.experiments.fractions,
        derive_seed(prep.config.seed, seed_tag::PARTIAL),
        true,
    )
    .unwrap();
    let partial: Vec<_> = curves.iter().filter(|c| c.mode == Participation::Partial).collect();
    for &f in &[0.25, 0.375, 0.5] {
        let gap = partial[0].curve.accuracy_at(f).unwrap() - partial[1].curve.accuracy_at(f).unwrap();
        assert!(gap > 0.0, "fraction {f}: gap {gap}");
    }
}

#[test]
fn shapley_style_baselines_zero_out_more_clients_under_strong_noniid() {
    let mut cfg = desk("desk.json");
    cfg.partition.scenario = Scenario::StrongNoniid;
    cfg.partition.samples_per_client = None;
    let prep = prepare(cfg).unwrap();
    let store = prep.simulate().unwrap();
    let (trained, _) = prep.train_aam(&store).unwrap();
    let ours = prep.contributions(trained.params.omega.as_slice().unwrap()).unwrap();
    let zeros = |v: &MethodValuation| v.cci.iter().filter(|&&c| c == 0.0).count();
    let fedccea = zeros(&MethodValuation::from_values(FEDCCEA, &ours.v).unwrap());
    for method in [ValuationMethod::Loo, ValuationMethod::Tmc] {
        let values = prep.valuation(method).unwrap().values;
        let theirs = zeros(&MethodValuation::from_values(method.name(), &values).unwrap());
        assert!(theirs >= fedccea, "{}: {theirs} zero CCIs vs {fedccea}", method.name());
    }
}

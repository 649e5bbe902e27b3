use imind_core::baselines::{fit_least_squares, ridge_regression};
use imind_core::metrics::{accuracy, mean_average_precision};
use imind_core::preprocess::{compute_target_length, pad_wraparound};
use imind_core::synth::{average_repetitions, generate_dataset, GeneratorConfig, VoxelRecord};
use imind_core::Tensor;

fn padded(records: &[VoxelRecord], target: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| pad_wraparound(&r.voxels, target, 16).unwrap().0)
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn noiseless_linear_probe_is_perfect() {
    let cfg = GeneratorConfig {
        noise_std: 0.0,
        salience_std: 0.0,
        train_stimuli_per_subject: 100,
        test_stimuli: 40,
        repetitions: 1,
        seed: 17,
        ..GeneratorConfig::default()
    };
    let (train, test, gt) = generate_dataset(&cfg).unwrap();
    let q = &gt.q;
    let qtq = q.transpose().unwrap().matmul(q).unwrap();
    assert!(qtq.max_abs_diff(&Tensor::eye(q.shape()[1])) <= 1e-12);

    let train = average_repetitions(&train.records).unwrap();
    let test = average_repetitions(&test.records).unwrap();
    let lengths: Vec<usize> = train.iter().map(|r| r.voxels.len()).collect();
    let target = compute_target_length(&lengths, 16).unwrap();
    let (xtr, xte) = (padded(&train, target), padded(&test, target));

    let subj: Vec<usize> = train.iter().map(|r| r.subject).collect();
    let truth: Vec<usize> = test.iter().map(|r| r.subject).collect();
    let probe = fit_least_squares(&xtr, &subj, cfg.num_subjects, 1e-8).unwrap();
    assert_eq!(
        accuracy(&probe.predict(&xte).unwrap(), &truth).unwrap(),
        1.0
    );

    let labels = |rs: &[VoxelRecord]| {
        Tensor::from_rows(&rs.iter().map(VoxelRecord::label_vector).collect::<Vec<_>>()).unwrap()
    };
    let probe = ridge_regression(&xtr, &labels(&train), 1e-8).unwrap();
    let report = mean_average_precision(&probe.scores(&xte).unwrap(), &labels(&test)).unwrap();
    assert_eq!(report.map, 1.0, "{report:?}");
}

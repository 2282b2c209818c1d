use vllm_lab::data::*;
use vllm_lab::noise::*;
use vllm_lab::{Error, Rng, Tensor};

fn centroid_scorer(m: &DatasetManifest) -> impl FnMut(&DatasetRecord) -> vllm_lab::Result<f64> {
    let s = CentroidScorer::fit(&m.records).unwrap();
    move |r| s.score(r)
}

/// Dataset where every corruption is pixel noise.
fn pixel_noise_dataset(seed: u64, count: usize, rate: f64, level: f64) -> DatasetManifest {
    let mut m = generate_dataset(seed, count, 0.0, 0.0).unwrap();
    let mut rng = Rng::new(seed + 1);
    for r in &mut m.records {
        if rng.bernoulli(rate) {
            *r = corrupt_with(r, CorruptionMode::PixelNoise, level, &mut rng).unwrap();
        }
    }
    m
}

fn pixel_error(r: &DatasetRecord) -> f64 {
    let truth = render(&r.spec);
    r.image.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64
}

#[test]
fn median_record_is_never_suspicious() {
    let scores: Vec<f64> = (0..9).map(|i| f64::from(i) * 1.5).collect();
    let stats = SuspicionStats::fit(&scores, 3.0).unwrap();
    assert_eq!(stats.median(), Some(6.0));
    for tau in [1e-9, 0.5, 3.0] {
        let s = SuspicionStats::fit(&scores, tau).unwrap();
        assert!(!s.is_suspicious(6.0).unwrap());
    }
}

#[test]
fn stats_preconditions() {
    assert!(matches!(SuspicionStats::fit(&[1.0; 7], 3.0), Err(Error::TooFewSamples { needed: 8, got: 7 })));
    assert!(matches!(SuspicionStats::unfitted(3.0).z(1.0), Err(Error::UnfittedStats)));
    let flat = SuspicionStats::fit(&[2.0; 8], 3.0).unwrap();
    assert!(flat.scale().unwrap() > 0.0);
    let rec = DatasetRecord::clean(0, SceneSpec::from_index(0));
    let mut calls = 0;
    let r = suspicion_score(&rec, &mut |_| {
        calls += 1;
        Ok(1.0)
    }, &SuspicionStats::unfitted(3.0));
    assert!(matches!(r, Err(Error::UnfittedStats)));
    assert_eq!(calls, 0);
}

#[test]
fn mad_scale_uses_the_normal_consistency_factor() {
    // |x - 5| = 0,1,1,2,2,3,3,4,4 around median 5; MAD = 2.
    let scores = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let s = SuspicionStats::fit(&scores, 3.0).unwrap();
    assert_eq!(s.scale(), Some(2.0 * 1.4826));
    assert!((s.z(9.0).unwrap() - 4.0 / (2.0 * 1.4826)).abs() < 1e-15);
}

#[test]
fn clean_data_rarely_looks_suspicious() {
    let m = generate_dataset(11, 1000, 0.0, 0.0).unwrap();
    let mut scorer = centroid_scorer(&m);
    let scores: Vec<f64> = m.records.iter().map(|r| scorer(r).unwrap()).collect();
    let stats = SuspicionStats::fit(&scores, 3.0).unwrap();
    let flagged = scores.iter().filter(|&&s| stats.is_suspicious(s).unwrap()).count();
    assert!(flagged as f64 <= 0.02 * 1000.0, "{flagged} flagged");
}

#[test]
fn corrupted_records_score_higher() {
    let m = generate_dataset(12, 500, 0.2, 0.5).unwrap();
    let mut scorer = centroid_scorer(&m);
    let (mut bad, mut good) = (Vec::new(), Vec::new());
    for r in &m.records {
        let s = scorer(r).unwrap();
        if r.corrupted { bad.push(s) } else { good.push(s) }
    }
    assert!(!bad.is_empty());
    assert!(median(&bad) > median(&good), "{} vs {}", median(&bad), median(&good));
}

#[test]
fn clean_set_is_a_fixed_point() {
    let m = generate_dataset(13, 200, 0.0, 0.0).unwrap();
    let mut rng = Rng::new(1);
    let channel = MeasurementChannel::CLEAN;
    let (out, report, _) = clean_training_set(
        &m,
        &RemeasurePolicy::default(),
        &mut centroid_scorer(&m),
        &mut |r| Ok(channel.measure(r, &mut rng)),
        3.0,
    )
    .unwrap();
    assert_eq!(out, m);
    assert_eq!(report.rows.len(), 200);
    assert_eq!(report.replaced(), 0);
}

#[test]
fn cleaning_reduces_pixel_error_of_noisy_records() {
    let m = pixel_noise_dataset(14, 300, 0.2, 0.5);
    let channel = MeasurementChannel {
        noise_level: 0.5,
        caption_swap_prob: 0.0,
    };
    let mut rng = Rng::new(2);
    let (out, report, _) = clean_training_set(
        &m,
        &RemeasurePolicy::default(),
        &mut centroid_scorer(&m),
        &mut |r| Ok(channel.measure(r, &mut rng)),
        3.0,
    )
    .unwrap();
    let corrupted: Vec<usize> = (0..m.records.len()).filter(|&i| m.records[i].corrupted).collect();
    assert!(!corrupted.is_empty());
    let before: f64 = corrupted.iter().map(|&i| pixel_error(&m.records[i])).sum();
    let after: f64 = corrupted.iter().map(|&i| pixel_error(&out.records[i])).sum();
    assert!(after < before, "{after} !< {before}");
    // Every record is reported once, in order, and nothing is dropped.
    assert_eq!(out.records.len(), m.records.len());
    let ids: Vec<u64> = report.rows.iter().map(|r| r.record_id).collect();
    assert_eq!(ids, (0..300).collect::<Vec<u64>>());
    for (row, rec) in report.rows.iter().zip(&out.records) {
        assert_eq!(row.record_id, rec.record_id);
        assert_eq!(row.dispersion.is_some(), row.action == Action::Replaced);
    }
}

#[test]
fn report_tsv_schema() {
    let m = pixel_noise_dataset(15, 40, 0.2, 0.5);
    let mut rng = Rng::new(3);
    let channel = MeasurementChannel::CLEAN;
    let (_, report, _) = clean_training_set(
        &m,
        &RemeasurePolicy::default(),
        &mut centroid_scorer(&m),
        &mut |r| Ok(channel.measure(r, &mut rng)),
        3.0,
    )
    .unwrap();
    let tsv = report.to_tsv();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("record_id\tscore\tz\taction\tdispersion"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 40);
    for r in rows {
        assert_eq!(r.len(), 5);
        assert!(r[3] == "kept" || r[3] == "replaced");
        assert_eq!(r[4].is_empty(), r[3] == "kept");
    }
}

#[test]
fn remeasure_failures_carry_the_record_id() {
    let m = pixel_noise_dataset(16, 50, 0.3, 0.8);
    let err = clean_training_set(
        &m,
        &RemeasurePolicy::default(),
        &mut centroid_scorer(&m),
        &mut |_| Err(Error::OutOfRange("sensor offline".into())),
        3.0,
    )
    .unwrap_err();
    match err {
        Error::Remeasure { record_id, message } => {
            assert!(m.records[record_id as usize].corrupted);
            assert!(message.contains("sensor offline"));
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn policy_validation() {
    let p = RemeasurePolicy { rounds: 1, ..Default::default() };
    assert!(p.validate().is_err());
    let p = RemeasurePolicy { delta: 0.0, ..Default::default() };
    assert!(p.validate().is_err());
}

#[test]
fn majority_caption_ties_keep_original() {
    assert_eq!(majority_caption("o", &["a", "a", "b"]), "a");
    assert_eq!(majority_caption("o", &["a", "b", "c"]), "o");
    assert_eq!(majority_caption("o", &["a", "b"]), "o");
}

#[test]
fn identical_measurements_have_zero_dispersion() {
    let img = render(&SceneSpec::from_index(3));
    assert_eq!(relative_dispersion(&[img.clone(), img.clone(), img]), 0.0);
}

fn noisy_query(seed: u64) -> DatasetRecord {
    let mut rng = Rng::new(seed);
    let clean = DatasetRecord::clean(seed, SceneSpec::from_index((seed % 160) as usize));
    corrupt_with(&clean, CorruptionMode::PixelNoise, 0.8, &mut rng).unwrap()
}

#[test]
fn test_phase_resolution_in_both_channel_regimes() {
    let stats = SuspicionStats::fit(&[0.0; 8], 3.0).unwrap();
    let mut score = |r: &DatasetRecord| Ok(pixel_error(r));
    let policy = RemeasurePolicy::default();
    let trials = 50;
    let (mut kept_clean_channel, mut averaged_noisy_channel) = (0, 0);
    for s in 0..trials {
        let q = noisy_query(s);
        let mut rng = Rng::new(100 + s);
        let (out, trace) = resolve_test_instance(&q, &policy, &mut score, &stats, &mut |r| {
            Ok(MeasurementChannel::CLEAN.measure(r, &mut rng))
        })
        .unwrap();
        assert!(trace.suspicious);
        if trace.action == Action::Kept && out == q && trace.dispersion == Some(0.0) {
            kept_clean_channel += 1;
        }
        let noisy = MeasurementChannel {
            noise_level: 0.5,
            caption_swap_prob: 0.0,
        };
        let (out, trace) = resolve_test_instance(&q, &policy, &mut score, &stats, &mut |r| Ok(noisy.measure(r, &mut rng))).unwrap();
        if trace.action == Action::Replaced && trace.dispersion.unwrap() > policy.delta && pixel_error(&out) < pixel_error(&q) {
            averaged_noisy_channel += 1;
        }
    }
    assert_eq!(kept_clean_channel, trials);
    assert_eq!(averaged_noisy_channel, trials);
}

#[test]
fn unsuspicious_instances_pass_through() {
    let q = DatasetRecord::clean(1, SceneSpec::from_index(1));
    let stats = SuspicionStats::fit(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], 3.0).unwrap();
    let (out, trace) = resolve_test_instance(&q, &RemeasurePolicy::default(), &mut |_| Ok(0.35), &stats, &mut |_| {
        panic!("must not re-measure")
    })
    .unwrap();
    assert_eq!(out, q);
    assert_eq!(trace.action, Action::Kept);
    assert!(!trace.suspicious);
}

#[test]
fn always_rule_averages_even_agreeing_measurements() {
    let q = noisy_query(7);
    let stats = SuspicionStats::fit(&[0.0; 8], 3.0).unwrap();
    let policy = RemeasurePolicy {
        rule: AveragingRule::Always,
        ..Default::default()
    };
    let mut rng = Rng::new(1);
    let (out, trace) = resolve_test_instance(&q, &policy, &mut |r| Ok(pixel_error(r)), &stats, &mut |r| {
        Ok(MeasurementChannel::CLEAN.measure(r, &mut rng))
    })
    .unwrap();
    assert_eq!(trace.action, Action::Replaced);
    assert_eq!(out.image, render(&q.spec));
}

#[test]
fn averaging_shrinks_noise_by_root_r() {
    let sigma = 0.3;
    let n = 20_000;
    for r in [3usize, 9] {
        let mut rng = Rng::new(r as u64);
        let draws: Vec<Tensor> = (0..r).map(|_| Tensor::new(vec![n], rng.normal_vec(n, sigma)).unwrap()).collect();
        let m = mean_image(&draws).unwrap();
        let sd = (m.data().iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let want = sigma / (r as f64).sqrt();
        assert!((sd / want - 1.0).abs() < 0.1, "R={r}: {sd} vs {want}");
    }
}

#[test]
fn second_cleaning_pass_touches_few_clean_records() {
    let m = generate_dataset(17, 300, 0.2, 0.5).unwrap();
    let channel = MeasurementChannel {
        noise_level: 0.1,
        caption_swap_prob: 0.0,
    };
    let mut rng = Rng::new(4);
    let mut remeasure = |r: &DatasetRecord| Ok(channel.measure(r, &mut rng));
    let (once, _, _) =
        clean_training_set(&m, &RemeasurePolicy::default(), &mut centroid_scorer(&m), &mut remeasure, 3.0).unwrap();
    let (twice, report, _) =
        clean_training_set(&once, &RemeasurePolicy::default(), &mut centroid_scorer(&once), &mut remeasure, 3.0).unwrap();
    let changed = once.records.iter().zip(&twice.records).filter(|(a, b)| a != b).count();
    assert_eq!(changed, report.replaced());
    // The robust scale shrinks once the worst records are repaired, so the
    // second pass may also pick up corrupted records the first one missed.
    // Records that were never corrupted must stay within the false-positive
    // allowance.
    let clean_changed = m
        .records
        .iter()
        .zip(once.records.iter().zip(&twice.records))
        .filter(|(orig, (a, b))| !orig.corrupted && a != b)
        .count();
    assert!(clean_changed as f64 <= 0.02 * 300.0, "{clean_changed} clean records re-flagged");
}

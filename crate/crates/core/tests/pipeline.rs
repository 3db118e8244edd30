mod common;

use common::*;
use neural_mrf::mrf::AugmentationSet;
use neural_mrf::synthesis::{self, Blend};
use neural_mrf::vgg::{make_test_network, INPUT_TAP};
use neural_mrf::*;

fn identity_config() -> EnergyConfig {
    EnergyConfig {
        augmentation: AugmentationSet::identity(),
        ..Default::default()
    }
}

fn self_job(iters: usize) -> SynthesisJob {
    let img = textured_image(5, 64, 64);
    let mut job = SynthesisJob::new(img.clone(), Some(img), identity_config());
    job.seed = 1;
    job.iterations_per_level = iters;
    job
}

#[test]
fn transfer_is_deterministic_with_monotone_traces() {
    let net = make_test_network(42, WidthScale::Eighth);
    let job = self_job(20);
    let mut seen = Vec::new();
    let a = synthesis::run_transfer_with(&net, &job, &mut |r| seen.push(*r)).unwrap();
    let b = run_transfer(&net, &job).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.levels.len(), 2);
    let all: Vec<TraceRecord> = a.levels.iter().flat_map(|l| l.records.clone()).collect();
    assert_eq!(all, seen);
    for level in &a.levels {
        assert!(!level.skipped);
        assert_eq!(level.records[0].iteration, 0);
        assert!(level.records.windows(2).all(|w| w[1].total <= w[0].total));
    }
    assert!(a.image.data().iter().all(|v| (0.0..=255.0).contains(v)));

    let mut other = job.clone();
    other.seed = 2;
    assert_ne!(run_transfer(&net, &other).unwrap().image, a.image);
}

#[test]
fn guided_output_takes_content_size() {
    let net = make_test_network(3, WidthScale::Eighth);
    let style = textured_image(1, 40, 48);
    let content = textured_image(2, 36, 30);
    let mut job = SynthesisJob::new(style, Some(content), identity_config());
    job.iterations_per_level = 3;
    let r = run_transfer(&net, &job).unwrap();
    assert_eq!(r.image.shape(), (3, 36, 30));
}

#[test]
fn unguided_output_size_and_skipped_levels() {
    let net = make_test_network(3, WidthScale::Eighth);
    let style = textured_image(1, 64, 64);
    let cfg = EnergyConfig {
        alpha_content: 0.0,
        ..identity_config()
    };
    let mut job = SynthesisJob::new(style, None, cfg);
    job.output_size = Some((100, 20));
    job.iterations_per_level = 3;
    let r = run_transfer(&net, &job).unwrap();
    assert_eq!(r.image.shape(), (3, 100, 20));
    // 50×10 leaves relu4_1 two cells wide
    assert!(r.levels[0].skipped);
    assert!(r.levels[0].records.is_empty());
    assert!(!r.levels[1].skipped);
}

#[test]
fn failures_name_the_level() {
    let net = make_test_network(3, WidthScale::Eighth);
    let cfg = EnergyConfig {
        alpha_content: 0.0,
        ..identity_config()
    };
    let mut job = SynthesisJob::new(textured_image(1, 8, 8), None, cfg);
    job.output_size = Some((40, 40));
    match run_transfer(&net, &job) {
        Err(Error::AtLevel { level: 0, .. }) => {}
        other => panic!("{other:?}"),
    }

    let job = SynthesisJob::new(textured_image(1, 40, 40), None, EnergyConfig::default());
    assert!(matches!(run_transfer(&net, &job), Err(Error::Config(_))));
}

#[test]
fn inverting_the_input_tap_recovers_the_image() {
    let net = make_test_network(42, WidthScale::Eighth);
    let img = textured_image(6, 32, 32);
    let mut job = InvertJob::new(img.clone(), vec![INPUT_TAP.into()]);
    job.alpha_tv = 0.0;
    let r = run_invert(&net, &job).unwrap();
    assert!(r.image.max_abs_diff(&img) < 1.0);
}

#[test]
fn full_weight_blend_equals_plain_inversion() {
    let net = make_test_network(42, WidthScale::Eighth);
    let img = textured_image(6, 32, 32);
    let mut job = InvertJob::new(img.clone(), vec!["relu2_1".into()]);
    job.iterations = 10;
    let plain = run_invert(&net, &job).unwrap();
    job.blend = Some(Blend {
        other: textured_image(7, 32, 32),
        lambda: 1.0,
    });
    let blended = run_invert(&net, &job).unwrap();
    assert_eq!(plain.image, blended.image);
    assert_eq!(plain.trace, blended.trace);

    job.blend = Some(Blend {
        other: textured_image(7, 16, 32),
        lambda: 0.5,
    });
    assert!(matches!(run_invert(&net, &job), Err(Error::Input(_))));
}

#[test]
fn relu2_1_inversion_reduces_feature_energy() {
    let net = make_test_network(42, WidthScale::Eighth);
    let mut job = InvertJob::new(textured_image(6, 32, 32), vec!["relu2_1".into()]);
    job.seed = 3;
    let r = run_invert(&net, &job).unwrap();
    assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.final_feature_energy < 0.05 * r.initial_feature_energy);
}

#[test]
fn self_match_report() {
    let net = make_test_network(42, WidthScale::Eighth);
    let a = textured_image(8, 48, 48);
    let queries = [(0, 0), (10, 10), (20, 33), (47, 47)];
    let rows = run_match_report(&net, &a, &a, &queries, &["relu2_1", "relu3_1"], 3).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.match_cell, r.query_cell, "{r}");
        assert_eq!(r.match_pixel, r.query_pixel);
        assert!(r.ncc >= 0.9999, "{r}");
    }
    assert_eq!(rows[0].query_pixel, (0, 0));
    assert_eq!(rows[4].query_pixel, (0, 0));
    // (10, 10) at stride 4 snaps to cell (2, 2)
    assert_eq!(rows[5].query_cell, (2, 2));
    assert_eq!(rows[5].query_pixel, (8, 8));
    // the far corner is clamped so the patch fits
    assert_eq!(rows[7].query_cell, (9, 9));

    assert!(matches!(
        run_match_report(&net, &a, &a, &[(48, 0)], &["relu3_1"], 3),
        Err(Error::Input(_))
    ));
}

#[test]
fn shifted_pair_recovers_offset() {
    let net = make_test_network(42, WidthScale::Eighth);
    let canvas = textured_image(9, 64, 72);
    let a = canvas.crop(0, 0, 64, 64).unwrap();
    let b = canvas.crop(0, 8, 64, 64).unwrap();
    let queries: Vec<(usize, usize)> = (0..20)
        .map(|i| (16 + (i / 5) * 8, 16 + (i % 5) * 8))
        .collect();
    let rows = run_match_report(&net, &a, &b, &queries, &["relu3_1"], 3).unwrap();
    let hits = rows
        .iter()
        .filter(|r| {
            let dy = r.match_pixel.0 as i64 - r.query_pixel.0 as i64;
            let dx = r.match_pixel.1 as i64 - r.query_pixel.1 as i64;
            dy.abs() <= 4 && (dx + 8).abs() <= 4
        })
        .count();
    assert!(hits >= 18, "{hits}/20");
}

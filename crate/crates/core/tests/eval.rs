use std::ops::Range;
use std::sync::OnceLock;

use latent_directions::bank::DirectionBank;
use latent_directions::data::{gen_synthetic_factors, FactorSpec, LatentDataset};
use latent_directions::denoiser::LinearToyDenoiser;
use latent_directions::edit::{EditSet, EditSpec, Editor, TimeWindow};
use latent_directions::eval::{
    diversity_report, is_monotone, perceptual_distance, perceptual_distances, rescore, rescore_sets, train_probe,
    AttributeProbe, EvalSet, MlpProbe, ProbeConfig,
};
use latent_directions::schedule::{LatentShape, NoiseSchedule, SamplingGrid, ScheduleParams};
use latent_directions::seed;
use latent_directions::Error;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const SHAPE: LatentShape = LatentShape::new(1, 8, 8);

fn dataset() -> LatentDataset {
    let spec = FactorSpec {
        samples: 256,
        ..FactorSpec::default()
    };
    gen_synthetic_factors(&spec, SHAPE).unwrap()
}

fn probe() -> &'static MlpProbe {
    static PROBE: OnceLock<MlpProbe> = OnceLock::new();
    PROBE.get_or_init(|| {
        let config = ProbeConfig {
            steps: 300,
            ..ProbeConfig::default()
        };
        train_probe(&dataset(), &config, 0).unwrap().0
    })
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleParams {
        num_steps: 100,
        sampling_steps: 10,
        ..ScheduleParams::default()
    })
    .unwrap()
}

fn toy() -> (LinearToyDenoiser, DirectionBank) {
    let mut rng = seed::stream(0, "test/eval");
    let model = LinearToyDenoiser::random(SHAPE, 4, 100, &mut rng);
    let bank = DirectionBank::from_embeddings(seed::gaussian_matrix(&mut rng, 3, 4) * 0.05, 0).unwrap();
    (model, bank)
}

fn image() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, SHAPE.numel())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perceptual_distance_is_a_bounded_symmetric_premetric(a in image(), b in image()) {
        let (a, b) = (Array1::from(a), Array1::from(b));
        let p = probe();
        prop_assert_eq!(perceptual_distance(a.view(), a.view(), p).unwrap(), 0.0);
        let ab = perceptual_distance(a.view(), b.view(), p).unwrap();
        let ba = perceptual_distance(b.view(), a.view(), p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&ab));
    }
}

#[test]
fn batched_distances_match_single_ones() {
    let mut rng = seed::stream(1, "test");
    let a = seed::gaussian_matrix(&mut rng, 5, SHAPE.numel());
    let b = seed::gaussian_matrix(&mut rng, 5, SHAPE.numel());
    let d = perceptual_distances(&a, &b, probe()).unwrap();
    for i in 0..5 {
        let one = perceptual_distance(a.row(i), b.row(i), probe()).unwrap();
        assert!((d[i] - one).abs() < 1e-12);
    }
    let short = Array1::zeros(3);
    assert!(matches!(perceptual_distance(short.view(), a.row(0), probe()), Err(Error::InvalidArgument(_))));
    assert!(matches!(
        perceptual_distances(&a, &b.slice(ndarray::s![..4, ..]).to_owned(), probe()),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn monotone_check_honours_direction_and_tolerance() {
    assert!(is_monotone(&[0.1, 0.2, 0.2, 0.5], true, 0.0));
    assert!(!is_monotone(&[0.1, 0.2, 0.19, 0.5], true, 0.0));
    assert!(is_monotone(&[0.1, 0.2, 0.19, 0.5], true, 0.02));
    assert!(is_monotone(&[0.5, 0.4, 0.0], false, 0.0));
    assert!(!is_monotone(&[0.5, 0.6], false, 0.05));
}

#[test]
fn duplicate_directions_are_flagged() {
    let (model, _) = toy();
    let mut rng = seed::stream(2, "test");
    let mut e = seed::gaussian_matrix(&mut rng, 4, 4) * 0.05;
    let copy = e.row(1).to_owned();
    e.row_mut(3).assign(&copy);
    let bank = DirectionBank::from_embeddings(e, 0).unwrap();
    let images = dataset().x.slice(ndarray::s![..6, ..]).to_owned();
    let report = diversity_report(&bank, &model, &schedule(), &images, &[30, 60], 0.999, 0).unwrap();
    let pairs: Vec<(usize, usize)> = report.near_duplicates.iter().map(|&(a, b, _)| (a, b)).collect();
    assert_eq!(pairs, vec![(1, 3)]);
    assert!((report.near_duplicates[0].2 - 1.0).abs() < 1e-12);
    assert_eq!(report.self_consistency.len(), 4);

    let one = images.slice(ndarray::s![..1, ..]).to_owned();
    assert!(diversity_report(&bank, &model, &schedule(), &one, &[30], 0.9, 0).is_err());
}

#[test]
fn identity_edits_rescore_to_zero() {
    let (model, bank) = toy();
    let s = schedule();
    let grid = SamplingGrid::for_schedule(&s).unwrap();
    let editor = Editor::new(&model, &bank, &s, &grid).unwrap();
    let eval = EvalSet::Seeds((0..64).collect());
    let edits: Vec<EditSpec> = (0..3).map(|k| EditSpec::new(k, 0.0, TimeWindow::FULL)).collect();
    let m = rescore(&editor, &edits, &eval, probe()).unwrap();
    assert_eq!(m.values.dim(), (3, 4));
    assert!(m.values.iter().all(|v| v.abs() < 0.5), "{}", m.values);
    assert_eq!(m.rows, vec!["d0@0", "d1@0", "d2@0"]);

    let moved = rescore_sets(
        &editor,
        &[("big".into(), EditSet::single(EditSpec::new(0, 40.0, TimeWindow::FULL)))],
        &eval,
        probe(),
    )
    .unwrap();
    // Probabilities within a factor sum to one, so deltas cancel per group.
    for g in probe().groups() {
        let sum: f64 = g.map(|c| moved.values[[0, c]]).sum();
        assert!(sum.abs() < 1e-9);
    }
}

/// Delegates to a real probe but reports NaN for the second image.
struct Broken<'a>(&'a MlpProbe);

impl AttributeProbe for Broken<'_> {
    fn id(&self) -> String {
        "broken".into()
    }
    fn latent_shape(&self) -> LatentShape {
        self.0.latent_shape()
    }
    fn attributes(&self) -> Vec<String> {
        self.0.attributes()
    }
    fn groups(&self) -> Vec<Range<usize>> {
        self.0.groups()
    }
    fn classify(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut p = self.0.classify(x);
        if p.nrows() > 1 {
            p.row_mut(1).fill(f64::NAN);
        }
        p
    }
    fn features(&self, x: &Array2<f64>) -> Array2<f64> {
        self.0.features(x)
    }
}

#[test]
fn probe_failures_name_the_image() {
    let (model, bank) = toy();
    let s = schedule();
    let grid = SamplingGrid::for_schedule(&s).unwrap();
    let editor = Editor::new(&model, &bank, &s, &grid).unwrap();
    let eval = EvalSet::Seeds(vec![7, 8, 9]);
    let edits = [EditSpec::new(0, 1.0, TimeWindow::FULL)];
    match rescore(&editor, &edits, &eval, &Broken(probe())) {
        Err(Error::Evaluation { image, .. }) => assert_eq!(image, "seed-8"),
        other => panic!("{other:?}"),
    }
    assert!(rescore(&editor, &edits, &EvalSet::Seeds(vec![]), probe()).is_err());
}

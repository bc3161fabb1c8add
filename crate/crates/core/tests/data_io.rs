use proptest::prelude::*;
use scate_core::data::{read_dataset, summarize, write_dataset, Dataset, Observation, Schema, Treatment};
use scate_core::oracle::{random_dgp, RandomDgpSpec};
use scate_core::rng::rng_from;
use scate_core::Error;

fn observation() -> impl Strategy<Value = Observation> {
    (
        prop::collection::vec(-1e6f64..1e6, 2),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(covariates, z, s, a, y)| Observation {
            covariates,
            instrument: z,
            selected: s,
            treatment: if s { Treatment::from_flag(a) } else { Treatment::Undefined },
            outcome: s.then_some(y),
        })
}

fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(observation(), 2..60).prop_map(|mut rows| {
        // Both instrument arms must be present.
        rows[0].instrument = false;
        rows[1].instrument = true;
        Dataset::new(vec!["age".into(), "score".into()], &rows).unwrap()
    })
}

fn schema(covariates: &[&str]) -> Schema {
    Schema {
        covariates: covariates.iter().map(|c| c.to_string()).collect(),
        ..Schema::default()
    }
}

fn to_text(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf, &schema(&["age", "score"])).unwrap();
    String::from_utf8(buf).unwrap()
}

fn parse_with(text: &str, covariates: &[&str]) -> scate_core::Result<Dataset> {
    read_dataset(text.as_bytes(), &schema(covariates))
}

fn parse(text: &str) -> scate_core::Result<Dataset> {
    parse_with(text, &[])
}

proptest! {
    #[test]
    fn write_then_read_reproduces_dataset(ds in dataset()) {
        let text = to_text(&ds);
        let back = parse_with(&text, &["age", "score"]).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(to_text(&back), text);
    }

    #[test]
    fn summary_ignores_row_order(ds in dataset(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng_from(seed, &[]));
        let shuffled = ds.reorder(&order).unwrap();
        let (a, b) = (summarize(&ds), summarize(&shuffled));
        prop_assert_eq!(a.n, b.n);
        for z in 0..2 {
            prop_assert_eq!(a.arms[z].n, b.arms[z].n);
            prop_assert!((a.arms[z].selection_rate - b.arms[z].selection_rate).abs() < 1e-12);
            prop_assert!((a.arms[z].treated_rate - b.arms[z].treated_rate).abs() < 1e-12);
        }
    }
}

#[test]
fn accepts_a_complete_selected_row() {
    let ds = parse_with("x,z,s,a,y\n2.3,1,1,0,1\n0.5,0,0,NA,NA\n", &["x"]).unwrap();
    let o = ds.observation(0);
    assert_eq!(o.covariates, vec![2.3]);
    assert_eq!(o.treatment, Treatment::Control);
    assert_eq!(o.outcome, Some(true));
}

#[test]
fn rejects_treatment_without_selection() {
    let err = parse("z,s,a,y\n1,1,1,1\n0,0,1,0\n").unwrap_err();
    assert!(matches!(err, Error::InvalidRow { row: 2, .. }), "{err:?}");
    assert_eq!(err.to_string(), "treatment defined while selection=0 at row 2");
}

#[test]
fn unselected_row_has_undefined_treatment_and_outcome() {
    let ds = parse("z,s,a,y\n1,0,NA,NA\n0,1,1,0\n").unwrap();
    assert_eq!(ds.treatment()[0], Treatment::Undefined);
    assert_eq!(ds.outcome()[0], None);
}

#[test]
fn rejects_missing_covariate() {
    assert!(parse_with("x,z,s,a,y\nNA,1,1,0,1\n0,0,0,NA,NA\n", &["x"]).is_err());
}

#[test]
fn all_selected_data_has_unit_selection_rates() {
    let ds = parse("z,s,a,y\n0,1,0,1\n1,1,1,0\n0,1,1,1\n").unwrap();
    let s = summarize(&ds);
    assert_eq!(s.arms[0].selection_rate, 1.0);
    assert_eq!(s.arms[1].selection_rate, 1.0);
}

#[test]
fn summary_matches_exact_law() {
    let n = 40_000;
    for j in 0..5u64 {
        let dgp = random_dgp(&mut rng_from(11, &[j]), &RandomDgpSpec::default());
        let (ds, _) = dgp.sample(n, &mut rng_from(12, &[j])).unwrap();
        let s = summarize(&ds);
        let law = dgp.exact_law();
        let tol = 3.0 / (n as f64).sqrt();
        for z in [false, true] {
            let exact = law.arm_rates(z);
            let arm = &s.arms[usize::from(z)];
            // Within-arm rates have effective sample size of about n/2.
            let tol = tol * 2f64.sqrt() / arm.selection_rate.max(0.2).sqrt();
            assert!((arm.selection_rate - exact.selection_rate).abs() < tol);
            assert!((arm.treated_rate - exact.treated_rate).abs() < tol);
            assert!((arm.treated_rate_selected.unwrap() - exact.treated_rate_selected).abs() < tol);
            assert!((arm.outcome_rate_selected.unwrap() - exact.outcome_rate_selected).abs() < tol);
        }
    }
}

use latentflow::align::{mas_align, NoteConstraint};
use latentflow::autodiff::Tensor;
use latentflow::experiments;
use proptest::prelude::*;

#[test]
fn mas_matches_enumeration_exhaustively() {
    let t = experiments::mas_exhaustive();
    assert!(t.mismatches.is_empty(), "{} mismatches, first {}", t.mismatches.len(), t.mismatches[0]);
    assert!(t.cases > 500_000 && t.infeasible > 0, "{t:?}");
}

#[test]
fn mas_matches_enumeration_on_random_instances() {
    let t = experiments::mas_random(11, 1000).unwrap();
    assert_eq!(t.cases, 1000);
    assert!(t.mismatches.is_empty(), "{:?}", t.mismatches.first());
}

fn instance() -> impl Strategy<Value = (Tensor, NoteConstraint)> {
    (1usize..=4, 0usize..=6)
        .prop_flat_map(|(n, extra)| {
            let t = n + extra;
            let all = experiments::constraints(n, t);
            let feasible: Vec<NoteConstraint> = all
                .into_iter()
                .filter(|nb| mas_align(&Tensor::zeros(&[n, t]), nb).is_ok())
                .collect();
            (
                proptest::collection::vec(-3.0f64..3.0, n * t),
                proptest::sample::select(feasible),
                Just((n, t)),
            )
        })
        .prop_map(|(data, nb, (n, t))| (Tensor::matrix(n, t, data).unwrap(), nb))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn constant_offset_shifts_score_only((ll, nb) in instance(), c in -5.0f64..5.0) {
        let a = mas_align(&ll, &nb).unwrap();
        let b = mas_align(&ll.map(|v| v + c), &nb).unwrap();
        prop_assert_eq!(&a.path, &b.path);
        let t = ll.cols() as f64;
        prop_assert!((b.score - a.score - t * c).abs() < 1e-9);
    }

    #[test]
    fn constrained_solution_decomposes_by_note((ll, nb) in instance()) {
        let global = mas_align(&ll, &nb).unwrap();
        let (n, t) = (ll.rows(), ll.cols());
        let mut total = 0.0;
        let mut durations = Vec::new();
        let notes = *nb.token_notes.last().unwrap() + 1;
        for k in 0..notes {
            let rows: Vec<usize> = (0..n).filter(|&i| nb.token_notes[i] == k).collect();
            let cols: Vec<usize> = (0..t).filter(|&j| nb.frame_notes[j] == k).collect();
            let sub = Tensor::matrix(
                rows.len(),
                cols.len(),
                rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| ll.at(i, j)).collect(),
            )
            .unwrap();
            let a = mas_align(&sub, &NoteConstraint::single(rows.len(), cols.len())).unwrap();
            total += a.score;
            durations.extend_from_slice(a.path.durations());
        }
        prop_assert!((total - global.score).abs() < 1e-9);
        prop_assert_eq!(durations.as_slice(), global.path.durations());
    }

    #[test]
    fn durations_cover_every_frame((ll, nb) in instance()) {
        let a = mas_align(&ll, &nb).unwrap();
        prop_assert_eq!(a.path.frames(), ll.cols());
        prop_assert_eq!(a.path.durations().len(), ll.rows());
        for (j, &i) in a.path.frame_tokens().iter().enumerate() {
            prop_assert_eq!(nb.token_notes[i], nb.frame_notes[j]);
        }
    }
}

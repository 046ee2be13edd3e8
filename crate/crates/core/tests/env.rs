use bnnps_core::autodiff::Tensor;
use bnnps_core::env::{
    gen_wet_chicken, gen_wet_chicken_batch, read_csv, time_embed, write_csv, Action, Dataset, DatasetMeta, Sampling,
    State, WetChicken, WET_CHICKEN_COLUMNS,
};
use bnnps_core::rng::RngStream;
use proptest::prelude::*;

fn env() -> WetChicken {
    WetChicken::default()
}

#[test]
fn hand_computed_steps() {
    let e = env();
    // x = 0: drift 0, turbulence 3.5
    let s = e.step(State::new(0.0, 2.0), Action::new(0.5, 1.0), 0.5).unwrap();
    assert_eq!((s.x, s.y), (0.5, 3.75));
    // x = 5: drift 3, turbulence 0.5; y_hat = 1 - 2 + 3 - 0.5 = 1.5
    let s = e.step(State::new(5.0, 1.0), Action::new(1.0, -1.0), -1.0).unwrap();
    assert_eq!((s.x, s.y), (5.0, 1.5));
    // over the waterfall
    let s = e.step(State::new(2.5, 4.5), Action::new(0.0, 1.0), 1.0).unwrap();
    assert_eq!((s.x, s.y), (0.0, 0.0));
    // pushed below the start of the river
    let s = e.step(State::new(1.0, 0.2), Action::new(-0.5, -1.0), -1.0).unwrap();
    assert_eq!((s.x, s.y), (0.5, 0.0));
}

#[test]
fn generators_replay() {
    for sampling in [Sampling::Uniform, Sampling::RandomWalk] {
        let a = gen_wet_chicken(&env(), 300, sampling, &mut RngStream::new(5, 0)).unwrap();
        let b = gen_wet_chicken(&env(), 300, sampling, &mut RngStream::new(5, 0)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.columns, WET_CHICKEN_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }
}

#[test]
fn csv_header_mismatch_is_reported() {
    let d = gen_wet_chicken_batch(&env(), 5, &mut RngStream::new(1, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_csv(&d, &path).unwrap();
    let err = read_csv(&path, &["x", "y", "u", "v", "dx", "dy"], 4).unwrap_err();
    assert!(err.to_string().contains("header"), "{err}");
    let back = read_csv(&path, &WET_CHICKEN_COLUMNS, 4).unwrap();
    assert_eq!(back.x, d.x);
    assert_eq!(back.y, d.y);
}

fn states() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (0.0f64..=5.0, 0.0f64..=5.0, -1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0)
}

proptest! {
    #[test]
    fn step_stays_in_bounds((x, y, ax, ay, tau) in states()) {
        let e = env();
        let s = e.step(State::new(x, y), Action::new(ax, ay), tau).unwrap();
        prop_assert!(e.check_state(s).is_ok());
        prop_assert!((-5.0..=0.0).contains(&e.reward(s)));
    }

    #[test]
    fn drift_and_turbulence_are_linear(x1 in 0.0f64..5.0, x2 in 0.0f64..5.0) {
        let e = env();
        prop_assert!((e.drift(x1) + e.turbulence(x1) - 3.5).abs() < 1e-12);
        if x1 < x2 {
            prop_assert!(e.drift(x1) < e.drift(x2));
            prop_assert!(e.turbulence(x1) > e.turbulence(x2));
        }
        let mid = 0.5 * (x1 + x2);
        prop_assert!((e.drift(mid) - 0.5 * (e.drift(x1) + e.drift(x2))).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_inputs_are_errors(x in 5.0001f64..100.0, tau in 1.0001f64..10.0) {
        let e = env();
        prop_assert!(e.step(State::new(x, 0.0), Action::new(0.0, 0.0), 0.0).is_err());
        prop_assert!(e.step(State::new(0.0, 0.0), Action::new(0.0, 0.0), tau).is_err());
        prop_assert!(e.step(State::new(0.0, 0.0), Action::new(tau, 0.0), 0.0).is_err());
    }

    #[test]
    fn transitions_reconstruct_valid_states(seed in 0u64..1000) {
        let e = env();
        let d = gen_wet_chicken(&e, 50, Sampling::RandomWalk, &mut RngStream::new(seed, 0)).unwrap();
        for r in 0..d.len() {
            let (x, y) = (d.x.row(r), d.y.row(r));
            prop_assert!(e.check_state(State::new(x[0] + y[0], x[1] + y[1])).is_ok());
        }
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..1000, n in 2usize..40) {
        let mut s = RngStream::new(seed, 0);
        let x = s.standard_normal(&[n, 3]).map(|v| 4.0 * v + 7.0);
        let y = s.standard_normal(&[n, 2]).map(|v| 0.01 * v - 3.0);
        let d = Dataset::new(x, y, (0..5).map(|i| format!("c{i}")).collect(), DatasetMeta::new("p", seed, n)).unwrap();
        let (nd, st) = d.normalize();
        let back = st.denormalize_x(&nd.x);
        for (a, b) in back.data().iter().zip(d.x.data()) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
        let back = st.denormalize_y(&nd.y);
        for (a, b) in back.data().iter().zip(d.y.data()) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn time_embedding_stacks_windows(t in 1usize..20, d in 1usize..4, w in 0usize..5) {
        prop_assume!(t > w);
        let obs = Tensor::matrix(t, d, (0..t * d).map(|v| v as f64).collect()).unwrap();
        let e = time_embed(&obs, w).unwrap();
        prop_assert_eq!(e.shape(), &[t - w, (w + 1) * d]);
        for r in 0..t - w {
            let want: Vec<f64> = (r..=r + w).flat_map(|i| obs.row(i).to_vec()).collect();
            prop_assert_eq!(e.row(r), &want[..]);
        }
    }
}

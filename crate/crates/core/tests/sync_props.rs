use hiresedit::sync::{blend_tweedie, lambda, sync_reverse_step, translate, PatchState, Shift};
use hiresedit::{NoiseSchedule, Orientation, RampMask, Side, SplitMix64, SyncPlan, TinyConvDenoiser};
use proptest::prelude::*;

fn orientation() -> impl Strategy<Value = Orientation> {
    prop_oneof![Just(Orientation::Vertical), Just(Orientation::Horizontal)]
}

#[test]
fn ramps_are_complementary_on_the_overlap() {
    for &hp in &[8usize, 16, 64] {
        for o in [Orientation::Vertical, Orientation::Horizontal] {
            let (h, w) = match o {
                Orientation::Vertical => (hp, 5),
                Orientation::Horizontal => (5, hp),
            };
            let m1 = RampMask::new(o, Side::First, h, w).unwrap();
            let m2 = RampMask::new(o, Side::Second, h, w).unwrap();
            for v in hp / 2..hp {
                for u in 0..5 {
                    let (a, b) = match o {
                        Orientation::Vertical => (m1.at(v, u), m2.at(v - hp / 2, u)),
                        Orientation::Horizontal => (m1.at(u, v), m2.at(u, v - hp / 2)),
                    };
                    assert!((a as f64 + b as f64 - 1.0).abs() <= 1e-6, "H={hp} {o:?} v={v}");
                }
            }
        }
    }
}

#[test]
fn first_side_weight_at_three_quarters() {
    let m = RampMask::new(Orientation::Vertical, Side::First, 8, 4).unwrap();
    assert_eq!(m.at(6, 0), 0.5);
    assert_eq!(m.at(3, 2), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translations_restore_the_leading_half(seed in any::<u64>(), half in 1usize..8, other in 1usize..6, o in orientation()) {
        let n = 2 * half;
        let shape = match o {
            Orientation::Vertical => [2, n, other],
            Orientation::Horizontal => [2, other, n],
        };
        let mut rng = SplitMix64::new(seed);
        let f = rng.tensor_uniform(shape, -1.0, 1.0);
        let back = translate(&translate(&f, Shift::Forward, o).unwrap(), Shift::Backward, o).unwrap();
        for c in 0..2 {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let v = match o { Orientation::Vertical => y, Orientation::Horizontal => x };
                    let want = if v < half { f.get(c, y, x) } else { 0.0 };
                    prop_assert_eq!(back.get(c, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn blending_is_inert_from_the_cutoff_on(seed in any::<u64>(), tau in 0usize..50, extra in 0usize..10, o in orientation(), first in any::<bool>()) {
        let t = tau + extra;
        let lam = lambda(t, tau);
        prop_assert_eq!(lam, 0.0);
        let mut rng = SplitMix64::new(seed);
        let own = rng.tensor_uniform([3, 8, 8], -1.0, 1.0);
        let aux = rng.tensor_uniform([3, 8, 8], -1.0, 1.0);
        let side = if first { Side::First } else { Side::Second };
        let m = RampMask::new(o, side, 8, 8).unwrap();
        prop_assert!(blend_tweedie(&own, &aux, &m, lam).unwrap().bit_eq(&own));
    }

    #[test]
    fn synchronized_step_is_inert_from_the_cutoff_on(seed in any::<u64>(), rows in 1usize..3, cols in 1usize..3, tau in 0usize..20, extra in 0usize..5) {
        let s = NoiseSchedule::cosine(50, 0.008).unwrap();
        let d = TinyConvDenoiser::new(3, 50, seed).unwrap();
        let plan = SyncPlan::new(rows, cols, 8, 8, tau).unwrap();
        let t = (tau + extra).max(1);
        let mut rng = SplitMix64::new(seed);
        let states: Vec<_> = (0..rows * cols)
            .map(|_| PatchState { latent: rng.tensor_uniform([3, 8, 8], -1.0, 1.0), t })
            .collect();
        let out = sync_reverse_step(&d, &states, &plan, t, &s).unwrap();
        for (o, st) in out.iter().zip(&states) {
            prop_assert!(o.bit_eq(&st.latent));
        }
    }
}

#[test]
fn lambda_ramps_down_to_the_cutoff() {
    assert_eq!(lambda(0, 15), 1.0);
    assert!((lambda(5, 15) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(lambda(15, 15), 0.0);
    assert_eq!(lambda(40, 15), 0.0);
}

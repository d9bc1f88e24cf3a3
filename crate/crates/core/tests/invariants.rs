use proptest::prelude::*;

use poc_lab::coupling::{delta_histogram, monotonicity_defect};
use poc_lab::data::{basis_vector, init_weights, SecondLayerSpec};
use poc_lab::dynamics::{euler_step, ParticleSystem, Problem};
use poc_lab::io::{read_checkpoint, write_checkpoint, ProblemConfig};
use poc_lab::kernels::{pair_kernel_sigma, LinkFunction};
use poc_lab::potential::{assign_xi_infinity, potential_value, spectral_decompose};
use poc_lab::reduced::{reduced_velocity, AlphaEnsemble, ReducedMode};

fn he4(d: usize) -> Problem {
    ProblemConfig::He4 { d }.build().unwrap()
}

fn norms(sys: &ParticleSystem) -> Vec<f64> {
    (0..sys.m())
        .map(|i| sys.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn init_rows_are_unit_and_prefix_stable(d in 2usize..12, m in 1usize..40, extra in 0usize..40, seed in any::<u64>()) {
        let small = init_weights(d, m, seed).unwrap();
        let big = init_weights(d, m + extra, seed).unwrap();
        prop_assert_eq!(&big[..m * d], &small[..]);
        for row in small.chunks(d) {
            let n: f64 = row.iter().map(|x| x * x).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn population_velocity_is_tangent_and_steps_stay_on_sphere(
        d in 3usize..10, m in 1usize..24, seed in any::<u64>(), eta in 0.0f64..0.2,
    ) {
        let cf = he4(d).closed_form().unwrap();
        let mut sys = ParticleSystem::init(d, m, seed, &SecondLayerSpec::Ones).unwrap();
        let v = cf.velocities(&sys);
        for i in 0..m {
            let dot: f64 = sys.row(i).iter().zip(&v[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-9);
        }
        euler_step(&mut sys, &v, eta).unwrap();
        for n in norms(&sys) {
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative(d in 3usize..10, m in 1usize..24, seed in any::<u64>()) {
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, m, seed, &SecondLayerSpec::Ones).unwrap();
        prop_assert!(cf.loss(&sys, 0) >= -1e-10);
    }

    #[test]
    fn pair_kernel_is_bounded_by_its_diagonal(c in prop::collection::vec(-2.0f64..2.0, 1..8), z in -1.0f64..1.0) {
        prop_assume!(c.iter().skip(1).any(|x| *x != 0.0));
        let q = pair_kernel_sigma(&LinkFunction::new(c).unwrap());
        prop_assert!(q.eval(z).abs() <= q.eval(1.0) * (1.0 + 1e-12));
    }

    #[test]
    fn checkpoints_round_trip(d in 1usize..6, m in 1usize..10, signed in any::<bool>(), seed in any::<u64>()) {
        let d = d + 1;
        let spec = if signed { SecondLayerSpec::Signed { magnitude: 8.0 } } else { SecondLayerSpec::Ones };
        let sys = ParticleSystem::init(d, m, seed, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_checkpoint(&p, 3, &sys).unwrap();
        prop_assert_eq!(read_checkpoint(&p).unwrap().system, sys);
    }

    #[test]
    fn histograms_count_every_value(values in prop::collection::vec(0.0f64..5.0, 0..200)) {
        let h = delta_histogram(0, &values);
        prop_assert_eq!(h.counts.iter().sum::<usize>() + h.underflow + h.overflow, values.len());
    }

    #[test]
    fn sorted_curves_have_no_monotonicity_defect(mut v in prop::collection::vec(-10.0f64..10.0, 0..50)) {
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(monotonicity_defect(&v), 0.0);
        v.reverse();
        prop_assert_eq!(monotonicity_defect(&v), 0.0);
    }

    #[test]
    fn reduced_velocity_vanishes_at_the_ends(d in 4usize..64, n in 2usize..32) {
        let ens = AlphaEnsemble::quantile_grid(d, n).unwrap();
        let link = LinkFunction::he(4).unwrap();
        let at = |a| reduced_velocity(a, &ens, &link, ReducedMode::Polynomial).unwrap().value;
        prop_assert_eq!(at(0.0), 0.0);
        prop_assert!(at(1.0).abs() < 1e-12);
        for w in ens.alphas().windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn potential_is_homogeneous_and_dominates_omega(
        m in 2usize..12, seed in any::<u64>(), scale in 0.01f64..10.0,
        raw in prop::collection::vec(-1.0f64..1.0, 48),
    ) {
        let d = 4;
        let teachers = vec![basis_vector(d, 0), basis_vector(d, 1)];
        let sys = ParticleSystem::init(d, m, seed, &SecondLayerSpec::Ones).unwrap();
        let assignment = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&assignment, &teachers, &LinkFunction::he(4).unwrap()).unwrap();
        let delta: Vec<f64> = raw.iter().cycle().take(m * d).copied().collect();
        let scaled: Vec<f64> = delta.iter().map(|x| x * scale).collect();
        let a = potential_value(&delta, &bsd, &assignment).unwrap();
        let b = potential_value(&scaled, &bsd, &assignment).unwrap();
        prop_assert!(a.phi >= a.omega - 1e-12);
        prop_assert!((b.phi - scale * a.phi).abs() <= 1e-9 * (1.0 + b.phi));
    }
}

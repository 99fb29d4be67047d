mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::{longest_cached_run, ConstantOracle, CountingDecoder};
use fast3dcache::grid::{DecoderSpec, Dims};
use fast3dcache::pcsc::PcscError;
use fast3dcache::pipeline::{
    budget_for_step, check_invariants, phase_of, run, step, CachePolicy, ConfigError, Phase, PipelineError, Sampler,
    SamplerConfig, StepCaches, StepInputs, TimeSchedule,
};
use fast3dcache::simkit::{gaussian_noise, run_full_oracle, SyntheticField, SyntheticFieldSpec};
use proptest::prelude::*;

fn small_field(cfg: &SamplerConfig, dims: Dims, seed: u64) -> SyntheticField {
    SyntheticField::new(SyntheticFieldSpec::for_config(cfg, seed), dims).unwrap()
}

#[test]
fn cfg_off_steps_by_shift() {
    let off: Vec<usize> =
        [1.0, 2.0, 3.0].iter().map(|&eta| TimeSchedule::new(25, eta).cfg_off_step((0.5, 1.0)).unwrap()).collect();
    assert_eq!(off, vec![13, 17, 19]);
}

#[test]
fn shifted_times() {
    let s = TimeSchedule::new(25, 3.0);
    assert_eq!(s.t(1), 1.0);
    // 3u/(1+2u) at u = 7/25 and 6/25, evaluated independently.
    assert!((s.t(19) - 0.5384615384615385).abs() < 1e-15);
    assert!((s.t(20) - 0.48648648648648646).abs() < 1e-15);
    assert_eq!(s.t_prev(25), 0.0);
    assert!(s.is_guided(18, (0.5, 1.0)));
    assert!(!s.is_guided(19, (0.5, 1.0)));
}

#[test]
fn default_phase_boundaries() {
    let cfg = SamplerConfig::default();
    let phases: Vec<u8> = (1..=25).map(|k| phase_of(k, &cfg).number()).collect();
    assert_eq!(&phases[..5], &[1; 5]);
    assert_eq!(&phases[5..18], &[2; 13]);
    assert_eq!(&phases[18..], &[3; 7]);
}

#[test]
fn refinement_budgets() {
    let cfg = SamplerConfig::default();
    let budgets: Vec<usize> = (19..=25).map(|k| budget_for_step(k, &cfg, None, 4096).unwrap()).collect();
    assert_eq!(budgets, vec![2867, 2867, 0, 2867, 2867, 0, 2867]);
    let no_corr = SamplerConfig { f_corr: 0, ..cfg };
    assert!((19..=25).all(|k| budget_for_step(k, &no_corr, None, 4096).unwrap() == 2867));
    assert_eq!(budget_for_step(3, &cfg, None, 4096).unwrap(), 0);
}

#[test]
fn phase_two_needs_calibration() {
    let cfg = SamplerConfig::default();
    assert!(budget_for_step(6, &cfg, None, 4096).is_err());
}

#[test]
fn single_step_config_rejected() {
    let cfg = SamplerConfig { steps: 1, ..SamplerConfig::default() };
    assert!(matches!(cfg.validate(), Err(ConfigError::Pcsc(PcscError::AnchorTooEarly { .. }))));
}

#[test]
fn disabled_caching_matches_plain_loop() {
    for seed in 0..5 {
        let cfg = SamplerConfig { steps: 10, policy: CachePolicy::Disabled, ..SamplerConfig::default() };
        let dims = Dims::new(1 + seed as usize % 2, 3, 4, 5, 3);
        let field = small_field(&cfg, dims, seed);
        let noise = field.initial_noise();
        let (state, report) = run(&cfg, &field, &noise).unwrap();
        let plain = run_full_oracle(&cfg, &field, &noise).unwrap();
        assert_eq!(state.data(), plain.data());
        assert_eq!(report.flops_reduction, 0.0);
        assert!(report.steps.iter().all(|r| r.cached == 0));
    }
}

#[test]
fn all_full_short_run_matches_plain_loop() {
    let cfg = SamplerConfig { steps: 3, rho_a: 0.9, rho_cfg_off: 0.95, ..SamplerConfig::default() };
    let dims = Dims::cube(4, 4);
    let field = small_field(&cfg, dims, 9);
    let noise = field.initial_noise();
    let (state, report) = run(&cfg, &field, &noise).unwrap();
    assert!(report.steps.iter().all(|r| r.phase == Phase::FullSampling));
    assert_eq!(state.data(), run_full_oracle(&cfg, &field, &noise).unwrap().data());
}

#[test]
fn zero_velocity_keeps_state() {
    let dims = Dims::cube(2, 4);
    let noise = gaussian_noise(dims, 3).unwrap();
    let (state, _) = run(&SamplerConfig::default(), &ConstantOracle::zero(dims), &noise).unwrap();
    assert_eq!(state, noise);
}

#[test]
fn constant_field_cached_equals_full() {
    let dims = Dims::new(2, 3, 6, 6, 6);
    let oracle = ConstantOracle::random(dims, 4);
    let noise = gaussian_noise(dims, 5).unwrap();
    for policy in [CachePolicy::Predictive, CachePolicy::Fixed { active_ratio: 0.1 }] {
        let cfg = SamplerConfig { policy, ..SamplerConfig::default() };
        let (cached, report) = run(&cfg, &oracle, &noise).unwrap();
        let full_cfg = SamplerConfig { policy: CachePolicy::Disabled, ..cfg };
        let (full, _) = run(&full_cfg, &oracle, &noise).unwrap();
        assert!(report.steps.iter().any(|r| r.cached > 0));
        assert_eq!(cached.data(), full.data());
    }
}

#[test]
fn anchor_measured_once_per_element() {
    let dims = Dims::new(2, 4, 6, 6, 6);
    let cfg = SamplerConfig::default();
    let field = small_field(&cfg, dims, 1);
    let calls = AtomicUsize::new(0);
    let sampler = Sampler::new(cfg)
        .with_decoder(CountingDecoder { inner: DecoderSpec::new(cfg.gamma_up), calls: &calls })
        .with_report_decoder(None);
    let (_, report) = sampler.run(&field, &field.initial_noise()).unwrap();
    assert_eq!(report.policy_measurements, 2);
    assert_eq!(calls.load(Ordering::SeqCst), 4);
    assert_eq!(report.calibration.len(), 2);
    assert!(report.steps.iter().all(|r| r.delta_s.is_none()));
}

#[test]
fn non_predictive_policies_never_decode() {
    let dims = Dims::cube(4, 6);
    for policy in [CachePolicy::Disabled, CachePolicy::Fixed { active_ratio: 0.25 }] {
        let cfg = SamplerConfig { policy, ..SamplerConfig::default() };
        let field = small_field(&cfg, dims, 2);
        let calls = AtomicUsize::new(0);
        let sampler = Sampler::new(cfg)
            .with_decoder(CountingDecoder { inner: DecoderSpec::new(cfg.gamma_up), calls: &calls })
            .with_report_decoder(None);
        let (_, report) = sampler.run(&field, &field.initial_noise()).unwrap();
        assert_eq!(report.policy_measurements, 0);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }
}

#[test]
fn correction_steps_and_tau_on_default_run() {
    let cfg = SamplerConfig::default();
    let dims = Dims::cube(4, 8);
    let field = small_field(&cfg, dims, 0);
    let (_, report) = run(&cfg, &field, &field.initial_noise()).unwrap();
    assert!(check_invariants(&report, &cfg, dims).is_empty());
    assert_eq!(report.steps[20].cached, 0);
    assert_eq!(report.steps[23].cached, 0);
    assert!(longest_cached_run(report.steps.iter().map(|r| r.cached)) <= cfg.tau);
    assert!(report.steps.iter().any(|r| r.forced_refresh));
}

#[test]
fn tau_zero_allows_long_runs() {
    let cfg = SamplerConfig { tau: 0, ..SamplerConfig::default() };
    let dims = Dims::cube(4, 8);
    let field = small_field(&cfg, dims, 0);
    let (_, report) = run(&cfg, &field, &field.initial_noise()).unwrap();
    assert!(report.steps.iter().all(|r| !r.forced_refresh));
    assert!(longest_cached_run(report.steps.iter().map(|r| r.cached)) > 3);
}

#[test]
fn fixed_policy_budget_shape() {
    let cfg = SamplerConfig { policy: CachePolicy::Fixed { active_ratio: 0.25 }, tau: 0, f_corr: 0, ..Default::default() };
    let dims = Dims::cube(4, 8);
    let field = small_field(&cfg, dims, 0);
    let (_, report) = run(&cfg, &field, &field.initial_noise()).unwrap();
    let quotas: Vec<usize> = report.steps.iter().map(|r| r.quota).collect();
    assert_eq!(&quotas[..2], &[0, 0]);
    assert!(quotas[2..18].iter().all(|&q| q == 384));
    assert!(quotas[18..].iter().all(|&q| q == 358));
}

#[test]
fn single_step_by_hand() {
    let dims = Dims::new(1, 1, 1, 1, 2);
    let oracle = ConstantOracle { dims, values: vec![2.0, -1.0] };
    let mut state = fast3dcache::LatentGrid::from_vec(dims, vec![1.0, 1.0]).unwrap();
    let mut caches = StepCaches::new(dims).unwrap();
    let inputs = StepInputs {
        k: 1,
        t: 1.0,
        t_prev: 0.75,
        guided: true,
        cfg_scale: 3.0,
        omega: 0.7,
        tau: 3,
        budgets: &[0],
    };
    let parts = step(&mut state, &inputs, &oracle, &mut caches).unwrap();
    assert_eq!(parts[0].active, vec![0, 1]);
    assert_eq!(state.data(), &[0.5, 1.25]);
    assert_eq!(caches.v_cache.values.data(), &[2.0, -1.0]);
    assert_eq!(caches.consecutive_cached, 0);
}

#[test]
fn plain_loop_single_step() {
    let dims = Dims::new(1, 2, 1, 1, 2);
    let oracle = ConstantOracle { dims, values: vec![1.0, 2.0, 3.0, 4.0] };
    let noise = fast3dcache::LatentGrid::from_vec(dims, vec![0.0; 4]).unwrap();
    let cfg = SamplerConfig { steps: 1, ..SamplerConfig::default() };
    // t_1 = 1, t_2 = 0: y − 1·v
    let out = run_full_oracle(&cfg, &oracle, &noise).unwrap();
    assert_eq!(out.data(), &[-1.0, -2.0, -3.0, -4.0]);
}

#[test]
fn oracle_length_checked() {
    struct Short(Dims);
    impl fast3dcache::VelocityOracle for Short {
        fn dims(&self) -> Dims {
            self.0
        }
        fn velocity(
            &self,
            _: &fast3dcache::pipeline::OracleQuery<'_>,
        ) -> Result<Vec<f32>, fast3dcache::pipeline::OracleError> {
            Ok(vec![0.0])
        }
    }
    let dims = Dims::cube(1, 2);
    let err = run(&SamplerConfig::default(), &Short(dims), &gaussian_noise(dims, 0).unwrap()).unwrap_err();
    assert!(matches!(err, PipelineError::OracleOutputLength { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phases_follow_ceilings(n in 2usize..60, a in 5usize..50, gap in 5usize..45) {
        // Percent ratios so the ceilings can be taken in integers.
        let off = (a + gap).min(99);
        let cfg = SamplerConfig {
            steps: n,
            rho_a: a as f64 / 100.0,
            rho_cfg_off: off as f64 / 100.0,
            ..SamplerConfig::default()
        };
        let anchor = (n * a).div_ceil(100);
        prop_assume!(anchor >= 2);
        let refine = (n * off).div_ceil(100);
        for k in 1..=n {
            let expect = if k <= anchor { 1 } else if k >= refine { 3 } else { 2 };
            prop_assert_eq!(phase_of(k, &cfg).number(), expect);
        }
    }

    #[test]
    fn invariants_hold_on_random_configs(
        seed in 0u64..1000,
        tau in 0u32..5,
        f_corr in 0u32..4,
        omega in prop::sample::select(vec![0.0, 0.5, 1.0]),
        xi in prop::sample::select(vec![0.7, 0.8, 0.9]),
    ) {
        let cfg = SamplerConfig { steps: 12, tau, f_corr, omega, xi, ..SamplerConfig::default() };
        let dims = Dims::new(1, 2, 4, 4, 4);
        let field = small_field(&cfg, dims, seed);
        let (_, report) = run(&cfg, &field, &field.initial_noise()).unwrap();
        prop_assert_eq!(check_invariants(&report, &cfg, dims), Vec::<String>::new());
    }
}

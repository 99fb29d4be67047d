use fast3dcache::flops::{
    cross_attention_terms, flops_block, flops_block_termwise, flops_cross_attention, flops_layernorm, flops_mlp,
    flops_modulation, flops_run, flops_self_attention, flops_step, layernorm_terms, mlp_terms, modulation_terms,
    self_attention_terms, BlockDims, FlopsError, FlopsReport, StepCost,
};
use proptest::prelude::*;

fn small() -> BlockDims {
    BlockDims { batch: 2, tokens: 100, d_model: 64, heads: 4, cond_tokens: 77, d_cond: 32, layers: 1 }
}

// Values computed independently (plain integer arithmetic outside this crate).
#[test]
fn frozen_component_values() {
    let d = small();
    assert_eq!(flops_self_attention(&d), 12_073_600);
    assert_eq!(flops_cross_attention(&d), 8_788_768);
    assert_eq!(flops_mlp(&d), 13_363_200);
    assert_eq!(flops_modulation(&d), 98_944);
    assert_eq!(flops_layernorm(&d), 89_600);
    assert_eq!(flops_block(&d), 34_593_312);
}

#[test]
fn three_step_run_by_hand() {
    let d = BlockDims { batch: 1, tokens: 10, d_model: 8, heads: 2, cond_tokens: 5, d_cond: 4, layers: 3 };
    let full = flops_run(
        &d,
        &[
            StepCost { active_tokens: 10, guidance_factor: 2 },
            StepCost { active_tokens: 10, guidance_factor: 2 },
            StepCost { active_tokens: 10, guidance_factor: 1 },
        ],
    );
    let cached = flops_run(
        &d,
        &[
            StepCost { active_tokens: 10, guidance_factor: 2 },
            StepCost { active_tokens: 3, guidance_factor: 2 },
            StepCost { active_tokens: 3, guidance_factor: 1 },
        ],
    );
    assert_eq!(full, 434_220);
    assert_eq!(cached, 253_032);
    let reduction = 1.0 - cached as f64 / full as f64;
    assert!((reduction - 0.4172723504214454).abs() < 1e-15);
}

#[test]
fn step_scales_with_layers_and_guidance() {
    let d = BlockDims { layers: 5, ..small() };
    assert_eq!(flops_step(&d, 100, 2), 10 * flops_block(&small()));
}

#[test]
fn zero_tokens_leaves_only_token_free_terms() {
    let d = small().with_tokens(0);
    assert_eq!(flops_block(&d), flops_modulation(&d) + 4 * 2 * 77 * 32 * 64);
}

#[test]
fn validation() {
    assert!(BlockDims::default().validate().is_ok());
    let bad = BlockDims { heads: 3, ..small() };
    assert!(matches!(bad.validate(), Err(FlopsError::HeadsDoNotDivide { .. })));
    let zero = BlockDims { d_model: 0, ..small() };
    assert!(matches!(zero.validate(), Err(FlopsError::ZeroField("d_model"))));
}

#[test]
fn report_serializes() {
    let r = FlopsReport::new(&small());
    assert_eq!(r.block, r.block_termwise);
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["block"].as_u64(), Some(34_593_312));
}

fn dims_strategy() -> impl Strategy<Value = BlockDims> {
    (1u64..4, 0u64..300, 1u64..9, prop::sample::select(vec![1u64, 2, 4, 8]), 1u64..100, 1u64..200, 1u64..4)
        .prop_map(|(b, n, per_head, h, nc, dc, l)| BlockDims {
            batch: b,
            tokens: n,
            d_model: per_head * h * 8,
            heads: h,
            cond_tokens: nc,
            d_cond: dc,
            layers: l,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn termwise_equals_collapsed(d in dims_strategy()) {
        prop_assert_eq!(modulation_terms(&d).total(), flops_modulation(&d));
        prop_assert_eq!(layernorm_terms(&d).total(), flops_layernorm(&d));
        prop_assert_eq!(self_attention_terms(&d).total(), flops_self_attention(&d));
        prop_assert_eq!(cross_attention_terms(&d).total(), flops_cross_attention(&d));
        prop_assert_eq!(mlp_terms(&d).total(), flops_mlp(&d));
        prop_assert_eq!(flops_block_termwise(&d), flops_block(&d));
    }

    #[test]
    fn monotone_in_tokens(d in dims_strategy(), extra in 1u64..50) {
        let more = d.with_tokens(d.tokens + extra);
        prop_assert!(flops_block(&more) > flops_block(&d));
    }

    #[test]
    fn run_is_sum_of_steps(d in dims_strategy(), active in prop::collection::vec((0u64..300, 1u32..3), 0..10)) {
        let steps: Vec<StepCost> = active.iter().map(|&(a, g)| StepCost { active_tokens: a, guidance_factor: g }).collect();
        let manual: u128 = steps.iter().map(|s| flops_step(&d, s.active_tokens, s.guidance_factor)).sum();
        prop_assert_eq!(flops_run(&d, &steps), manual);
    }
}

use groupbert_core::accounting::{
    count_flops, count_params, cost_report, global_batch, read_csv, render_table,
    solve_accumulation, training_flops, write_csv, Phase, PipelinePlan, TrainingSchedule,
};
use groupbert_core::model::{Model, ModelConfig, ModuleKind};
use proptest::prelude::*;

fn spec_total(config: &ModelConfig) -> u64 {
    Model::param_specs(config)
        .unwrap()
        .iter()
        .map(|s| s.numel() as u64)
        .sum()
}

fn ablation(layout: &[ModuleKind]) -> ModelConfig {
    ModelConfig {
        layout: Some(layout.to_vec()),
        ..ModelConfig::bert(12, 768)
    }
}

const BASE_ABLATIONS: [(&str, &[ModuleKind], f64); 3] = [
    ("conv", &[ModuleKind::Attention, ModuleKind::Conv, ModuleKind::Ffn], 132.4e6),
    ("two gffn", &[ModuleKind::Attention, ModuleKind::Gffn, ModuleKind::Gffn], 138.5e6),
    (
        "two gffn + conv",
        &[ModuleKind::Attention, ModuleKind::Gffn, ModuleKind::Conv, ModuleKind::Gffn],
        160.8e6,
    ),
];

#[test]
fn closed_form_matches_constructor_for_size_table_configs() {
    for (layers, hidden) in [(4, 512), (8, 512), (12, 768), (24, 1024)] {
        for cfg in [ModelConfig::bert(layers, hidden), ModelConfig::groupbert(layers, hidden)] {
            let report = count_params(&cfg).unwrap();
            assert_eq!(report.total_params, spec_total(&cfg), "{layers}x{hidden} {:?}", cfg.family);
        }
    }
}

#[test]
fn ablation_rows_land_on_published_sizes() {
    let base = count_params(&ModelConfig::bert(12, 768)).unwrap().total_params;
    assert!((base as f64 - 110.1e6).abs() <= 0.15e6, "{base}");
    for (name, layout, expected) in BASE_ABLATIONS {
        let total = count_params(&ablation(layout)).unwrap().total_params;
        assert!((total as f64 - expected).abs() <= 0.15e6, "{name}: {total}");
    }
}

#[test]
fn totals_equal_component_sums() {
    let r = count_params(&ModelConfig::groupbert(12, 768)).unwrap();
    assert_eq!(r.total_params, r.components.iter().map(|c| c.params).sum::<u64>());
    for c in &r.components {
        assert_eq!(c.params, c.instances * c.params_each);
    }
    let names: Vec<_> = r.components.iter().map(|c| c.component.as_str()).collect();
    assert_eq!(
        names,
        ["embeddings", "attention", "gffn", "conv", "final_norm", "mlm_head", "pooler", "nsp_head"]
    );
    let gffn = r.components.iter().find(|c| c.component == "gffn").unwrap();
    assert_eq!(gffn.instances, 24);
}

#[test]
fn untying_adds_the_projection_matrix() {
    let tied = ModelConfig::bert(2, 64);
    let untied = ModelConfig {
        tie_mlm_embedding: false,
        ..tied.clone()
    };
    let diff = count_params(&untied).unwrap().total_params - count_params(&tied).unwrap().total_params;
    assert_eq!(diff, 64 * 30522);
    assert_eq!(count_params(&untied).unwrap().total_params, spec_total(&untied));
}

#[test]
fn grouped_projection_flops_scale_as_one_over_groups() {
    let (d, l) = (256u64, 64usize);
    let at = |g| {
        let cfg = ModelConfig {
            ffn_groups: g,
            ..ModelConfig::groupbert(2, d as usize)
        };
        count_flops(&cfg, l, 1).unwrap()
    };
    let dense = at(1);
    let grouped = at(4);
    let gffn = |f: &groupbert_core::accounting::ForwardFlops| {
        f.components.iter().find(|c| c.component == "gffn").unwrap().flops_each
    };
    // the grouped 4d→d projection is 2·L·4d·d dense; G=4 keeps a quarter of it
    let dense_fan_in = 2 * l as u64 * 4 * d * d;
    assert_eq!(gffn(&dense) - gffn(&grouped), dense_fan_in - dense_fan_in / 4);
    for g in [2usize, 8] {
        let f = at(g);
        assert_eq!(gffn(&dense) - gffn(&f), dense_fan_in - dense_fan_in / g as u64);
    }
}

#[test]
fn groupbert_to_bert_forward_ratio_at_128() {
    let bert = count_flops(&ModelConfig::bert(12, 768), 128, 1).unwrap();
    let group = count_flops(&ModelConfig::groupbert(12, 768), 128, 1).unwrap();
    let ratio = group.total as f64 / bert.total as f64;
    assert!((1.35..=1.55).contains(&ratio), "ratio {ratio}");
}

#[test]
fn flops_respect_sequence_bound_and_batch() {
    let cfg = ModelConfig::bert(2, 64);
    assert!(count_flops(&cfg, 513, 1).is_err());
    assert!(count_flops(&cfg, 0, 1).is_err());
    let one = count_flops(&cfg, 32, 1).unwrap().total;
    assert_eq!(count_flops(&cfg, 32, 5).unwrap().total, 5 * one);
}

#[test]
fn single_step_training_is_three_forwards() {
    let cfg = ModelConfig::groupbert(2, 64);
    let schedule = TrainingSchedule {
        phases: vec![Phase {
            seq_len: 32,
            steps: 1,
            global_batch: 1,
        }],
    };
    let t = training_flops(&cfg, &schedule).unwrap();
    assert_eq!(t.total, 3.0 * count_flops(&cfg, 32, 1).unwrap().total as f64);
}

#[test]
fn base_training_budget_and_ratio() {
    let schedule = TrainingSchedule::two_phase();
    let bert = training_flops(&ModelConfig::bert(12, 768), &schedule).unwrap();
    let group = training_flops(&ModelConfig::groupbert(12, 768), &schedule).unwrap();
    assert!((bert.total / 6.1e19 - 1.0).abs() <= 0.2, "bert total {:e}", bert.total);
    let ratio = group.total / bert.total;
    assert!((ratio / 1.44 - 1.0).abs() <= 0.05, "ratio {ratio}");
    assert_eq!(bert.phases.len(), 2);
    assert_eq!(bert.total, bert.phases[0].training_flops + bert.phases[1].training_flops);
}

#[test]
fn invalid_schedules_are_rejected() {
    let cfg = ModelConfig::bert(2, 64);
    let empty = TrainingSchedule { phases: vec![] };
    assert!(training_flops(&cfg, &empty).is_err());
    let zero = TrainingSchedule {
        phases: vec![Phase {
            seq_len: 16,
            steps: 0,
            global_batch: 8,
        }],
    };
    assert!(training_flops(&cfg, &zero).is_err());
}

#[test]
fn report_table_prints_both_flop_framings() {
    let schedule = TrainingSchedule::two_phase();
    let reports = [
        cost_report("bert-base", &ModelConfig::bert(12, 768), &schedule).unwrap(),
        cost_report("groupbert-base", &ModelConfig::groupbert(12, 768), &schedule).unwrap(),
    ];
    let table = render_table(&reports);
    assert!(table.contains("110.1M"), "{table}");
    assert!(table.contains("160.8M"), "{table}");
    assert!(table.contains("per-layer forward FLOP increase"));
    assert!(table.contains("end-to-end training FLOP ratio"));
    assert!(table.contains("training FLOPs, phase 2"));
}

#[test]
fn reports_round_trip_through_json_and_csv() {
    let schedule = TrainingSchedule::two_phase();
    let reports = vec![
        cost_report("a", &ModelConfig::bert(4, 512), &schedule).unwrap(),
        cost_report("b", &ModelConfig::groupbert(4, 512), &schedule).unwrap(),
    ];
    let json = serde_json::to_string(&reports).unwrap();
    let back: Vec<groupbert_core::accounting::CostReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, reports);

    let mut buf = Vec::new();
    write_csv(&reports, &mut buf).unwrap();
    let parsed = read_csv(buf.as_slice()).unwrap();
    assert_eq!(parsed.len(), 2);
    for (p, r) in parsed.iter().zip(&reports) {
        assert_eq!(p.label, r.label);
        assert_eq!(p.components, r.components);
        assert_eq!(p.total_params, r.total_params);
    }

    let tampered = String::from_utf8(buf).unwrap().replacen(",1,", ",2,", 1);
    assert!(read_csv(tampered.as_bytes()).is_err());
}

#[test]
fn global_batch_is_the_literal_product() {
    let plan = |r, a, p, c| PipelinePlan {
        replicas: r,
        accumulation_factor: a,
        pipeline_depth: p,
        compute_batch_size: c,
    };
    assert_eq!(global_batch(&plan(2, 64, 4, 1)).unwrap(), 512);
    assert_eq!(global_batch(&plan(1, 1, 1, 1)).unwrap(), 1);
    assert!(global_batch(&plan(0, 1, 1, 1)).is_err());
}

#[test]
fn accumulation_solver() {
    let plan = solve_accumulation(480, 2, 4, 1).unwrap();
    assert_eq!(plan.accumulation_factor, 60);
    assert_eq!(global_batch(&plan).unwrap(), 480);
    assert!(solve_accumulation(481, 2, 4, 1).is_err());
    assert!(solve_accumulation(480, 0, 4, 1).is_err());
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        0usize..4,
        1usize..4,
        prop::sample::select(vec![1usize, 2, 4]),
        prop::sample::select(vec![2usize, 4, 8]),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        prop::collection::vec(
            prop::sample::select(vec![ModuleKind::Attention, ModuleKind::Ffn, ModuleKind::Gffn, ModuleKind::Conv]),
            1..5,
        ),
    )
        .prop_map(|(layers, width, groups, s, prenorm, tie, pooler, layout)| {
            let hidden = 16 * width;
            ModelConfig {
                layers,
                hidden,
                heads: 4,
                ffn_groups: groups,
                conv_group_size: s,
                vocab_size: 50,
                max_positions: 64,
                tie_mlm_embedding: tie,
                include_pooler: pooler,
                norm_policy: if prenorm {
                    groupbert_core::model::NormPolicy::Prenorm
                } else {
                    groupbert_core::model::NormPolicy::Postnorm
                },
                layout: Some(layout),
                ..ModelConfig::default()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_never_drifts_from_constructor(cfg in arb_config()) {
        prop_assert_eq!(count_params(&cfg).unwrap().total_params, spec_total(&cfg));
    }

    #[test]
    fn flops_are_monotone(cfg in arb_config(), l in 1usize..63) {
        let f = |c: &ModelConfig, l| count_flops(c, l, 1).unwrap().total;
        prop_assert!(f(&cfg, l + 1) > f(&cfg, l));
        let deeper = ModelConfig { layers: cfg.layers + 1, ..cfg.clone() };
        prop_assert!(f(&deeper, l) > f(&cfg, l));
        let wider = ModelConfig { hidden: cfg.hidden + 16, ..cfg.clone() };
        prop_assert!(f(&wider, l) > f(&cfg, l));
    }
}

use groupbert_core::model::{
    build_model, conv_module_forward, embed, ffn_forward, gffn_forward, mha_forward, norm,
    read_header, residual_apply, EncoderInput, FfnWeights, GffnWeights, Init, Model, ModelConfig,
    ModuleKind, ModuleWeights, NormPolicy,
};
use groupbert_core::tensor::{grad_check_params_where, Graph, ParamStore, Precision, Tensor, Var};
use groupbert_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(family_groupbert: bool) -> ModelConfig {
    let base = if family_groupbert {
        ModelConfig::groupbert(2, 32)
    } else {
        ModelConfig::bert(2, 32)
    };
    ModelConfig {
        heads: 2,
        ffn_groups: 2,
        conv_group_size: 4,
        vocab_size: 23,
        max_positions: 12,
        dropout_rate: 0.0,
        ..base
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| scale * r.random_range(-1.0..1.0))
}

/// Batch of two sequences; the second has its last three positions padded.
fn padded_input(seq_len: usize, vocab: usize, seed: u64) -> EncoderInput {
    let mut r = rng(seed);
    let tokens: Vec<usize> = (0..2 * seq_len).map(|_| r.random_range(5..vocab)).collect();
    let segments: Vec<usize> = (0..2 * seq_len).map(|i| usize::from(i % seq_len >= seq_len / 2)).collect();
    let mask: Vec<bool> = (0..2 * seq_len).map(|i| i < seq_len || i % seq_len < seq_len - 3).collect();
    EncoderInput::new(2, seq_len, tokens, segments, mask).unwrap()
}

fn assign(store: &mut ParamStore, name: &str, t: Tensor) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.assign(id, t).unwrap();
}

fn zero_all(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.data_mut(id).fill(0.0);
    }
}

fn spec_total(config: &ModelConfig) -> usize {
    Model::param_specs(config).unwrap().iter().map(|s| s.numel()).sum()
}

// ---------------------------------------------------------------------------
// construction

#[test]
fn same_seed_gives_bit_identical_weights() {
    let a = build_model(&toy(true), 7).unwrap();
    let b = build_model(&toy(true), 7).unwrap();
    let c = build_model(&toy(true), 8).unwrap();
    for ((_, pa), ((_, pb), (_, pc))) in a.store().iter().zip(b.store().iter().zip(c.store().iter())) {
        assert_eq!(pa.tensor.data(), pb.tensor.data(), "{}", pa.name);
        if pa.tensor.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            assert_ne!(pa.tensor.data(), pc.tensor.data(), "{}", pa.name);
        }
    }
}

#[test]
fn initializers_follow_parameter_roles() {
    let cfg = toy(true);
    let model = build_model(&cfg, 3).unwrap();
    let specs = Model::param_specs(&cfg).unwrap();
    let mut normal = Vec::new();
    for (spec, (_, p)) in specs.iter().zip(model.store().iter()) {
        match spec.init {
            Init::Zeros => assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name),
            Init::Ones => assert!(p.tensor.data().iter().all(|&v| v == 1.0), "{}", p.name),
            Init::Normal => {
                assert!(p.tensor.data().iter().all(|v| v.abs() <= 2.0 * cfg.init_std), "{}", p.name);
                normal.extend_from_slice(p.tensor.data());
            }
        }
    }
    let n = normal.len() as f64;
    let mean = normal.iter().sum::<f64>() / n;
    let std = (normal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // a normal truncated at two sigma keeps about 88% of the variance
    assert!(mean.abs() < 1e-3, "mean {mean}");
    assert!((std / cfg.init_std - 0.88).abs() < 0.02, "std ratio {}", std / cfg.init_std);
}

#[test]
fn base_models_land_on_published_sizes() {
    let bert = spec_total(&ModelConfig::bert(12, 768));
    assert!((bert as f64 - 110.1e6).abs() <= 0.15e6, "bert base {bert}");
    let groupbert = spec_total(&ModelConfig::groupbert(12, 768));
    assert!((groupbert as f64 - 160.8e6).abs() <= 0.15e6, "groupbert base {groupbert}");
}

#[test]
fn layers_hold_the_expected_modules() {
    for (cfg, expected) in [
        (toy(false), vec![ModuleKind::Attention, ModuleKind::Ffn]),
        (
            toy(true),
            vec![ModuleKind::Attention, ModuleKind::Gffn, ModuleKind::Conv, ModuleKind::Gffn],
        ),
    ] {
        let model = build_model(&cfg, 0).unwrap();
        assert_eq!(model.weights().layers.len(), 2);
        for layer in &model.weights().layers {
            let kinds: Vec<_> = layer.modules.iter().map(|m| m.weights.kind()).collect();
            assert_eq!(kinds, expected);
        }
        assert_eq!(model.weights().final_norm.is_some(), cfg.norm_policy == NormPolicy::Prenorm);
    }
}

#[test]
fn invalid_config_is_rejected_with_field_names() {
    let cfg = ModelConfig {
        heads: 5,
        ..toy(true)
    };
    match build_model(&cfg, 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("heads"), "{msg}"),
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn head_parameters_at_base_width() {
    let cfg = ModelConfig::bert(12, 768);
    let mlm: usize = Model::param_specs(&cfg)
        .unwrap()
        .iter()
        .filter(|s| s.name.starts_with("heads.mlm"))
        .map(|s| s.numel())
        .sum();
    assert_eq!(mlm, 589_824 + 768 + 1_536 + 30_522);
    assert_eq!(mlm, 622_650);
}

#[test]
fn conv_module_parameters_at_base_width() {
    let cfg = ModelConfig {
        layout: Some(vec![ModuleKind::Attention, ModuleKind::Conv, ModuleKind::Ffn]),
        ..ModelConfig::bert(12, 768)
    };
    let conv: usize = Model::param_specs(&cfg)
        .unwrap()
        .iter()
        .filter(|s| s.name.starts_with("encoder.0.1.conv"))
        .map(|s| s.numel())
        .sum();
    let expected = 768 * 1536 + 1536 + 7 * 16 * 768 + 768 + 768 * 768 + 768 + 2 * (2 * 768);
    assert_eq!(conv, expected);
    assert!((conv as f64 - 1.861e6).abs() < 1e3);
    let total = spec_total(&cfg);
    assert!((total as f64 - 132.4e6).abs() <= 0.15e6, "conv ablation {total}");
}

#[test]
fn gffn_weight_count_is_three_quarters_of_dense() {
    let d = 64usize;
    let cfg = ModelConfig {
        ffn_groups: 4,
        ..ModelConfig::groupbert(1, d)
    };
    let specs = Model::param_specs(&cfg).unwrap();
    let weights = |module: &str| -> usize {
        specs
            .iter()
            .filter(|s| s.name.starts_with(module) && s.shape.len() >= 2)
            .map(|s| s.numel())
            .sum()
    };
    let gffn = weights("encoder.0.1.gffn");
    assert_eq!(gffn as f64 / (8 * d * d) as f64, 0.75);
}

// ---------------------------------------------------------------------------
// embeddings

#[test]
fn zero_tables_embed_to_zero() {
    let cfg = toy(false);
    let mut model = build_model(&cfg, 1).unwrap();
    zero_all(model.store_mut(), "embeddings.token");
    zero_all(model.store_mut(), "embeddings.position");
    zero_all(model.store_mut(), "embeddings.segment");
    let mut g = Graph::default();
    let input = EncoderInput::single(&[5, 6, 7]);
    let e = embed(&mut g, model.store(), &model.weights().embeddings, &input, 1e-6, 0.0, &mut rng(0)).unwrap();
    assert_eq!(g.shape(e), [1, 3, 32]);
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_hot_token_row_is_reproduced_before_normalization() {
    let cfg = toy(false);
    let mut model = build_model(&cfg, 1).unwrap();
    let d = cfg.hidden;
    let table = Tensor::from_fn(&[cfg.vocab_size, d], |i| f64::from(i / d == i % d));
    assert_eq!(table.at(&[9, 9]), 1.0);
    assert_eq!(table.at(&[9, 8]), 0.0);
    assert_eq!(table.at(&[3, 3]), 1.0);
    assert_eq!(table.at(&[3, 9]), 0.0);
    assert_eq!(table.at(&[22, 22]), 1.0);
    assert_eq!(table.at(&[22, 0]), 0.0);
    assign(model.store_mut(), "embeddings.token", table);
    zero_all(model.store_mut(), "embeddings.position");
    zero_all(model.store_mut(), "embeddings.segment");
    let mut g = Graph::default();
    let input = EncoderInput::single(&[9]);
    let e = embed(&mut g, model.store(), &model.weights().embeddings, &input, 1e-6, 0.0, &mut rng(0)).unwrap();
    // layer norm of e_9 with unit gain and zero shift
    let mean = 1.0 / d as f64;
    let var = (1.0 - mean).powi(2) / d as f64 + (d - 1) as f64 * mean * mean / d as f64;
    let out = g.value(e).data();
    for (j, &v) in out.iter().enumerate() {
        let x = if j == 9 { 1.0 } else { 0.0 };
        let expected = (x - mean) / (var + 1e-6).sqrt();
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn embedding_bounds_are_checked() {
    let cfg = toy(false);
    let model = build_model(&cfg, 1).unwrap();
    let w = &model.weights().embeddings;

    let too_long = EncoderInput::single(&vec![5; cfg.max_positions + 1]);
    let mut g = Graph::default();
    assert!(matches!(
        embed(&mut g, model.store(), w, &too_long, 1e-6, 0.0, &mut rng(0)),
        Err(Error::Index { what: "position", .. })
    ));

    let bad_token = EncoderInput::single(&[5, 6, 99, 7]);
    match embed(&mut g, model.store(), w, &bad_token, 1e-6, 0.0, &mut rng(0)) {
        Err(Error::Index { what, id, position, size }) => {
            assert_eq!((what, id, position, size), ("token", 99, 2, cfg.vocab_size));
        }
        other => panic!("expected index error, got {:?}", other.map(|_| ())),
    }
}

// ---------------------------------------------------------------------------
// attention

fn mha_model() -> (ModelConfig, Model) {
    let cfg = toy(false);
    (cfg.clone(), build_model(&cfg, 4).unwrap())
}

fn first_mha(model: &Model) -> &groupbert_core::model::MhaWeights {
    match &model.weights().layers[0].modules[0].weights {
        ModuleWeights::Attention(w) => w,
        _ => unreachable!(),
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let (cfg, model) = mha_model();
    let row = random_tensor(&[1, 1, cfg.hidden], 9, 1.0);
    let x = Tensor::from_fn(&[1, 2, cfg.hidden], |i| row.data()[i % cfg.hidden]);
    let mut g = Graph::default();
    let xv = g.constant(x);
    let out = mha_forward(&mut g, model.store(), first_mha(&model), xv, cfg.heads, None).unwrap();
    for &p in out.maps(&g).data() {
        assert!((p - 0.5).abs() < 1e-15);
    }
}

#[test]
fn uniform_attention_with_identity_values_averages_inputs() {
    let cfg = ModelConfig {
        heads: 1,
        ..toy(false)
    };
    let d = cfg.hidden;
    let mut model = build_model(&cfg, 4).unwrap();
    let p = "encoder.0.0.attention";
    for part in ["query", "key", "value", "output"] {
        zero_all(model.store_mut(), &format!("{p}.{part}"));
    }
    assign(model.store_mut(), &format!("{p}.value.weight"), Tensor::identity(d));
    assign(model.store_mut(), &format!("{p}.output.weight"), Tensor::identity(d));
    let x = random_tensor(&[1, 5, d], 10, 1.0);
    let mut g = Graph::default();
    let xv = g.constant(x.clone());
    let out = mha_forward(&mut g, model.store(), first_mha(&model), xv, 1, None).unwrap();
    let y = g.value(out.context);
    for t in 0..5 {
        for j in 0..d {
            let mean: f64 = (0..5).map(|s| x.at(&[0, s, j])).sum::<f64>() / 5.0;
            assert!((y.at(&[0, t, j]) - mean).abs() < 1e-12);
        }
    }
}

/// Explicit per-head loops over a `[batch, L, d]` input.
fn naive_mha(x: &Tensor, store: &ParamStore, prefix: &str, heads: usize, mask: &[bool]) -> Tensor {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let w = |n: &str| store.get(store.find(&format!("{prefix}.{n}")).unwrap()).clone();
    let proj = |n: &str| {
        let (wt, bt) = (w(&format!("{n}.weight")), w(&format!("{n}.bias")));
        Tensor::from_fn(&[b, l, d], |i| {
            let (row, j) = (i / d, i % d);
            bt.data()[j] + (0..d).map(|k| x.data()[row * d + k] * wt.at(&[k, j])).sum::<f64>()
        })
    };
    let (q, k, v) = (proj("query"), proj("key"), proj("value"));
    let dh = d / heads;
    let mut ctx = Tensor::zeros(&[b, l, d]);
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..l {
                let mut scores = vec![f64::NEG_INFINITY; l];
                for j in 0..l {
                    if mask[bi * l + j] {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += q.at(&[bi, i, h * dh + c]) * k.at(&[bi, j, h * dh + c]);
                        }
                        scores[j] = s / (dh as f64).sqrt();
                    }
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let val: f64 = (0..l).map(|j| e[j] / z * v.at(&[bi, j, h * dh + c])).sum();
                    ctx.data_mut()[(bi * l + i) * d + h * dh + c] = val;
                }
            }
        }
    }
    let (wo, bo) = (w("output.weight"), w("output.bias"));
    Tensor::from_fn(&[b, l, d], |i| {
        let (row, j) = (i / d, i % d);
        bo.data()[j] + (0..d).map(|k| ctx.data()[row * d + k] * wo.at(&[k, j])).sum::<f64>()
    })
}

#[test]
fn attention_matches_loop_oracle() {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..toy(false)
    };
    let model = build_model(&cfg, 11).unwrap();
    let input = padded_input(6, cfg.vocab_size, 1);
    let x = random_tensor(&[2, 6, cfg.hidden], 12, 1.0);
    let mut g = Graph::default();
    let xv = g.constant(x.clone());
    let out = mha_forward(&mut g, model.store(), first_mha(&model), xv, cfg.heads, Some(&input.mask)).unwrap();
    let oracle = naive_mha(&x, model.store(), "encoder.0.0.attention", cfg.heads, &input.mask);
    let diff = g.value(out.context).max_abs_diff(&oracle);
    assert!(diff < 1e-12, "max diff {diff}");
}

#[test]
fn attention_maps_are_stochastic_over_real_keys() {
    let cfg = toy(true);
    let model = build_model(&cfg, 2).unwrap();
    let input = padded_input(7, cfg.vocab_size, 2);
    let mut g = Graph::default();
    let out = model.encode(&mut g, &input).unwrap();
    assert_eq!(out.attention.len(), cfg.layers);
    for att in &out.attention {
        let maps = att.maps(&g);
        let l = input.seq_len;
        assert_eq!(maps.shape(), [2, cfg.heads, l, l]);
        for (r, row) in maps.data().chunks(l).enumerate() {
            let b = r / (cfg.heads * l);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (j, &p) in row.iter().enumerate() {
                if !input.mask[b * l + j] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }
}

#[test]
fn fully_padded_sequence_is_degenerate() {
    let cfg = toy(false);
    let model = build_model(&cfg, 2).unwrap();
    let input = EncoderInput::new(1, 3, vec![5, 6, 7], vec![0; 3], vec![false; 3]).unwrap();
    let mut g = Graph::default();
    assert!(matches!(model.encode(&mut g, &input), Err(Error::Degenerate(_))));
}

// ---------------------------------------------------------------------------
// feed-forward and convolution modules

fn module<'a>(model: &'a Model, layer: usize, index: usize) -> &'a ModuleWeights {
    &model.weights().layers[layer].modules[index].weights
}

fn gffn_of(model: &Model) -> &GffnWeights {
    match module(model, 0, 1) {
        ModuleWeights::Gffn(w) => w,
        _ => unreachable!(),
    }
}

#[test]
fn zero_gffn_gives_zero_output() {
    let cfg = toy(true);
    let mut model = build_model(&cfg, 5).unwrap();
    zero_all(model.store_mut(), "encoder.0.1.gffn");
    let mut g = Graph::default();
    let x = g.constant(random_tensor(&[2, 4, cfg.hidden], 1, 1.0));
    let y = gffn_forward(&mut g, model.store(), gffn_of(&model), x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_group_gffn_with_identity_output_equals_dense_ffn() {
    let d = 32;
    let cfg = ModelConfig {
        ffn_groups: 1,
        init_std: 0.2,
        ..toy(true)
    };
    let mut model = build_model(&cfg, 6).unwrap();
    let p = "encoder.0.1.gffn";
    assign(model.store_mut(), &format!("{p}.output.weight"), Tensor::identity(d));
    let w = gffn_of(&model).clone();
    let store = model.store_mut();
    let fan_in = store.get(w.grouped).clone().reshaped(&[4 * d, d]).unwrap();
    let bias = store.get(w.grouped_bias).clone();
    // reuse the GFFN's fan-out, and a dense fan-in carrying the single group block
    let dense_in = store.add("dense.fan_in.weight", fan_in);
    let dense_bias = store.add("dense.fan_in.bias", bias);
    let ffn = FfnWeights {
        fan_out: w.fan_out,
        fan_in: groupbert_core::model::Dense {
            weight: dense_in,
            bias: dense_bias,
        },
    };
    let mut g = Graph::default();
    let x = g.constant(random_tensor(&[2, 3, d], 2, 1.0));
    let a = gffn_forward(&mut g, store, &w, x).unwrap();
    let b = ffn_forward(&mut g, store, &ffn, x).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

fn conv_of(model: &Model) -> &groupbert_core::model::ConvModuleWeights {
    match module(model, 0, 2) {
        ModuleWeights::Conv(w) => w,
        _ => unreachable!(),
    }
}

#[test]
fn conv_module_preserves_shape() {
    let cfg = ModelConfig {
        conv_group_size: 16,
        ..ModelConfig::groupbert(1, 64)
    };
    let cfg = ModelConfig {
        vocab_size: 20,
        max_positions: 32,
        ..cfg
    };
    let model = build_model(&cfg, 1).unwrap();
    let mut g = Graph::default();
    let x = g.constant(random_tensor(&[2, 17, 64], 3, 1.0));
    let y = conv_module_forward(&mut g, model.store(), conv_of(&model), x, None, 1e-6).unwrap();
    assert_eq!(g.shape(y), [2, 17, 64]);
}

#[test]
fn zero_output_projection_silences_conv_module() {
    let cfg = toy(true);
    let mut model = build_model(&cfg, 5).unwrap();
    zero_all(model.store_mut(), "encoder.0.2.conv.pointwise_out");
    let mut g = Graph::default();
    let x = g.constant(random_tensor(&[2, 5, cfg.hidden], 1, 1.0));
    let y = conv_module_forward(&mut g, model.store(), conv_of(&model), x, None, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // the residual wrapper then passes its input through untouched
    let w = &model.weights().layers[0].modules[2];
    let z = residual_apply(
        &mut g,
        model.store(),
        &w.norm,
        1e-6,
        NormPolicy::Prenorm,
        0.0,
        &mut rng(0),
        x,
        |g, h| conv_module_forward(g, model.store(), conv_of(&model), h, None, 1e-6),
    )
    .unwrap();
    assert_eq!(g.value(z).data(), g.value(x).data());
}

#[test]
fn conv_module_rejects_empty_sequences() {
    let cfg = toy(true);
    let model = build_model(&cfg, 5).unwrap();
    let mut g = Graph::default();
    let x = g.constant(Tensor::zeros(&[1, 0, cfg.hidden]));
    assert!(conv_module_forward(&mut g, model.store(), conv_of(&model), x, None, 1e-6).is_err());
}

// ---------------------------------------------------------------------------
// residual wrapper

#[test]
fn residual_wrapper_with_null_module() {
    let cfg = toy(true);
    let model = build_model(&cfg, 5).unwrap();
    let n = &model.weights().layers[0].modules[0].norm;
    let x0 = random_tensor(&[2, 3, cfg.hidden], 8, 2.0);
    let mut g = Graph::default();
    let x = g.constant(x0);
    let zero = |g: &mut Graph, h: Var| g.scale(h, 0.0);

    let pre = residual_apply(&mut g, model.store(), n, 1e-6, NormPolicy::Prenorm, 0.0, &mut rng(0), x, zero).unwrap();
    assert_eq!(g.value(pre).data(), g.value(x).data());

    let post = residual_apply(&mut g, model.store(), n, 1e-6, NormPolicy::Postnorm, 0.0, &mut rng(0), x, zero).unwrap();
    let ln = norm(&mut g, model.store(), n, x, 1e-6).unwrap();
    assert_eq!(g.value(post).data(), g.value(ln).data());
}

#[test]
fn zero_dropout_ignores_the_rng() {
    let cfg = toy(true);
    let model = build_model(&cfg, 5).unwrap();
    let input = padded_input(6, cfg.vocab_size, 3);
    let run = |seed| {
        let mut g = Graph::default();
        let out = model.encoder_forward(&mut g, &input, 0.0, &mut rng(seed)).unwrap();
        g.value(out.hidden).clone()
    };
    assert_eq!(run(1), run(2));

    let dropped = |seed| {
        let mut g = Graph::default();
        let out = model.encoder_forward(&mut g, &input, 0.1, &mut rng(seed)).unwrap();
        g.value(out.hidden).clone()
    };
    assert_eq!(dropped(1), dropped(1));
    assert_ne!(dropped(1), dropped(2));
}

// ---------------------------------------------------------------------------
// full encoder

#[test]
fn zero_layers_pass_embeddings_through() {
    let cfg = ModelConfig {
        layers: 0,
        ..toy(false)
    };
    let model = build_model(&cfg, 5).unwrap();
    let input = padded_input(5, cfg.vocab_size, 4);
    let mut g = Graph::default();
    let out = model.encode(&mut g, &input).unwrap();
    let e = embed(&mut g, model.store(), &model.weights().embeddings, &input, cfg.layernorm_eps, 0.0, &mut rng(0)).unwrap();
    assert_eq!(g.value(out.hidden), g.value(e));
}

#[test]
fn encoder_output_shape() {
    for cfg in [toy(false), toy(true)] {
        let model = build_model(&cfg, 5).unwrap();
        let input = padded_input(9, cfg.vocab_size, 5);
        let mut g = Graph::default();
        let out = model.encode(&mut g, &input).unwrap();
        assert_eq!(g.shape(out.hidden), [2, 9, cfg.hidden]);
        let heads = model.heads_forward(&mut g, out.hidden, &input).unwrap();
        assert_eq!(g.shape(heads.mlm_logits), [2, 9, cfg.vocab_size]);
        assert_eq!(g.shape(heads.nsp_logits.unwrap()), [2, 2]);
    }
}

#[test]
fn groupbert_stack_equals_hand_composed_modules() {
    let cfg = ModelConfig {
        init_std: 0.1,
        ..toy(true)
    };
    let model = build_model(&cfg, 21).unwrap();
    let input = padded_input(8, cfg.vocab_size, 6);
    let store = model.store();
    let eps = cfg.layernorm_eps;
    let mask = Some(input.mask.as_slice());

    let mut g = Graph::default();
    let out = model.encode(&mut g, &input).unwrap();

    let mut h = Graph::default();
    let mut r = rng(0);
    let mut x = embed(&mut h, store, &model.weights().embeddings, &input, eps, 0.0, &mut r).unwrap();
    for layer in 0..2 {
        let m = &model.weights().layers[layer].modules;
        let (ModuleWeights::Attention(att), ModuleWeights::Gffn(g1), ModuleWeights::Conv(cv), ModuleWeights::Gffn(g2)) =
            (&m[0].weights, &m[1].weights, &m[2].weights, &m[3].weights)
        else {
            panic!("unexpected layer layout");
        };
        // x + f(LN(x)) for each of the four modules in turn
        let n = norm(&mut h, store, &m[0].norm, x, eps).unwrap();
        let a = mha_forward(&mut h, store, att, n, cfg.heads, mask).unwrap();
        x = h.add(x, a.context).unwrap();
        let n = norm(&mut h, store, &m[1].norm, x, eps).unwrap();
        let f = gffn_forward(&mut h, store, g1, n).unwrap();
        x = h.add(x, f).unwrap();
        let n = norm(&mut h, store, &m[2].norm, x, eps).unwrap();
        let c = conv_module_forward(&mut h, store, cv, n, mask, eps).unwrap();
        x = h.add(x, c).unwrap();
        let n = norm(&mut h, store, &m[3].norm, x, eps).unwrap();
        let f = gffn_forward(&mut h, store, g2, n).unwrap();
        x = h.add(x, f).unwrap();
    }
    let final_norm = model.weights().final_norm.as_ref().unwrap();
    x = norm(&mut h, store, final_norm, x, eps).unwrap();
    assert_eq!(g.value(out.hidden), h.value(x));
}

fn hidden_and_logits(model: &Model, input: &EncoderInput) -> (Tensor, Tensor) {
    let mut g = Graph::default();
    let out = model.encode(&mut g, input).unwrap();
    let heads = model.heads_forward(&mut g, out.hidden, input).unwrap();
    (g.value(out.hidden).clone(), g.value(heads.mlm_logits).clone())
}

fn assert_unpadded_rows_equal(a: &Tensor, b: &Tensor, mask: &[bool]) {
    let w = a.last_dim();
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            assert_eq!(a.data()[r * w..(r + 1) * w], b.data()[r * w..(r + 1) * w], "row {r}");
        }
    }
}

#[test]
fn padded_content_never_leaks_into_real_positions() {
    let conv_only = ModelConfig {
        layout: Some(vec![ModuleKind::Conv]),
        ..toy(true)
    };
    for cfg in [toy(true), toy(false), conv_only] {
        let model = build_model(&ModelConfig { init_std: 0.2, ..cfg.clone() }, 13).unwrap();
        let input = padded_input(9, cfg.vocab_size, 7);
        let mut altered = input.clone();
        let mut r = rng(99);
        for i in 0..altered.rows() {
            if !altered.mask[i] {
                altered.tokens[i] = r.random_range(0..cfg.vocab_size);
                altered.segments[i] = 1 - altered.segments[i];
            }
        }
        assert_ne!(input.tokens, altered.tokens);
        let (h1, l1) = hidden_and_logits(&model, &input);
        let (h2, l2) = hidden_and_logits(&model, &altered);
        assert_unpadded_rows_equal(&h1, &h2, &input.mask);
        assert_unpadded_rows_equal(&l1, &l2, &input.mask);
    }
}

// ---------------------------------------------------------------------------
// heads

#[test]
fn tied_projection_is_the_token_embedding() {
    let cfg = toy(true);
    let tied = build_model(&cfg, 17).unwrap();
    assert!(tied.store().find("heads.mlm.decoder").is_none());
    let input = padded_input(5, cfg.vocab_size, 8);
    let (_, before) = hidden_and_logits(&tied, &input);

    // mutating the row of a token absent from the input moves only that
    // vocabulary column of the logits
    let mut mutated = tied.clone();
    let v = (0..cfg.vocab_size).find(|t| !input.tokens.contains(t)).unwrap();
    let id = mutated.store().find("embeddings.token").unwrap();
    let d = cfg.hidden;
    for (j, x) in mutated.store_mut().data_mut(id)[v * d..(v + 1) * d].iter_mut().enumerate() {
        *x += 0.1 * j as f64;
    }
    let (_, after) = hidden_and_logits(&mutated, &input);
    for (i, (a, b)) in before.data().iter().zip(after.data()).enumerate() {
        if i % cfg.vocab_size == v {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b);
        }
    }

    // an untied model whose decoder holds the transposed table gives the same logits
    let untied_cfg = ModelConfig {
        tie_mlm_embedding: false,
        ..cfg.clone()
    };
    let mut untied = build_model(&untied_cfg, 17).unwrap();
    for (id, p) in tied.store().iter() {
        let target = untied.store().find(&p.name).unwrap();
        untied.store_mut().assign(target, tied.store().get(id).clone()).unwrap();
    }
    let table = tied.store().get(tied.store().find("embeddings.token").unwrap());
    let transposed = Tensor::from_fn(&[d, cfg.vocab_size], |i| table.at(&[i % cfg.vocab_size, i / cfg.vocab_size]));
    assign(untied.store_mut(), "heads.mlm.decoder", transposed);
    let (_, untied_logits) = hidden_and_logits(&untied, &input);
    assert!(untied_logits.max_abs_diff(&before) < 1e-12);
}

#[test]
fn tied_embedding_accumulates_one_gradient() {
    let cfg = toy(false);
    let model = build_model(&cfg, 3).unwrap();
    let input = padded_input(5, cfg.vocab_size, 9);
    let mut g = Graph::default();
    let out = model.encode(&mut g, &input).unwrap();
    let logits = model.mlm_logits(&mut g, out.hidden).unwrap();
    let targets: Vec<Option<usize>> = input.tokens.iter().map(|&t| Some(t)).collect();
    let loss = g.cross_entropy(logits, &targets, 10.0).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_gradients(model.store());
    let id = model.store().find("embeddings.token").unwrap();
    // tokens never seen by the embedding lookup still get an output-projection gradient
    let d = cfg.hidden;
    let unseen = (0..cfg.vocab_size).find(|t| !input.tokens.contains(t)).unwrap();
    assert!(grads.get(id)[unseen * d..(unseen + 1) * d].iter().any(|&v| v != 0.0));
}

#[test]
fn pooler_can_be_left_out() {
    let cfg = ModelConfig {
        include_pooler: false,
        ..toy(false)
    };
    let model = build_model(&cfg, 3).unwrap();
    let input = padded_input(4, cfg.vocab_size, 1);
    let mut g = Graph::default();
    let out = model.encode(&mut g, &input).unwrap();
    assert!(model.heads_forward(&mut g, out.hidden, &input).unwrap().nsp_logits.is_none());
    assert!(model.store().find("heads.pooler.weight").is_none());
}

// ---------------------------------------------------------------------------
// gradients

fn toy_loss(model: &Model, store: &ParamStore, g: &mut Graph, input: &EncoderInput) -> groupbert_core::Result<Var> {
    let model = Model::from_store(model.config(), store.clone())?;
    let out = model.encode(g, input)?;
    let heads = model.heads_forward(g, out.hidden, input)?;
    let targets: Vec<Option<usize>> = input
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (input.mask[i] && i % 3 == 1).then_some((t * 7 + 3) % model.config().vocab_size))
        .collect();
    let mlm = g.cross_entropy(heads.mlm_logits, &targets, 4.0)?;
    let nsp = g.cross_entropy(heads.nsp_logits.unwrap(), &[Some(0), Some(1)], 2.0)?;
    g.add(mlm, nsp)
}

#[test]
fn two_layer_groupbert_gradients_match_central_differences() {
    let cfg = ModelConfig {
        init_std: 0.3,
        max_positions: 8,
        ..toy(true)
    };
    assert_eq!((cfg.layers, cfg.hidden, cfg.heads, cfg.ffn_groups, cfg.conv_group_size), (2, 32, 2, 2, 4));
    let model = build_model(&cfg, 31).unwrap();
    let input = padded_input(8, cfg.vocab_size, 10);
    let loss = |g: &mut Graph, store: &ParamStore| toy_loss(&model, store, g, &input);
    let is_key_bias = |name: &str| name.ends_with("attention.key.bias");
    let report = grad_check_params_where(model.store(), loss, 1e-5, Some(3), 5, |n| !is_key_bias(n)).unwrap();
    // a key bias shifts every score in a query row equally, so the loss does not
    // depend on it and the relative error is noise over a zero gradient
    let key_bias = grad_check_params_where(model.store(), loss, 1e-5, None, 5, is_key_bias).unwrap();
    assert!(key_bias.coordinates_checked > 0);
    let mut g = Graph::default();
    let l = loss(&mut g, model.store()).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_gradients(model.store());
    for (id, p) in model.store().iter().filter(|(_, p)| is_key_bias(&p.name)) {
        assert!(grads.get(id).iter().all(|v| v.abs() < 1e-12), "{}", p.name);
    }
    assert!(
        report.max_rel_err < 1e-5,
        "rel err {} at {}[{}] over {} coordinates",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.coordinates_checked
    );
}

// ---------------------------------------------------------------------------
// checkpoints

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let cfg = toy(true);
    let model = build_model(&cfg, 41).unwrap();
    model.save_at_step(&path, Some(12)).unwrap();

    let header = read_header(&path).unwrap();
    assert_eq!(header.config, cfg);
    assert_eq!(header.step, Some(12));
    assert_eq!(header.tensors.len(), model.store().len());
    assert_eq!(header.tensors[0].name, "embeddings.token");
    assert_eq!(header.tensors[0].shape, [cfg.vocab_size, cfg.hidden]);

    let (loaded, step) = Model::load(&path, Precision::Oracle64).unwrap();
    assert_eq!(step, Some(12));
    for ((_, a), (_, b)) in model.store().iter().zip(loaded.store().iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }

    // a run32 model survives the trip bit for bit
    let run32 = Model::build(&cfg, 41, Precision::Run32).unwrap();
    run32.save(&path).unwrap();
    let (back, step) = Model::load(&path, Precision::Run32).unwrap();
    assert_eq!(step, None);
    for ((_, a), (_, b)) in run32.store().iter().zip(back.store().iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let model = build_model(&toy(false), 1).unwrap();
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Model::load(&path, Precision::Oracle64), Err(Error::Checkpoint { .. })));

    std::fs::write(&path, b"not a checkpoint\nend-header\n").unwrap();
    assert!(matches!(Model::load(&path, Precision::Oracle64), Err(Error::Checkpoint { .. })));

    let text = String::from_utf8_lossy(&bytes[..200]).to_string();
    assert!(text.starts_with("groupbert-checkpoint 1\nconfig {"));
}

#[test]
fn concurrent_inference_on_a_shared_model() {
    let cfg = toy(true);
    let model = build_model(&cfg, 8).unwrap();
    let inputs: Vec<_> = (0..4).map(|s| padded_input(6, cfg.vocab_size, s)).collect();
    let serial: Vec<Tensor> = inputs.iter().map(|i| hidden_and_logits(&model, i).1).collect();
    let parallel: Vec<Tensor> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .iter()
            .map(|i| s.spawn(|| hidden_and_logits(&model, i).1))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

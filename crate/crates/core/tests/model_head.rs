use dgrx_core::data::{AdjacencyNorm, ModelConfig, Span};
use dgrx_core::graph::{build_graph, normalize};
use dgrx_core::model::{
    classify, final_rep, gcn_layer, loss_and_grad, pool_features, predict, run_gcn,
    FinalRepresentation, GcnLayer, ModelParams, PooledFeatures,
};
use dgrx_core::numerics::{grad_check, BackwardFault, Tensor};
use dgrx_core::synthetic::{random_head_instance, HeadInstance};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_f64_rows(rows)
}

fn config(layers: usize, d_enc: usize, d_gcn: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_enc,
        d_gcn,
        d_ff: 5,
        num_relations: 4,
        seed: 0,
        ..ModelConfig::default()
    }
}

#[test]
fn gcn_layer_examples() {
    let id2 = Tensor::<f64>::eye(2);
    let zero = Tensor::<f64>::zeros(&[2]);
    let out = gcn_layer(&t(&[&[2.0, 3.0]]), &t(&[&[1.0]]), &id2, &zero).unwrap();
    assert_eq!(out, t(&[&[2.0, 3.0]]));

    let ones = Tensor::full(&[2, 2], 1.0);
    let out = gcn_layer(&id2, &ones, &id2, &zero).unwrap();
    assert_eq!(out, ones);

    let neg = t(&[&[-1.0, -2.0], &[-0.5, -3.0]]);
    let out = gcn_layer(&neg, &Tensor::eye(2), &id2, &zero).unwrap();
    assert_eq!(out, Tensor::zeros(&[2, 2]));
}

#[test]
fn gcn_layer_rejects_bad_shapes() {
    let id2 = Tensor::<f64>::eye(2);
    assert!(gcn_layer(&id2, &Tensor::eye(3), &id2, &Tensor::zeros(&[2])).is_err());
    assert!(gcn_layer(&id2, &id2, &id2, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn pool_examples() {
    let g = t(&[&[1.0, 5.0], &[3.0, 2.0], &[0.0, 9.0]]);
    let p = pool_features(&g, Span::new(0, 1), Span::new(2, 2)).unwrap();
    assert_eq!(p.h_sentence, vec![3.0, 9.0]);
    assert_eq!(p.h_s, vec![3.0, 5.0]);
    assert_eq!(p.h_o, vec![0.0, 9.0]);

    let single = t(&[&[4.0, -1.0]]);
    let p = pool_features(&single, Span::single(0), Span::single(0)).unwrap();
    assert_eq!(p.h_sentence, vec![4.0, -1.0]);
    assert_eq!(p.h_s, p.h_sentence);
    assert_eq!(p.h_o, p.h_sentence);

    assert!(pool_features(&g, Span::new(1, 0), Span::single(2)).is_err());
}

fn head_only(d_enc: usize, d_gcn: usize, d_ff: usize, relations: usize) -> ModelParams<f64> {
    ModelParams::init(&ModelConfig {
        layers: 0,
        d_enc,
        d_gcn,
        d_ff,
        num_relations: relations,
        ..ModelConfig::default()
    })
}

#[test]
fn final_rep_examples() {
    let mut p = head_only(3, 1, 1, 2);
    p.head_weight = t(&[&[1.0, 1.0, 1.0]]);
    p.head_bias = Tensor::vector(vec![1.0]);
    let pooled = PooledFeatures {
        h_sentence: vec![2.0],
        h_s: vec![3.0],
        h_o: vec![4.0],
    };
    let h0 = vec![0.1, -0.7, 1e-300];
    let rep = final_rep(&h0, &pooled, &p).unwrap();
    assert_eq!(rep.h_final, vec![0.1, -0.7, 1e-300, 10.0]);

    let mut z = head_only(3, 1, 2, 2);
    z.head_weight = Tensor::zeros(&[2, 3]);
    let rep = final_rep(&h0, &pooled, &z).unwrap();
    assert_eq!(&rep.h_final[..3], &h0[..]);
    assert_eq!(&rep.h_final[3..], &[0.0, 0.0]);
}

#[test]
fn classify_examples() {
    let mut p = head_only(2, 2, 2, 5);
    p.classifier_weight = Tensor::zeros(&[5, 4]);
    let rep = FinalRepresentation {
        h_final: vec![1.0, 2.0, 3.0, 4.0],
    };
    let c = classify(&rep, &p, Some(2)).unwrap();
    for &q in &c.probabilities {
        assert!((q - 0.2).abs() < 1e-15);
    }
    assert!((c.loss.unwrap() - 5f64.ln()).abs() < 1e-12);
    assert!(classify(&rep, &p, Some(5)).is_err());

    let p = head_only(2, 2, 2, 5);
    let c = classify(&rep, &p, None).unwrap();
    assert!((c.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(
        dgrx_core::model::argmax(&c.probabilities),
        dgrx_core::model::argmax(&c.logits)
    );
}

/// Row `i` of one layer as a sum over neighbours `j`, written without any
/// matrix helpers.
fn naive_layer(h: &[Vec<f64>], a: &Tensor<f64>, layer: &GcnLayer<f64>) -> Vec<Vec<f64>> {
    let n = h.len();
    let d = layer.bias.len();
    let w = layer.weight.data();
    let b = layer.bias.data();
    (0..n)
        .map(|i| {
            let mut acc = b.to_vec();
            for j in 0..n {
                let aij = a.data()[i * n + j];
                if aij == 0.0 {
                    continue;
                }
                for (out, acc_out) in acc.iter_mut().enumerate() {
                    let mut wh = 0.0;
                    for k in 0..d {
                        wh += w[out * d + k] * h[j][k];
                    }
                    *acc_out += aij * wh;
                }
            }
            acc.into_iter().map(|v| v.max(0.0)).collect()
        })
        .collect()
}

fn naive_run(inst: &HeadInstance<f64>) -> Vec<Vec<f64>> {
    let n = inst.word_states.rows();
    let d_enc = inst.config.d_enc;
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| inst.word_states.row(i).to_vec()).collect();
    if let Some(p) = &inst.params.input_proj {
        h = h
            .iter()
            .map(|row| {
                (0..inst.config.d_gcn)
                    .map(|o| (0..d_enc).map(|k| p.data()[o * d_enc + k] * row[k]).sum())
                    .collect()
            })
            .collect();
    }
    for layer in &inst.params.gcn_layers {
        h = naive_layer(&h, &inst.adjacency, layer);
    }
    h
}

#[test]
fn matrix_form_matches_per_node_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.random_range(3..=8);
        let layers = rng.random_range(1..=3);
        let d_enc = if case % 2 == 0 { 6 } else { 9 };
        let mut cfg = config(layers, d_enc, 6);
        if case % 3 == 0 {
            cfg.adjacency_normalization = AdjacencyNorm::Degree;
        }
        let inst = random_head_instance::<f64, _>(&cfg, n, &mut rng);
        let fast = run_gcn(&inst.word_states, &inst.adjacency, &inst.params, &cfg).unwrap();
        let slow = naive_run(&inst);
        for i in 0..n {
            for (k, &s) in slow[i].iter().enumerate() {
                let f = fast.get(i, k);
                assert!((f - s).abs() <= 1e-12 * s.abs().max(1.0), "case {case}: {f} vs {s}");
            }
        }
    }
}

/// New position of every old token: spans stay contiguous so the permuted
/// example is still well formed.
fn span_preserving_perm(n: usize, subj: Span, obj: Span, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < n {
        let span = [subj, obj].into_iter().find(|s| s.contains(i));
        match span {
            Some(s) => {
                let mut b: Vec<usize> = s.indices().collect();
                b.shuffle(rng);
                blocks.push(b);
                i = s.end + 1;
            }
            None => {
                blocks.push(vec![i]);
                i += 1;
            }
        }
    }
    blocks.shuffle(rng);
    let mut new_pos = vec![0; n];
    for (pos, old) in blocks.into_iter().flatten().enumerate() {
        new_pos[old] = pos;
    }
    new_pos
}

fn permute(inst: &HeadInstance<f64>, p: &[usize]) -> HeadInstance<f64> {
    let n = p.len();
    let d = inst.config.d_enc;
    let mut states = Tensor::zeros(&[n, d]);
    let mut heads = vec![0; n];
    for old in 0..n {
        states.row_mut(p[old]).copy_from_slice(inst.word_states.row(old));
        heads[p[old]] = match inst.heads[old] {
            0 => 0,
            h => p[h - 1] + 1,
        };
    }
    let map_span = |s: Span| {
        let idx: Vec<usize> = s.indices().map(|i| p[i]).collect();
        Span::new(*idx.iter().min().unwrap(), *idx.iter().max().unwrap())
    };
    let graph = build_graph(&heads, n).unwrap();
    HeadInstance {
        word_states: states,
        adjacency: normalize(&graph, inst.config.adjacency_normalization),
        heads,
        subj: map_span(inst.subj),
        obj: map_span(inst.obj),
        ..inst.clone()
    }
}

#[test]
fn permutation_equivariance_and_loss_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = rng.random_range(3..=8);
        let mut cfg = config(rng.random_range(1..=3), 7, 5);
        if case % 2 == 1 {
            cfg.adjacency_normalization = AdjacencyNorm::Degree;
        }
        let inst = random_head_instance::<f64, _>(&cfg, n, &mut rng);
        let p = span_preserving_perm(n, inst.subj, inst.obj, &mut rng);
        let moved = permute(&inst, &p);

        let g = run_gcn(&inst.word_states, &inst.adjacency, &inst.params, &cfg).unwrap();
        let g_moved = run_gcn(&moved.word_states, &moved.adjacency, &inst.params, &cfg).unwrap();
        for old in 0..n {
            for (a, b) in g.row(old).iter().zip(g_moved.row(p[old])) {
                assert!((a - b).abs() <= 1e-12, "case {case}");
            }
        }

        let loss = predict(&inst.params, &cfg, &inst.input(), Some(inst.gold)).unwrap().loss.unwrap();
        let loss_moved = predict(&inst.params, &cfg, &moved.input(), Some(inst.gold))
            .unwrap()
            .loss
            .unwrap();
        assert!((loss - loss_moved).abs() <= 1e-10, "case {case}: {loss} vs {loss_moved}");
    }
}

#[test]
fn identity_adjacency_degenerates_to_stacked_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = config(3, 6, 6);
    let mut params = ModelParams::<f64>::init(&cfg);
    for l in &mut params.gcn_layers {
        l.weight = Tensor::eye(6);
        l.bias = Tensor::zeros(&[6]);
    }
    let h0 = Tensor::from_vec(
        vec![4, 6],
        (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let out = run_gcn(&h0, &Tensor::eye(4), &params, &cfg).unwrap();
    assert_eq!(out, h0.map(|v| v.max(0.0)));

    let cfg = config(2, 8, 6);
    let mut params = ModelParams::<f64>::init(&cfg);
    for l in &mut params.gcn_layers {
        l.weight = Tensor::eye(6);
        l.bias = Tensor::zeros(&[6]);
    }
    let h0 = Tensor::from_vec(
        vec![3, 8],
        (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let proj = params.input_proj.as_ref().unwrap();
    let direct = Tensor::from_vec(
        vec![3, 6],
        (0..3)
            .flat_map(|i| {
                let row = h0.row(i).to_vec();
                (0..6).map(move |o| {
                    let v: f64 = (0..8).map(|k| proj.get(o, k) * row[k]).sum();
                    v.max(0.0)
                })
            })
            .collect(),
    )
    .unwrap();
    let out = run_gcn(&h0, &Tensor::eye(3), &params, &cfg).unwrap();
    assert!(out.max_abs_diff(&direct) < 1e-15);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 30 {
        let n = rng.random_range(3..=8);
        let layers = rng.random_range(1..=3);
        let cfg = config(layers, if checked % 2 == 0 { 5 } else { 4 }, 4);
        let inst = random_head_instance::<f64, _>(&cfg, n, &mut rng);
        let lg = loss_and_grad(&inst.params, &cfg, &inst.input(), inst.gold, None).unwrap();
        if lg.kink_margin < 1e-3 {
            continue;
        }
        let input = inst.input();
        let report = grad_check(
            |p| predict(p, &cfg, &input, Some(inst.gold)).unwrap().loss.unwrap(),
            &inst.params,
            &lg.grads,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "n={n} L={layers}: {report:?}");
        checked += 1;
    }
}

#[test]
fn injected_fault_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = config(2, 8, 6);
    let inst = random_head_instance::<f64, _>(&cfg, 5, &mut rng);
    let bad = loss_and_grad(
        &inst.params,
        &cfg,
        &inst.input(),
        inst.gold,
        Some(BackwardFault::DoubleBiasGrad),
    )
    .unwrap();
    let input = inst.input();
    let report = grad_check(
        |p| predict(p, &cfg, &input, Some(inst.gold)).unwrap().loss.unwrap(),
        &inst.params,
        &bad.grads,
        1e-5,
    );
    assert!(report.max_rel_error > 1e-2);
    assert!(report.worst.contains("bias"), "{}", report.worst);
}

#[test]
fn f32_head_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = config(2, 8, 6);
    let inst = random_head_instance::<f64, _>(&cfg, 6, &mut rng);
    let wide = predict(&inst.params, &cfg, &inst.input(), Some(inst.gold)).unwrap();
    let p32 = inst.params.cast::<f32>();
    let cls: Vec<f32> = inst.cls.iter().map(|&v| v as f32).collect();
    let ws = inst.word_states.cast::<f32>();
    let adj = inst.adjacency.cast::<f32>();
    let input = dgrx_core::model::HeadInput {
        cls: &cls,
        word_states: &ws,
        adjacency: &adj,
        subj: inst.subj,
        obj: inst.obj,
    };
    let narrow = predict(&p32, &cfg, &input, Some(inst.gold)).unwrap();
    assert!((narrow.loss.unwrap() as f64 - wide.loss.unwrap()).abs() < 1e-4);
}

proptest! {
    #[test]
    fn span_pool_never_exceeds_sentence_pool(
        rows in 2usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_vec(vec![rows, 3], (0..rows * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let s = rng.random_range(0..rows);
        let subj = Span::new(s, rng.random_range(s..rows));
        let o = rng.random_range(0..rows);
        let p = pool_features(&g, subj, Span::single(o)).unwrap();
        for k in 0..3 {
            prop_assert!(p.h_s[k] <= p.h_sentence[k]);
            prop_assert!(p.h_o[k] <= p.h_sentence[k]);
        }
    }
}

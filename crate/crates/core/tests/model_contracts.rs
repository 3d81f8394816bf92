//! Session-level contracts of the mini transformer: attention validity,
//! batch independence, the residual-only path, gradient correctness of
//! the full network, adapter mount/merge equivalence, and bitwise
//! checkpoint round-trips.

use std::collections::BTreeMap;

use skidiag::harness::AdamW;
use skidiag::lora::LoraSpec;
use skidiag::model::{
    load_checkpoint, save_checkpoint, Mode, ModelConfig, ModelState, Session, Strategy,
};
use skidiag::rng::Rng;
use skidiag::tensor::finite_diff_check;

fn tiny_config(num_layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers,
        num_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 11,
        max_seq_len: 6,
        num_classes: 2,
        dropout: 0.0,
        layernorm_eps: 1e-5,
        logit_scale: 1.0,
    }
}

fn random_batch(rng: &mut Rng, batch: usize, data_seq: usize, vocab: usize) -> (Vec<usize>, Vec<usize>) {
    let tokens = (0..batch * data_seq).map(|_| 1 + rng.below(vocab - 1)).collect();
    let labels = (0..batch).map(|_| rng.below(2)).collect();
    (tokens, labels)
}

#[test]
fn single_layer_forward_attention_rows_are_distributions() {
    let state = ModelState::init(tiny_config(1), 7).unwrap();
    let mut sess = Session::build(&state, 1, 5, false, 0).unwrap();
    let mut rng = Rng::new(3);
    let (tokens, labels) = random_batch(&mut rng, 1, 5, 11);
    sess.load_batch(&tokens, &labels).unwrap();
    sess.forward().unwrap();
    let trace = sess.trace().unwrap();
    assert_eq!(trace.attention.len(), 1);
    assert_eq!(trace.block_outputs.len(), 1);
    let attn = &trace.attention[0];
    let t = attn.shape()[3];
    for row in attn.values().chunks(t) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn duplicated_rows_give_identical_logits() {
    let state = ModelState::init(tiny_config(2), 7).unwrap();
    let mut sess = Session::build(&state, 4, 5, false, 0).unwrap();
    let mut rng = Rng::new(4);
    let (row, _) = random_batch(&mut rng, 1, 5, 11);
    let tokens: Vec<usize> = row.iter().cycle().take(4 * 5).copied().collect();
    sess.load_batch(&tokens, &[0, 1, 0, 1]).unwrap();
    sess.forward().unwrap();
    let logits = sess.logits();
    for b in 1..4 {
        assert_eq!(&logits[..2], &logits[b * 2..b * 2 + 2]);
    }
}

#[test]
fn permuting_batch_rows_permutes_logits() {
    let state = ModelState::init(tiny_config(2), 9).unwrap();
    let mut rng = Rng::new(5);
    let (tokens, labels) = random_batch(&mut rng, 3, 5, 11);
    let mut sess = Session::build(&state, 3, 5, false, 0).unwrap();
    sess.load_batch(&tokens, &labels).unwrap();
    sess.forward().unwrap();
    let base: Vec<f64> = sess.logits().to_vec();

    // rotate rows by one
    let perm = [2usize, 0, 1];
    let mut ptokens = vec![0usize; tokens.len()];
    let mut plabels = vec![0usize; 3];
    for (dst, &src) in perm.iter().enumerate() {
        ptokens[dst * 5..(dst + 1) * 5].copy_from_slice(&tokens[src * 5..(src + 1) * 5]);
        plabels[dst] = labels[src];
    }
    sess.load_batch(&ptokens, &plabels).unwrap();
    sess.forward().unwrap();
    let permuted = sess.logits();
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(&permuted[dst * 2..dst * 2 + 2], &base[src * 2..src * 2 + 2]);
    }
}

// With the attention output projection and the second FFN projection
// zeroed (biases are zero-initialized), residual connections are the only
// information path, so each post-norm block collapses to
// LN2(LN1(x)) and the result is independent of Q/K/V weights.
#[test]
fn zeroed_projections_reduce_blocks_to_the_norm_path() {
    fn ln(row: &[f64], eps: f64) -> Vec<f64> {
        let d = row.len() as f64;
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d;
        let mut var = 0.0;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter().map(|&v| (v - mean) * inv).collect()
    }

    let cfg = tiny_config(3);
    let eps = cfg.layernorm_eps;
    let mut state = ModelState::init(cfg.clone(), 21).unwrap();
    for l in 0..3 {
        state
            .param_values_mut(&format!("layer.{l}.attn.wo"))
            .unwrap()
            .fill(0.0);
        state
            .param_values_mut(&format!("layer.{l}.ffn.w2"))
            .unwrap()
            .fill(0.0);
    }
    let run = |state: &ModelState| {
        let mut sess = Session::build(state, 2, 5, false, 0).unwrap();
        let tokens = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        sess.load_batch(&tokens, &[0, 1]).unwrap();
        sess.forward().unwrap();
        sess.trace().unwrap()
    };
    let trace = run(&state);

    // expected: embedding rows -> LN2(LN1(.)) chained per block
    let tok = state.param("embed.tok").unwrap();
    let pos = state.param("embed.pos").unwrap();
    let d = cfg.d_model;
    let ids = [[0usize, 1, 2, 3, 4, 5], [0, 6, 7, 8, 9, 10]];
    for (b, row_ids) in ids.iter().enumerate() {
        for (t, &id) in row_ids.iter().enumerate() {
            let mut x: Vec<f64> = (0..d)
                .map(|j| tok.values[id * d + j] + pos.values[t * d + j])
                .collect();
            for l in 0..3 {
                x = ln(&ln(&x, eps), eps);
                let got = &trace.block_outputs[l].values()[(b * 6 + t) * d..(b * 6 + t + 1) * d];
                for (e, g) in x.iter().zip(got.iter()) {
                    assert!(
                        (e - g).abs() < 1e-12,
                        "block {l} batch {b} pos {t}: {e} vs {g}"
                    );
                }
            }
        }
    }

    // and the output does not depend on the attention score weights
    let mut state2 = state.clone();
    let mut rng = Rng::new(77);
    for l in 0..3 {
        for t in ["q", "k", "v"] {
            for v in state2
                .param_values_mut(&format!("layer.{l}.attn.w{t}"))
                .unwrap()
            {
                *v = rng.normal();
            }
        }
    }
    let trace2 = run(&state2);
    for l in 0..3 {
        assert_eq!(
            trace.block_outputs[l].values(),
            trace2.block_outputs[l].values()
        );
    }
}

// Analytic gradients of the full two-layer encoder match central finite
// differences on every parameter (sampled entries).
#[test]
fn full_transformer_matches_finite_differences() {
    let state = ModelState::init(tiny_config(2), 13).unwrap();
    let mut sess = Session::build(&state, 2, 5, false, 0).unwrap();
    let mut rng = Rng::new(6);
    let (tokens, labels) = random_batch(&mut rng, 2, 5, 11);
    sess.load_batch(&tokens, &labels).unwrap();
    let loss = sess.loss_node();
    let params: Vec<_> = sess.trainable_nodes();
    let err = finite_diff_check(sess.graph_mut(), loss, &params, 1e-5, Some(10)).unwrap();
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn mount_is_output_neutral_bitwise() {
    let mut state = ModelState::init(tiny_config(3), 31).unwrap();
    let mut rng = Rng::new(8);
    let (tokens, labels) = random_batch(&mut rng, 4, 5, 11);
    let logits_of = |state: &ModelState| -> Vec<f64> {
        let mut sess = Session::build(state, 4, 5, false, 0).unwrap();
        sess.load_batch(&tokens, &labels).unwrap();
        sess.forward().unwrap();
        sess.logits().to_vec()
    };
    let before = logits_of(&state);
    state
        .mount_lora(&LoraSpec::with_layers(vec![0, 2]), 42)
        .unwrap();
    let after = logits_of(&state);
    assert_eq!(
        before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    // immediate merge of zero-B adapters leaves weights bitwise unchanged
    let mut merged = state.clone();
    merged.set_mode(Mode::Eval);
    let w_before: Vec<u64> = state
        .param("layer.0.attn.wq")
        .unwrap()
        .values
        .iter()
        .map(|v| v.to_bits())
        .collect();
    merged.merge_lora().unwrap();
    let w_after: Vec<u64> = merged
        .param("layer.0.attn.wq")
        .unwrap()
        .values
        .iter()
        .map(|v| v.to_bits())
        .collect();
    assert_eq!(w_before, w_after);
    assert!(merged.adapters.is_none());
}

// Train adapters for 100 steps, then merge; adapted and merged forward
// passes agree to < 1e-9 on 256 random inputs.
#[test]
fn merge_after_training_matches_adapted_forward() {
    let cfg = tiny_config(3);
    let mut state = ModelState::init(cfg, 17).unwrap();
    state
        .mount_lora(&LoraSpec::with_layers(vec![0, 1, 2]), 5)
        .unwrap();

    let mut rng = Rng::new(23);
    let mut sess = Session::build(&state, 8, 5, true, 99).unwrap();
    let mut opt = AdamW::new(sess.graph(), sess.trainable_nodes(), 1e-2, 0.0);
    for _ in 0..100 {
        let (tokens, labels) = random_batch(&mut rng, 8, 5, 11);
        sess.load_batch(&tokens, &labels).unwrap();
        sess.forward().unwrap();
        sess.backward().unwrap();
        opt.step(sess.graph_mut()).unwrap();
    }
    sess.write_back(&mut state).unwrap();
    state.set_mode(Mode::Eval);

    let mut merged = state.clone();
    merged.merge_lora().unwrap();
    assert!(merged.adapters.is_none());

    let (tokens, labels) = random_batch(&mut rng, 256, 5, 11);
    let eval = |state: &ModelState| -> Vec<f64> {
        let mut sess = Session::build(state, 256, 5, false, 0).unwrap();
        sess.load_batch(&tokens, &labels).unwrap();
        sess.forward().unwrap();
        sess.logits().to_vec()
    };
    let adapted = eval(&state);
    let plain = eval(&merged);
    let mut worst = 0.0_f64;
    for (a, p) in adapted.iter().zip(plain.iter()) {
        worst = worst.max((a - p).abs());
    }
    assert!(worst < 1e-9, "max |delta logit| {worst}");

    // and the adapters actually moved something
    let base = {
        let mut s = ModelState::init(tiny_config(3), 17).unwrap();
        s.set_mode(Mode::Eval);
        eval(&s)
    };
    assert!(adapted
        .iter()
        .zip(base.iter())
        .any(|(a, b)| (a - b).abs() > 1e-6));
}

// Frozen backbone: after backward, base encoder weights expose no
// gradients while adapter-B gradients are nonzero.
#[test]
fn adapter_gradients_flow_while_backbone_stays_silent() {
    let mut state = ModelState::init(tiny_config(2), 3).unwrap();
    state.mount_lora(&LoraSpec::with_layers(vec![0, 1]), 11).unwrap();
    let mut sess = Session::build(&state, 4, 5, false, 0).unwrap();
    let mut rng = Rng::new(31);
    let (tokens, labels) = random_batch(&mut rng, 4, 5, 11);
    sess.load_batch(&tokens, &labels).unwrap();
    sess.forward().unwrap();
    sess.backward().unwrap();

    for name in ["layer.0.attn.wq", "layer.1.ffn.w1", "embed.tok"] {
        let node = sess.param_node(&state, name).unwrap();
        assert!(sess.graph().grad(node).is_none(), "{name} has a gradient");
    }
    // B-grads are nonzero (A-grads are zero while B == 0)
    let per_layer = sess.param_grad_sq_per_layer(&state);
    assert!(per_layer.iter().all(|&v| v > 0.0), "{per_layer:?}");
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = std::env::temp_dir().join("skidiag-ckpt-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");

    let mut state = ModelState::init(tiny_config(3), 55).unwrap();
    state.set_strategy(Strategy::ShallowTopK(1)).unwrap();
    state.mount_lora(&LoraSpec::with_layers(vec![1]), 4).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), "55".to_string());
    save_checkpoint(&state, &meta, &path).unwrap();

    let (loaded, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(state.config, loaded.config);
    assert_eq!(state.mode, loaded.mode);
    for (a, b) in state.params().iter().zip(loaded.params().iter()) {
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.trainable, b.trainable);
        let ab: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "{}", a.spec.name);
    }
    let sa = state.adapters.as_ref().unwrap();
    let sb = loaded.adapters.as_ref().unwrap();
    assert_eq!(sa.adapters.len(), sb.adapters.len());
    for (a, b) in sa.adapters.iter().zip(sb.adapters.iter()) {
        assert_eq!(a.layer, b.layer);
        assert_eq!(a.target, b.target);
        assert_eq!(a.a.values(), b.a.values());
        assert_eq!(a.b.values(), b.b.values());
    }

    // save(load(x)) reproduces the file byte for byte
    let path2 = dir.join("model2.ckpt");
    save_checkpoint(&loaded, &meta2, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

// Attention rows stay valid distributions while the model trains.
#[test]
fn attention_stays_normalized_during_training() {
    let mut state = ModelState::init(tiny_config(2), 77).unwrap();
    state.set_strategy(Strategy::Full).unwrap();
    let mut sess = Session::build(&state, 4, 5, true, 1).unwrap();
    let mut opt = AdamW::new(sess.graph(), sess.trainable_nodes(), 1e-3, 0.0);
    let mut rng = Rng::new(41);
    for _ in 0..20 {
        let (tokens, labels) = random_batch(&mut rng, 4, 5, 11);
        sess.load_batch(&tokens, &labels).unwrap();
        sess.forward().unwrap();
        for l in 0..2 {
            let t = sess.attention_shape(l)[3];
            for row in sess.attention_values(l).chunks(t) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        sess.backward().unwrap();
        opt.step(sess.graph_mut()).unwrap();
    }
}

// Adapter gradients agree with central finite differences: the A and B
// factors of each mounted adapter are checked directly.
#[test]
fn adapted_session_matches_finite_differences() {
    let mut state = ModelState::init(tiny_config(2), 19).unwrap();
    let spec = LoraSpec {
        dropout: 0.0, // finite differences need a deterministic graph
        ..LoraSpec::with_layers(vec![0, 1])
    };
    state.mount_lora(&spec, 9).unwrap();
    // give B nonzero values so gradients flow into A as well
    let mut sess = Session::build(&state, 4, 5, true, 2).unwrap();
    let mut opt = AdamW::new(sess.graph(), sess.trainable_nodes(), 1e-2, 0.0);
    let mut rng = Rng::new(61);
    for _ in 0..10 {
        let (tokens, labels) = random_batch(&mut rng, 4, 5, 11);
        sess.load_batch(&tokens, &labels).unwrap();
        sess.forward().unwrap();
        sess.backward().unwrap();
        opt.step(sess.graph_mut()).unwrap();
    }
    sess.write_back(&mut state).unwrap();

    let mut sess = Session::build(&state, 4, 5, false, 0).unwrap();
    let (tokens, labels) = random_batch(&mut rng, 4, 5, 11);
    sess.load_batch(&tokens, &labels).unwrap();
    let loss = sess.loss_node();
    let params = sess.trainable_nodes(); // head + adapter A/B factors
    let err = finite_diff_check(sess.graph_mut(), loss, &params, 1e-5, Some(8)).unwrap();
    assert!(err < 1e-5, "adapter gradcheck rel err {err}");
}

// Probes on an untrained model stay near chance at every layer.
#[test]
fn untrained_model_probes_near_chance() {
    use skidiag::probes::{probe_sweep, ProbeData};

    let mut cfg = tiny_config(3);
    cfg.vocab_size = 24;
    cfg.max_seq_len = 8;
    let state = ModelState::init(cfg, 33).unwrap();
    let mut rng = Rng::new(44);
    let make = |rng: &mut Rng, n: usize| -> (Vec<Vec<usize>>, Vec<usize>) {
        let tokens = (0..n)
            .map(|_| (0..7).map(|_| 1 + rng.below(23)).collect())
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        (tokens, labels)
    };
    let (train_tokens, train_labels) = make(&mut rng, 256);
    let (val_tokens, val_labels) = make(&mut rng, 128);
    let report = probe_sweep(
        &state,
        &ProbeData {
            train_tokens: &train_tokens,
            train_labels: &train_labels,
            val_tokens: &val_tokens,
            val_labels: &val_labels,
        },
        8,
        5,
    )
    .unwrap();
    for (layer, acc) in report.linear.iter().chain(report.mlp.iter()).enumerate() {
        assert!(
            (acc - 0.5).abs() < 0.15,
            "probe {layer} reached {acc} on an untrained model"
        );
    }
}

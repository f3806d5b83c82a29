use super::*;
use crate::adapter::{init_adapter, TiedLoraMode};
use rand::Rng;

fn small_config() -> TransformerConfig {
    TransformerConfig {
        d: 8,
        layers: 2,
        n_heads: 2,
        vocab_size: 11,
        max_seq_len: 12,
        mlp_mult: 4,
    }
}

fn random_tokens(cfg: &TransformerConfig, batch: usize, seq: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(0..cfg.vocab_size)).collect())
        .collect();
    TokenBatch::from_rows(&rows).unwrap()
}

// Reference implementation written with plain loops over Vec<f64>.
mod oracle {
    pub type Mat = Vec<Vec<f64>>;

    pub fn rows(data: &[f64], cols: usize) -> Mat {
        data.chunks(cols).map(|r| r.to_vec()).collect()
    }

    pub fn linear(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
        w.iter()
            .enumerate()
            .map(|(i, row)| {
                let mut s = 0.0;
                for j in 0..x.len() {
                    s += row[j] * x[j];
                }
                s + b.map_or(0.0, |b| b[i])
            })
            .collect()
    }

    pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }
}

fn reference_forward(model: &Model, seq: &[usize]) -> Vec<Vec<f64>> {
    use oracle::*;
    let c = &model.config;
    let w = &model.base;
    let (d, h) = (c.d, c.n_heads);
    let hd = d / h;
    let mut xs: Vec<Vec<f64>> = seq
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..d).map(|k| w.tok_emb.data()[tok * d + k] + w.pos_emb.data()[t * d + k]).collect())
        .collect();
    let merged = model.merged().unwrap();
    for lw in merged.base.layers.iter() {
        let qkv_w = rows(lw.qkv.data(), d);
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| linear(&layer_norm(x, lw.ln1_gain.data(), lw.ln1_bias.data()), &qkv_w, Some(lw.qkv_bias.data())))
            .collect();
        let mut att = vec![vec![0.0; d]; seq.len()];
        for head in 0..h {
            for t in 0..seq.len() {
                let q = &qkv[t][head * hd..(head + 1) * hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = &qkv[s][d + head * hd..d + (head + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let p = (sc - m).exp() / z;
                    for k in 0..hd {
                        att[t][head * hd + k] += p * qkv[s][2 * d + head * hd + k];
                    }
                }
            }
        }
        let out_w = rows(lw.attn_out.data(), d);
        let in_w = rows(lw.mlp_in.data(), d);
        let mlp_w = rows(lw.mlp_out.data(), c.mlp_mult * d);
        for t in 0..seq.len() {
            let o = linear(&att[t], &out_w, None);
            for k in 0..d {
                xs[t][k] += o[k];
            }
            let hdn: Vec<f64> = linear(&layer_norm(&xs[t], lw.ln2_gain.data(), lw.ln2_bias.data()), &in_w, None)
                .into_iter()
                .map(gelu)
                .collect();
            let m = linear(&hdn, &mlp_w, None);
            for k in 0..d {
                xs[t][k] += m[k];
            }
        }
    }
    let head = rows(w.head.data(), d);
    xs.iter()
        .map(|x| linear(&layer_norm(x, w.lnf_gain.data(), w.lnf_bias.data()), &head, None))
        .collect()
}

fn perturb_base(model: &mut Model, seed: u64) {
    // non-trivial gains and biases so the oracle exercises every parameter
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.base.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let cfg = small_config();
    let mut model = build_model(&cfg, 3).unwrap();
    perturb_base(&mut model, 4);
    let tokens = random_tokens(&cfg, 3, 7, 5);
    let logits = model.forward(&tokens).unwrap();
    assert_eq!(logits.shape(), &[3, 7, cfg.vocab_size]);
    for b in 0..3 {
        let reference = reference_forward(&model, tokens.row(b));
        for (t, row) in reference.iter().enumerate() {
            for (k, &r) in row.iter().enumerate() {
                let got = logits.data()[(b * 7 + t) * cfg.vocab_size + k];
                assert!((got - r).abs() <= 1e-10, "b={b} t={t} k={k}: {got} vs {r}");
            }
        }
    }
}

#[test]
fn forward_with_adapter_matches_reference_on_merged_weights() {
    let cfg = small_config();
    let mut model = build_model(&cfg, 3).unwrap();
    perturb_base(&mut model, 9);
    let acfg = TiedLoraConfig::new(TiedLoraMode::Tabuv, 2, cfg.dims(), 1).unwrap();
    let mut params = init_adapter(&acfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in params.trainable_tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let model = model.attach_adapter(params, acfg).unwrap();
    let tokens = random_tokens(&cfg, 2, 6, 11);
    let logits = model.forward(&tokens).unwrap();
    for b in 0..2 {
        // reference_forward merges the adapter itself, then runs plain loops
        let reference = reference_forward(&model, tokens.row(b));
        for (t, row) in reference.iter().enumerate() {
            for (k, &r) in row.iter().enumerate() {
                let got = logits.data()[(b * 6 + t) * cfg.vocab_size + k];
                assert!((got - r).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn forward_is_causal() {
    let cfg = small_config();
    let mut model = build_model(&cfg, 1).unwrap();
    perturb_base(&mut model, 2);
    let a = random_tokens(&cfg, 1, 8, 3);
    let mut ids = a.ids.clone();
    ids[5] = (ids[5] + 1) % cfg.vocab_size;
    ids[7] = (ids[7] + 3) % cfg.vocab_size;
    let b = TokenBatch { ids, ..a.clone() };
    let la = model.forward(&a).unwrap();
    let lb = model.forward(&b).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(&la.data()[..5 * v], &lb.data()[..5 * v]);
    assert_ne!(&la.data()[5 * v..6 * v], &lb.data()[5 * v..6 * v]);
}

#[test]
fn zero_start_adapter_leaves_logits_unchanged() {
    let cfg = small_config();
    let model = build_model(&cfg, 7).unwrap();
    let tokens = random_tokens(&cfg, 2, 5, 8);
    let plain = model.forward(&tokens).unwrap();
    for mode in TiedLoraMode::ALL {
        if !mode.zero_start() {
            continue;
        }
        let acfg = TiedLoraConfig::new(mode, 3, cfg.dims(), 42).unwrap();
        let params = init_adapter(&acfg).unwrap();
        let adapted = model.clone().attach_adapter(params, acfg).unwrap();
        assert_eq!(adapted.forward(&tokens).unwrap(), plain, "{mode:?}");
    }
}

#[test]
fn merged_model_matches_adapted_model() {
    let cfg = small_config();
    let model = build_model(&cfg, 2).unwrap();
    let tokens = random_tokens(&cfg, 2, 6, 4);
    for mode in TiedLoraMode::ALL {
        let acfg = TiedLoraConfig::new(mode, 2, cfg.dims(), 5).unwrap();
        let mut params = init_adapter(&acfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in params.trainable_tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let adapted = model.clone().attach_adapter(params, acfg).unwrap();
        let merged = adapted.merged().unwrap();
        assert!(merged.adapter().is_none());
        let a = adapted.forward(&tokens).unwrap();
        let m = merged.forward(&tokens).unwrap();
        assert!(a.max_abs_diff(&m) <= 1e-9, "{mode:?}");
    }
}

#[test]
fn build_model_is_deterministic() {
    let cfg = small_config();
    assert_eq!(build_model(&cfg, 9).unwrap(), build_model(&cfg, 9).unwrap());
    assert_ne!(build_model(&cfg, 9).unwrap(), build_model(&cfg, 10).unwrap());
    let m = build_model(&cfg, 9).unwrap();
    assert!(m.base.layers[0].ln1_gain.data().iter().all(|&g| g == 1.0));
    assert!(m.base.layers[0].qkv_bias.data().iter().all(|&b| b == 0.0));
}

#[test]
fn config_validation() {
    let mut cfg = small_config();
    cfg.n_heads = 3;
    assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
    let mut cfg = small_config();
    cfg.max_seq_len = 1;
    assert!(cfg.validate().is_err());
    assert!(small_config().validate().is_ok());
}

#[test]
fn forward_rejects_bad_tokens() {
    let cfg = small_config();
    let model = build_model(&cfg, 1).unwrap();
    let long = TokenBatch::from_rows(&[vec![1; 13]]).unwrap();
    assert!(matches!(model.forward(&long), Err(LabError::Config(_))));
    let oov = TokenBatch::from_rows(&[vec![1, 11]]).unwrap();
    assert!(matches!(model.forward(&oov), Err(LabError::Index { index: 11, .. })));
    assert!(TokenBatch::from_rows(&[vec![1, 2], vec![1]]).is_err());
}

#[test]
fn attach_rejects_mismatched_adapter() {
    let cfg = small_config();
    let model = build_model(&cfg, 1).unwrap();
    let acfg = TiedLoraConfig::new(TiedLoraMode::Tab, 2, ModelDims::new(8, 3).unwrap(), 0).unwrap();
    let params = init_adapter(&acfg).unwrap();
    assert!(model.attach_adapter(params, acfg).is_err());
}

/// One layer, two tokens, identity-free weights chosen so the next token is forced.
fn two_token_model() -> Model {
    let cfg = TransformerConfig {
        d: 2,
        layers: 1,
        n_heads: 1,
        vocab_size: 2,
        max_seq_len: 8,
        mlp_mult: 1,
    };
    let mut model = build_model(&cfg, 0).unwrap();
    for t in model.base.tensors_mut() {
        let fill = if t.shape().len() == 1 && t.numel() == 2 { None } else { Some(0.0) };
        if let Some(f) = fill {
            t.data_mut().iter_mut().for_each(|v| *v = f);
        }
    }
    // the block is a no-op; the final norm maps embedding [1,-1] -> ~[1,-1], [-1,1] -> ~[-1,1]
    model.base.tok_emb = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
    // token 0 predicts 1, token 1 predicts 0
    model.base.head = Tensor::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
    model
}

#[test]
fn greedy_generation_on_hand_set_model() {
    let model = two_token_model();
    assert_eq!(model.generate(&[0], 4, None).unwrap(), vec![0, 1, 0, 1, 0]);
    // token 0 is also eos: stop right after emitting it
    assert_eq!(model.generate(&[0], 4, Some(0)).unwrap(), vec![0, 1, 0]);
    // context limit caps the continuation
    assert_eq!(model.generate(&[1; 6], 10, None).unwrap().len(), 8);
    assert!(model.generate(&[1; 9], 1, None).is_err());
}

#[test]
fn batched_generation_matches_single() {
    let cfg = small_config();
    let mut model = build_model(&cfg, 5).unwrap();
    perturb_base(&mut model, 6);
    let prompts = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
    let batch = model.generate_batch(&prompts, 5, Some(2)).unwrap();
    for (p, out) in prompts.iter().zip(&batch) {
        assert_eq!(&model.generate(p, 5, Some(2)).unwrap(), out);
    }
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.0]), 1);
    assert_eq!(argmax(&[2.0]), 0);
}

#[test]
fn base_weights_roundtrip_through_names() {
    let cfg = small_config();
    let model = build_model(&cfg, 1).unwrap();
    let named: Vec<(String, Tensor)> = model.base.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert_eq!(named.len(), 2 + 9 * cfg.layers + 3);
    let rebuilt = BaseWeights::from_named(&cfg, named.clone()).unwrap();
    assert_eq!(rebuilt, model.base);
    let mut swapped = named;
    swapped.swap(0, 1);
    assert!(BaseWeights::from_named(&cfg, swapped).is_err());
}

#[test]
fn adapter_scope_gradients_reach_only_adapter() {
    let cfg = small_config();
    let acfg = TiedLoraConfig::new(TiedLoraMode::Tabuv, 2, cfg.dims(), 1).unwrap();
    let params = init_adapter(&acfg).unwrap();
    let model = build_model(&cfg, 1).unwrap().attach_adapter(params, acfg).unwrap();
    let tokens = random_tokens(&cfg, 2, 5, 2);
    let mut g = Graph::new();
    let vars = model.register(&mut g, GradScope::Adapter).unwrap();
    let logits = model.logits(&mut g, &vars, &tokens).unwrap();
    let targets: Vec<usize> = tokens.ids.iter().map(|t| (t + 1) % cfg.vocab_size).collect();
    let loss = g.softmax_ce(logits, &targets, &vec![true; targets.len()]).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(vars.trainable().len(), model.trainable_names(GradScope::Adapter).len());
    assert!(vars.base_vars().iter().all(|&v| g.grad(v).is_none()));
    // v starts at zero, so only v receives a non-zero gradient at the origin
    assert!(vars.trainable().iter().any(|&v| g.grad(v).map_or(false, |t| t.max_abs() > 0.0)));
}

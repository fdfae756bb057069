use super::*;
use crate::autograd::Tape;
use crate::encoders::encode_sentence;
use crate::feature_tables::{parse_dictionary_str, DictKind, FeatureDictionary};
use crate::tensor::Tensor;

fn fixture() -> (Vocab, FeatureDictionary, FeatureAlphabets) {
    let p = parse_dictionary_str("国\tguo2\n好\thao3\n明\tming2\n", DictKind::Pinyin, "p")
        .unwrap();
    let w = parse_dictionary_str("国\tlgy\n好\tvbg\n明\tje\n", DictKind::Wubi, "w").unwrap();
    let c = parse_dictionary_str(
        "国\t囗 王 丶\n好\t女 子\n明\t日 月\n",
        DictKind::Chaizi,
        "c",
    )
    .unwrap();
    let dict = FeatureDictionary::build(&p, &w, &c);
    let alphabets = FeatureAlphabets::from_dictionary(&dict);
    let vocab = Vocab::build(&["国好明国".to_string()], 1).unwrap();
    (vocab, dict, alphabets)
}

fn tiny_config() -> FusionEmbedderConfig {
    FusionEmbedderConfig {
        d_word: 8,
        d_feat: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_len: 6,
        ..FusionEmbedderConfig::default()
    }
}

fn batch_of(
    texts: &[&str],
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    max_len: usize,
    chaizi_capacity: usize,
) -> BatchInput {
    let mut trunc = 0;
    let seqs: Vec<EncodedSequence> = texts
        .iter()
        .map(|t| {
            encode_sentence(t, vocab, dict, alphabets, max_len, chaizi_capacity, None, &mut trunc)
                .unwrap()
        })
        .collect();
    BatchInput::from_sequences(&seqs).unwrap()
}

#[test]
fn config_rejects_bad_widths_and_duplicates() {
    let mut c = tiny_config();
    c.n_heads = 3;
    assert!(c.validate().is_err());

    let mut c = tiny_config();
    c.fusion_kind = FusionKind::AddFc;
    c.d_feat = 4;
    assert!(c.validate().is_err());
    c.d_feat = c.d_word;
    assert!(c.validate().is_ok());

    let mut c = tiny_config();
    c.enabled_features = vec![FeatureKind::Pinyin, FeatureKind::Pinyin];
    assert!(c.validate().is_err());
}

#[test]
fn fusion_width_is_d_model_for_every_feature_subset() {
    let (vocab, dict, alphabets) = fixture();
    let subsets: [&[FeatureKind]; 4] = [
        &[],
        &[FeatureKind::Pinyin],
        &[FeatureKind::Wubi, FeatureKind::Chaizi],
        &FeatureKind::ALL,
    ];
    for subset in subsets {
        for head in [HeadKind::RnnAttn, HeadKind::TextCnn] {
            let config = FusionEmbedderConfig {
                enabled_features: subset.to_vec(),
                head_kind: head,
                ..tiny_config()
            };
            let model = StyleBertModel::new(config, &vocab, &alphabets, 7).unwrap();
            let batch = batch_of(&["国好", "明"], &vocab, &dict, &alphabets, 6, 8);
            let tape = Tape::new();
            let pass = model.fuse_embeddings(&tape, &batch).unwrap();
            assert_eq!(pass.fused.shape(), vec![12, 8]);
        }
    }
}

#[test]
fn all_pad_features_contribute_nothing() {
    // zero the word columns of the fusion matrix: the fused vector of a
    // special token (all-PAD features) must then be exactly the bias
    let (vocab, dict, alphabets) = fixture();
    for head in [HeadKind::RnnAttn, HeadKind::TextCnn] {
        let config = FusionEmbedderConfig { head_kind: head, ..tiny_config() };
        let mut model = StyleBertModel::new(config, &vocab, &alphabets, 3).unwrap();
        let d_word = model.config.d_word;
        let d_model = model.config.d_model;
        for r in 0..d_word {
            for c in 0..d_model {
                model.param_mut("fuse.w").data_mut()[r * d_model + c] = 0.0;
            }
        }
        let batch = batch_of(&["国"], &vocab, &dict, &alphabets, 4, 8);
        let tape = Tape::new();
        let pass = model.fuse_embeddings(&tape, &batch).unwrap();
        let fused = pass.fused.value();
        // positions 0, 2, 3 are CLS, SEP, PAD
        for pos in [0usize, 2, 3] {
            for k in 0..d_model {
                assert_eq!(
                    fused.data()[pos * d_model + k],
                    model.param("fuse.b").data()[k],
                    "head {head:?} leaked features at special position {pos}"
                );
            }
        }
    }
}

#[test]
fn padding_content_cannot_reach_real_positions() {
    let (vocab, dict, alphabets) = fixture();
    let model = StyleBertModel::new(tiny_config(), &vocab, &alphabets, 11).unwrap();
    let base = batch_of(&["国好"], &vocab, &dict, &alphabets, 6, 8);
    let mut altered = base.clone();
    // rewrite both PAD slots (positions 4, 5) to a different real token
    for pos in [4usize, 5] {
        altered.word_ids[pos] = vocab.id_of('明');
        let rec = dict.lookup('明');
        let mut trunc = 0;
        altered.pinyin.indices[pos * 8..(pos + 1) * 8].copy_from_slice(
            &crate::encoders::encode_pinyin(&rec, &alphabets).unwrap().indices,
        );
        altered.pinyin.lengths[pos] = 4;
        altered.chaizi.indices[pos * 8..(pos + 1) * 8].copy_from_slice(
            &crate::encoders::encode_chaizi(&rec, &alphabets, 8, &mut trunc).indices,
        );
        altered.chaizi.lengths[pos] = 2;
    }
    let tape_a = Tape::new();
    let la = model.forward_mlm(&tape_a, &base).unwrap().logits.value();
    let tape_b = Tape::new();
    let lb = model.forward_mlm(&tape_b, &altered).unwrap().logits.value();
    let v = model.vocab_size;
    for pos in 0..4 {
        for j in 0..v {
            let diff = (la.data()[pos * v + j] - lb.data()[pos * v + j]).abs();
            assert!(diff <= 1e-10, "position {pos} logit moved by {diff}");
        }
    }
}

#[test]
fn changing_pinyin_changes_logits_unless_disabled() {
    let (vocab, dict, alphabets) = fixture();
    for (enabled, expect_change) in
        [(FeatureKind::ALL.to_vec(), true), (vec![FeatureKind::Wubi], false)]
    {
        let config = FusionEmbedderConfig { enabled_features: enabled, ..tiny_config() };
        let model = StyleBertModel::new(config, &vocab, &alphabets, 5).unwrap();
        let base = batch_of(&["国"], &vocab, &dict, &alphabets, 4, 8);
        let mut altered = base.clone();
        let rec = dict.lookup('好');
        altered.pinyin.indices[8..16].copy_from_slice(
            &crate::encoders::encode_pinyin(&rec, &alphabets).unwrap().indices,
        );
        let tape_a = Tape::new();
        let la = model.forward_mlm(&tape_a, &base).unwrap().logits.value();
        let tape_b = Tape::new();
        let lb = model.forward_mlm(&tape_b, &altered).unwrap().logits.value();
        let moved = la
            .data()
            .iter()
            .zip(lb.data())
            .any(|(a, b)| (a - b).abs() > 1e-12);
        assert_eq!(moved, expect_change);
    }
}

#[test]
fn add_fc_equals_stacked_concat_linear() {
    // concat([w, f1, f2, f3]) · [W; W; W; W] = (w + f1 + f2 + f3) · W
    let (vocab, dict, alphabets) = fixture();
    let add_config = FusionEmbedderConfig {
        fusion_kind: FusionKind::AddFc,
        ..tiny_config()
    };
    let add_model = StyleBertModel::new(add_config, &vocab, &alphabets, 21).unwrap();

    let cat_config = FusionEmbedderConfig {
        fusion_kind: FusionKind::ConcatLinear,
        ..tiny_config()
    };
    let mut cat_model = StyleBertModel::new(cat_config, &vocab, &alphabets, 21).unwrap();
    for (name, tensor) in
        add_model.param_names().to_vec().iter().zip(add_model.params().to_vec())
    {
        if name.as_str() == "fuse.w" {
            let d = add_model.config.d_model;
            let paths = 1 + add_model.config.features().len();
            let mut stacked = Vec::with_capacity(paths * tensor.size());
            for _ in 0..paths {
                stacked.extend_from_slice(tensor.data());
            }
            *cat_model.param_mut("fuse.w") =
                Tensor::new(vec![paths * add_model.config.d_word, d], stacked);
        } else {
            *cat_model.param_mut(name) = tensor.clone();
        }
    }

    let batch = batch_of(&["国好明", "明国"], &vocab, &dict, &alphabets, 6, 8);
    let ta = Tape::new();
    let la = add_model.forward_mlm(&ta, &batch).unwrap().logits.value();
    let tb = Tape::new();
    let lb = cat_model.forward_mlm(&tb, &batch).unwrap().logits.value();
    for (a, b) in la.data().iter().zip(lb.data()) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn untied_when_widths_differ() {
    let (vocab, _dict, alphabets) = fixture();
    let tied = StyleBertModel::new(tiny_config(), &vocab, &alphabets, 1).unwrap();
    assert!(tied.tied_output());
    assert!(!tied.param_names().iter().any(|n| n == "mlm.decoder"));

    let config = FusionEmbedderConfig { d_word: 4, ..tiny_config() };
    let untied = StyleBertModel::new(config, &vocab, &alphabets, 1).unwrap();
    assert!(!untied.tied_output());
    assert!(untied.param_names().iter().any(|n| n == "mlm.decoder"));
}

// ---- straight-line reference forward pass -------------------------------

fn sl_linear(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    b.data()[j]
                        + (0..k).map(|p| row[p] * w.data()[p * n + j]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn sl_layer_norm(x: &[Vec<f64>], g: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + 1e-12).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * is * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn sl_gelu(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = 0.7978845608028654;
    x.iter()
        .map(|row| {
            row.iter()
                .map(|&v| 0.5 * v * (1.0 + (k * (v + 0.044715 * v * v * v)).tanh()))
                .collect()
        })
        .collect()
}

fn sl_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[test]
fn single_head_forward_matches_straight_line_reference() {
    let (vocab, dict, alphabets) = fixture();
    let config = FusionEmbedderConfig {
        d_word: 4,
        d_feat: 4,
        d_model: 4,
        n_heads: 1,
        n_layers: 1,
        d_ff: 8,
        max_len: 4,
        enabled_features: vec![],
        ..FusionEmbedderConfig::default()
    };
    let m = StyleBertModel::new(config, &vocab, &alphabets, 13).unwrap();
    let batch = batch_of(&["国"], &vocab, &dict, &alphabets, 4, 8);

    let tape = Tape::new();
    let logits = m.forward_mlm(&tape, &batch).unwrap().logits.value();

    // independent recomputation with plain loops
    let d = 4;
    let s = 4;
    let wt = m.param("word.table");
    let mut x: Vec<Vec<f64>> = batch
        .word_ids
        .iter()
        .map(|&id| wt.data()[id as usize * d..(id as usize + 1) * d].to_vec())
        .collect();
    x = sl_linear(&x, m.param("fuse.w"), m.param("fuse.b"));
    let pt = m.param("pos.table");
    for (pos, row) in x.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += pt.data()[pos * d + j];
        }
    }
    x = sl_layer_norm(&x, m.param("embed.ln.g"), m.param("embed.ln.b"));

    let q = sl_linear(&x, m.param("layer0.attn.wq"), m.param("layer0.attn.bq"));
    let k = sl_linear(&x, m.param("layer0.attn.wk"), m.param("layer0.attn.bk"));
    let v = sl_linear(&x, m.param("layer0.attn.wv"), m.param("layer0.attn.bv"));
    let mut ctx = vec![vec![0.0; d]; s];
    for qi in 0..s {
        let mut scores: Vec<f64> = (0..s)
            .map(|ki| {
                (0..d).map(|j| q[qi][j] * k[ki][j]).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        for (ki, sc) in scores.iter_mut().enumerate() {
            if batch.attention_mask[ki] == 0 {
                *sc += -1e30;
            }
        }
        let attn = sl_softmax(&scores);
        for ki in 0..s {
            for j in 0..d {
                ctx[qi][j] += attn[ki] * v[ki][j];
            }
        }
    }
    let out = sl_linear(&ctx, m.param("layer0.attn.wo"), m.param("layer0.attn.bo"));
    for (row, o) in x.iter_mut().zip(&out) {
        for j in 0..d {
            row[j] += o[j];
        }
    }
    x = sl_layer_norm(&x, m.param("layer0.ln1.g"), m.param("layer0.ln1.b"));
    let ff = sl_linear(
        &sl_gelu(&sl_linear(&x, m.param("layer0.ffn.w1"), m.param("layer0.ffn.b1"))),
        m.param("layer0.ffn.w2"),
        m.param("layer0.ffn.b2"),
    );
    for (row, o) in x.iter_mut().zip(&ff) {
        for j in 0..d {
            row[j] += o[j];
        }
    }
    x = sl_layer_norm(&x, m.param("layer0.ln2.g"), m.param("layer0.ln2.b"));

    let h = sl_layer_norm(
        &sl_gelu(&sl_linear(&x, m.param("mlm.dense.w"), m.param("mlm.dense.b"))),
        m.param("mlm.ln.g"),
        m.param("mlm.ln.b"),
    );
    let vsz = m.vocab_size;
    for pos in 0..s {
        for t in 0..vsz {
            let mut logit = m.param("mlm.bias").data()[t];
            for j in 0..d {
                logit += h[pos][j] * wt.data()[t * d + j];
            }
            let got = logits.data()[pos * vsz + t];
            assert!(
                (got - logit).abs() <= 1e-8,
                "logit [{pos},{t}]: model {got} vs reference {logit}"
            );
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (vocab, dict, alphabets) = fixture();
    let config = FusionEmbedderConfig {
        d_word: 4,
        d_feat: 4,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        max_len: 4,
        ..FusionEmbedderConfig::default()
    };
    let mut model = StyleBertModel::new(config, &vocab, &alphabets, 19).unwrap();
    let batch = batch_of(&["国好"], &vocab, &dict, &alphabets, 4, 8);
    let labels = vec![crate::masking::IGNORE_LABEL, vocab.id_of('国') as i64, vocab.id_of('好') as i64, crate::masking::IGNORE_LABEL];

    let loss_of = |m: &StyleBertModel| {
        let tape = Tape::new();
        let pass = m.forward_mlm(&tape, &batch).unwrap();
        pass.logits.cross_entropy(&labels).unwrap().value().item()
    };

    let tape = Tape::new();
    let pass = model.forward_mlm(&tape, &batch).unwrap();
    let loss = pass.logits.cross_entropy(&labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = pass.params.iter().map(|&p| grads.get(p)).collect();

    let h = 1e-5;
    for pi in 0..model.params().len() {
        for i in 0..model.params()[pi].size() {
            let orig = model.params()[pi].data()[i];
            model.params_mut()[pi].data_mut()[i] = orig + h;
            let up = loss_of(&model);
            model.params_mut()[pi].data_mut()[i] = orig - h;
            let down = loss_of(&model);
            model.params_mut()[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            assert!(
                rel < 1e-6,
                "param {} [{i}]: analytic {a} vs numeric {numeric}",
                model.param_names()[pi]
            );
        }
    }
}

// ---- checkpoints --------------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (vocab, dict, alphabets) = fixture();
    let model = StyleBertModel::new(tiny_config(), &vocab, &alphabets, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.optimizer.is_none());
    assert_eq!(loaded.model.vocab_digest, model.vocab_digest);

    let batch = batch_of(&["国好"], &vocab, &dict, &alphabets, 6, 8);
    let ta = Tape::new();
    let la = model.forward_mlm(&ta, &batch).unwrap().logits.value();
    let tb = Tape::new();
    let lb = loaded.model.forward_mlm(&tb, &batch).unwrap().logits.value();
    assert_eq!(la.data(), lb.data());
}

#[test]
fn checkpoint_preserves_optimizer_state() {
    let (vocab, _dict, alphabets) = fixture();
    let model = StyleBertModel::new(tiny_config(), &vocab, &alphabets, 42).unwrap();
    let mut st = crate::optim::OptimizerState::new(
        crate::optim::AdamWParams::default(),
        &model.param_shapes(),
    );
    st.step = 17;
    st.moments_mut()[0].0.data_mut()[0] = 0.5;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, Some(&st)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let lst = loaded.optimizer.unwrap();
    assert_eq!(lst.step, 17);
    assert_eq!(lst.moments()[0].0.data()[0], 0.5);
    assert_eq!(lst.moments().len(), st.moments().len());
}

#[test]
fn tampered_payload_is_refused() {
    let (vocab, _dict, alphabets) = fixture();
    let model = StyleBertModel::new(tiny_config(), &vocab, &alphabets, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::DigestMismatch)));
}

#[test]
fn bad_magic_version_and_truncation_are_distinct_errors() {
    let (vocab, _dict, alphabets) = fixture();
    let model = StyleBertModel::new(tiny_config(), &vocab, &alphabets, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

    let mut bad = bytes.clone();
    bad[4] = 99;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::Version { found: 99 })
    ));

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated { .. })));
}

#[test]
fn capacity_mismatch_names_the_offending_tensor() {
    // a TextCNN chaizi head with capacity 3 loses its width-4 filter, so a
    // header edited to capacity 3 no longer matches the stored tensor list
    let (vocab, _dict, alphabets) = fixture();
    let config = FusionEmbedderConfig { head_kind: HeadKind::TextCnn, ..tiny_config() };
    let model = StyleBertModel::new(config, &vocab, &alphabets, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let needle = b"\"chaizi_capacity\":8";
    let at = bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .expect("header should spell out the capacity");
    bytes[at + needle.len() - 1] = b'3';
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("chaizi.cnn") || msg.contains("tensor"), "{msg}");
}

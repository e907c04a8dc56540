use cfqa_tensor::init::{seeded, uniform_fan_in};
use cfqa_tensor::{ParamStore, Scalar, Tensor};

use crate::config::ModelConfig;

/// Parameter names of one conv → attention → feed-forward block.
pub(crate) fn block_shapes(prefix: &str, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v = vec![
        (format!("{prefix}.ln1.g"), vec![d]),
        (format!("{prefix}.ln1.b"), vec![d]),
        (format!("{prefix}.conv.w"), vec![cfg.conv_kernel, d, cfg.conv_filters]),
        (format!("{prefix}.conv.b"), vec![cfg.conv_filters]),
        (format!("{prefix}.ln2.g"), vec![d]),
        (format!("{prefix}.ln2.b"), vec![d]),
        (format!("{prefix}.ln3.g"), vec![d]),
        (format!("{prefix}.ln3.b"), vec![d]),
        (format!("{prefix}.ffn.w1"), vec![d, d]),
        (format!("{prefix}.ffn.b1"), vec![d]),
        (format!("{prefix}.ffn.w2"), vec![d, d]),
        (format!("{prefix}.ffn.b2"), vec![d]),
    ];
    for m in ["wq", "wk", "wv", "wo"] {
        v.push((format!("{prefix}.attn.{m}"), vec![d, d]));
    }
    v
}

fn gru_shapes(prefix: &str, d_in: usize, h: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.gru.w"), vec![d_in, 3 * h]),
        (format!("{prefix}.gru.u"), vec![h, 3 * h]),
        (format!("{prefix}.gru.b"), vec![3 * h]),
    ]
}

/// Every parameter of the model with its shape, in no particular order.
pub fn param_shapes(cfg: &ModelConfig, n_words: usize, n_chars: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let h = cfg.gru_hidden;
    let mut v = vec![
        ("emb.word".to_string(), vec![n_words, cfg.d_word]),
        ("emb.char".to_string(), vec![n_chars, cfg.d_char]),
    ];
    let encoders: &[&str] = if cfg.share_question_encoder { &["enc"] } else { &["enc", "qenc"] };
    for e in encoders {
        v.push((format!("{e}.proj.w"), vec![cfg.d_word + cfg.d_char, d]));
        v.push((format!("{e}.proj.b"), vec![d]));
        v.extend(block_shapes(&format!("{e}.block"), cfg));
    }
    v.extend([
        ("sel.conv.w".to_string(), vec![cfg.selector_kernel, d, cfg.selector_filters]),
        ("sel.conv.b".to_string(), vec![cfg.selector_filters]),
        ("sel.out.w".to_string(), vec![cfg.selector_filters, 1]),
        ("ans.w0".to_string(), vec![3 * d, 1]),
        ("ans.fuse.w".to_string(), vec![4 * d, d]),
        ("ans.fuse.b".to_string(), vec![d]),
        ("ans.start.w".to_string(), vec![2 * d, 1]),
        ("ans.end.w".to_string(), vec![2 * d, 1]),
        ("state.sep".to_string(), vec![1, d]),
        ("actor.head.w".to_string(), vec![h, 3]),
        ("actor.head.b".to_string(), vec![3]),
        ("critic.head.w".to_string(), vec![h, 1]),
        ("critic.head.b".to_string(), vec![1]),
    ]);
    v.extend(block_shapes("ans.block", cfg));
    v.extend(gru_shapes("actor", d, h));
    v.extend(gru_shapes("critic", d, h));
    v
}

/// Seeded initialization: weights uniform in ±1/√fan_in (embedding tables
/// use their width as fan-in), biases zero, layer-norm gains one, and the
/// actor and critic heads zero so the untrained policy is uniform and the
/// untrained value is zero.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, n_words: usize, n_chars: usize, seed: u64) -> ParamStore<T> {
    let mut shapes = param_shapes(cfg, n_words, n_chars);
    shapes.sort();
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let leaf = name.rsplit('.').next().unwrap_or("");
        let value = if name.contains(".head.") || leaf.starts_with('b') && shape.len() == 1 {
            Tensor::zeros(&shape)
        } else if leaf == "g" {
            Tensor::ones(&shape)
        } else {
            let fan_in = match (name.as_str(), shape.len()) {
                ("emb.word" | "emb.char" | "state.sep", _) => shape[1],
                (_, 3) => shape[0] * shape[1],
                _ => shape[0],
            };
            uniform_fan_in(&shape, fan_in, &mut rng)
        };
        store.insert(name, value);
    }
    store
}

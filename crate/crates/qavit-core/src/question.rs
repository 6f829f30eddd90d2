//! Question pathway: tokenization, text encoding into `F_Q'`, and per-layer
//! projection into the vision feature space.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{LrGroup, ParamStatus, ParameterRegistry};
use crate::tensor::{trunc_normal, Element, Tensor};
use crate::vit::{linear, vit_block, BlockWeights, LnParams, INIT_STD};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Token table with reserved pad/unk ids, stable across save/load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = S>, S: AsRef<str>>(tokens: I) -> Self {
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut token_to_id = BTreeMap::new();
        token_to_id.insert("<pad>".to_string(), PAD_ID);
        token_to_id.insert("<unk>".to_string(), UNK_ID);
        for tok in tokens {
            let tok = tok.as_ref();
            if !token_to_id.contains_key(tok) {
                let id = id_to_token.len() as u32;
                token_to_id.insert(tok.to_string(), id);
                id_to_token.push(tok.to_string());
            }
        }
        Vocab { token_to_id, id_to_token }
    }

    /// Vocabulary size including the reserved pad/unk ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// UTF-8 `token<TAB>id` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", tok, id));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut id_to_token = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("vocab line {} missing tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Config(format!("vocab line {} has bad id", lineno + 1)))?;
            if id != id_to_token.len() {
                return Err(Error::Config(format!("vocab ids must be dense, line {}", lineno + 1)));
            }
            id_to_token.push(tok.to_string());
        }
        if id_to_token.len() < 2 {
            return Err(Error::Config("vocab must contain pad and unk".into()));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { token_to_id, id_to_token })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionTokens {
    pub ids: Vec<u32>,
}

impl QuestionTokens {
    pub fn empty() -> Self {
        QuestionTokens { ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercase, split on non-alphanumeric runs, map through the vocab with
/// unk fallback, truncate to `k_max`.
pub fn tokenize(text: &str, vocab: &Vocab, k_max: usize) -> QuestionTokens {
    let lower = text.to_lowercase();
    let ids = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(k_max)
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    QuestionTokens { ids }
}

/// Raw word split used when building vocabularies from template text.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// Pure embedding lookup ("Emb." ablation row).
    EmbeddingOnly,
    /// Embeddings plus a 2-block transformer ("Enc." ablation row).
    TinyEncoder,
}

pub struct TextEncoderWeights<T: Element> {
    pub mode: TextSource,
    /// `[vocab × C_text]` embedding table.
    pub embed: Tensor<T>,
    /// Learned positions `[k_max × C_text]`, used in tiny-encoder mode only
    /// so that embedding-only stays a pure lookup.
    pub pos: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_ln: LnParams<T>,
    pub width: usize,
    pub k_max: usize,
    pub heads: usize,
}

impl<T: Element> TextEncoderWeights<T> {
    pub fn init(
        mode: TextSource,
        vocab_size: usize,
        width: usize,
        k_max: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embed = Tensor::param(&[vocab_size, width], trunc_normal(vocab_size * width, INIT_STD, rng)).unwrap();
        let pos = Tensor::param(&[k_max, width], trunc_normal(k_max * width, INIT_STD, rng)).unwrap();
        let blocks = (0..2).map(|_| BlockWeights::init(width, 4 * width, rng)).collect();
        TextEncoderWeights { mode, embed, pos, blocks, final_ln: LnParams::init(width), width, k_max, heads }
    }

    pub fn register(&self, reg: &mut ParameterRegistry<T>) {
        let g = LrGroup::Base;
        let s = ParamStatus::Trainable;
        reg.register("text.embed", &self.embed, s, g);
        reg.register("text.pos", &self.pos, s, g);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("text.block{}", i);
            reg.register(&format!("{p}.ln1.gamma"), &b.ln1.gamma, s, g);
            reg.register(&format!("{p}.ln1.beta"), &b.ln1.beta, s, g);
            reg.register(&format!("{p}.attn.wq"), &b.attn.w_q, s, g);
            reg.register(&format!("{p}.attn.bq"), &b.attn.b_q, s, g);
            reg.register(&format!("{p}.attn.wk"), &b.attn.w_k, s, g);
            reg.register(&format!("{p}.attn.bk"), &b.attn.b_k, s, g);
            reg.register(&format!("{p}.attn.wv"), &b.attn.w_v, s, g);
            reg.register(&format!("{p}.attn.bv"), &b.attn.b_v, s, g);
            reg.register(&format!("{p}.attn.proj.weight"), &b.attn.w_o, s, g);
            reg.register(&format!("{p}.attn.proj.bias"), &b.attn.b_o, s, g);
            reg.register(&format!("{p}.ln2.gamma"), &b.ln2.gamma, s, g);
            reg.register(&format!("{p}.ln2.beta"), &b.ln2.beta, s, g);
            reg.register(&format!("{p}.mlp.fc1.weight"), &b.fc1_w, s, g);
            reg.register(&format!("{p}.mlp.fc1.bias"), &b.fc1_b, s, g);
            reg.register(&format!("{p}.mlp.fc2.weight"), &b.fc2_w, s, g);
            reg.register(&format!("{p}.mlp.fc2.bias"), &b.fc2_b, s, g);
        }
        reg.register("text.final_ln.gamma", &self.final_ln.gamma, s, g);
        reg.register("text.final_ln.beta", &self.final_ln.beta, s, g);
    }
}

/// Encode question tokens into `F_Q'` of shape `[K × C_text]`. `K = 0`
/// yields an empty tensor; no padding tokens ever enter the output.
pub fn encode_question<T: Element>(q: &QuestionTokens, w: &TextEncoderWeights<T>) -> Result<Tensor<T>> {
    if q.is_empty() {
        return Ok(Tensor::zeros(&[0, w.width]));
    }
    if q.len() > w.k_max {
        return Err(Error::OutOfRange {
            op: "encode_question",
            detail: format!("{} tokens exceed k_max {}", q.len(), w.k_max),
        });
    }
    let emb = w.embed.gather_rows(&q.ids)?;
    match w.mode {
        TextSource::EmbeddingOnly => Ok(emb),
        TextSource::TinyEncoder => {
            let pos = w.pos.slice_rows(0, q.len())?;
            let mut x = emb.add(&pos)?;
            for block in &w.blocks {
                x = vit_block(&x, block, w.heads)?;
            }
            w.final_ln.apply(&x)
        }
    }
}

/// One two-layer MLP (`C_text -> C -> C`, gelu between) per fused layer.
pub struct PerLayerProjector<T: Element> {
    mlps: BTreeMap<usize, ProjectorMlp<T>>,
}

pub struct ProjectorMlp<T: Element> {
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Element> PerLayerProjector<T> {
    pub fn init(layers: &[usize], c_text: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mlps = BTreeMap::new();
        for &layer in layers {
            mlps.insert(
                layer,
                ProjectorMlp {
                    fc1_w: Tensor::param(&[c_text, c], trunc_normal(c_text * c, INIT_STD, rng)).unwrap(),
                    fc1_b: Tensor::param(&[c], vec![T::zero(); c]).unwrap(),
                    fc2_w: Tensor::param(&[c, c], trunc_normal(c * c, INIT_STD, rng)).unwrap(),
                    fc2_b: Tensor::param(&[c], vec![T::zero(); c]).unwrap(),
                },
            );
        }
        PerLayerProjector { mlps }
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.mlps.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.mlps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mlps.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&ProjectorMlp<T>> {
        self.mlps.get(&layer)
    }

    pub fn register(&self, reg: &mut ParameterRegistry<T>) {
        // Projection modules are randomly initialized against frozen
        // counterparts and train in the boosted learning-rate group.
        for (layer, mlp) in &self.mlps {
            let p = format!("qproj.{}", layer);
            reg.register(&format!("{p}.fc1.weight"), &mlp.fc1_w, ParamStatus::Trainable, LrGroup::ProjectionX100);
            reg.register(&format!("{p}.fc1.bias"), &mlp.fc1_b, ParamStatus::Trainable, LrGroup::ProjectionX100);
            reg.register(&format!("{p}.fc2.weight"), &mlp.fc2_w, ParamStatus::Trainable, LrGroup::ProjectionX100);
            reg.register(&format!("{p}.fc2.bias"), &mlp.fc2_b, ParamStatus::Trainable, LrGroup::ProjectionX100);
        }
    }
}

/// Project cached `F_Q'` into the vision width for one fused layer.
pub fn project_question<T: Element>(
    f_q_prime: &Tensor<T>,
    layer: usize,
    p: &PerLayerProjector<T>,
) -> Result<Tensor<T>> {
    let mlp = p.get(layer).ok_or(Error::UnknownLayer { layer })?;
    let h = linear(f_q_prime, &mlp.fc1_w, &mlp.fc1_b)?.gelu()?;
    linear(&h, &mlp.fc2_w, &mlp.fc2_b)
}

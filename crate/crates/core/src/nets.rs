//! Tiny dual encoder: a strided conv stack for images, a pre-norm
//! transformer for text, contrastive projections, the SimSiam projector and
//! predictor, the MLM head and the learnable temperature.

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const LOGIT_SCALE: &str = "logit_scale";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Eos,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub conv_channels: [usize; 3],
    /// Backbone image feature width.
    pub d_img: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub mlp_ratio: usize,
    /// Shared contrastive embedding width.
    pub embed_dim: usize,
    pub init_tau: f64,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            image_channels: 3,
            conv_channels: [16, 32, 64],
            d_img: 64,
            vocab_size: 64,
            context_length: 32,
            text_width: 64,
            text_layers: 2,
            text_heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
            init_tau: 0.07,
            pooling: Pooling::Eos,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return bad(format!(
                "text_width {} not divisible by text_heads {}",
                self.text_width, self.text_heads
            ));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim {} must be even", self.embed_dim));
        }
        if self.context_length < 2 {
            return bad("context_length must be at least 2".into());
        }
        if !(self.init_tau > 0.0) {
            return bad(format!("init_tau {} must be positive", self.init_tau));
        }
        Ok(())
    }
}

/// Ordered named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::default();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

/// Whether weight decay applies to a parameter.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain") || name == LOGIT_SCALE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Parameters placed on a graph for one forward/backward pass.
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
    index: HashMap<String, usize>,
    pub config: ModelConfig,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    /// Bound variables in parameter order.
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    /// `τ = exp(-s)`.
    pub fn tau(&self) -> Result<f64> {
        Ok((-self.get(LOGIT_SCALE)?.item().f64()).exp())
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(self.rng.gen_range(-bound..bound)))
    }
}

fn linear<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, gain: f64, bias: bool) {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    ps.insert(format!("{name}.weight"), init.uniform(&[fan_in, fan_out], bound));
    if bias {
        ps.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }
}

fn layer_norm_params<T: Real>(ps: &mut ParamSet<T>, name: &str, d: usize) {
    ps.insert(format!("{name}.gain"), Tensor::full(&[d], T::one()));
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Deterministic initialization from `seed`.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut ps = ParamSet::default();

    let mut in_ch = config.image_channels;
    for (i, &out_ch) in config.conv_channels.iter().enumerate() {
        let fan_in = in_ch * 9;
        let bound = RELU_GAIN * (3.0 / fan_in as f64).sqrt();
        ps.insert(format!("image.conv{}.weight", i + 1), init.uniform(&[out_ch, in_ch, 3, 3], bound));
        ps.insert(format!("image.conv{}.bias", i + 1), Tensor::zeros(&[out_ch]));
        in_ch = out_ch;
    }
    linear(&mut ps, &mut init, "image.fc", in_ch, config.d_img, 1.0, true);

    let e = config.text_width;
    ps.insert("text.token_embed", init.uniform(&[config.vocab_size, e], 0.1));
    ps.insert("text.pos_embed", init.uniform(&[config.context_length, e], 0.02));
    for b in 0..config.text_layers {
        let p = format!("text.blocks.{b}");
        layer_norm_params(&mut ps, &format!("{p}.ln1"), e);
        linear(&mut ps, &mut init, &format!("{p}.attn.qkv"), e, 3 * e, 1.0, true);
        linear(&mut ps, &mut init, &format!("{p}.attn.out"), e, e, 1.0, true);
        layer_norm_params(&mut ps, &format!("{p}.ln2"), e);
        let hidden = e * config.mlp_ratio;
        linear(&mut ps, &mut init, &format!("{p}.mlp.fc1"), e, hidden, 1.0, true);
        linear(&mut ps, &mut init, &format!("{p}.mlp.fc2"), hidden, e, 1.0, true);
    }
    layer_norm_params(&mut ps, "text.ln_final", e);

    let d = config.embed_dim;
    linear(&mut ps, &mut init, "proj.image", config.d_img, d, 1.0, false);
    linear(&mut ps, &mut init, "proj.text", e, d, 1.0, false);

    linear(&mut ps, &mut init, "simsiam.proj.fc1", config.d_img, d, RELU_GAIN, true);
    linear(&mut ps, &mut init, "simsiam.proj.fc2", d, d, RELU_GAIN, true);
    linear(&mut ps, &mut init, "simsiam.proj.fc3", d, d, 1.0, true);
    linear(&mut ps, &mut init, "simsiam.pred.fc1", d, d / 2, RELU_GAIN, true);
    linear(&mut ps, &mut init, "simsiam.pred.fc2", d / 2, d, 1.0, true);

    linear(&mut ps, &mut init, "mlm", e, config.vocab_size, 1.0, true);

    ps.insert(LOGIT_SCALE, Tensor::scalar(T::c((1.0 / config.init_tau).ln())));
    Ok(ModelParams {
        config: config.clone(),
        params: ps,
    })
}

impl<T: Real> ModelParams<T> {
    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.params.index.clone(),
            config: self.config.clone(),
        }
    }

    /// Uses caller-created variables, one per parameter in order.
    pub fn bind_vars<'g>(&self, vars: &[Var<'g, T>]) -> Result<Bound<'g, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Parameter(format!(
                "expected {} variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.params.index.clone(),
            config: self.config.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.total_len()
    }

    pub fn tau(&self) -> f64 {
        self.params
            .get(LOGIT_SCALE)
            .map_or(f64::NAN, |t| (-t.item().f64()).exp())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

fn dense<'g, T: Real>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let y = x.matmul(p.get(&format!("{name}.weight"))?)?;
    match p.index.contains_key(&format!("{name}.bias")) {
        true => y.add_row(p.get(&format!("{name}.bias"))?),
        false => Ok(y),
    }
}

/// Backbone image feature `[N × d_img]` for a `[N,C,H,W]` batch.
pub fn encode_image<'g, T: Real>(p: &Bound<'g, T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = images.shape();
    let c = &p.config;
    if s.len() != 4 || s[1] != c.image_channels || s[2] != c.image_size || s[3] != c.image_size {
        return Err(Error::Shape(format!(
            "expected images [N, {}, {}, {}], got {:?}",
            c.image_channels, c.image_size, c.image_size, s
        )));
    }
    let spec = Conv2dSpec { stride: 2, padding: 1 };
    // [0, 1] pixels to [-1, 1].
    let ones = images.graph().constant(Tensor::full(&s, T::one()));
    let mut x = images.scale(2.0).sub(ones)?;
    for i in 1..=3 {
        x = x
            .conv2d(p.get(&format!("image.conv{i}.weight"))?, p.get(&format!("image.conv{i}.bias"))?, spec)?
            .relu();
    }
    dense(p, "image.fc", x.global_avg_pool()?)
}

/// Token ids of `n` sequences padded to a common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub n: usize,
    pub len: usize,
    /// Number of real tokens per sequence, EOS included.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>], len: usize, pad: usize) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut lengths = Vec::with_capacity(rows.len());
        for r in rows {
            let k = r.len().min(len);
            ids.extend_from_slice(&r[..k]);
            ids.extend(std::iter::repeat(pad).take(len - k));
            lengths.push(k.max(1));
        }
        TokenBatch {
            ids,
            n: rows.len(),
            len,
            lengths,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn concat(&self, other: &TokenBatch) -> Result<TokenBatch> {
        if self.len != other.len {
            return Err(Error::dim("token concat", &[self.n, self.len], &[other.n, other.len]));
        }
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut lengths = self.lengths.clone();
        lengths.extend_from_slice(&other.lengths);
        Ok(TokenBatch {
            ids,
            n: self.n + other.n,
            len: self.len,
            lengths,
        })
    }
}

pub struct TextOutput<'g, T: Real> {
    /// Per-position outputs `[N·L × e]`.
    pub word_feats: Var<'g, T>,
    /// Pooled sentence feature `[N × e]`.
    pub sent_feat: Var<'g, T>,
    /// Sequence length actually encoded.
    pub len: usize,
    pub truncated: bool,
}

fn truncate(tokens: &TokenBatch, max: usize) -> TokenBatch {
    let mut ids = Vec::with_capacity(tokens.n * max);
    let mut lengths = Vec::with_capacity(tokens.n);
    for i in 0..tokens.n {
        let row = tokens.row(i);
        let len = tokens.lengths[i];
        if len > max {
            ids.extend_from_slice(&row[..max - 1]);
            ids.push(row[len - 1]);
            lengths.push(max);
        } else {
            ids.extend_from_slice(&row[..max]);
            lengths.push(len);
        }
    }
    TokenBatch {
        ids,
        n: tokens.n,
        len: max,
        lengths,
    }
}

/// Runs the text transformer. Keys beyond each sequence length are masked,
/// so padding never influences real positions.
pub fn encode_text<'g, T: Real>(p: &Bound<'g, T>, tokens: &TokenBatch) -> Result<TextOutput<'g, T>> {
    let c = &p.config;
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= c.vocab_size) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab: c.vocab_size,
        });
    }
    let truncated = tokens.len > c.context_length;
    let owned;
    let tokens = if truncated {
        owned = truncate(tokens, c.context_length);
        &owned
    } else {
        tokens
    };
    let (n, l) = (tokens.n, tokens.len);
    let positions: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
    let mut x = p
        .get("text.token_embed")?
        .gather_rows(&tokens.ids)?
        .add(p.get("text.pos_embed")?.gather_rows(&positions)?)?;
    for b in 0..c.text_layers {
        let pre = format!("text.blocks.{b}");
        let h = x.layer_norm(p.get(&format!("{pre}.ln1.gain"))?, p.get(&format!("{pre}.ln1.bias"))?)?;
        let qkv = dense(p, &format!("{pre}.attn.qkv"), h)?;
        let a = qkv.attention(n, l, c.text_heads, &tokens.lengths)?;
        x = x.add(dense(p, &format!("{pre}.attn.out"), a)?)?;
        let h = x.layer_norm(p.get(&format!("{pre}.ln2.gain"))?, p.get(&format!("{pre}.ln2.bias"))?)?;
        let m = dense(p, &format!("{pre}.mlp.fc1"), h)?.gelu();
        x = x.add(dense(p, &format!("{pre}.mlp.fc2"), m)?)?;
    }
    let word_feats = x.layer_norm(p.get("text.ln_final.gain")?, p.get("text.ln_final.bias")?)?;
    let sent_feat = match c.pooling {
        Pooling::Eos => {
            let eos: Vec<usize> = (0..n).map(|i| i * l + tokens.lengths[i] - 1).collect();
            word_feats.gather_rows(&eos)?
        }
        Pooling::Mean => {
            let mut pool = Tensor::<T>::zeros(&[n, n * l]);
            for i in 0..n {
                let w = T::c(1.0 / tokens.lengths[i] as f64);
                for t in 0..tokens.lengths[i] {
                    pool.data_mut()[i * n * l + i * l + t] = w;
                }
            }
            word_feats.graph().constant(pool).matmul(word_feats)?
        }
    };
    Ok(TextOutput {
        word_feats,
        sent_feat,
        len: l,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Linear projection into the shared space followed by row normalization.
pub fn project<'g, T: Real>(p: &Bound<'g, T>, feat: Var<'g, T>, which: Modality) -> Result<Var<'g, T>> {
    let name = match which {
        Modality::Image => "proj.image",
        Modality::Text => "proj.text",
    };
    dense(p, name, feat)?.l2_normalize_rows()
}

pub struct SimSiamOut<'g, T: Real> {
    pub z: Var<'g, T>,
    pub z_aug: Var<'g, T>,
    pub p: Var<'g, T>,
    pub p_aug: Var<'g, T>,
}

fn simsiam_project<'g, T: Real>(p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let h = dense(p, "simsiam.proj.fc1", x)?.relu();
    let h = dense(p, "simsiam.proj.fc2", h)?.relu();
    dense(p, "simsiam.proj.fc3", h)
}

fn simsiam_predict<'g, T: Real>(p: &Bound<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    let h = dense(p, "simsiam.pred.fc1", z)?.relu();
    dense(p, "simsiam.pred.fc2", h)
}

/// SimSiam projector and predictor over both views. Outputs are not
/// normalized; the loss works with cosines.
pub fn simsiam_heads<'g, T: Real>(
    p: &Bound<'g, T>,
    feat: Var<'g, T>,
    feat_aug: Var<'g, T>,
) -> Result<SimSiamOut<'g, T>> {
    if feat.shape() != feat_aug.shape() {
        return Err(Error::dim("simsiam_heads", &feat.shape(), &feat_aug.shape()));
    }
    let z = simsiam_project(p, feat)?;
    let z_aug = simsiam_project(p, feat_aug)?;
    Ok(SimSiamOut {
        p: simsiam_predict(p, z)?,
        p_aug: simsiam_predict(p, z_aug)?,
        z,
        z_aug,
    })
}

/// Vocabulary logits `[N × L × V]` for every position.
pub fn mlm_logits<'g, T: Real>(p: &Bound<'g, T>, word_feats: Var<'g, T>, n: usize, len: usize) -> Result<Var<'g, T>> {
    let v = p.config.vocab_size;
    dense(p, "mlm", word_feats)?.reshape(&[n, len, v])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_sets_tau() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!((a.tau() - 0.07).abs() <= 1e-7);
        let c = init_params::<f32>(&cfg, 8).unwrap();
        assert_ne!(a.params.get("image.fc.weight"), c.params.get("image.fc.weight"));
    }

    #[test]
    fn decay_excludes_bias_gain_and_scale() {
        assert!(decays("image.conv1.weight"));
        assert!(!decays("image.conv1.bias"));
        assert!(!decays("text.ln_final.gain"));
        assert!(!decays(LOGIT_SCALE));
    }

    #[test]
    fn predictor_hidden_is_half_output() {
        let cfg = ModelConfig::default();
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let w1 = p.params.get("simsiam.pred.fc1.weight").unwrap();
        let w2 = p.params.get("simsiam.pred.fc2.weight").unwrap();
        assert_eq!(w1.shape(), &[cfg.embed_dim, cfg.embed_dim / 2]);
        assert_eq!(w2.shape(), &[cfg.embed_dim / 2, cfg.embed_dim]);
        assert_eq!(
            p.params.get("proj.image.weight").unwrap().shape()[1],
            p.params.get("proj.text.weight").unwrap().shape()[1]
        );
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ModelConfig {
            text_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(init_params::<f32>(&cfg, 0), Err(Error::Config(_))));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SlulError;
use crate::checkpoint::Checkpoint;
use crate::corpus::{TokenId, BOS, MASK, PAD};
use crate::diffkit::{Graph, Tensor, Var};

/// Logit offset that removes PAD, BOS and MASK from every output distribution.
pub const BLOCKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            init_seed: 23,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct NormIx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AttnIx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct FfnIx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Layout {
    src_emb: usize,
    gloss_emb: usize,
    enc_ln1: NormIx,
    enc_attn: AttnIx,
    enc_ln2: NormIx,
    enc_ffn: FfnIx,
    enc_out: NormIx,
    dec_ln1: NormIx,
    dec_self: AttnIx,
    dec_ln2: NormIx,
    dec_cross: AttnIx,
    dec_ln3: NormIx,
    dec_ffn: FfnIx,
    dec_out: NormIx,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Default)]
struct ParamTable {
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    inits: Vec<Init>,
}

impl ParamTable {
    fn add(&mut self, name: &str, shape: [usize; 2], init: Init) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIx {
        NormIx {
            gain: self.add(&format!("{name}.gain"), [1, d], Init::Ones),
            bias: self.add(&format!("{name}.bias"), [1, d], Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIx {
        let std = (1.0 / d as f64).sqrt();
        let mut w = |p: &str| self.add(&format!("{name}.{p}"), [d, d], Init::Normal(std));
        AttnIx {
            q: w("q"),
            k: w("k"),
            v: w("v"),
            o: w("o"),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, h: usize) -> FfnIx {
        FfnIx {
            w1: self.add(&format!("{name}.w1"), [d, h], Init::Normal((1.0 / d as f64).sqrt())),
            b1: self.add(&format!("{name}.b1"), [1, h], Init::Zeros),
            w2: self.add(&format!("{name}.w2"), [h, d], Init::Normal((1.0 / h as f64).sqrt())),
            b2: self.add(&format!("{name}.b2"), [1, d], Init::Zeros),
        }
    }
}

fn build_table(cfg: &ModelConfig, src_vocab: usize, gloss_vocab: usize) -> (Layout, ParamTable) {
    let d = cfg.d_model;
    let mut s = ParamTable::default();
    let layout = Layout {
        src_emb: s.add("src_emb", [src_vocab, d], Init::Normal(1.0)),
        gloss_emb: s.add("gloss_emb", [gloss_vocab, d], Init::Normal(1.0)),
        enc_ln1: s.norm("enc.ln1", d),
        enc_attn: s.attn("enc.attn", d),
        enc_ln2: s.norm("enc.ln2", d),
        enc_ffn: s.ffn("enc.ffn", d, cfg.d_ff),
        enc_out: s.norm("enc.out", d),
        dec_ln1: s.norm("dec.ln1", d),
        dec_self: s.attn("dec.self", d),
        dec_ln2: s.norm("dec.ln2", d),
        dec_cross: s.attn("dec.cross", d),
        dec_ln3: s.norm("dec.ln3", d),
        dec_ffn: s.ffn("dec.ffn", d, cfg.d_ff),
        dec_out: s.norm("dec.out", d),
        out_w: s.add("out.w", [d, gloss_vocab], Init::Normal((1.0 / d as f64).sqrt())),
        out_b: s.add("out.b", [1, gloss_vocab], Init::Zeros),
    };
    (layout, s)
}

/// Encoder-decoder weights. Source and gloss sides have separate embedding
/// tables; the output projection covers the gloss table.
#[derive(Clone, Debug, PartialEq)]
pub struct SlulParams {
    config: ModelConfig,
    src_vocab: usize,
    gloss_vocab: usize,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl SlulParams {
    pub fn init(cfg: &ModelConfig, src_vocab: usize, gloss_vocab: usize) -> Result<Self, SlulError> {
        validate_config(cfg)?;
        let (layout, table) = build_table(cfg, src_vocab, gloss_vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let tensors = table
            .shapes
            .iter()
            .zip(&table.inits)
            .map(|(&[r, c], init)| match *init {
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::filled(r, c, 1.0),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    let data = (0..r * c).map(|_| dist.sample(&mut rng)).collect();
                    Tensor::from_vec(r, c, data).expect("shape")
                }
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            src_vocab,
            gloss_vocab,
            layout,
            names: table.names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn src_vocab(&self) -> usize {
        self.src_vocab
    }

    pub fn gloss_vocab(&self) -> usize {
        self.gloss_vocab
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("slul")
            .with_meta("d_model", self.config.d_model)
            .with_meta("heads", self.config.heads)
            .with_meta("d_ff", self.config.d_ff)
            .with_meta("init_seed", self.config.init_seed)
            .with_meta("src_vocab", self.src_vocab)
            .with_meta("gloss_vocab", self.gloss_vocab);
        ck.tensors = self
            .names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SlulError> {
        if ck.kind != "slul" {
            return Err(SlulError::Checkpoint(format!("expected kind slul, found {}", ck.kind)));
        }
        let cfg = ModelConfig {
            d_model: meta(ck, "d_model")?,
            heads: meta(ck, "heads")?,
            d_ff: meta(ck, "d_ff")?,
            init_seed: meta(ck, "init_seed")?,
        };
        validate_config(&cfg)?;
        let (src_vocab, gloss_vocab) = (meta(ck, "src_vocab")?, meta(ck, "gloss_vocab")?);
        let (layout, table) = build_table(&cfg, src_vocab, gloss_vocab);
        if ck.tensors.len() != table.names.len() {
            return Err(SlulError::Checkpoint(format!(
                "expected {} tensors, found {}",
                table.names.len(),
                ck.tensors.len()
            )));
        }
        for ((name, t), (want, shape)) in ck.tensors.iter().zip(table.names.iter().zip(&table.shapes)) {
            if name != want || t.shape() != *shape || !t.is_finite() {
                return Err(SlulError::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: cfg,
            src_vocab,
            gloss_vocab,
            layout,
            names: table.names,
            tensors: ck.tensors.iter().map(|(_, t)| t.clone()).collect(),
        })
    }

    /// Registers every tensor as a borrowed parameter of `g`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> Bound {
        let vars = self.tensors.iter().map(|t| g.param(t)).collect();
        self.bind_vars(vars)
    }

    /// Uses caller-supplied nodes (in [`names`](Self::names) order) as the weights.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.tensors.len());
        let mut mask = vec![0.0; self.gloss_vocab];
        for id in [PAD, BOS, MASK] {
            mask[id as usize] = BLOCKED_LOGIT;
        }
        Bound {
            vars,
            l: self.layout,
            heads: self.config.heads,
            d: self.config.d_model,
            logit_mask: Tensor::row_vector(mask),
        }
    }
}

fn meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T, SlulError> {
    ck.meta_parse(key).map_err(|e| SlulError::Checkpoint(e.to_string()))
}

fn validate_config(cfg: &ModelConfig) -> Result<(), SlulError> {
    if cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0 || cfg.d_ff == 0 {
        return Err(SlulError::InvalidArgument(format!(
            "d_model {} must be a positive multiple of heads {}, d_ff {} positive",
            cfg.d_model, cfg.heads, cfg.d_ff
        )));
    }
    Ok(())
}

/// Sinusoidal position table, `len × d`.
pub fn positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for p in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 / rate;
            t.set(p, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

/// Weights registered in one graph, with the forward passes.
pub struct Bound {
    vars: Vec<Var>,
    l: Layout,
    heads: usize,
    d: usize,
    logit_mask: Tensor,
}

impl Bound {
    /// Weight nodes in [`SlulParams::names`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn embed(&self, g: &mut Graph<'_>, table: usize, ids: &[TokenId]) -> Result<Var, SlulError> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.gather(self.vars[table], &ids)?;
        let pos = g.constant(positions(ids.len(), self.d));
        Ok(g.add(x, pos)?)
    }

    fn norm(&self, g: &mut Graph<'_>, ix: NormIx, x: Var) -> Result<Var, SlulError> {
        Ok(g.layer_norm(x, self.vars[ix.gain], self.vars[ix.bias])?)
    }

    fn attn(&self, g: &mut Graph<'_>, ix: AttnIx, xq: Var, xkv: Var, causal: bool) -> Result<Var, SlulError> {
        let q = g.matmul(xq, self.vars[ix.q])?;
        let k = g.matmul(xkv, self.vars[ix.k])?;
        let v = g.matmul(xkv, self.vars[ix.v])?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        Ok(g.matmul(a, self.vars[ix.o])?)
    }

    fn ffn(&self, g: &mut Graph<'_>, ix: FfnIx, x: Var) -> Result<Var, SlulError> {
        let h = g.matmul(x, self.vars[ix.w1])?;
        let h = g.add_row(h, self.vars[ix.b1])?;
        let h = g.gelu(h);
        let o = g.matmul(h, self.vars[ix.w2])?;
        Ok(g.add_row(o, self.vars[ix.b2])?)
    }

    /// `H` for `[lang; prompt]`, one row per token.
    pub fn encode(&self, g: &mut Graph<'_>, lang: TokenId, prompt: &[TokenId]) -> Result<Var, SlulError> {
        if prompt.is_empty() {
            return Err(SlulError::EmptyPrompt);
        }
        let l = &self.l;
        let ids: Vec<TokenId> = std::iter::once(lang).chain(prompt.iter().copied()).collect();
        let x = self.embed(g, l.src_emb, &ids)?;
        let n = self.norm(g, l.enc_ln1, x)?;
        let a = self.attn(g, l.enc_attn, n, n, false)?;
        let x = g.add(x, a)?;
        let n = self.norm(g, l.enc_ln2, x)?;
        let f = self.ffn(g, l.enc_ffn, n)?;
        let x = g.add(x, f)?;
        self.norm(g, l.enc_out, x)
    }

    /// Decoder states (before the vocabulary projection) for `input`.
    /// `causal` selects teacher-forced mode; otherwise every position sees the
    /// whole input.
    pub fn decode_states(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        input: &[TokenId],
        causal: bool,
    ) -> Result<Var, SlulError> {
        let l = &self.l;
        let y = self.embed(g, l.gloss_emb, input)?;
        let n = self.norm(g, l.dec_ln1, y)?;
        let a = self.attn(g, l.dec_self, n, n, causal)?;
        let y = g.add(y, a)?;
        let n = self.norm(g, l.dec_ln2, y)?;
        let c = self.attn(g, l.dec_cross, n, h, false)?;
        let y = g.add(y, c)?;
        let n = self.norm(g, l.dec_ln3, y)?;
        let f = self.ffn(g, l.dec_ffn, n)?;
        let y = g.add(y, f)?;
        self.norm(g, l.dec_out, y)
    }

    /// Output logits over the gloss table; reserved ids other than EOS are blocked.
    pub fn logits(&self, g: &mut Graph<'_>, states: Var) -> Result<Var, SlulError> {
        let z = g.matmul(states, self.vars[self.l.out_w])?;
        let z = g.add_row(z, self.vars[self.l.out_b])?;
        let mask = g.constant(self.logit_mask.clone());
        Ok(g.add_row(z, mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let p = SlulParams::init(&ModelConfig { d_model: 8, heads: 2, d_ff: 16, init_seed: 1 }, 12, 9).unwrap();
        let text = p.to_checkpoint().to_text();
        let back = SlulParams::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint().to_text(), text);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig { d_model: 8, heads: 2, d_ff: 16, init_seed: 5 };
        assert_eq!(SlulParams::init(&cfg, 10, 10).unwrap(), SlulParams::init(&cfg, 10, 10).unwrap());
        let other = ModelConfig { init_seed: 6, ..cfg.clone() };
        assert_ne!(SlulParams::init(&cfg, 10, 10).unwrap(), SlulParams::init(&other, 10, 10).unwrap());
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig { d_model: 10, heads: 4, ..ModelConfig::default() };
        assert!(SlulParams::init(&cfg, 10, 10).is_err());
    }

    #[test]
    fn position_table_first_rows() {
        let p = positions(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((p.get(1, 3) - (0.01f64).cos()).abs() < 1e-15);
    }
}

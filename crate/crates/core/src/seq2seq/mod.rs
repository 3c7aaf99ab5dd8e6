//! Encoder-decoder transformer whose attention blocks accept prefix
//! key/value vectors.

mod config;
mod generate;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

pub use config::{ModelConfig, PrefixPositions, Site, ALT_PREFIX_LEN};
pub use generate::{generate, DecodeMode, GenerateOptions};

/// Token id reserved for padding in every vocabulary.
pub const PAD: usize = 0;

const LN_EPS: f64 = 1e-5;

/// Prefix keys and values for one attention block, each `[n_heads, P, d_head]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionPrefix {
    pub key: Var,
    pub value: Var,
}

/// Prefixes for every (site, layer) that carries one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrefixSet {
    entries: BTreeMap<(Site, usize), AttentionPrefix>,
}

impl PrefixSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, site: Site, layer: usize) -> Option<AttentionPrefix> {
        self.entries.get(&(site, layer)).copied()
    }

    pub fn insert(&mut self, site: Site, layer: usize, p: AttentionPrefix) {
        self.entries.insert((site, layer), p);
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, usize, AttentionPrefix)> + '_ {
        self.entries.iter().map(|(&(s, l), &p)| (s, l, p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-token encoder output and the mask of real (non-pad) positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub states: Var,
    pub mask: Vec<bool>,
    /// Tokens dropped from the left to fit `max_seq_len`.
    pub truncated: usize,
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

/// Parameter handles of the transformer inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: NormIds,
    dec: Vec<DecLayer>,
    dec_ln: NormIds,
    out_w: Option<ParamId>,
    base_prefix: BTreeMap<(Site, usize), (ParamId, ParamId)>,
}

fn linear_init<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let std = 1.0 / libm::sqrt(fan_in as f64);
    let w = store.add_normal(&format!("{name}.w"), &[fan_in, fan_out], std, rng);
    let b = store.add_zeros(&format!("{name}.b"), &[fan_out]);
    (w, b)
}

fn norm_init(store: &mut ParamStore, name: &str, d: usize) -> NormIds {
    NormIds {
        gain: store.add_full(&format!("{name}.gain"), &[d], 1.0),
        bias: store.add_zeros(&format!("{name}.bias"), &[d]),
    }
}

fn attn_init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> AttnIds {
    let (wq, bq) = linear_init(store, &format!("{name}.q"), d, d, rng);
    let (wk, bk) = linear_init(store, &format!("{name}.k"), d, d, rng);
    let (wv, bv) = linear_init(store, &format!("{name}.v"), d, d, rng);
    let (wo, bo) = linear_init(store, &format!("{name}.o"), d, d, rng);
    AttnIds {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn ffn_init<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    d_ff: usize,
    rng: &mut R,
) -> FfnIds {
    let (w1, b1) = linear_init(store, &format!("{name}.1"), d, d_ff, rng);
    let (w2, b2) = linear_init(store, &format!("{name}.2"), d_ff, d, rng);
    FfnIds { w1, b1, w2, b2 }
}

/// Standard deviation of the initial base prefixes.
const PREFIX_INIT_STD: f64 = 0.5;
const EMB_INIT_STD: f64 = 0.3;

impl Seq2Seq {
    /// Registers all transformer parameters in `store`.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = store.add_normal("tok_emb", &[config.vocab_size, d], EMB_INIT_STD, rng);
        let enc_pos = store.add_normal("enc_pos", &[config.max_seq_len, d], EMB_INIT_STD, rng);
        let dec_pos = store.add_normal("dec_pos", &[config.max_seq_len, d], EMB_INIT_STD, rng);
        let mut enc = Vec::new();
        for l in 0..config.n_enc_layers {
            let p = format!("enc.{l}");
            enc.push(EncLayer {
                ln1: norm_init(store, &format!("{p}.ln1"), d),
                attn: attn_init(store, &format!("{p}.self"), d, rng),
                ln2: norm_init(store, &format!("{p}.ln2"), d),
                ffn: ffn_init(store, &format!("{p}.ffn"), d, config.d_ff, rng),
            });
        }
        let enc_ln = norm_init(store, "enc.ln", d);
        let mut dec = Vec::new();
        for l in 0..config.n_dec_layers {
            let p = format!("dec.{l}");
            dec.push(DecLayer {
                ln1: norm_init(store, &format!("{p}.ln1"), d),
                self_attn: attn_init(store, &format!("{p}.self"), d, rng),
                ln2: norm_init(store, &format!("{p}.ln2"), d),
                cross_attn: attn_init(store, &format!("{p}.cross"), d, rng),
                ln3: norm_init(store, &format!("{p}.ln3"), d),
                ffn: ffn_init(store, &format!("{p}.ffn"), d, config.d_ff, rng),
            });
        }
        let dec_ln = norm_init(store, "dec.ln", d);
        let out_w = if config.tie_output {
            None
        } else {
            let std = 1.0 / libm::sqrt(d as f64);
            Some(store.add_normal("out.w", &[d, config.vocab_size], std, rng))
        };
        let mut base_prefix = BTreeMap::new();
        let shape = [config.n_heads, config.prefix_len, config.d_head()];
        for site in config.active_sites() {
            for l in 0..config.layers_at(site) {
                let n = format!("prefix.{}.{l}", site.tag());
                let k = store.add_normal(&format!("{n}.key"), &shape, PREFIX_INIT_STD, rng);
                let v = store.add_normal(&format!("{n}.value"), &shape, PREFIX_INIT_STD, rng);
                base_prefix.insert((site, l), (k, v));
            }
        }
        Ok(Self {
            config: config.clone(),
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            base_prefix,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// The output projection `W_d` as `[d_model, vocab]` when untied.
    pub fn output_projection(&self) -> Option<ParamId> {
        self.out_w
    }

    /// Parameter ids of the learned base prefix at a site and layer.
    pub fn base_prefix_ids(&self, site: Site, layer: usize) -> Option<(ParamId, ParamId)> {
        self.base_prefix.get(&(site, layer)).copied()
    }

    /// Learned, input-independent prefixes placed on the tape.
    pub fn base_prefixes(&self, tape: &mut Tape, store: &ParamStore) -> PrefixSet {
        let mut set = PrefixSet::empty();
        for (&(site, l), &(k, v)) in &self.base_prefix {
            let key = tape.param(store, k);
            let value = tape.param(store, v);
            set.insert(site, l, AttentionPrefix { key, value });
        }
        set
    }

    fn norm(&self, tape: &mut Tape, store: &ParamStore, ids: &NormIds, x: Var) -> Result<Var> {
        let g = tape.param(store, ids.gain);
        let b = tape.param(store, ids.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &FfnIds,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (w1, b1) = (tape.param(store, ids.w1), tape.param(store, ids.b1));
        let (w2, b2) = (tape.param(store, ids.w2), tape.param(store, ids.b2));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.gelu(h)?;
        let h = self.dropout(tape, h, rng)?;
        tape.linear(h, w2, Some(b2))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout_rate > 0.0 => tape.dropout(x, self.config.dropout_rate, *r),
            _ => Ok(x),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &AttnIds,
        q_in: Var,
        kv_in: Var,
        prefix: Option<AttentionPrefix>,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let p = |t: &mut Tape, id| t.param(store, id);
        let (wq, bq, wk, bk) = (p(tape, ids.wq), p(tape, ids.bq), p(tape, ids.wk), p(tape, ids.bk));
        let (wv, bv, wo, bo) = (p(tape, ids.wv), p(tape, ids.bv), p(tape, ids.wo), p(tape, ids.bo));
        let q = tape.linear(q_in, wq, Some(bq))?;
        let k = tape.linear(kv_in, wk, Some(bk))?;
        let v = tape.linear(kv_in, wv, Some(bv))?;
        let heads = tape.attention(
            q,
            k,
            v,
            prefix.map(|p| (p.key, p.value)),
            self.config.n_heads,
            key_mask,
            causal,
        )?;
        tape.linear(heads, wo, Some(bo))
    }

    /// Projected multi-head attention of layer `layer` at `site`:
    /// `Concat(head_1..n) W^O` with `head_i = AT(Q W_i^Q, [P_i^K, K W_i^K], [P_i^V, V W_i^V])`.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        site: Site,
        layer: usize,
        q_in: Var,
        kv_in: Var,
        prefix: Option<AttentionPrefix>,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (ids, causal) = match site {
            Site::EncoderSelf => (&self.enc.get(layer).ok_or_else(|| no_layer(layer))?.attn, false),
            Site::DecoderSelf => (&self.dec.get(layer).ok_or_else(|| no_layer(layer))?.self_attn, true),
            Site::Cross => (&self.dec.get(layer).ok_or_else(|| no_layer(layer))?.cross_attn, false),
        };
        self.mha(tape, store, ids, q_in, kv_in, prefix, key_mask, causal)
    }

    fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pos_table: ParamId,
        tokens: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let e = tape.param(store, self.tok_emb);
        let pt = tape.param(store, pos_table);
        let x = tape.gather_rows(e, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pt, &positions)?;
        tape.add(x, pos)
    }

    /// Encodes a token sequence. Inputs longer than `max_seq_len` lose their
    /// oldest tokens; the count is reported in [`EncoderStates::truncated`].
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        prefixes: &PrefixSet,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderStates> {
        if tokens.is_empty() {
            return Err(Error::Contract("encode needs at least one token".into()));
        }
        let truncated = tokens.len().saturating_sub(self.config.max_seq_len);
        let tokens = &tokens[truncated..];
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let mut x = self.embed(tape, store, self.enc_pos, tokens)?;
        x = self.dropout(tape, x, &mut rng)?;
        for (l, layer) in self.enc.iter().enumerate() {
            let h = self.norm(tape, store, &layer.ln1, x)?;
            let a = self.mha(
                tape,
                store,
                &layer.attn,
                h,
                h,
                prefixes.get(Site::EncoderSelf, l),
                &mask,
                false,
            )?;
            let a = self.dropout(tape, a, &mut rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, store, &layer.ln2, x)?;
            let f = self.ffn(tape, store, &layer.ffn, h, &mut rng)?;
            let f = self.dropout(tape, f, &mut rng)?;
            x = tape.add(x, f)?;
        }
        let states = self.norm(tape, store, &self.enc_ln, x)?;
        Ok(EncoderStates {
            states,
            mask,
            truncated,
        })
    }

    /// Decoder hidden states `[T, d_model]` for `prev_tokens`, attending to
    /// `memory` (the fused encoder states) under `memory_mask`.
    pub fn decode_hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        memory_mask: &[bool],
        prev_tokens: &[usize],
        prefixes: &PrefixSet,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if prev_tokens.is_empty() {
            return Err(Error::Contract(
                "decoding needs a start token in prev_tokens".into(),
            ));
        }
        if prev_tokens.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "decoder input of {} tokens exceeds max_seq_len {}",
                prev_tokens.len(),
                self.config.max_seq_len
            )));
        }
        let t = prev_tokens.len();
        let self_mask = alloc::vec![true; t];
        let mut x = self.embed(tape, store, self.dec_pos, prev_tokens)?;
        x = self.dropout(tape, x, &mut rng)?;
        for (l, layer) in self.dec.iter().enumerate() {
            let h = self.norm(tape, store, &layer.ln1, x)?;
            let a = self.mha(
                tape,
                store,
                &layer.self_attn,
                h,
                h,
                prefixes.get(Site::DecoderSelf, l),
                &self_mask,
                true,
            )?;
            let a = self.dropout(tape, a, &mut rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, store, &layer.ln2, x)?;
            let c = self.mha(
                tape,
                store,
                &layer.cross_attn,
                h,
                memory,
                prefixes.get(Site::Cross, l),
                memory_mask,
                false,
            )?;
            let c = self.dropout(tape, c, &mut rng)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, store, &layer.ln3, x)?;
            let f = self.ffn(tape, store, &layer.ffn, h, &mut rng)?;
            let f = self.dropout(tape, f, &mut rng)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, store, &self.dec_ln, x)
    }

    /// `logits = h · W_d`, one row per decoder position.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        match self.out_w {
            Some(w) => {
                let w = tape.param(store, w);
                tape.matmul(hidden, w)
            }
            None => {
                let e = tape.param(store, self.tok_emb);
                tape.matmul_bt(hidden, e)
            }
        }
    }

    /// Teacher-forced logits `[T, vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        memory_mask: &[bool],
        prev_tokens: &[usize],
        prefixes: &PrefixSet,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.decode_hidden(tape, store, memory, memory_mask, prev_tokens, prefixes, rng)?;
        self.logits(tape, store, h)
    }

    /// Next-token logits `[vocab]` after `prev_tokens`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &EncoderStates,
        fused_kv: Var,
        prev_tokens: &[usize],
        prefixes: &PrefixSet,
    ) -> Result<Var> {
        if tape.shape(fused_kv) != tape.shape(enc.states) {
            return Err(Error::Contract(
                "fused memory must match encoder state shape".into(),
            ));
        }
        let h = self.decode_hidden(tape, store, fused_kv, &enc.mask, prev_tokens, prefixes, None)?;
        let t = prev_tokens.len();
        let last = tape.slice_rows(h, t - 1, t)?;
        let logits = self.logits(tape, store, last)?;
        tape.reshape(logits, &[self.config.vocab_size])
    }
}

fn no_layer(layer: usize) -> Error {
    Error::Contract(format!("no layer {layer}"))
}

//! Tiny causal transformer policy with a scalar value head.
//!
//! Parameters live in one flat `f64` vector; [`Layout`] names the slices.
//! The forward pass runs one position at a time against a key/value cache,
//! so incremental decoding and the training forward pass execute identical
//! arithmetic and produce bit-identical outputs. Gradients are derived
//! analytically and checked against finite differences in the tests.

pub mod decode;
pub mod math;
pub mod optim;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LanguageModel;
use crate::vocab::{TokenId, BOS_ID};
use math::{gelu, gelu_grad, layer_norm, layer_norm_backward, matvec, matvec_backward};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub ff_mult: usize,
    /// Dropout on the attention and feed-forward residual branches during
    /// gradient passes. Rollouts and evaluation never apply it.
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_len: 32,
            ff_mult: 4,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        if self.d_model < 8 {
            return bad("d_model must be at least 8");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads must divide d_model");
        }
        if self.n_layers == 0 || self.context_len == 0 || self.ff_mult == 0 {
            return bad("n_layers, context_len and ff_mult must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_ff1: Range<usize>,
    pub b_ff1: Range<usize>,
    pub w_ff2: Range<usize>,
    pub b_ff2: Range<usize>,
}

/// Named views into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub w_value: Range<usize>,
    pub b_value: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff());
        let wte = take(v * d);
        let wpe = take(cfg.context_len * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_ff1: take(d * f),
                b_ff1: take(f),
                w_ff2: take(f * d),
                b_ff2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        let w_value = take(d);
        let b_value = take(1);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            w_value,
            b_value,
            total: at,
        }
    }

    /// Every named tensor with its range, in storage order.
    pub fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("wte".to_owned(), self.wte.clone()),
            ("wpe".to_owned(), self.wpe.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, r) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_qkv", &l.w_qkv),
                ("b_qkv", &l.b_qkv),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_ff1", &l.w_ff1),
                ("b_ff1", &l.b_ff1),
                ("w_ff2", &l.w_ff2),
                ("b_ff2", &l.b_ff2),
            ] {
                out.push((format!("layer{i}.{name}"), r.clone()));
            }
        }
        for (name, r) in [
            ("lnf_g", &self.lnf_g),
            ("lnf_b", &self.lnf_b),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("w_value", &self.w_value),
            ("b_value", &self.b_value),
        ] {
            out.push((name.to_owned(), r.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    /// Incremented after every parameter update; rollouts record it.
    pub version: u64,
}

/// Output at the final position of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Outputs for a full sequence. Logits are kept for positions
/// `first_output..len`, values for every position.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqOutputs {
    pub first_output: usize,
    pub len: usize,
    vocab: usize,
    logits: Vec<f64>,
    pub values: Vec<f64>,
}

impl SeqOutputs {
    /// Logits predicting the token after position `pos`.
    pub fn logits(&self, pos: usize) -> &[f64] {
        assert!(pos >= self.first_output && pos < self.len, "position {pos} has no logits");
        let r = pos - self.first_output;
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }
}

/// Upstream gradients of a scalar loss with respect to [`SeqOutputs`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    first_output: usize,
    vocab: usize,
    pub dlogits: Vec<f64>,
    pub dvalues: Vec<f64>,
}

impl OutputGrads {
    fn zeros_like(out: &SeqOutputs) -> Self {
        OutputGrads {
            first_output: out.first_output,
            vocab: out.vocab,
            dlogits: vec![0.0; out.logits.len()],
            dvalues: vec![0.0; out.len],
        }
    }

    pub fn logits_mut(&mut self, pos: usize) -> &mut [f64] {
        let r = pos - self.first_output;
        &mut self.dlogits[r * self.vocab..(r + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Default)]
struct LayerState {
    k: Vec<f64>,
    v: Vec<f64>,
    // everything below is recorded only for gradient passes
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    drop1: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    drop2: Vec<f64>,
}

/// Cached activations of a (partial) sequence.
#[derive(Debug, Clone)]
struct SeqState {
    tokens: Vec<TokenId>,
    layers: Vec<LayerState>,
    record: bool,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    z: Vec<f64>,
}

impl SeqState {
    fn new(n_layers: usize, record: bool) -> Self {
        SeqState {
            tokens: Vec::new(),
            layers: vec![LayerState::default(); n_layers],
            record,
            xhatf: Vec::new(),
            rstdf: Vec::new(),
            z: Vec::new(),
        }
    }
}

/// Incremental decoding state for one sequence.
#[derive(Debug, Clone)]
pub struct DecodeState {
    seq: SeqState,
    last: StepOutput,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.seq.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.seq.tokens
    }

    /// Output predicting the next token.
    pub fn output(&self) -> &StepOutput {
        &self.last
    }
}

struct Dropout<'a> {
    rate: f64,
    rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect()
    }
}

impl PolicyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("positive std");
        for (name, range) in layout.named() {
            let gain = name.ends_with("_g");
            let bias = name.contains(".b_") || name.starts_with("b_") || name.ends_with("_b");
            for p in &mut params[range] {
                *p = if gain {
                    1.0
                } else if bias {
                    0.0
                } else {
                    normal.sample(&mut rng)
                };
            }
        }
        Ok(PolicyModel {
            config,
            layout,
            params,
            version: 0,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::LengthMismatch {
                what: "parameter vector",
                left: params.len(),
                right: layout.total,
            });
        }
        Ok(PolicyModel {
            config,
            layout,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Copy of this language model with a freshly initialized value head,
    /// ready to act as an actor-critic. Logits are unaffected.
    pub fn clone_as_actor_critic(&self, seed: u64) -> Self {
        let mut m = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.config.init_std).expect("positive std");
        for p in &mut m.params[self.layout.w_value.clone()] {
            *p = normal.sample(&mut rng);
        }
        m.params[self.layout.b_value.start] = 0.0;
        m.version = 0;
        m
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.context_len {
            return Err(Error::WindowTooLong {
                len,
                context: self.config.context_len,
            });
        }
        Ok(())
    }

    fn check_token(&self, t: TokenId) -> Result<()> {
        if t >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: t,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn head(&self, z: &[f64], want_logits: bool) -> (Option<Vec<f64>>, f64) {
        let p = &self.params;
        let value = z
            .iter()
            .zip(&p[self.layout.w_value.clone()])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + p[self.layout.b_value.start];
        let logits = want_logits.then(|| {
            let mut out = vec![0.0; self.config.vocab_size];
            matvec(z, &p[self.layout.w_out.clone()], &p[self.layout.b_out.clone()], &mut out);
            out
        });
        (logits, value)
    }

    /// Runs one position through the stack, returning the final normalized
    /// hidden state.
    fn forward_position(
        &self,
        st: &mut SeqState,
        token: TokenId,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let (d, f, nh) = (cfg.d_model, cfg.d_ff(), cfg.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;
        let t = st.tokens.len();
        st.tokens.push(token);

        let mut h: Vec<f64> = p[lay.wte.start + token * d..lay.wte.start + (token + 1) * d]
            .iter()
            .zip(&p[lay.wpe.start + t * d..lay.wpe.start + (t + 1) * d])
            .map(|(a, b)| a + b)
            .collect();

        for (lo, ls) in lay.layers.iter().zip(st.layers.iter_mut()) {
            let (a, xhat1, rstd1) = layer_norm(&h, &p[lo.ln1_g.clone()], &p[lo.ln1_b.clone()]);
            let mut qkv = vec![0.0; 3 * d];
            matvec(&a, &p[lo.w_qkv.clone()], &p[lo.b_qkv.clone()], &mut qkv);
            ls.k.extend_from_slice(&qkv[d..2 * d]);
            ls.v.extend_from_slice(&qkv[2 * d..]);
            let q = &qkv[..d];

            let mut ctx = vec![0.0; d];
            let mut probs = vec![0.0; nh * (t + 1)];
            for head in 0..nh {
                let hs = head * hd..(head + 1) * hd;
                let pr = &mut probs[head * (t + 1)..(head + 1) * (t + 1)];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in pr.iter_mut().enumerate() {
                    let kj = &ls.k[j * d + hs.start..j * d + hs.end];
                    *s = q[hs.clone()].iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in pr.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (j, s) in pr.iter_mut().enumerate() {
                    *s /= sum;
                    let vj = &ls.v[j * d + hs.start..j * d + hs.end];
                    for (c, v) in ctx[hs.clone()].iter_mut().zip(vj) {
                        *c += *s * v;
                    }
                }
            }
            let mut o = vec![0.0; d];
            matvec(&ctx, &p[lo.w_o.clone()], &p[lo.b_o.clone()], &mut o);
            let drop1 = dropout.as_deref_mut().map(|dr| dr.mask(d));
            if let Some(m) = &drop1 {
                o.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
            }
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);

            let (b, xhat2, rstd2) = layer_norm(&h, &p[lo.ln2_g.clone()], &p[lo.ln2_b.clone()]);
            let mut u = vec![0.0; f];
            matvec(&b, &p[lo.w_ff1.clone()], &p[lo.b_ff1.clone()], &mut u);
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let mut ff = vec![0.0; d];
            matvec(&g, &p[lo.w_ff2.clone()], &p[lo.b_ff2.clone()], &mut ff);
            let drop2 = dropout.as_deref_mut().map(|dr| dr.mask(d));
            if let Some(m) = &drop2 {
                ff.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
            }
            h.iter_mut().zip(&ff).for_each(|(x, y)| *x += y);

            if st.record {
                ls.xhat1.extend(xhat1);
                ls.rstd1.push(rstd1);
                ls.a.extend(a);
                ls.q.extend_from_slice(q);
                ls.probs.push(probs);
                ls.ctx.extend(ctx);
                ls.drop1.extend(drop1.unwrap_or_default());
                ls.xhat2.extend(xhat2);
                ls.rstd2.push(rstd2);
                ls.b.extend(b);
                ls.u.extend(u);
                ls.g.extend(g);
                ls.drop2.extend(drop2.unwrap_or_default());
            }
        }
        let (z, xhatf, rstdf) = layer_norm(&h, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()]);
        if st.record {
            st.xhatf.extend(xhatf);
            st.rstdf.push(rstdf);
            st.z.extend_from_slice(&z);
        }
        z
    }

    /// Starts incremental decoding from a nonempty prompt.
    pub fn begin(&self, prompt: &[TokenId]) -> Result<DecodeState> {
        if prompt.is_empty() {
            return Err(Error::Config("cannot decode from an empty window".into()));
        }
        self.check_len(prompt.len())?;
        let mut seq = SeqState::new(self.config.n_layers, false);
        let mut z = Vec::new();
        for &t in prompt {
            self.check_token(t)?;
            z = self.forward_position(&mut seq, t, None);
        }
        let (logits, value) = self.head(&z, true);
        Ok(DecodeState {
            seq,
            last: StepOutput {
                logits: logits.expect("requested"),
                value,
            },
        })
    }

    /// Appends `token` and computes the output predicting the one after it.
    pub fn advance(&self, state: &mut DecodeState, token: TokenId) -> Result<()> {
        self.check_token(token)?;
        self.check_len(state.len() + 1)?;
        let z = self.forward_position(&mut state.seq, token, None);
        let (logits, value) = self.head(&z, true);
        state.last = StepOutput {
            logits: logits.expect("requested"),
            value,
        };
        Ok(())
    }

    /// Next-token logits and value at the final position of `window`.
    pub fn forward(&self, window: &[TokenId]) -> Result<StepOutput> {
        Ok(self.begin(window)?.last)
    }

    pub fn log_prob(&self, window: &[TokenId], action: TokenId) -> Result<f64> {
        self.check_token(action)?;
        let out = self.forward(window)?;
        Ok(math::log_softmax(&out.logits, None, 1.0)[action])
    }

    fn run_sequence(
        &self,
        tokens: &[TokenId],
        first_output: usize,
        dropout_seed: Option<u64>,
        record: bool,
    ) -> Result<(SeqOutputs, SeqState)> {
        if tokens.is_empty() {
            return Err(Error::Config("empty sequence".into()));
        }
        self.check_len(tokens.len())?;
        let mut st = SeqState::new(self.config.n_layers, record);
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut dropout = match (&mut rng, self.config.dropout > 0.0) {
            (Some(rng), true) => Some(Dropout {
                rate: self.config.dropout,
                rng,
            }),
            _ => None,
        };
        let v = self.config.vocab_size;
        let n_out = tokens.len().saturating_sub(first_output);
        let mut logits = Vec::with_capacity(n_out * v);
        let mut values = Vec::with_capacity(tokens.len());
        for (pos, &t) in tokens.iter().enumerate() {
            self.check_token(t)?;
            let z = self.forward_position(&mut st, t, dropout.as_mut());
            let (lg, value) = self.head(&z, pos >= first_output);
            if let Some(lg) = lg {
                logits.extend(lg);
            }
            values.push(value);
        }
        Ok((
            SeqOutputs {
                first_output: first_output.min(tokens.len()),
                len: tokens.len(),
                vocab: v,
                logits,
                values,
            },
            st,
        ))
    }

    /// Forward pass over a whole sequence without recording activations.
    pub fn forward_sequence(&self, tokens: &[TokenId], first_output: usize) -> Result<SeqOutputs> {
        Ok(self.run_sequence(tokens, first_output, None, false)?.0)
    }

    fn backward(&self, st: &SeqState, out: &SeqOutputs, grads: &OutputGrads, dp: &mut [f64]) {
        let cfg = &self.config;
        let (d, f, nh) = (cfg.d_model, cfg.d_ff(), cfg.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;
        let n = st.tokens.len();

        // output and value heads, final layer norm
        let mut dh = vec![0.0; n * d];
        for pos in 0..n {
            let z = &st.z[pos * d..(pos + 1) * d];
            let mut dz = vec![0.0; d];
            if pos >= out.first_output {
                let r = pos - out.first_output;
                let dl = &grads.dlogits[r * out.vocab..(r + 1) * out.vocab];
                if dl.iter().any(|&x| x != 0.0) {
                    let (dw, rest) = dp.split_at_mut(lay.b_out.start);
                    matvec_backward(
                        z,
                        &p[lay.w_out.clone()],
                        dl,
                        &mut dw[lay.w_out.clone()],
                        &mut rest[..lay.b_out.len()],
                        Some(&mut dz),
                    );
                }
            }
            let dv = grads.dvalues[pos];
            if dv != 0.0 {
                for i in 0..d {
                    dp[lay.w_value.start + i] += dv * z[i];
                    dz[i] += dv * p[lay.w_value.start + i];
                }
                dp[lay.b_value.start] += dv;
            }
            let (dg, db) = split_pair(dp, &lay.lnf_g, &lay.lnf_b);
            layer_norm_backward(
                &dz,
                &st.xhatf[pos * d..(pos + 1) * d],
                st.rstdf[pos],
                &p[lay.lnf_g.clone()],
                dg,
                db,
                &mut dh[pos * d..(pos + 1) * d],
            );
        }

        for (lo, ls) in lay.layers.iter().zip(&st.layers).rev() {
            // feed-forward branch
            for pos in 0..n {
                let mut dff = dh[pos * d..(pos + 1) * d].to_vec();
                if !ls.drop2.is_empty() {
                    dff.iter_mut()
                        .zip(&ls.drop2[pos * d..(pos + 1) * d])
                        .for_each(|(x, m)| *x *= m);
                }
                let mut dg = vec![0.0; f];
                {
                    let (dw, db) = split_pair(dp, &lo.w_ff2, &lo.b_ff2);
                    matvec_backward(
                        &ls.g[pos * f..(pos + 1) * f],
                        &p[lo.w_ff2.clone()],
                        &dff,
                        dw,
                        db,
                        Some(&mut dg),
                    );
                }
                let du: Vec<f64> = dg
                    .iter()
                    .zip(&ls.u[pos * f..(pos + 1) * f])
                    .map(|(g, &u)| g * gelu_grad(u))
                    .collect();
                let mut dbn = vec![0.0; d];
                {
                    let (dw, db) = split_pair(dp, &lo.w_ff1, &lo.b_ff1);
                    matvec_backward(
                        &ls.b[pos * d..(pos + 1) * d],
                        &p[lo.w_ff1.clone()],
                        &du,
                        dw,
                        db,
                        Some(&mut dbn),
                    );
                }
                let (dg2, db2) = split_pair(dp, &lo.ln2_g, &lo.ln2_b);
                layer_norm_backward(
                    &dbn,
                    &ls.xhat2[pos * d..(pos + 1) * d],
                    ls.rstd2[pos],
                    &p[lo.ln2_g.clone()],
                    dg2,
                    db2,
                    &mut dh[pos * d..(pos + 1) * d],
                );
            }

            // attention branch
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            for pos in 0..n {
                let mut dout = dh[pos * d..(pos + 1) * d].to_vec();
                if !ls.drop1.is_empty() {
                    dout.iter_mut()
                        .zip(&ls.drop1[pos * d..(pos + 1) * d])
                        .for_each(|(x, m)| *x *= m);
                }
                let mut dctx = vec![0.0; d];
                {
                    let (dw, db) = split_pair(dp, &lo.w_o, &lo.b_o);
                    matvec_backward(
                        &ls.ctx[pos * d..(pos + 1) * d],
                        &p[lo.w_o.clone()],
                        &dout,
                        dw,
                        db,
                        Some(&mut dctx),
                    );
                }
                let q = &ls.q[pos * d..(pos + 1) * d];
                for head in 0..nh {
                    let hs = head * hd..(head + 1) * hd;
                    let pr = &ls.probs[pos][head * (pos + 1)..(head + 1) * (pos + 1)];
                    let dc = &dctx[hs.clone()];
                    let mut dprob = vec![0.0; pos + 1];
                    for j in 0..=pos {
                        let vj = &ls.v[j * d + hs.start..j * d + hs.end];
                        dprob[j] = dc.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for (x, c) in dv[j * d + hs.start..j * d + hs.end].iter_mut().zip(dc) {
                            *x += pr[j] * c;
                        }
                    }
                    let dot: f64 = pr.iter().zip(&dprob).map(|(a, b)| a * b).sum();
                    for j in 0..=pos {
                        let ds = pr[j] * (dprob[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &ls.k[j * d + hs.start..j * d + hs.end];
                        for (x, k) in dq[pos * d + hs.start..pos * d + hs.end].iter_mut().zip(kj) {
                            *x += ds * k;
                        }
                        for (x, qv) in dk[j * d + hs.start..j * d + hs.end].iter_mut().zip(&q[hs.clone()]) {
                            *x += ds * qv;
                        }
                    }
                }
            }
            for pos in 0..n {
                let mut dqkv = Vec::with_capacity(3 * d);
                dqkv.extend_from_slice(&dq[pos * d..(pos + 1) * d]);
                dqkv.extend_from_slice(&dk[pos * d..(pos + 1) * d]);
                dqkv.extend_from_slice(&dv[pos * d..(pos + 1) * d]);
                let mut da = vec![0.0; d];
                {
                    let (dw, db) = split_pair(dp, &lo.w_qkv, &lo.b_qkv);
                    matvec_backward(
                        &ls.a[pos * d..(pos + 1) * d],
                        &p[lo.w_qkv.clone()],
                        &dqkv,
                        dw,
                        db,
                        Some(&mut da),
                    );
                }
                let (dg1, db1) = split_pair(dp, &lo.ln1_g, &lo.ln1_b);
                layer_norm_backward(
                    &da,
                    &ls.xhat1[pos * d..(pos + 1) * d],
                    ls.rstd1[pos],
                    &p[lo.ln1_g.clone()],
                    dg1,
                    db1,
                    &mut dh[pos * d..(pos + 1) * d],
                );
            }
        }

        for (pos, &tok) in st.tokens.iter().enumerate() {
            let g = &dh[pos * d..(pos + 1) * d];
            for i in 0..d {
                dp[lay.wte.start + tok * d + i] += g[i];
                dp[lay.wpe.start + pos * d + i] += g[i];
            }
        }
    }

    /// Loss and gradient summed over a batch of sequences.
    ///
    /// `loss` receives the sequence index and its outputs, writes upstream
    /// gradients, and returns that sequence's loss contribution. Sequences
    /// are processed in parallel; contributions are reduced in index order so
    /// the result does not depend on scheduling. With dropout enabled the
    /// masks for sequence `i` derive from `dropout_seed` and `i`.
    pub fn gradient<F>(
        &self,
        batch: &[(&[TokenId], usize)],
        dropout_seed: Option<u64>,
        loss: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(usize, &SeqOutputs, &mut OutputGrads) -> f64 + Sync,
    {
        let parts: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &(tokens, first))| {
                let seed = dropout_seed.map(|s| mix_seed(s, i as u64));
                let (out, st) = self.run_sequence(tokens, first, seed, true)?;
                let mut g = OutputGrads::zeros_like(&out);
                let l = loss(i, &out, &mut g);
                let mut dp = vec![0.0; self.params.len()];
                self.backward(&st, &out, &g, &mut dp);
                Ok((l, dp))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for part in parts {
            let (l, dp) = part?;
            total += l;
            grad.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                detail: format!("loss = {total} over {} sequences", batch.len()),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let name = self
                .layout
                .named()
                .into_iter()
                .find(|(_, r)| r.contains(&i))
                .map(|(n, _)| n)
                .unwrap_or_default();
            return Err(Error::NonFinite {
                what: "gradient",
                detail: format!("coordinate {i} ({name}) = {}", grad[i]),
            });
        }
        Ok((total, grad))
    }

    /// Same loss as [`gradient`](Self::gradient) without the backward pass.
    pub fn loss_value<F>(
        &self,
        batch: &[(&[TokenId], usize)],
        dropout_seed: Option<u64>,
        loss: F,
    ) -> Result<f64>
    where
        F: Fn(usize, &SeqOutputs, &mut OutputGrads) -> f64,
    {
        let mut total = 0.0;
        for (i, &(tokens, first)) in batch.iter().enumerate() {
            let seed = dropout_seed.map(|s| mix_seed(s, i as u64));
            let (out, _) = self.run_sequence(tokens, first, seed, false)?;
            let mut g = OutputGrads::zeros_like(&out);
            total += loss(i, &out, &mut g);
        }
        Ok(total)
    }
}

impl LanguageModel for PolicyModel {
    fn continuation_log_probs(
        &self,
        context: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<Vec<f64>> {
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        // keep the most recent context that fits alongside the continuation
        let room = (self.config.context_len + 1).saturating_sub(continuation.len()).max(1);
        let mut tokens = if context.is_empty() {
            vec![BOS_ID]
        } else {
            crate::vocab::truncate_left(context, room).to_vec()
        };
        let first = tokens.len() - 1;
        tokens.extend_from_slice(&continuation[..continuation.len() - 1]);
        let out = self.forward_sequence(&tokens, first)?;
        Ok(continuation
            .iter()
            .enumerate()
            .map(|(i, &a)| math::log_softmax(out.logits(first + i), None, 1.0)[a])
            .collect())
    }
}

fn split_pair<'a>(dp: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = dp.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// SplitMix64-style mixing for deriving independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Forward passes: batched full-sequence (training, probing) and
//! incremental row-at-a-time with a KV cache (autoregressive decoding).
//!
//! Both paths perform every reduction in ascending index order, so they
//! produce bitwise-identical activations for the same inputs.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::math::*;
use super::{GradientBundle, HeadKind, LatentSet, PolicyModel, TokenDistribution};
use crate::error::{Error, Result};
use crate::simenv::Observation;

/// How the M action-slot input embeddings are filled.
#[derive(Debug, Clone, Copy)]
pub enum SlotFill<'a> {
    /// Every slot carries the start embedding: backbone-only encoding, and
    /// the parallel-decoding mode of the continuous head.
    Start,
    /// Teacher forcing on a full chunk: slot 0 is the start embedding, slot
    /// tau carries chunk token tau-1.
    Teacher(&'a [u16]),
    /// A decoded prefix; slots beyond it fall back to the start embedding.
    Prefix(&'a [u16]),
}

pub(crate) fn slot_rows(model: &PolicyModel, fill: SlotFill) -> Result<Vec<usize>> {
    let cfg = &model.cfg;
    let m = cfg.m_tokens();
    let start = cfg.start_token();
    let check = |tokens: &[u16]| -> Result<()> {
        for &t in tokens {
            if (t as usize) >= cfg.vocab {
                return Err(Error::config(format!(
                    "action token {t} out of vocabulary (V = {})",
                    cfg.vocab
                )));
            }
        }
        Ok(())
    };
    let rows = match fill {
        SlotFill::Start => vec![start; m],
        SlotFill::Teacher(chunk) => {
            if chunk.len() != m {
                return Err(Error::config(format!(
                    "teacher forcing needs exactly {m} tokens, got {}",
                    chunk.len()
                )));
            }
            check(chunk)?;
            let mut rows = Vec::with_capacity(m);
            rows.push(start);
            rows.extend(chunk[..m - 1].iter().map(|&t| t as usize));
            rows
        }
        SlotFill::Prefix(prefix) => {
            if prefix.len() >= m {
                return Err(Error::config(format!(
                    "prefix length {} must be below M = {m}",
                    prefix.len()
                )));
            }
            check(prefix)?;
            let mut rows = Vec::with_capacity(m);
            rows.push(start);
            rows.extend(prefix.iter().map(|&t| t as usize));
            rows.resize(m, start);
            rows
        }
    };
    Ok(rows)
}

fn validate_inputs(model: &PolicyModel, obs: &Observation, instruction: &[u16]) -> Result<()> {
    let cfg = &model.cfg;
    if obs.height != cfg.img_h || obs.width != cfg.img_w || obs.channels != cfg.channels {
        return Err(Error::config(format!(
            "observation {}x{}x{} does not match model {}x{}x{}",
            obs.height, obs.width, obs.channels, cfg.img_h, cfg.img_w, cfg.channels
        )));
    }
    if instruction.len() != cfg.prompt_len {
        return Err(Error::config(format!(
            "instruction length {} != template length {}",
            instruction.len(),
            cfg.prompt_len
        )));
    }
    for &t in instruction {
        if (t as usize) >= cfg.prompt_vocab {
            return Err(Error::config(format!("prompt token {t} out of vocabulary")));
        }
    }
    Ok(())
}

/// Pixels of image patch `p` in (py, px, c) order.
pub(crate) fn gather_patch(cfg: &super::ModelConfig, obs: &Observation, p: usize, buf: &mut [f64]) {
    let grid_w = cfg.img_w / cfg.patch;
    let gy = p / grid_w;
    let gx = p % grid_w;
    let mut i = 0;
    for py in 0..cfg.patch {
        let y = gy * cfg.patch + py;
        for px in 0..cfg.patch {
            let x = gx * cfg.patch + px;
            let base = (y * cfg.img_w + x) * cfg.channels;
            for c in 0..cfg.channels {
                buf[i] = obs.pixels[base + c];
                i += 1;
            }
        }
    }
}

/// Token embedding for one sequence row.
fn embed_row(model: &PolicyModel, obs: &Observation, instruction: &[u16], rows: &[usize], pos: usize, out: &mut [f64]) {
    let cfg = &model.cfg;
    let w = cfg.width;
    let n_img = cfg.n_img_tokens();
    let n_ctx = cfg.n_ctx();
    let pos_emb = model.tensor(&model.index.pos_emb);
    if pos < n_img {
        let mut buf = vec![0.0; cfg.patch_dim()];
        gather_patch(cfg, obs, pos, &mut buf);
        let patch_w = model.tensor(&model.index.patch_w);
        let patch_b = model.tensor(&model.index.patch_b);
        out.copy_from_slice(patch_b);
        for (l, &x) in buf.iter().enumerate() {
            axpy(out, x, &patch_w[l * w..(l + 1) * w]);
        }
    } else if pos < n_ctx {
        let tok = instruction[pos - n_img] as usize;
        let emb = model.tensor(&model.index.prompt_emb);
        out.copy_from_slice(&emb[tok * w..(tok + 1) * w]);
    } else {
        let row = rows[pos - n_ctx];
        let emb = model.tensor(&model.index.act_emb);
        out.copy_from_slice(&emb[row * w..(row + 1) * w]);
    }
    axpy(out, 1.0, &pos_emb[pos * w..(pos + 1) * w]);
}

/// Activations recorded by one mixer block for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub x_in: Vec<f64>,
    pub n1: Vec<f64>,
    pub n1_inv: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `[heads x seq x seq]`, rows past the causal frontier left at zero.
    pub att: Vec<f64>,
    pub ho: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub n2: Vec<f64>,
    pub n2_inv: Vec<f64>,
    pub h1: Vec<f64>,
    pub h1a: Vec<f64>,
}

/// Continuous-head activations per slot: (pre-activation, activated) per layer.
#[derive(Debug, Clone)]
pub struct ContTrace {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub slot_rows: Vec<usize>,
    pub blocks: Vec<BlockTrace>,
    /// Output of the last block, input to the final norm.
    pub x_last: Vec<f64>,
    pub fin: Vec<f64>,
    pub fin_inv: Vec<f64>,
    /// Discrete head logits `[M x V]`, when the head ran.
    pub slot_logits: Option<Vec<f64>>,
    pub cont: Option<ContTrace>,
}

impl Trace {
    pub fn latents(&self, model: &PolicyModel) -> LatentSet {
        let cfg = &model.cfg;
        let w = cfg.width;
        let n_ctx = cfg.n_ctx();
        let m = cfg.m_tokens();
        let mut data = Vec::with_capacity(m * w);
        for tau in 0..m {
            data.extend_from_slice(&self.fin[(n_ctx + tau) * w..(n_ctx + tau + 1) * w]);
        }
        LatentSet { width: w, data }
    }
}

fn block_forward(
    model: &PolicyModel,
    bi: usize,
    x: &mut [f64],
    seq: usize,
    causal: bool,
    trace: Option<&mut Vec<BlockTrace>>,
) {
    let cfg = &model.cfg;
    let w = cfg.width;
    let hd = cfg.head_dim();
    let heads = cfg.heads;
    let idx = &model.index.blocks[bi];
    let scale = 1.0 / (hd as f64).sqrt();

    let x_in = x.to_vec();
    let mut n1 = vec![0.0; seq * w];
    let mut n1_inv = vec![0.0; seq];
    for i in 0..seq {
        n1_inv[i] = rmsnorm_into(&mut n1[i * w..(i + 1) * w], &x_in[i * w..(i + 1) * w]);
    }
    let mut q = vec![0.0; seq * w];
    let mut k = vec![0.0; seq * w];
    let mut v = vec![0.0; seq * w];
    matmul_acc(&mut q, &n1, model.tensor(&idx.wq), seq, w, w);
    matmul_acc(&mut k, &n1, model.tensor(&idx.wk), seq, w, w);
    matmul_acc(&mut v, &n1, model.tensor(&idx.wv), seq, w, w);

    let mut att = vec![0.0; heads * seq * seq];
    let mut ho = vec![0.0; seq * w];
    let mut scores = vec![0.0; seq];
    for h in 0..heads {
        let hoff = h * hd;
        for i in 0..seq {
            let jmax = if causal { i + 1 } else { seq };
            let qi = &q[i * w + hoff..i * w + hoff + hd];
            for j in 0..jmax {
                scores[j] = dot(qi, &k[j * w + hoff..j * w + hoff + hd]) * scale;
            }
            let row = &mut att[(h * seq + i) * seq..(h * seq + i) * seq + jmax];
            softmax_into(row, &scores[..jmax]);
            let out = &mut ho[i * w + hoff..i * w + hoff + hd];
            for j in 0..jmax {
                axpy(out, row[j], &v[j * w + hoff..j * w + hoff + hd]);
            }
        }
    }

    let mut attn_out = vec![0.0; seq * w];
    matmul_acc(&mut attn_out, &ho, model.tensor(&idx.wo), seq, w, w);
    let mut x_mid = x_in.clone();
    axpy(&mut x_mid, 1.0, &attn_out);

    let mut n2 = vec![0.0; seq * w];
    let mut n2_inv = vec![0.0; seq];
    for i in 0..seq {
        n2_inv[i] = rmsnorm_into(&mut n2[i * w..(i + 1) * w], &x_mid[i * w..(i + 1) * w]);
    }
    let hidden = cfg.mlp_hidden;
    let mut h1 = vec![0.0; seq * hidden];
    for i in 0..seq {
        h1[i * hidden..(i + 1) * hidden].copy_from_slice(model.tensor(&idx.fc1_b));
    }
    matmul_acc(&mut h1, &n2, model.tensor(&idx.fc1), seq, w, hidden);
    let h1a: Vec<f64> = h1.iter().map(|&z| relu2(z)).collect();
    let mut mlp = vec![0.0; seq * w];
    for i in 0..seq {
        mlp[i * w..(i + 1) * w].copy_from_slice(model.tensor(&idx.fc2_b));
    }
    matmul_acc(&mut mlp, &h1a, model.tensor(&idx.fc2), seq, hidden, w);

    for (xi, (&xm, &ml)) in x.iter_mut().zip(x_mid.iter().zip(&mlp)) {
        *xi = xm + ml;
    }

    if let Some(traces) = trace {
        traces.push(BlockTrace {
            x_in,
            n1,
            n1_inv,
            q,
            k,
            v,
            att,
            ho,
            x_mid,
            n2,
            n2_inv,
            h1,
            h1a,
        });
    }
}

/// Full-sequence forward. Returns the trace when `want_trace` is set.
pub fn forward_full(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    fill: SlotFill,
    want_trace: bool,
) -> Result<Trace> {
    validate_inputs(model, obs, instruction)?;
    let cfg = &model.cfg;
    let seq = cfg.seq_len();
    let w = cfg.width;
    let rows = slot_rows(model, fill)?;

    let mut x = vec![0.0; seq * w];
    for pos in 0..seq {
        embed_row(model, obs, instruction, &rows, pos, &mut x[pos * w..(pos + 1) * w]);
    }

    let mut blocks = Vec::new();
    for bi in 0..cfg.blocks {
        block_forward(
            model,
            bi,
            &mut x,
            seq,
            cfg.causal(),
            if want_trace { Some(&mut blocks) } else { None },
        );
    }

    let x_last = x.clone();
    let mut fin = vec![0.0; seq * w];
    let mut fin_inv = vec![0.0; seq];
    for i in 0..seq {
        fin_inv[i] = rmsnorm_into(&mut fin[i * w..(i + 1) * w], &x_last[i * w..(i + 1) * w]);
    }

    let mut trace = Trace {
        slot_rows: rows,
        blocks,
        x_last,
        fin,
        fin_inv,
        slot_logits: None,
        cont: None,
    };

    match cfg.head {
        HeadKind::Discrete => {
            let m = cfg.m_tokens();
            let v = cfg.vocab;
            let n_ctx = cfg.n_ctx();
            let out_w = model.tensor(&model.index.out_w);
            let out_b = model.tensor(&model.index.out_b);
            let mut logits = vec![0.0; m * v];
            for tau in 0..m {
                let latent = &trace.fin[(n_ctx + tau) * w..(n_ctx + tau + 1) * w];
                let row = &mut logits[tau * v..(tau + 1) * v];
                row.copy_from_slice(out_b);
                for (l, &h) in latent.iter().enumerate() {
                    axpy(row, h, &out_w[l * v..(l + 1) * v]);
                }
            }
            trace.slot_logits = Some(logits);
        }
        HeadKind::Continuous => {
            trace.cont = Some(cont_head_forward(model, &trace)?);
        }
    }
    Ok(trace)
}

fn cont_head_forward(model: &PolicyModel, trace: &Trace) -> Result<ContTrace> {
    let cfg = &model.cfg;
    let w = cfg.width;
    let m = cfg.m_tokens();
    let n_ctx = cfg.n_ctx();
    let mut input: Vec<f64> = Vec::with_capacity(m * w);
    for tau in 0..m {
        input.extend_from_slice(&trace.fin[(n_ctx + tau) * w..(n_ctx + tau + 1) * w]);
    }
    let mut layers = Vec::with_capacity(4);
    let mut act = input;
    for (li, (wr, br)) in model.index.cont.iter().enumerate() {
        let out_dim = if li == 3 { 1 } else { w };
        let mut z = vec![0.0; m * out_dim];
        let b = model.tensor(br);
        for i in 0..m {
            z[i * out_dim..(i + 1) * out_dim].copy_from_slice(b);
        }
        matmul_acc(&mut z, &act, model.tensor(wr), m, w, out_dim);
        let a: Vec<f64> = if li == 3 {
            z.clone()
        } else {
            z.iter().map(|&x| x.max(0.0)).collect()
        };
        layers.push((z, a.clone()));
        act = a;
    }
    Ok(ContTrace { layers })
}

// ---------------------------------------------------------------------------
// Spec-level operations
// ---------------------------------------------------------------------------

/// Backbone encoding of (observation, instruction) into M latents. Slots are
/// filled with the start embedding; no action tokens are consumed.
pub fn forward_latents(model: &PolicyModel, obs: &Observation, instruction: &[u16]) -> Result<LatentSet> {
    let trace = forward_full(model, obs, instruction, SlotFill::Start, false)?;
    Ok(trace.latents(model))
}

/// Token distributions at all M positions given a teacher-forced prefix.
pub fn token_distributions(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    prefix: &[u16],
) -> Result<Vec<TokenDistribution>> {
    model.require_head(HeadKind::Discrete)?;
    let trace = forward_full(model, obs, instruction, SlotFill::Prefix(prefix), false)?;
    let logits = trace.slot_logits.as_ref().expect("discrete head ran");
    let v = model.cfg.vocab;
    let mut out = Vec::with_capacity(model.cfg.m_tokens());
    for tau in 0..model.cfg.m_tokens() {
        let mut probs = vec![0.0; v];
        softmax_into(&mut probs, &logits[tau * v..(tau + 1) * v]);
        out.push(TokenDistribution { probs });
    }
    Ok(out)
}

/// Log-likelihood of a full action chunk under teacher forcing: the sum over
/// positions of the log softmax probability of each token.
pub fn chunk_log_prob(model: &PolicyModel, obs: &Observation, instruction: &[u16], chunk: &[u16]) -> Result<f64> {
    let (lp, _) = chunk_log_prob_traced(model, obs, instruction, chunk, false)?;
    Ok(lp)
}

pub fn chunk_log_prob_traced(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    chunk: &[u16],
    want_trace: bool,
) -> Result<(f64, Trace)> {
    model.require_head(HeadKind::Discrete)?;
    let trace = forward_full(model, obs, instruction, SlotFill::Teacher(chunk), want_trace)?;
    let lp = chunk_log_prob_from_trace(model, &trace, chunk)?;
    Ok((lp, trace))
}

pub fn chunk_log_prob_from_trace(model: &PolicyModel, trace: &Trace, chunk: &[u16]) -> Result<f64> {
    let v = model.cfg.vocab;
    let logits = trace.slot_logits.as_ref().expect("discrete head ran");
    let mut lp = 0.0;
    let mut probs = vec![0.0; v];
    for (tau, &tok) in chunk.iter().enumerate() {
        let row = &logits[tau * v..(tau + 1) * v];
        softmax_into(&mut probs, row);
        lp += probs[tok as usize].ln();
    }
    if !lp.is_finite() {
        return Err(Error::numerical("non-finite chunk log-probability"));
    }
    Ok(lp)
}

/// Continuous parallel decoding: H x D action matrix, row-major.
pub fn predict_continuous(model: &PolicyModel, obs: &Observation, instruction: &[u16]) -> Result<Vec<f64>> {
    model.require_head(HeadKind::Continuous)?;
    let trace = forward_full(model, obs, instruction, SlotFill::Start, false)?;
    let cont = trace.cont.as_ref().expect("continuous head ran");
    Ok(cont.layers[3].1.clone())
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

struct DecodeState {
    /// Per block: cached K and V rows, seq-major.
    kv: Vec<(Vec<f64>, Vec<f64>)>,
    pos: usize,
}

impl DecodeState {
    fn new(blocks: usize) -> Self {
        DecodeState {
            kv: (0..blocks).map(|_| (Vec::new(), Vec::new())).collect(),
            pos: 0,
        }
    }
}

/// Push one embedded row through all blocks, returning its final-norm output.
fn forward_row(model: &PolicyModel, state: &mut DecodeState, row: &[f64]) -> Vec<f64> {
    let cfg = &model.cfg;
    let w = cfg.width;
    let hd = cfg.head_dim();
    let heads = cfg.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = row.to_vec();
    for (bi, idx) in model.index.blocks.iter().enumerate() {
        let mut n1 = vec![0.0; w];
        rmsnorm_into(&mut n1, &x);
        let mut q = vec![0.0; w];
        let mut k = vec![0.0; w];
        let mut v = vec![0.0; w];
        matmul_acc(&mut q, &n1, model.tensor(&idx.wq), 1, w, w);
        matmul_acc(&mut k, &n1, model.tensor(&idx.wk), 1, w, w);
        matmul_acc(&mut v, &n1, model.tensor(&idx.wv), 1, w, w);
        let (kc, vc) = &mut state.kv[bi];
        kc.extend_from_slice(&k);
        vc.extend_from_slice(&v);
        let t_len = state.pos + 1;

        let mut ho = vec![0.0; w];
        let mut scores = vec![0.0; t_len];
        let mut att = vec![0.0; t_len];
        for h in 0..heads {
            let hoff = h * hd;
            let qh = &q[hoff..hoff + hd];
            for j in 0..t_len {
                scores[j] = dot(qh, &kc[j * w + hoff..j * w + hoff + hd]) * scale;
            }
            softmax_into(&mut att, &scores);
            let out = &mut ho[hoff..hoff + hd];
            for j in 0..t_len {
                axpy(out, att[j], &vc[j * w + hoff..j * w + hoff + hd]);
            }
        }
        let mut attn_out = vec![0.0; w];
        matmul_acc(&mut attn_out, &ho, model.tensor(&idx.wo), 1, w, w);
        let mut x_mid = x.clone();
        axpy(&mut x_mid, 1.0, &attn_out);

        let mut n2 = vec![0.0; w];
        rmsnorm_into(&mut n2, &x_mid);
        let hidden = cfg.mlp_hidden;
        let mut h1 = model.tensor(&idx.fc1_b).to_vec();
        matmul_acc(&mut h1, &n2, model.tensor(&idx.fc1), 1, w, hidden);
        let h1a: Vec<f64> = h1.iter().map(|&z| relu2(z)).collect();
        let mut mlp = model.tensor(&idx.fc2_b).to_vec();
        matmul_acc(&mut mlp, &h1a, model.tensor(&idx.fc2), 1, hidden, w);
        for (xi, (&xm, &ml)) in x.iter_mut().zip(x_mid.iter().zip(&mlp)) {
            *xi = xm + ml;
        }
    }
    state.pos += 1;
    let mut fin = vec![0.0; w];
    rmsnorm_into(&mut fin, &x);
    fin
}

fn decode_with(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    mut pick: impl FnMut(&[f64]) -> u16,
) -> Result<Vec<u16>> {
    model.require_head(HeadKind::Discrete)?;
    validate_inputs(model, obs, instruction)?;
    let cfg = &model.cfg;
    let w = cfg.width;
    let v = cfg.vocab;
    let n_ctx = cfg.n_ctx();
    let m = cfg.m_tokens();
    let rows_placeholder = vec![cfg.start_token(); m];
    let mut state = DecodeState::new(cfg.blocks);
    let mut row = vec![0.0; w];
    for pos in 0..n_ctx {
        embed_row(model, obs, instruction, &rows_placeholder, pos, &mut row);
        forward_row(model, &mut state, &row);
    }
    let out_w = model.tensor(&model.index.out_w);
    let out_b = model.tensor(&model.index.out_b);
    let mut tokens: Vec<u16> = Vec::with_capacity(m);
    let mut prev = cfg.start_token();
    let mut probs = vec![0.0; v];
    for tau in 0..m {
        let pos = n_ctx + tau;
        let act_emb = model.tensor(&model.index.act_emb);
        let pos_emb = model.tensor(&model.index.pos_emb);
        row.copy_from_slice(&act_emb[prev * w..(prev + 1) * w]);
        axpy(&mut row, 1.0, &pos_emb[pos * w..(pos + 1) * w]);
        let fin = forward_row(model, &mut state, &row);
        let mut logits = out_b.to_vec();
        for (l, &h) in fin.iter().enumerate() {
            axpy(&mut logits, h, &out_w[l * v..(l + 1) * v]);
        }
        softmax_into(&mut probs, &logits);
        let tok = pick(&probs);
        tokens.push(tok);
        prev = tok as usize;
    }
    Ok(tokens)
}

/// Greedy decode; argmax ties break toward the lowest token id.
pub fn decode_greedy(model: &PolicyModel, obs: &Observation, instruction: &[u16]) -> Result<Vec<u16>> {
    decode_with(model, obs, instruction, |probs| {
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        best as u16
    })
}

/// Seeded sampling decode, for fidelity experiments.
pub fn decode_sampled(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<u16>> {
    decode_with(model, obs, instruction, |probs| {
        let mut dart: f64 = rng.gen::<f64>();
        for (i, &p) in probs.iter().enumerate() {
            dart -= p;
            if dart <= 0.0 {
                return i as u16;
            }
        }
        (probs.len() - 1) as u16
    })
}

/// Per-parameter gradient container re-export point for loss code.
pub type Grads = GradientBundle;

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::policy::ModelConfig;

    pub(crate) fn tiny_cfg(head: HeadKind) -> ModelConfig {
        ModelConfig {
            d_action: 2,
            horizon: 3,
            vocab: 5,
            width: 8,
            blocks: 2,
            heads: 2,
            mlp_hidden: 16,
            img_h: 8,
            img_w: 8,
            channels: 3,
            patch: 4,
            prompt_len: 4,
            prompt_vocab: 12,
            head,
        }
    }

    pub(crate) fn test_obs(cfg: &ModelConfig, seed: u64) -> Observation {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, "test-obs");
        let n = cfg.img_h * cfg.img_w * cfg.channels;
        Observation {
            height: cfg.img_h,
            width: cfg.img_w,
            channels: cfg.channels,
            pixels: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn latents_count_is_m() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 7).unwrap();
        let obs = test_obs(&cfg, 0);
        let lat = forward_latents(&model, &obs, &[0, 1, 2, 3]).unwrap();
        assert_eq!(lat.len(), 6);
        assert!(lat.data.iter().all(|v| v.is_finite()));
        // Deterministic for identical inputs.
        let lat2 = forward_latents(&model, &obs, &[0, 1, 2, 3]).unwrap();
        assert_eq!(lat.data, lat2.data);
    }

    #[test]
    fn distributions_are_normalized_and_causal() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 11).unwrap();
        let obs = test_obs(&cfg, 1);
        let instr = [1u16, 2, 3, 4];
        let d0 = token_distributions(&model, &obs, &instr, &[1, 2, 3]).unwrap();
        assert_eq!(d0.len(), 6);
        for d in &d0 {
            assert!(d.is_normalized(1e-6));
        }
        // Change the prefix token at position 2: distributions at 0..=2 must
        // be unchanged under the causal mask.
        let d1 = token_distributions(&model, &obs, &instr, &[1, 2, 0]).unwrap();
        for tau in 0..3 {
            assert_eq!(d0[tau].probs, d1[tau].probs, "position {tau} changed");
        }
        assert_ne!(d0[3].probs, d1[3].probs);
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let mut model = PolicyModel::init(cfg.clone(), 11).unwrap();
        // Zero the output head: logits all equal -> uniform rows.
        let r = model.index.out_w.clone();
        model.params[r].iter_mut().for_each(|p| *p = 0.0);
        let r = model.index.out_b.clone();
        model.params[r].iter_mut().for_each(|p| *p = 0.0);
        let obs = test_obs(&cfg, 2);
        let d = token_distributions(&model, &obs, &[0, 0, 0, 0], &[]).unwrap();
        for row in &d {
            for &p in &row.probs {
                assert!((p - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunk_log_prob_is_nonpositive_and_matches_distributions() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 13).unwrap();
        let obs = test_obs(&cfg, 3);
        let instr = [5u16, 6, 7, 8];
        let chunk = [0u16, 4, 2, 1, 3, 0];
        let lp = chunk_log_prob(&model, &obs, &instr, &chunk).unwrap();
        assert!(lp <= 0.0);
        // Cross-check against per-position distributions with growing prefixes.
        let mut manual = 0.0;
        for tau in 0..chunk.len() {
            let d = token_distributions(&model, &obs, &instr, &chunk[..tau]).unwrap();
            manual += d[tau].probs[chunk[tau] as usize].ln();
        }
        assert!((lp - manual).abs() < 1e-9, "{lp} vs {manual}");
    }

    #[test]
    fn greedy_decode_matches_full_path_argmax() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 17).unwrap();
        let obs = test_obs(&cfg, 4);
        let instr = [1u16, 1, 1, 1];
        let fast = decode_greedy(&model, &obs, &instr).unwrap();
        assert_eq!(fast, decode_greedy(&model, &obs, &instr).unwrap());
        // Slow reference: re-run the full path per position.
        let mut slow: Vec<u16> = Vec::new();
        for tau in 0..cfg.m_tokens() {
            let d = token_distributions(&model, &obs, &instr, &slow).unwrap();
            let row = &d[tau].probs;
            let mut best = 0usize;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            slow.push(best as u16);
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn greedy_is_locally_optimal_under_single_token_perturbation() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 23).unwrap();
        let obs = test_obs(&cfg, 5);
        let instr = [2u16, 3, 4, 5];
        let greedy = decode_greedy(&model, &obs, &instr).unwrap();
        let base = chunk_log_prob(&model, &obs, &instr, &greedy).unwrap();
        for tau in 0..greedy.len() {
            for v in 0..cfg.vocab as u16 {
                if v == greedy[tau] {
                    continue;
                }
                let mut alt = greedy.clone();
                alt[tau] = v;
                let lp = chunk_log_prob(&model, &obs, &instr, &alt).unwrap();
                // Perturbing position tau changes only terms >= tau; greedy
                // maximizes the term at tau given the shared prefix, so a
                // pure position-tau swap cannot beat it at that position,
                // but later terms can shift. Compare the position-tau term.
                let d = token_distributions(&model, &obs, &instr, &greedy[..tau]).unwrap();
                assert!(d[tau].probs[greedy[tau] as usize] >= d[tau].probs[v as usize]);
                let _ = (base, lp);
            }
        }
    }

    #[test]
    fn continuous_head_shapes_and_zero_final_layer() {
        let cfg = tiny_cfg(HeadKind::Continuous);
        let model = PolicyModel::init(cfg.clone(), 29).unwrap();
        let obs = test_obs(&cfg, 6);
        let pred = predict_continuous(&model, &obs, &[0, 1, 2, 3]).unwrap();
        assert_eq!(pred.len(), cfg.horizon * cfg.d_action);
        // Final layer is zero-initialized.
        assert!(pred.iter().all(|&x| x == 0.0));
        // Discrete ops refuse to run.
        assert!(decode_greedy(&model, &obs, &[0, 1, 2, 3]).is_err());
        let dm = PolicyModel::init(tiny_cfg(HeadKind::Discrete), 29).unwrap();
        assert!(predict_continuous(&dm, &obs, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn single_pixel_perturbation_changes_some_latent() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 31).unwrap();
        let obs = test_obs(&cfg, 7);
        let instr = [0u16, 0, 0, 0];
        let base = forward_latents(&model, &obs, &instr).unwrap();
        let mut unchanged = Vec::new();
        for pix in 0..obs.pixels.len() {
            let mut obs2 = obs.clone();
            obs2.pixels[pix] += 0.25;
            let lat = forward_latents(&model, &obs2, &instr).unwrap();
            if lat.data == base.data {
                unchanged.push(pix);
            }
        }
        assert!(unchanged.is_empty(), "pixels {unchanged:?} left every latent unchanged");
    }

    #[test]
    fn prefix_too_long_is_rejected() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = PolicyModel::init(cfg.clone(), 37).unwrap();
        let obs = test_obs(&cfg, 8);
        let err = token_distributions(&model, &obs, &[0, 0, 0, 0], &[0, 0, 0, 0, 0, 0]);
        assert!(err.is_err());
        let err = chunk_log_prob(&model, &obs, &[0, 0, 0, 0], &[0, 0, 0, 0, 0, 9]);
        assert!(err.is_err(), "token 9 is out of vocabulary");
    }
}

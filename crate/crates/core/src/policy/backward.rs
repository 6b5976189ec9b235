//! Hand-written backward pass through the policy network.
//!
//! Losses seed the backward with upstream gradients at one of three points:
//! discrete head logits, backbone latents, or continuous head outputs. The
//! pass accumulates analytic parameter gradients into a [`GradientBundle`].

use super::forward::{gather_patch, Trace};
use super::math::*;
use super::{GradientBundle, PolicyModel};
use crate::error::{Error, Result};
use crate::simenv::Observation;

/// Upstream gradient entry point.
pub enum BackwardSeed<'a> {
    /// `dL/dlogits`, `[M x V]` row-major.
    SlotLogits(&'a [f64]),
    /// `dL/dlatent`, `[M x width]` row-major.
    Latents(&'a [f64]),
    /// `dL/dprediction`, `[H x D]` row-major.
    Continuous(&'a [f64]),
}

/// Accumulate gradients for one traced forward evaluation.
pub fn backward(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    trace: &Trace,
    seed: BackwardSeed,
    grads: &mut GradientBundle,
) -> Result<()> {
    let cfg = &model.cfg;
    let w = cfg.width;
    let m = cfg.m_tokens();
    let seq = cfg.seq_len();
    let n_ctx = cfg.n_ctx();
    if trace.blocks.len() != cfg.blocks {
        return Err(Error::config("trace was recorded without block activations"));
    }

    // Head backward: reduce every seed to d_latents.
    let mut d_latents = vec![0.0; m * w];
    match seed {
        BackwardSeed::Latents(d) => {
            if d.len() != m * w {
                return Err(Error::config("latent gradient shape mismatch"));
            }
            d_latents.copy_from_slice(d);
        }
        BackwardSeed::SlotLogits(d_logits) => {
            let v = cfg.vocab;
            if d_logits.len() != m * v {
                return Err(Error::config("logit gradient shape mismatch"));
            }
            let out_w = model.tensor(&model.index.out_w);
            for tau in 0..m {
                let latent = &trace.fin[(n_ctx + tau) * w..(n_ctx + tau + 1) * w];
                let drow = &d_logits[tau * v..(tau + 1) * v];
                {
                    let g_out_b = &mut grads.data[model.index.out_b.clone()];
                    axpy(g_out_b, 1.0, drow);
                }
                let g_out_w = &mut grads.data[model.index.out_w.clone()];
                let d_lat = &mut d_latents[tau * w..(tau + 1) * w];
                for l in 0..w {
                    axpy(&mut g_out_w[l * v..(l + 1) * v], latent[l], drow);
                    d_lat[l] += dot(&out_w[l * v..(l + 1) * v], drow);
                }
            }
        }
        BackwardSeed::Continuous(d_pred) => {
            if d_pred.len() != m {
                return Err(Error::config("continuous gradient shape mismatch"));
            }
            let cont = trace
                .cont
                .as_ref()
                .ok_or_else(|| Error::config("trace has no continuous head activations"))?;
            // Inputs to layer 0 are the latents themselves.
            let mut input0 = Vec::with_capacity(m * w);
            for tau in 0..m {
                input0.extend_from_slice(&trace.fin[(n_ctx + tau) * w..(n_ctx + tau + 1) * w]);
            }
            let mut d_out: Vec<f64> = d_pred.to_vec(); // [M x 1] at layer 3
            for li in (0..4).rev() {
                let (wr, br) = &model.index.cont[li];
                let out_dim = if li == 3 { 1 } else { w };
                let (z, _) = &cont.layers[li];
                // Through the activation (final layer is linear).
                let d_z: Vec<f64> = if li == 3 {
                    d_out.clone()
                } else {
                    d_out
                        .iter()
                        .zip(z)
                        .map(|(&g, &zz)| if zz > 0.0 { g } else { 0.0 })
                        .collect()
                };
                let input: &[f64] = if li == 0 { &input0 } else { &cont.layers[li - 1].1 };
                {
                    let g_b = &mut grads.data[br.clone()];
                    for i in 0..m {
                        axpy(g_b, 1.0, &d_z[i * out_dim..(i + 1) * out_dim]);
                    }
                }
                matmul_at_acc(&mut grads.data[wr.clone()], input, &d_z, m, w, out_dim);
                let mut d_in = vec![0.0; m * w];
                matmul_bt_acc(&mut d_in, &d_z, model.tensor(wr), m, out_dim, w);
                d_out = d_in;
            }
            d_latents.copy_from_slice(&d_out);
        }
    }

    // Final norm backward, slot rows only.
    let mut d_x = vec![0.0; seq * w];
    for tau in 0..m {
        let pos = n_ctx + tau;
        rmsnorm_backward_acc(
            &mut d_x[pos * w..(pos + 1) * w],
            &d_latents[tau * w..(tau + 1) * w],
            &trace.x_last[pos * w..(pos + 1) * w],
            trace.fin_inv[pos],
        );
    }

    // Blocks in reverse.
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let hidden = cfg.mlp_hidden;
    let scale = 1.0 / (hd as f64).sqrt();
    let causal = cfg.causal();
    for bi in (0..cfg.blocks).rev() {
        let bt = &trace.blocks[bi];
        let idx = &model.index.blocks[bi];

        // MLP half: x_out = x_mid + fc2(relu2(fc1(n2(x_mid)))).
        let mut d_h1a = vec![0.0; seq * hidden];
        matmul_bt_acc(&mut d_h1a, &d_x, model.tensor(&idx.fc2), seq, w, hidden);
        matmul_at_acc(&mut grads.data[idx.fc2.clone()], &bt.h1a, &d_x, seq, hidden, w);
        {
            let g = &mut grads.data[idx.fc2_b.clone()];
            for i in 0..seq {
                axpy(g, 1.0, &d_x[i * w..(i + 1) * w]);
            }
        }
        let d_h1: Vec<f64> = d_h1a
            .iter()
            .zip(&bt.h1)
            .map(|(&g, &z)| g * relu2_grad(z))
            .collect();
        matmul_at_acc(&mut grads.data[idx.fc1.clone()], &bt.n2, &d_h1, seq, w, hidden);
        {
            let g = &mut grads.data[idx.fc1_b.clone()];
            for i in 0..seq {
                axpy(g, 1.0, &d_h1[i * hidden..(i + 1) * hidden]);
            }
        }
        let mut d_n2 = vec![0.0; seq * w];
        matmul_bt_acc(&mut d_n2, &d_h1, model.tensor(&idx.fc1), seq, hidden, w);
        let mut d_x_mid = d_x.clone();
        for i in 0..seq {
            rmsnorm_backward_acc(
                &mut d_x_mid[i * w..(i + 1) * w],
                &d_n2[i * w..(i + 1) * w],
                &bt.x_mid[i * w..(i + 1) * w],
                bt.n2_inv[i],
            );
        }

        // Attention half: x_mid = x_in + wo(attend(n1(x_in))).
        let mut d_ho = vec![0.0; seq * w];
        matmul_bt_acc(&mut d_ho, &d_x_mid, model.tensor(&idx.wo), seq, w, w);
        matmul_at_acc(&mut grads.data[idx.wo.clone()], &bt.ho, &d_x_mid, seq, w, w);

        let mut d_q = vec![0.0; seq * w];
        let mut d_k = vec![0.0; seq * w];
        let mut d_v = vec![0.0; seq * w];
        let mut d_att_row = vec![0.0; seq];
        let mut d_scores = vec![0.0; seq];
        for h in 0..heads {
            let hoff = h * hd;
            for i in 0..seq {
                let jmax = if causal { i + 1 } else { seq };
                let att_row = &bt.att[(h * seq + i) * seq..(h * seq + i) * seq + jmax];
                let d_ho_i = &d_ho[i * w + hoff..i * w + hoff + hd];
                for j in 0..jmax {
                    d_att_row[j] = dot(d_ho_i, &bt.v[j * w + hoff..j * w + hoff + hd]);
                    axpy(&mut d_v[j * w + hoff..j * w + hoff + hd], att_row[j], d_ho_i);
                }
                softmax_backward_into(&mut d_scores[..jmax], att_row, &d_att_row[..jmax]);
                let d_q_i = &mut d_q[i * w + hoff..i * w + hoff + hd];
                for j in 0..jmax {
                    let coef = d_scores[j] * scale;
                    axpy(d_q_i, coef, &bt.k[j * w + hoff..j * w + hoff + hd]);
                    axpy(
                        &mut d_k[j * w + hoff..j * w + hoff + hd],
                        coef,
                        &bt.q[i * w + hoff..i * w + hoff + hd],
                    );
                }
            }
        }

        let mut d_n1 = vec![0.0; seq * w];
        matmul_bt_acc(&mut d_n1, &d_q, model.tensor(&idx.wq), seq, w, w);
        matmul_bt_acc(&mut d_n1, &d_k, model.tensor(&idx.wk), seq, w, w);
        matmul_bt_acc(&mut d_n1, &d_v, model.tensor(&idx.wv), seq, w, w);
        matmul_at_acc(&mut grads.data[idx.wq.clone()], &bt.n1, &d_q, seq, w, w);
        matmul_at_acc(&mut grads.data[idx.wk.clone()], &bt.n1, &d_k, seq, w, w);
        matmul_at_acc(&mut grads.data[idx.wv.clone()], &bt.n1, &d_v, seq, w, w);

        let mut d_x_in = d_x_mid;
        for i in 0..seq {
            rmsnorm_backward_acc(
                &mut d_x_in[i * w..(i + 1) * w],
                &d_n1[i * w..(i + 1) * w],
                &bt.x_in[i * w..(i + 1) * w],
                bt.n1_inv[i],
            );
        }
        d_x = d_x_in;
    }

    // Embedding gradients.
    let n_img = cfg.n_img_tokens();
    let mut buf = vec![0.0; cfg.patch_dim()];
    for pos in 0..seq {
        let drow = &d_x[pos * w..(pos + 1) * w];
        {
            let g_pos = &mut grads.data[model.index.pos_emb.clone()];
            axpy(&mut g_pos[pos * w..(pos + 1) * w], 1.0, drow);
        }
        if pos < n_img {
            gather_patch(cfg, obs, pos, &mut buf);
            {
                let g_b = &mut grads.data[model.index.patch_b.clone()];
                axpy(g_b, 1.0, drow);
            }
            let g_w = &mut grads.data[model.index.patch_w.clone()];
            for (l, &x) in buf.iter().enumerate() {
                axpy(&mut g_w[l * w..(l + 1) * w], x, drow);
            }
        } else if pos < n_ctx {
            let tok = instruction[pos - n_img] as usize;
            let g = &mut grads.data[model.index.prompt_emb.clone()];
            axpy(&mut g[tok * w..(tok + 1) * w], 1.0, drow);
        } else {
            let row = trace.slot_rows[pos - n_ctx];
            let g = &mut grads.data[model.index.act_emb.clone()];
            axpy(&mut g[row * w..(row + 1) * w], 1.0, drow);
        }
    }
    Ok(())
}

/// Accumulate `coef * d(log pi(chunk))/d(theta)` for a teacher-forced trace.
pub fn accumulate_chunk_log_prob_grad(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    chunk: &[u16],
    trace: &Trace,
    coef: f64,
    grads: &mut GradientBundle,
) -> Result<()> {
    let v = cfg_vocab(model);
    let m = model.cfg.m_tokens();
    let logits = trace
        .slot_logits
        .as_ref()
        .ok_or_else(|| Error::config("trace has no discrete head logits"))?;
    let mut d_logits = vec![0.0; m * v];
    let mut probs = vec![0.0; v];
    for tau in 0..m {
        softmax_into(&mut probs, &logits[tau * v..(tau + 1) * v]);
        let drow = &mut d_logits[tau * v..(tau + 1) * v];
        for (d, &p) in drow.iter_mut().zip(&probs) {
            *d = -coef * p;
        }
        drow[chunk[tau] as usize] += coef;
    }
    backward(model, obs, instruction, trace, BackwardSeed::SlotLogits(&d_logits), grads)
}

fn cfg_vocab(model: &PolicyModel) -> usize {
    model.cfg.vocab
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::forward::{chunk_log_prob_traced, forward_full, tests::{test_obs, tiny_cfg}, SlotFill};
    use crate::policy::HeadKind;

    #[test]
    fn zero_seed_gives_zero_grads() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let model = crate::policy::PolicyModel::init(cfg.clone(), 5).unwrap();
        let obs = test_obs(&cfg, 9);
        let instr = [0u16, 1, 2, 3];
        let trace = forward_full(&model, &obs, &instr, SlotFill::Start, true).unwrap();
        let mut grads = GradientBundle::zeros(&model);
        let d = vec![0.0; cfg.m_tokens() * cfg.width];
        backward(&model, &obs, &instr, &trace, BackwardSeed::Latents(&d), &mut grads).unwrap();
        assert!(grads.data.iter().all(|&g| g == 0.0));
    }

    /// Directional finite-difference smoke test; the exhaustive oracle lives
    /// in the integration suite.
    #[test]
    fn chunk_log_prob_grad_matches_fd_on_sampled_params() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let mut model = crate::policy::PolicyModel::init(cfg.clone(), 41).unwrap();
        let obs = test_obs(&cfg, 10);
        let instr = [3u16, 1, 0, 2];
        let chunk = [1u16, 0, 4, 2, 3, 3];
        let (_, trace) = chunk_log_prob_traced(&model, &obs, &instr, &chunk, true).unwrap();
        let mut grads = GradientBundle::zeros(&model);
        accumulate_chunk_log_prob_grad(&model, &obs, &instr, &chunk, &trace, 1.0, &mut grads).unwrap();

        let h = 1e-5;
        let n = model.params.len();
        // Probe a spread of parameters across all tensors.
        for pi in (0..n).step_by(97) {
            let orig = model.params[pi];
            model.params[pi] = orig + h;
            let up = crate::policy::forward::chunk_log_prob(&model, &obs, &instr, &chunk).unwrap();
            model.params[pi] = orig - h;
            let down = crate::policy::forward::chunk_log_prob(&model, &obs, &instr, &chunk).unwrap();
            model.params[pi] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads.data[pi];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "param {pi}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn continuous_head_grad_matches_fd_on_sampled_params() {
        let cfg = tiny_cfg(HeadKind::Continuous);
        let mut model = crate::policy::PolicyModel::init(cfg.clone(), 43).unwrap();
        // Nudge the zero final layer so gradients reach the lower layers.
        {
            let r = model.index.cont[3].0.clone();
            for (i, p) in model.params[r].iter_mut().enumerate() {
                *p = 0.05 * ((i % 7) as f64 - 3.0);
            }
        }
        let obs = test_obs(&cfg, 11);
        let instr = [3u16, 1, 0, 2];
        let target: Vec<f64> = (0..cfg.m_tokens()).map(|i| 0.1 * i as f64 - 0.2).collect();
        let loss_of = |m: &crate::policy::PolicyModel| -> f64 {
            let pred = crate::policy::forward::predict_continuous(m, &obs, &instr).unwrap();
            pred.iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum::<f64>()
        };
        let trace = forward_full(&model, &obs, &instr, SlotFill::Start, true).unwrap();
        let pred = trace.cont.as_ref().unwrap().layers[3].1.clone();
        let d_pred: Vec<f64> = pred.iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
        let mut grads = GradientBundle::zeros(&model);
        backward(&model, &obs, &instr, &trace, BackwardSeed::Continuous(&d_pred), &mut grads).unwrap();

        let h = 1e-5;
        for pi in (0..model.params.len()).step_by(89) {
            let orig = model.params[pi];
            model.params[pi] = orig + h;
            let up = loss_of(&model);
            model.params[pi] = orig - h;
            let down = loss_of(&model);
            model.params[pi] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads.data[pi];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "param {pi}: analytic {a} vs fd {fd}"
            );
        }
    }
}

//! Finite-difference gradient oracle.
//!
//! Central differences (step 1e-5, f64) over every parameter of a width-8,
//! M=6 model must match the analytic gradients of each training loss with
//! relative error below 1e-4. The oracle only evaluates losses through the
//! public forward path; it never touches the backward code it checks.

use vcl_core::datagen::{build_dataset, DataGenConfig, Dataset};
use vcl_core::distill::{
    distill_loss_and_grads, sft_loss_and_grads, total_loss_and_grads, SftItem, SimKind,
};
use vcl_core::policy::{HeadKind, ModelConfig, PolicyModel};
use vcl_core::prefopt::{dpo_loss_and_grads, in_batch_pair, PreferencePair, RefCache};
use vcl_core::simenv::EnvConfig;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn fd_model_cfg(ds: &Dataset, head: HeadKind) -> ModelConfig {
    ModelConfig {
        d_action: 3,
        horizon: 2, // M = 6
        vocab: ds.vocab,
        width: 8,
        blocks: 2,
        heads: 2,
        mlp_hidden: 16,
        img_h: ds.env.img,
        img_w: ds.env.img,
        channels: 3,
        patch: 8,
        prompt_len: vcl_core::datagen::PROMPT_LEN,
        prompt_vocab: vcl_core::datagen::PROMPT_VOCAB,
        head,
    }
}

fn fd_dataset() -> Dataset {
    let mut env = EnvConfig::default();
    env.n_tasks = 2;
    let gen = DataGenConfig { demos_per_task: 2, ..DataGenConfig::default() };
    let ds = build_dataset(&env, &gen, 2, 5, 99).unwrap();
    assert!(ds.tracked_samples.len() >= 4, "need tracked samples for pairing");
    ds
}

/// Sweep every parameter with central differences and compare.
fn check_all_params(
    model: &mut PolicyModel,
    analytic: &[f64],
    mut loss_of: impl FnMut(&PolicyModel) -> f64,
    label: &str,
) {
    let mut worst = 0.0f64;
    for pi in 0..model.params.len() {
        let orig = model.params[pi];
        model.params[pi] = orig + FD_STEP;
        let up = loss_of(model);
        model.params[pi] = orig - FD_STEP;
        let down = loss_of(model);
        model.params[pi] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic[pi];
        let denom = a.abs().max(fd.abs()).max(1e-6);
        let rel = (a - fd).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel < REL_TOL,
            "{label}: param {pi} analytic {a} vs fd {fd} (rel {rel:.3e})"
        );
    }
    println!("{label}: {} params, worst rel err {worst:.3e}", model.params.len());
}

#[test]
fn sft_discrete_gradients_match_finite_differences() {
    let ds = fd_dataset();
    let mut model = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Discrete), 1).unwrap();
    let items = vec![SftItem::Plain(0), SftItem::Plain(3), SftItem::Tracked(1)];
    let (_, grads) = sft_loss_and_grads(&model, &ds, &items, true).unwrap();
    let analytic = grads.unwrap().data;
    check_all_params(
        &mut model,
        &analytic,
        |m| sft_loss_and_grads(m, &ds, &items, false).unwrap().0,
        "sft-discrete",
    );
}

#[test]
fn sft_l1_gradients_match_finite_differences() {
    let ds = fd_dataset();
    let mut model = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Continuous), 2).unwrap();
    // Wake the zero-initialized final layer so the FD probe sees curvature
    // everywhere, and nudge predictions off the labels so the L1 kink at
    // zero residual is never sampled.
    let r = model.index.cont[3].0.clone();
    for (i, p) in model.params[r].iter_mut().enumerate() {
        *p = 0.04 * ((i % 7) as f64 - 3.0) + 0.013;
    }
    let r = model.index.cont[3].1.clone();
    for p in model.params[r].iter_mut() {
        *p = 0.017;
    }
    let items = vec![SftItem::Plain(1), SftItem::Plain(4)];
    let (_, grads) = sft_loss_and_grads(&model, &ds, &items, true).unwrap();
    let analytic = grads.unwrap().data;
    check_all_params(
        &mut model,
        &analytic,
        |m| sft_loss_and_grads(m, &ds, &items, false).unwrap().0,
        "sft-l1",
    );
}

#[test]
fn dpo_gradients_match_finite_differences() {
    let ds = fd_dataset();
    let mut model = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Discrete), 3).unwrap();
    let ref_model = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Discrete), 4).unwrap();
    let mut rng = vcl_core::rng::stream_rng(0, "fd-dpo");
    let pairs: Vec<PreferencePair> = in_batch_pair(&ds, &[0, 1, 2, 3], &mut rng).unwrap();
    assert!(!pairs.is_empty());
    let cache = RefCache::new();
    let alpha = 0.1;
    let (_, grads, _) =
        dpo_loss_and_grads(&model, &ref_model, &ds, &pairs, alpha, &cache, true).unwrap();
    let analytic = grads.unwrap().data;
    check_all_params(
        &mut model,
        &analytic,
        |m| {
            dpo_loss_and_grads(m, &ref_model, &ds, &pairs, alpha, &cache, false)
                .unwrap()
                .0
        },
        "dpo",
    );
}

#[test]
fn total_distillation_gradients_match_finite_differences() {
    let ds = fd_dataset();
    let teacher = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Discrete), 5).unwrap();
    let pairs_pool = ds.paired_indices(false);
    let batch: Vec<(usize, usize)> = pairs_pool[..3.min(pairs_pool.len())].to_vec();
    let gamma = 0.1;
    for sim in [SimKind::NegCosine, SimKind::L2] {
        let mut student = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Discrete), 6).unwrap();
        let (_, _, _, grads) =
            total_loss_and_grads(&student, Some(&teacher), &ds, &batch, gamma, sim, true).unwrap();
        let analytic = grads.unwrap().data;
        check_all_params(
            &mut student,
            &analytic,
            |m| {
                total_loss_and_grads(m, Some(&teacher), &ds, &batch, gamma, sim, false)
                    .unwrap()
                    .0
            },
            &format!("total-distill-{sim:?}"),
        );
    }
}

#[test]
fn distill_gradients_cross_architecture() {
    // Continuous student distilling from a discrete teacher: the latent
    // pathway must stay differentiable across head types.
    let ds = fd_dataset();
    let teacher = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Discrete), 7).unwrap();
    let mut student = PolicyModel::init(fd_model_cfg(&ds, HeadKind::Continuous), 8).unwrap();
    let pairs_pool = ds.paired_indices(false);
    let batch: Vec<(usize, usize)> = pairs_pool[..2.min(pairs_pool.len())].to_vec();
    let (_, grads) =
        distill_loss_and_grads(&student, &teacher, &ds, &batch, SimKind::NegCosine, true).unwrap();
    let analytic = grads.unwrap().data;
    check_all_params(
        &mut student,
        &analytic,
        |m| {
            distill_loss_and_grads(m, &teacher, &ds, &batch, SimKind::NegCosine, false)
                .unwrap()
                .0
        },
        "distill-cross-architecture",
    );
}

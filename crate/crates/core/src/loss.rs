//! Training objective and its exact gradients.
//!
//! The objective is `λ₀·ce + λ₁·coh + λ₂·sep`, each term averaged over the
//! batch. Cohesion and separation pick K prototypes per sample; those
//! selections are held fixed during the backward pass.

use crate::config::TrainConfig;
use crate::datastore::{Target, TaskMode, TokenEmbeddingSample};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, HeadParameters};
use crate::numerics::Matrix;

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

pub fn loss_ce(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::Index(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Indices of the `k` largest same-class squared distances and their mean.
pub fn loss_coh(
    dist_sq: &[f64],
    label: usize,
    proto_class: &[usize],
    k: usize,
) -> Result<(f64, Vec<usize>)> {
    let mut own: Vec<usize> = (0..dist_sq.len()).filter(|&j| proto_class[j] == label).collect();
    if k == 0 || k > own.len() {
        return Err(Error::Config(format!(
            "cohesion needs 1 <= k <= {} same-class prototypes, got k={k}",
            own.len()
        )));
    }
    own.sort_by(|&a, &b| dist_sq[b].total_cmp(&dist_sq[a]).then(a.cmp(&b)));
    own.truncate(k);
    let mean = own.iter().map(|&j| dist_sq[j]).sum::<f64>() / k as f64;
    Ok((mean, own))
}

/// Negated mean of the `k` smallest other-class squared distances.
///
/// With no other-class prototypes (regression heads) the term is identically 0.
pub fn loss_sep(
    dist_sq: &[f64],
    label: usize,
    proto_class: &[usize],
    k: usize,
) -> Result<(f64, Vec<usize>)> {
    let mut other: Vec<usize> = (0..dist_sq.len()).filter(|&j| proto_class[j] != label).collect();
    if other.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if k == 0 || k > other.len() {
        return Err(Error::Config(format!(
            "separation needs 1 <= k <= {} other-class prototypes, got k={k}",
            other.len()
        )));
    }
    other.sort_by(|&a, &b| dist_sq[a].total_cmp(&dist_sq[b]).then(a.cmp(&b)));
    other.truncate(k);
    let mean = other.iter().map(|&j| dist_sq[j]).sum::<f64>() / k as f64;
    Ok((-mean, other))
}

/// Per-sample prediction loss: cross-entropy, or squared error in regression mode.
pub fn prediction_loss(trace: &ForwardTrace, target: Target) -> Result<f64> {
    match (target, &trace.probs) {
        (Target::Class(c), Some(probs)) => loss_ce(probs, c),
        (Target::Value(y), None) => {
            let z = trace.logits[0];
            Ok((z - y) * (z - y))
        }
        _ => Err(Error::Config("target kind does not match the head's mode".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Batch-mean cross-entropy (mean squared error in regression mode).
    pub ce: f64,
    pub coh: f64,
    pub sep: f64,
    pub total: f64,
    pub selected_coh: Vec<Vec<usize>>,
    pub selected_sep: Vec<Vec<usize>>,
}

pub fn total_loss(
    traces: &[ForwardTrace],
    targets: &[Target],
    proto_class: &[usize],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    config.validate_lambdas()?;
    if traces.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} traces for {} targets",
            traces.len(),
            targets.len()
        )));
    }
    if traces.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let (mut ce, mut coh, mut sep) = (0.0, 0.0, 0.0);
    let mut selected_coh = Vec::with_capacity(traces.len());
    let mut selected_sep = Vec::with_capacity(traces.len());
    for (tr, &target) in traces.iter().zip(targets) {
        if tr.dist_sq.len() != proto_class.len() {
            return Err(Error::Consistency(format!(
                "trace has {} distances, head has {} prototypes",
                tr.dist_sq.len(),
                proto_class.len()
            )));
        }
        ce += prediction_loss(tr, target)?;
        let (c, sc) = loss_coh(&tr.dist_sq, target.class(), proto_class, config.k)?;
        let (s, ss) = loss_sep(&tr.dist_sq, target.class(), proto_class, config.k)?;
        coh += c;
        sep += s;
        selected_coh.push(sc);
        selected_sep.push(ss);
    }
    let b = traces.len() as f64;
    let (ce, coh, sep) = (ce / b, coh / b, sep / b);
    Ok(LossBreakdown {
        ce,
        coh,
        sep,
        total: config.lambda0 * ce + config.lambda1 * coh + config.lambda2 * sep,
        selected_coh,
        selected_sep,
    })
}

/// Gradient of the objective, one tensor per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_psi: Matrix,
    pub b_psi: Vec<f64>,
    pub w_nu: Vec<f64>,
    pub prototypes: Matrix,
    pub w_h: Matrix,
}

impl Gradients {
    pub fn zeros_like(params: &HeadParameters) -> Self {
        Self {
            w_psi: Matrix::zeros(params.attn_dim(), params.dim()),
            b_psi: vec![0.0; params.attn_dim()],
            w_nu: vec![0.0; params.attn_dim()],
            prototypes: Matrix::zeros(params.num_prototypes(), params.dim()),
            w_h: Matrix::zeros(params.num_prototypes(), params.num_classes()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w_psi.as_slice(),
            &self.b_psi,
            &self.w_nu,
            self.prototypes.as_slice(),
            self.w_h.as_slice(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_psi.as_mut_slice(),
            &mut self.b_psi,
            &mut self.w_nu,
            self.prototypes.as_mut_slice(),
            self.w_h.as_mut_slice(),
        ]
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

fn check_trace(sample: &TokenEmbeddingSample, trace: &ForwardTrace, params: &HeadParameters) -> Result<()> {
    let ok = trace.alpha.len() == sample.num_tokens()
        && trace.hidden.shape() == (sample.num_tokens(), params.attn_dim())
        && trace.pooled.len() == params.dim()
        && sample.dim() == params.dim()
        && trace.dist_sq.len() == params.num_prototypes()
        && trace.sims.len() == params.num_prototypes()
        && trace.logits.len() == params.num_classes();
    if ok {
        Ok(())
    } else {
        Err(Error::Consistency(format!(
            "trace for sample {} does not match the sample or parameter shapes",
            sample.sample_id
        )))
    }
}

/// Gradient contribution of one sample, with batch weighting `1 / batch`.
pub fn sample_backward(
    sample: &TokenEmbeddingSample,
    trace: &ForwardTrace,
    selected_coh: &[usize],
    selected_sep: &[usize],
    params: &HeadParameters,
    config: &TrainConfig,
    batch: usize,
) -> Result<Gradients> {
    check_trace(sample, trace, params)?;
    let scale = 1.0 / batch as f64;
    let n = params.num_prototypes();
    let classes = params.num_classes();
    let mut g = Gradients::zeros_like(params);

    // d total / d logits
    let mut dz = vec![0.0; classes];
    match (sample.target, &trace.probs, params.mode) {
        (Target::Class(y), Some(probs), TaskMode::Classification) => {
            if y >= classes {
                return Err(Error::Index(format!("label {y} out of range")));
            }
            // below the floor the clamped log is flat
            if probs[y] >= PROB_FLOOR {
                for c in 0..classes {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    dz[c] = config.lambda0 * scale * (probs[c] - onehot);
                }
            }
        }
        (Target::Value(y), None, TaskMode::Regression) => {
            dz[0] = config.lambda0 * scale * 2.0 * (trace.logits[0] - y);
        }
        _ => return Err(Error::Consistency("target kind does not match the head's mode".into())),
    }

    // classifier and d total / d dist_sq
    let mut d_dist = vec![0.0; n];
    for j in 0..n {
        let w_row = params.w_h.row(j);
        let mut d_sim = 0.0;
        for c in 0..classes {
            g.w_h.set(j, c, trace.sims[j] * dz[c]);
            d_sim += w_row[c] * dz[c];
        }
        d_dist[j] = d_sim * params.similarity.derivative(trace.dist_sq[j]);
    }
    if !selected_coh.is_empty() {
        let w = config.lambda1 * scale / selected_coh.len() as f64;
        for &j in selected_coh {
            d_dist[j] += w;
        }
    }
    if !selected_sep.is_empty() {
        let w = config.lambda2 * scale / selected_sep.len() as f64;
        for &j in selected_sep {
            d_dist[j] -= w;
        }
    }

    // prototypes and pooled encoding
    let d = params.dim();
    let mut d_pooled = vec![0.0; d];
    for j in 0..n {
        if d_dist[j] == 0.0 {
            continue;
        }
        let p = params.prototype(j);
        let gp = g.prototypes.row_mut(j);
        for k in 0..d {
            let diff = 2.0 * (trace.pooled[k] - p[k]) * d_dist[j];
            d_pooled[k] += diff;
            gp[k] = -diff;
        }
    }

    // attention
    let t = sample.num_tokens();
    let d_alpha: Vec<f64> = sample
        .tokens
        .iter_rows()
        .map(|h| crate::numerics::dot(h, &d_pooled))
        .collect();
    let mean: f64 = trace.alpha.iter().zip(&d_alpha).map(|(a, da)| a * da).sum();
    let da_width = params.attn_dim();
    for ti in 0..t {
        let d_score = trace.alpha[ti] * (d_alpha[ti] - mean);
        if d_score == 0.0 {
            continue;
        }
        let hidden = trace.hidden.row(ti);
        let h = sample.tokens.row(ti);
        for a in 0..da_width {
            g.w_nu[a] += hidden[a] * d_score;
            let d_pre = params.w_nu[a] * d_score * (1.0 - hidden[a] * hidden[a]);
            g.b_psi[a] += d_pre;
            let row = g.w_psi.row_mut(a);
            for k in 0..d {
                row[k] += d_pre * h[k];
            }
        }
    }
    Ok(g)
}

/// Exact gradient of [`total_loss`] under the selections recorded in `loss`.
///
/// Per-sample contributions are reduced in batch order.
pub fn backward(
    samples: &[&TokenEmbeddingSample],
    traces: &[ForwardTrace],
    loss: &LossBreakdown,
    params: &HeadParameters,
    config: &TrainConfig,
) -> Result<Gradients> {
    if samples.len() != traces.len()
        || loss.selected_coh.len() != traces.len()
        || loss.selected_sep.len() != traces.len()
    {
        return Err(Error::Consistency(format!(
            "backward got {} samples, {} traces, {} selections",
            samples.len(),
            traces.len(),
            loss.selected_coh.len()
        )));
    }
    let mut total = Gradients::zeros_like(params);
    for i in 0..samples.len() {
        let g = sample_backward(
            samples[i],
            &traces[i],
            &loss.selected_coh[i],
            &loss.selected_sep[i],
            params,
            config,
            samples.len(),
        )?;
        total.accumulate(&g);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_examples() {
        assert_eq!(loss_ce(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!((loss_ce(&[0.5, 0.5], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((loss_ce(&[0.5, 0.5], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(loss_ce(&[0.5, 0.5], 2), Err(Error::Index(_))));
        assert!(loss_ce(&[1.0, 0.0], 1).unwrap().is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p: f64 = rng.random_range(1e-6..1.0);
            assert_eq!(loss_ce(&[p, 1.0 - p], 0).unwrap(), -(p.ln()));
        }
    }

    #[test]
    fn coh_examples() {
        let (v, sel) = loss_coh(&[0.0, 5.0], 0, &[0, 1], 1).unwrap();
        assert_eq!((v, sel), (0.0, vec![0]));
        let (v, sel) = loss_coh(&[1.0, 4.0, 9.0, 0.5], 0, &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(v, 6.5);
        assert_eq!(sel, vec![2, 1]);
        assert!(matches!(loss_coh(&[1.0, 2.0], 0, &[0, 1], 2), Err(Error::Config(_))));
        // ties resolved toward the lower index
        let (_, sel) = loss_coh(&[3.0, 3.0, 3.0], 0, &[0, 0, 0], 2).unwrap();
        assert_eq!(sel, vec![0, 1]);
    }

    #[test]
    fn sep_examples() {
        let (v, sel) = loss_sep(&[0.1, 1.0, 4.0, 9.0], 0, &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(v, -2.5);
        assert_eq!(sel, vec![1, 2]);
        for k in 1..=3 {
            let (v, _) = loss_sep(&[0.0, 7.0, 7.0, 7.0], 0, &[0, 1, 1, 1], k).unwrap();
            assert_eq!(v, -7.0);
        }
        assert_eq!(loss_sep(&[1.0, 2.0], 0, &[0, 0], 1).unwrap(), (0.0, vec![]));
        assert!(matches!(loss_sep(&[1.0, 2.0], 0, &[0, 1], 2), Err(Error::Config(_))));
    }

    #[test]
    fn selections_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let proto_class: Vec<usize> = (0..20).map(|j| j / 5).collect();
        for _ in 0..100 {
            let d: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..10.0)).collect();
            let label = rng.random_range(0..4);
            let mut own: Vec<f64> = (0..20).filter(|&j| proto_class[j] == label).map(|j| d[j]).collect();
            own.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let coh_ref = own[..5].iter().sum::<f64>() / 5.0;
            let mut other: Vec<f64> = (0..20).filter(|&j| proto_class[j] != label).map(|j| d[j]).collect();
            other.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let sep_ref = -other[..5].iter().sum::<f64>() / 5.0;
            let (coh, _) = loss_coh(&d, label, &proto_class, 5).unwrap();
            let (sep, _) = loss_sep(&d, label, &proto_class, 5).unwrap();
            assert!((coh - coh_ref).abs() < 1e-12);
            assert!((sep - sep_ref).abs() < 1e-12);

            // selection is invariant to uniform positive scaling of distances
            let scaled: Vec<f64> = d.iter().map(|x| x * 3.7).collect();
            assert_eq!(
                loss_coh(&d, label, &proto_class, 3).unwrap().1,
                loss_coh(&scaled, label, &proto_class, 3).unwrap().1
            );
            assert_eq!(
                loss_sep(&d, label, &proto_class, 3).unwrap().1,
                loss_sep(&scaled, label, &proto_class, 3).unwrap().1
            );
        }
    }

    fn fake_trace(dist_sq: Vec<f64>, probs: Vec<f64>) -> ForwardTrace {
        ForwardTrace {
            hidden: Matrix::zeros(1, 1),
            alpha: vec![1.0],
            pooled: vec![0.0],
            sims: vec![0.0; dist_sq.len()],
            dist_sq,
            logits: vec![0.0; probs.len()],
            probs: Some(probs),
        }
    }

    #[test]
    fn total_loss_weighting() {
        let cfg = TrainConfig { k: 1, ..Default::default() }.with_lambdas(1.0, 0.0, 0.0);
        let tr = fake_trace(vec![1.0, 2.0], vec![0.25, 0.75]);
        let l = total_loss(std::slice::from_ref(&tr), &[Target::Class(0)], &[0, 1], &cfg).unwrap();
        assert_eq!(l.total, l.ce);
        assert!(l.coh >= 0.0 && l.sep <= 0.0);

        let cfg = cfg.with_lambdas(0.2, 0.4, 0.4);
        // ce = 1, coh = 2, sep = -0.5 → 0.2 + 0.8 − 0.2
        let tr = fake_trace(vec![2.0, 0.5], vec![(-1.0f64).exp(), 1.0 - (-1.0f64).exp()]);
        let l = total_loss(&[tr], &[Target::Class(0)], &[0, 1], &cfg).unwrap();
        assert!((l.ce - 1.0).abs() < 1e-15);
        assert_eq!((l.coh, l.sep), (2.0, -0.5));
        assert!((l.total - 0.8).abs() < 1e-12);

        let bad = cfg.with_lambdas(0.3, 0.3, 0.3);
        let tr = fake_trace(vec![2.0, 0.5], vec![0.5, 0.5]);
        assert!(matches!(total_loss(&[tr], &[Target::Class(0)], &[0, 1], &bad), Err(Error::Config(_))));
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: usize) -> Vec<TokenEmbeddingSample> {
        (0..b)
            .map(|i| {
                let t = rng.random_range(1..6);
                TokenEmbeddingSample {
                    sample_id: i,
                    tokens: Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.5)).collect()).unwrap(),
                    target: Target::Class(rng.random_range(0..classes)),
                    token_texts: None,
                }
            })
            .collect()
    }

    #[test]
    fn total_loss_is_mean_of_per_sample_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TrainConfig { num_prototypes: 6, k: 2, ..Default::default() };
        let p = init_params(&cfg, 5, 2, 0).unwrap();
        let batch = random_batch(&mut rng, 9, 5, 2);
        let traces: Vec<_> = batch.iter().map(|s| forward(s, &p).unwrap()).collect();
        let targets: Vec<_> = batch.iter().map(|s| s.target).collect();
        let l = total_loss(&traces, &targets, &p.proto_class, &cfg).unwrap();
        let mut acc = 0.0;
        for (tr, s) in traces.iter().zip(&batch) {
            let one = total_loss(std::slice::from_ref(tr), &[s.target], &p.proto_class, &cfg).unwrap();
            acc += one.total;
        }
        assert!((l.total - acc / 9.0).abs() < 1e-12);
        assert!((l.total - (0.3 * l.ce + 0.35 * l.coh + 0.35 * l.sep)).abs() < 1e-12);

        // reordering the batch does not change the loss
        let mut order: Vec<usize> = (0..9).collect();
        order.reverse();
        let tr2: Vec<_> = order.iter().map(|&i| traces[i].clone()).collect();
        let tg2: Vec<_> = order.iter().map(|&i| targets[i]).collect();
        let l2 = total_loss(&tr2, &tg2, &p.proto_class, &cfg).unwrap();
        assert!((l.total - l2.total).abs() < 1e-12);
    }

    #[test]
    fn duplicated_prototypes_get_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = TrainConfig { num_prototypes: 6, k: 2, ..Default::default() };
        let mut p = init_params(&cfg, 4, 2, 1).unwrap();
        let copy = p.prototype(0).to_vec();
        p.prototypes.row_mut(1).copy_from_slice(&copy);
        let batch = random_batch(&mut rng, 6, 4, 2);
        let refs: Vec<&TokenEmbeddingSample> = batch.iter().collect();
        let traces: Vec<_> = batch.iter().map(|s| forward(s, &p).unwrap()).collect();
        // K = 3 selects every same-class prototype, so both copies are always chosen together
        let cfg = TrainConfig { k: 3, ..cfg };
        let targets: Vec<_> = batch.iter().map(|s| s.target).collect();
        let l = total_loss(&traces, &targets, &p.proto_class, &cfg).unwrap();
        let g = backward(&refs, &traces, &l, &p, &cfg).unwrap();
        assert_eq!(g.prototypes.row(0), g.prototypes.row(1));
        assert_eq!(g.w_h.row(0), g.w_h.row(1));
    }

    #[test]
    fn unselected_prototype_has_zero_gradient_without_ce() {
        let cfg = TrainConfig { num_prototypes: 4, k: 1, ..Default::default() }.with_lambdas(0.0, 1.0, 0.0);
        let mut p = init_params(&cfg, 2, 2, 0).unwrap();
        p.prototypes = Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let s = TokenEmbeddingSample {
            sample_id: 0,
            tokens: Matrix::from_rows(&[vec![0.1, 0.0]]).unwrap(),
            target: Target::Class(0),
            token_texts: None,
        };
        let tr = forward(&s, &p).unwrap();
        let l = total_loss(std::slice::from_ref(&tr), &[s.target], &p.proto_class, &cfg).unwrap();
        assert_eq!(l.selected_coh, vec![vec![1]]);
        let g = backward(&[&s], &[tr], &l, &p, &cfg).unwrap();
        assert!(g.prototypes.row(0).iter().all(|x| *x == 0.0));
        assert!(g.prototypes.row(1).iter().any(|x| *x != 0.0));
        assert!(g.w_h.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn stale_trace_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig { num_prototypes: 4, k: 1, ..Default::default() };
        let p = init_params(&cfg, 3, 2, 0).unwrap();
        let batch = random_batch(&mut rng, 1, 3, 2);
        let tr = forward(&batch[0], &p).unwrap();
        let l = total_loss(std::slice::from_ref(&tr), &[batch[0].target], &p.proto_class, &cfg).unwrap();
        let bigger = init_params(&TrainConfig { num_prototypes: 6, ..cfg.clone() }, 3, 2, 0).unwrap();
        assert!(matches!(
            backward(&[&batch[0]], &[tr], &l, &bigger, &cfg),
            Err(Error::Consistency(_))
        ));
    }
}

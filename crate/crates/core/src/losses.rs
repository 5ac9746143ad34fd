//! Training objectives built as autodiff graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Tensor, Var};

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyMask);
    }
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![rows],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ClassRange {
            label: bad,
            num_classes: classes,
        });
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("logits must be a matrix, got {shape:?}")));
    }
    check_labels(labels, shape[1], shape[0])?;
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.pick_per_row(lp, labels)?;
    Ok(g.scale(g.mean(picked), -1.0))
}

/// Cross-entropy over the masked positions divided by the class count, or
/// plain mean cross-entropy when `per_class` is false.
fn masked_ce(g: &Graph, logits: Var, labels: &[usize], classes: usize, per_class: bool) -> Result<Var> {
    let width = g.shape(logits).get(1).copied().unwrap_or(0);
    if width != classes {
        return Err(Error::ShapeMismatch {
            op: "masked_cross_entropy",
            lhs: g.shape(logits),
            rhs: vec![labels.len(), classes],
        });
    }
    let ce = cross_entropy(g, logits, labels)?;
    Ok(if per_class {
        g.scale(ce, 1.0 / classes as f64)
    } else {
        ce
    })
}

/// Masked-language loss over `[|M_t|, |V|]` logits.
pub fn mlm_loss(g: &Graph, logits: Var, true_ids: &[usize], vocab_size: usize, per_class: bool) -> Result<Var> {
    masked_ce(g, logits, true_ids, vocab_size, per_class)
}

/// Semantic masked-image loss over `[|M_v|, |C|]` logits.
pub fn semmim_loss(
    g: &Graph,
    logits: Var,
    true_classes: &[usize],
    num_classes: usize,
    per_class: bool,
) -> Result<Var> {
    masked_ce(g, logits, true_classes, num_classes, per_class)
}

/// Mean squared error against a constant target.
pub fn mse(g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let shape = g.shape(pred);
    if shape != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: shape,
            rhs: target.shape().to_vec(),
        });
    }
    let diff = g.sub(pred, g.constant(target.clone()))?;
    Ok(g.mean(g.mul(diff, diff)?))
}

/// Pixel reconstruction loss: `pred` and `target` are `[|M_v|, 3P²]`.
pub fn pixel_mim_loss(g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
    mse(g, pred, target)
}

/// Patch-mean reconstruction loss: `pred` and `target` are `[|M_v|, 1]`.
pub fn patch_mim_loss(g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if target.shape().get(1) != Some(&1) {
        return Err(Error::InvalidArgument("patch targets must be one column".into()));
    }
    mse(g, pred, target)
}

/// Mean over rows of `KL(softmax(target) ‖ softmax(pred))`; the target
/// receives no gradient.
pub fn feature_mim_loss(g: &Graph, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts {
        return Err(Error::ShapeMismatch {
            op: "feature_mim",
            lhs: ps,
            rhs: ts,
        });
    }
    let target = g.detach(target);
    let log_t = g.log_softmax_rows(target)?;
    let t = g.softmax_rows(target)?;
    let log_p = g.log_softmax_rows(pred)?;
    let kl_rows = g.row_sums(g.mul(t, g.sub(log_t, log_p)?)?)?;
    Ok(g.mean(kl_rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdmConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for SdmConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            epsilon: 1e-8,
        }
    }
}

/// Row-normalised identity-match matrix: `q[i][j] = [a_i = b_j] / Σ_k [a_i = b_k]`.
pub fn match_distribution(row_ids: &[usize], col_ids: &[usize]) -> Result<Tensor> {
    let (n, m) = (row_ids.len(), col_ids.len());
    let mut data = vec![0.0; n * m];
    for (i, a) in row_ids.iter().enumerate() {
        let hits = col_ids.iter().filter(|b| *b == a).count();
        if hits == 0 {
            return Err(Error::NoMatches(i));
        }
        for (j, b) in col_ids.iter().enumerate() {
            if a == b {
                data[i * m + j] = 1.0 / hits as f64;
            }
        }
    }
    Tensor::matrix(n, m, data)
}

/// One direction of the distribution-matching loss:
/// mean over rows of `Σ_j p log(p / (q + ε))` with `p = softmax(sim / τ)`.
fn sdm_direction(g: &Graph, sim: Var, q: &Tensor, cfg: &SdmConfig) -> Result<Var> {
    let scaled = g.scale(sim, 1.0 / cfg.temperature);
    let log_p = g.log_softmax_rows(scaled)?;
    let p = g.softmax_rows(scaled)?;
    let log_q: Vec<f64> = q.data().iter().map(|v| (v + cfg.epsilon).ln()).collect();
    let log_q = g.constant(Tensor::new(q.shape().to_vec(), log_q)?);
    let terms = g.mul(p, g.sub(log_p, log_q)?)?;
    Ok(g.mean(g.row_sums(terms)?))
}

/// Similarity distribution matching over unit-norm `[N, d]` globals.
pub fn sdm_loss(g: &Graph, v: Var, t: Var, identity_ids: &[usize], cfg: &SdmConfig) -> Result<Var> {
    if !(cfg.temperature > 0.0 && cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument("temperature and epsilon must be positive".into()));
    }
    let n = identity_ids.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (vs, ts) = (g.shape(v), g.shape(t));
    if vs != ts || vs[0] != n {
        return Err(Error::ShapeMismatch {
            op: "sdm",
            lhs: vs,
            rhs: ts,
        });
    }
    let q = match_distribution(identity_ids, identity_ids)?;
    let sim = g.matmul_nt(v, t)?;
    let i2t = sdm_direction(g, sim, &q, cfg)?;
    let t2i = sdm_direction(g, g.transpose(sim)?, &q, cfg)?;
    g.add(i2t, t2i)
}

/// Identity classification of both modalities through one shared `[K, d]`
/// matrix, summed per sample and averaged over the batch.
pub fn id_loss(g: &Graph, v: Var, t: Var, identity_ids: &[usize], w_id: Var) -> Result<Var> {
    let lv = cross_entropy(g, g.matmul_nt(v, w_id)?, identity_ids)?;
    let lt = cross_entropy(g, g.matmul_nt(t, w_id)?, identity_ids)?;
    g.add(lv, lt)
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub id: f64,
    pub sdm: f64,
    pub mlm: f64,
    pub mim: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBundle {
    /// Component-wise mean of several bundles.
    pub fn average(items: &[LossBundle]) -> LossBundle {
        let n = items.len().max(1) as f64;
        let mut out = LossBundle::default();
        for b in items {
            out.id += b.id / n;
            out.sdm += b.sdm / n;
            out.mlm += b.mlm / n;
            out.mim += b.mim / n;
            out.total += b.total / n;
        }
        if let Some(first) = items.first() {
            out.alpha = first.alpha;
            out.beta = first.beta;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        [self.id, self.sdm, self.mlm, self.mim, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `id + sdm + α·mlm + β·mim`; absent terms count as zero.
pub fn total_loss(
    g: &Graph,
    id: Var,
    sdm: Var,
    mlm: Option<Var>,
    mim: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossBundle)> {
    let mut total = g.add(id, sdm)?;
    if let Some(m) = mlm {
        total = g.add(total, g.scale(m, alpha))?;
    }
    if let Some(m) = mim {
        total = g.add(total, g.scale(m, beta))?;
    }
    let item = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let bundle = LossBundle {
        id: item(Some(id)),
        sdm: item(Some(sdm)),
        mlm: item(mlm),
        mim: item(mim),
        total: item(Some(total)),
        alpha,
        beta,
    };
    Ok((total, bundle))
}

//! Representation-quality and density-quality metrics: posterior-mean
//! encoding, kNN agreement, OOD scoring with AUROC, few-label logistic
//! probes, and posterior-collapse KL/MI estimators.

use crate::autodiff::TensorValue;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{
    exp_family_log_density, gaussian_sample, DensityRoute, ExpFamily, GaussianNaturalParams,
};
use crate::model::{BatchEnergy, Model};
use crate::rng::{step_stream, Purpose, Stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Encoded dataset: one code row per example, with labels carried along.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    codes: Vec<f64>,
    width: usize,
    labels: Vec<usize>,
    num_classes: usize,
    source: String,
}

impl EncodedSet {
    pub fn new(
        codes: Vec<f64>,
        width: usize,
        labels: Vec<usize>,
        num_classes: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || codes.len() != width * labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "encoded set",
                format!("{} rows of width {width}", labels.len()),
                format!("{} values", codes.len()),
            ));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("codes"));
        }
        if num_classes == 0 || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::invalid("labels", "must lie in [0, num_classes)"));
        }
        Ok(Self {
            codes,
            width,
            labels,
            num_classes,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty sets
    }

    pub fn dim(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn code(&self, i: usize) -> &[f64] {
        &self.codes[i * self.width..(i + 1) * self.width]
    }
}

/// Encode every example: posterior means for conjugate models
/// (responsibility-weighted for the mixture), trunk features for the
/// baseline. No noise is injected at evaluation time.
pub fn encode_dataset(model: &Model, data: &Dataset) -> Result<EncodedSet> {
    let n = data.len();
    let chunk = 256;
    let mut codes = Vec::new();
    let mut width = 0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = data.gather(&indices)?;
        for row in model.codes(&batch)? {
            width = row.len();
            codes.extend(row);
        }
        start = end;
    }
    EncodedSet::new(
        codes,
        width,
        data.labels().to_vec(),
        data.num_classes(),
        format!("{}:{}", data.name(), data.split()),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnReport {
    /// Row c: distribution of neighbor labels over queries labeled c.
    pub confusion: Vec<Vec<f64>>,
    pub same_class_fraction: f64,
}

/// k-nearest-neighbor label agreement under L2 distance. The query point is
/// excluded from its own neighbor set; exact distance ties break toward the
/// lower index so reports are deterministic.
pub fn knn_report(set: &EncodedSet, k: usize) -> Result<KnnReport> {
    let n = set.len();
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if n < k + 1 {
        return Err(Error::invalid(
            "k",
            format!("need at least k+1 = {} points, have {n}", k + 1),
        ));
    }
    let l = set.num_classes();
    let mut counts = vec![vec![0usize; l]; l];
    let mut queries_per_class = vec![0usize; l];
    let mut same_total = 0.0;
    for q in 0..n {
        let qc = set.code(q);
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| {
                let d: f64 = set
                    .code(j)
                    .iter()
                    .zip(qc)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                (d, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let label = set.labels[q];
        queries_per_class[label] += 1;
        let mut same = 0usize;
        for &(_, j) in dists.iter().take(k) {
            let nl = set.labels[j];
            counts[label][nl] += 1;
            if nl == label {
                same += 1;
            }
        }
        same_total += same as f64 / k as f64;
    }
    let confusion = counts
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let denom = (queries_per_class[c] * k) as f64;
            row.iter()
                .map(|&v| if denom > 0.0 { v as f64 / denom } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(KnnReport {
        confusion,
        same_class_fraction: same_total / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    LogDensity,
    GradNorm,
}

/// Out-of-distribution scores, oriented so higher means more in-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScores {
    pub kind: ScoreKind,
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

/// Scores for one batch: unnormalized log density -E(x) (the partition
/// function is constant across inputs, so rankings are unaffected), or the
/// negated input-gradient norm -|dE/dx| per example.
pub fn scores_for(
    energy: &dyn BatchEnergy,
    data: &TensorValue,
    kind: ScoreKind,
) -> Result<Vec<f64>> {
    let (energies, grad) = energy.energy_and_grad(data)?;
    let n = energies.len();
    let scores: Vec<f64> = match kind {
        ScoreKind::LogDensity => energies.iter().map(|&e| -e).collect(),
        ScoreKind::GradNorm => {
            let stride = grad.numel() / n;
            (0..n)
                .map(|i| {
                    let row = &grad.data()[i * stride..(i + 1) * stride];
                    -row.iter().map(|&v| v * v).sum::<f64>().sqrt()
                })
                .collect()
        }
    };
    if let Some(bad) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("score for example {bad}")));
    }
    Ok(scores)
}

pub fn ood_scores(
    model: &Model,
    in_data: &Dataset,
    out_data: &Dataset,
    kind: ScoreKind,
) -> Result<OodScores> {
    if in_data.image_shape() != out_data.image_shape() {
        return Err(Error::shape(
            "ood_scores",
            format!("{:?} images", in_data.image_shape()),
            format!("{:?}", out_data.image_shape()),
        ));
    }
    let chunked = |data: &Dataset| -> Result<Vec<f64>> {
        let n = data.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + 256).min(n);
            let indices: Vec<usize> = (start..end).collect();
            out.extend(scores_for(model, &data.gather(&indices)?, kind)?);
            start = end;
        }
        Ok(out)
    };
    Ok(OodScores {
        kind,
        in_scores: chunked(in_data)?,
        out_scores: chunked(out_data)?,
    })
}

/// Exact Mann-Whitney AUROC by pair counting: P(pos > neg) + P(pos = neg)/2.
pub fn auroc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::invalid("scores", "both sides must be non-empty"));
    }
    let mut wins = 0.0;
    for &p in pos_scores {
        for &q in neg_scores {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos_scores.len() as f64 * neg_scores.len() as f64))
}

/// Training-set size per class for the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerClass {
    Count(usize),
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

/// Multinomial logistic probe on frozen codes: zero-initialized weights,
/// full-batch gradient descent, fixed 500 epochs at lr 0.1, no
/// regularization. Codes are standardized per dimension with statistics of
/// the full training set (label-free, so few-label runs may use them), then
/// scaled by a fixed constant chosen so the zero-initialized optimizer
/// reaches its margin within the fixed epoch budget. Both constants are part
/// of the probe's reproducibility contract. Each repeat redraws the
/// per-class subset; with `Full` there is no subset randomness, so repeats
/// are identical by construction.
pub fn few_label_probe(
    train: &EncodedSet,
    test: &EncodedSet,
    per_class: PerClass,
    repeats: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats", "must be at least 1"));
    }
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(Error::shape(
            "few_label_probe",
            format!("{}-dim {} classes", train.dim(), train.num_classes()),
            format!("{}-dim {} classes", test.dim(), test.num_classes()),
        ));
    }
    let (train, test) = standardize_pair(train, test);
    let (train, test) = (&train, &test);
    let l = train.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); l];
    for (i, &lab) in train.labels().iter().enumerate() {
        by_class[lab].push(i);
    }
    if let PerClass::Count(c) = per_class {
        if c == 0 {
            return Err(Error::invalid("per_class", "must be at least 1"));
        }
        if let Some(small) = by_class.iter().position(|v| v.len() < c) {
            return Err(Error::invalid(
                "per_class",
                format!("class {small} has only {} examples, need {c}", by_class[small].len()),
            ));
        }
    }

    let mut accuracies = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let indices: Vec<usize> = match per_class {
            PerClass::Full => (0..train.len()).collect(),
            PerClass::Count(c) => {
                // Per-class sampling without replacement cannot drop a class.
                let mut rng = step_stream(seed, Purpose::Eval, r as u64);
                let mut picked = Vec::with_capacity(l * c);
                for members in &by_class {
                    let mut pool = members.clone();
                    for _ in 0..c {
                        let j = rng.gen_range(0..pool.len());
                        picked.push(pool.swap_remove(j));
                    }
                }
                picked
            }
        };
        let weights = train_logistic(train, &indices, 500, 0.1);
        accuracies.push(accuracy(&weights, test));
    }
    let mean = accuracies.iter().sum::<f64>() / repeats as f64;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / repeats as f64;
    Ok(ProbeReport {
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        accuracies,
    })
}

/// Per-dimension spread after standardization; a plain z-score leaves the
/// 500-epoch probe short of its margin on close clusters.
const PROBE_FEATURE_SCALE: f64 = 3.0;

/// Standardizes both sets per dimension with the training set's mean and
/// standard deviation, then applies the fixed probe scale. Near-constant
/// dimensions are centered only.
fn standardize_pair(train: &EncodedSet, test: &EncodedSet) -> (EncodedSet, EncodedSet) {
    let d = train.dim();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..train.len() {
        for (m, &v) in mean.iter_mut().zip(train.code(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut scale = vec![0.0; d];
    for i in 0..train.len() {
        for (f, &v) in train.code(i).iter().enumerate() {
            scale[f] += (v - mean[f]) * (v - mean[f]);
        }
    }
    for s in scale.iter_mut() {
        let sd = (*s / n).sqrt();
        *s = if sd > 1e-12 { PROBE_FEATURE_SCALE / sd } else { PROBE_FEATURE_SCALE };
    }
    let apply = |set: &EncodedSet| {
        let mut codes = Vec::with_capacity(set.len() * d);
        for i in 0..set.len() {
            for (f, &v) in set.code(i).iter().enumerate() {
                codes.push((v - mean[f]) * scale[f]);
            }
        }
        EncodedSet::new(codes, d, set.labels().to_vec(), set.num_classes(), set.source())
            .expect("standardized codes stay finite")
    };
    (apply(train), apply(test))
}

/// Returns [dim+1, classes] weights, bias row last, trained by full-batch
/// gradient descent on the softmax cross-entropy.
fn train_logistic(set: &EncodedSet, indices: &[usize], epochs: usize, lr: f64) -> Vec<f64> {
    let d = set.dim();
    let l = set.num_classes();
    let n = indices.len();
    let mut w = vec![0.0; (d + 1) * l];
    let mut grad = vec![0.0; (d + 1) * l];
    let mut logits = vec![0.0; l];
    for _ in 0..epochs {
        grad.fill(0.0);
        for &i in indices {
            let x = set.code(i);
            for (j, lg) in logits.iter_mut().enumerate() {
                let mut acc = w[d * l + j]; // bias row
                for (f, &xf) in x.iter().enumerate() {
                    acc += w[f * l + j] * xf;
                }
                *lg = acc;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for lg in logits.iter_mut() {
                *lg = (*lg - m).exp();
                z += *lg;
            }
            let label = set.labels()[i];
            for j in 0..l {
                let p = logits[j] / z;
                let err = p - if j == label { 1.0 } else { 0.0 };
                for (f, &xf) in x.iter().enumerate() {
                    grad[f * l + j] += err * xf;
                }
                grad[d * l + j] += err;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi / n as f64;
        }
    }
    w
}

fn accuracy(w: &[f64], set: &EncodedSet) -> f64 {
    let d = set.dim();
    let l = set.num_classes();
    let mut correct = 0usize;
    for i in 0..set.len() {
        let x = set.code(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..l {
            let mut acc = w[d * l + j];
            for (f, &xf) in x.iter().enumerate() {
                acc += w[f * l + j] * xf;
            }
            if acc > best.0 {
                best = (acc, j);
            }
        }
        if best.1 == set.labels()[i] {
            correct += 1;
        }
    }
    correct as f64 / set.len() as f64
}

/// Per-example posterior as a finite Gaussian mixture. Plain conjugate
/// posteriors are the single-component case.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosterior {
    weights: Vec<f64>,
    components: Vec<GaussianNaturalParams>,
}

impl MixturePosterior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianNaturalParams>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::shape(
                "mixture posterior",
                format!("{} weights", components.len()),
                format!("{}", weights.len()),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights", "must be a distribution"));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::shape(
                "mixture posterior",
                format!("components of dim {dim}"),
                "mixed dims".to_string(),
            ));
        }
        Ok(Self { weights, components })
    }

    pub fn single(component: GaussianNaturalParams) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for (w, comp) in self.weights.iter().zip(&self.components) {
            if *w == 0.0 {
                continue;
            }
            let ld = exp_family_log_density(
                &ExpFamily::Gaussian(comp.clone()),
                z,
                DensityRoute::Canonical,
            )?;
            terms.push(w.ln() + ld);
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln())
    }

    pub fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        gaussian_sample(&self.components[pick], rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    /// mean_n [ log q_hat(z_n) - log p_bias(z_n) ]
    pub kl_aggregate_to_bias: f64,
    /// mean_n [ log p(z_n|x_n) - log q_hat(z_n) ]
    pub mutual_information: f64,
    pub kl_terms: Vec<f64>,
    pub mi_terms: Vec<f64>,
}

/// Collapse estimators from explicit posteriors: one z per example, with the
/// aggregated posterior q_hat approximated by the mixture over `mc_batch`
/// examples (the leading ones; resampling wrappers choose other subsets).
pub fn collapse_from_posteriors(
    posteriors: &[MixturePosterior],
    bias: &MixturePosterior,
    mc_batch: usize,
    rng: &mut Stream,
) -> Result<CollapseReport> {
    collapse_with_batch(posteriors, bias, &batch_indices(posteriors.len(), mc_batch), rng)
}

fn batch_indices(n: usize, mc_batch: usize) -> Vec<usize> {
    (0..n.min(mc_batch.max(1))).collect()
}

fn collapse_with_batch(
    posteriors: &[MixturePosterior],
    bias: &MixturePosterior,
    batch: &[usize],
    rng: &mut Stream,
) -> Result<CollapseReport> {
    if posteriors.is_empty() {
        return Err(Error::invalid("posteriors", "must be non-empty"));
    }
    if batch.is_empty() || batch.iter().any(|&i| i >= posteriors.len()) {
        return Err(Error::invalid("mc_batch", "batch indices out of range"));
    }
    let dim = posteriors[0].dim();
    if bias.dim() != dim || posteriors.iter().any(|p| p.dim() != dim) {
        return Err(Error::shape(
            "collapse_metrics",
            format!("posteriors of dim {dim}"),
            "mixed dims".to_string(),
        ));
    }
    let m = batch.len() as f64;
    let log_m = m.ln();
    let mut kl_terms = Vec::with_capacity(posteriors.len());
    let mut mi_terms = Vec::with_capacity(posteriors.len());
    for (n, post) in posteriors.iter().enumerate() {
        let z = post.sample(rng);
        let log_cond = post.log_density(&z)?;
        // log q_hat(z) = logsumexp_m log p(z|x_m) - log M.
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            terms.push(posteriors[i].log_density(&z)?);
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_qhat = mx + terms.iter().map(|&t| (t - mx).exp()).sum::<f64>().ln() - log_m;
        let log_bias = bias.log_density(&z)?;
        let kl = log_qhat - log_bias;
        let mi = log_cond - log_qhat;
        if !kl.is_finite() {
            return Err(Error::non_finite(format!("kl term for example {n}")));
        }
        if !mi.is_finite() {
            return Err(Error::non_finite(format!("mi term for example {n}")));
        }
        kl_terms.push(kl);
        mi_terms.push(mi);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CollapseReport {
        kl_aggregate_to_bias: mean(&kl_terms),
        mutual_information: mean(&mi_terms),
        kl_terms,
        mi_terms,
    })
}

/// Extract per-example posteriors and the bias mixture from a conjugate
/// model. The baseline has no latent posterior.
pub fn model_posteriors(
    model: &Model,
    data: &Dataset,
) -> Result<(Vec<MixturePosterior>, MixturePosterior)> {
    match model {
        Model::Cebm(m) => {
            let n = data.len();
            let mut posts = Vec::with_capacity(n);
            let mut start = 0;
            while start < n {
                let end = (start + 256).min(n);
                let indices: Vec<usize> = (start..end).collect();
                for p in m.posteriors(&data.gather(&indices)?)? {
                    posts.push(MixturePosterior::single(p));
                }
                start = end;
            }
            let bias = MixturePosterior::single(m.bias().clone());
            Ok((posts, bias))
        }
        Model::Gmm(m) => {
            let n = data.len();
            let mut posts = Vec::with_capacity(n);
            for i in 0..n {
                let x = data.gather(&[i])?;
                let (probs, comps) = m.component_posterior(&x)?;
                posts.push(MixturePosterior::new(probs, comps)?);
            }
            let comps = m.component_params()?;
            let l = comps.len();
            let bias = MixturePosterior::new(vec![1.0 / l as f64; l], comps)?;
            Ok((posts, bias))
        }
        Model::Baseline(_) => Err(Error::invalid(
            "model",
            "collapse metrics need a conjugate model with a latent posterior",
        )),
    }
}

/// Posterior-collapse estimators for a model on a dataset.
pub fn collapse_metrics(
    model: &Model,
    data: &Dataset,
    mc_batch: usize,
    seed: u64,
) -> Result<CollapseReport> {
    let (posts, bias) = model_posteriors(model, data)?;
    let mut rng = step_stream(seed, Purpose::Eval, 0);
    collapse_from_posteriors(&posts, &bias, mc_batch, &mut rng)
}

/// Spread of the estimators over `batches` Monte Carlo batches, each with a
/// freshly resampled q_hat subset and fresh z draws.
pub fn collapse_metrics_spread(
    model: &Model,
    data: &Dataset,
    mc_batch: usize,
    seed: u64,
    batches: usize,
) -> Result<Vec<CollapseReport>> {
    if batches == 0 {
        return Err(Error::invalid("batches", "must be at least 1"));
    }
    let (posts, bias) = model_posteriors(model, data)?;
    let n = posts.len();
    let m = mc_batch.max(1).min(n);
    (0..batches)
        .map(|b| {
            let mut rng = step_stream(seed, Purpose::Eval, 1 + b as u64);
            let batch: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            collapse_with_batch(&posts, &bias, &batch, &mut rng)
        })
        .collect()
}

//! Client loss models: quadratic, ridge multinomial logistic regression,
//! and a tiny one-hidden-layer MLP, together with the global weighted
//! objective and the local-optimum oracle.
//!
//! Quadratic clients own `n` virtual samples, each a (possibly jittered)
//! copy of the client center, so mini-batching is well defined and the
//! gradient-noise level is controlled exactly. Per-sample loss is
//! `(a/2)·‖w − c_s‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::vector::{ksum, KahanSum, ParamVector};

/// Outcome of the local-optimum oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalOptimum {
    Known { w: ParamVector, value: f64 },
    Unknown,
}

impl LocalOptimum {
    /// F_i\* with the documented fallback of 0 when the optimum is unknown
    /// (cross-entropy losses are nonnegative, so 0 is a valid lower bound).
    pub fn value_or_zero(&self) -> f64 {
        match self {
            LocalOptimum::Known { value, .. } => *value,
            LocalOptimum::Unknown => 0.0,
        }
    }

    pub fn is_known(&self) -> bool {
        matches!(self, LocalOptimum::Known { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    TinyMlp,
}

#[derive(Debug, Clone)]
pub struct Quadratic {
    /// One center per virtual sample; all equal in the noiseless variant.
    pub centers: Vec<ParamVector>,
    pub curvature: f64,
}

impl Quadratic {
    pub fn noiseless(center: ParamVector, curvature: f64, n_samples: usize) -> Self {
        Quadratic {
            centers: vec![center; n_samples.max(1)],
            curvature,
        }
    }

    pub fn dim(&self) -> usize {
        self.centers[0].dim()
    }

    pub fn mean_center(&self) -> ParamVector {
        let dim = self.dim();
        let n = self.centers.len() as f64;
        let mut out = Vec::with_capacity(dim);
        for c in 0..dim {
            out.push(ksum(self.centers.iter().map(|s| s.0[c])) / n);
        }
        ParamVector(out)
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        let n = self.centers.len() as f64;
        let a = self.curvature;
        0.5 * a * ksum(self.centers.iter().map(|c| w.dist_sq(c))) / n
    }

    /// Analytic minimum: w\* is the mean center, F\* the residual center
    /// variance term.
    fn optimum(&self) -> (ParamVector, f64) {
        let mean = self.mean_center();
        let value = self.loss(&mean);
        (mean, value)
    }
}

#[derive(Debug, Clone)]
pub struct Logistic {
    /// Raw feature rows (dimension d); a bias input of 1 is implicit.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub ridge: f64,
}

impl Logistic {
    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn param_dim(&self) -> usize {
        self.classes * (self.feature_dim() + 1)
    }

    fn logits(&self, w: &ParamVector, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..self.classes)
            .map(|k| {
                let base = k * (d + 1);
                let row = &w.0[base..base + d + 1];
                let mut acc = KahanSum::new();
                for (wi, xi) in row[..d].iter().zip(x) {
                    acc.add(wi * xi);
                }
                acc.add(row[d]);
                acc.value()
            })
            .collect()
    }

    fn sample_ce(&self, w: &ParamVector, s: usize) -> f64 {
        let z = self.logits(w, &self.features[s]);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[self.labels[s]]
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        let n = self.features.len() as f64;
        let ce = ksum((0..self.features.len()).map(|s| self.sample_ce(w, s))) / n;
        ce + 0.5 * self.ridge * w.norm_sq()
    }

    /// Per-sample gradient including the ridge term, so mini-batch
    /// averages stay unbiased for the full gradient.
    fn sample_grad_into(&self, w: &ParamVector, s: usize, out: &mut [f64]) {
        let x = &self.features[s];
        let d = x.len();
        let z = self.logits(w, x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for k in 0..self.classes {
            let p = exps[k] / denom;
            let err = p - if self.labels[s] == k { 1.0 } else { 0.0 };
            let base = k * (d + 1);
            for j in 0..d {
                out[base + j] += err * x[j];
            }
            out[base + d] += err;
        }
        for (o, wi) in out.iter_mut().zip(&w.0) {
            *o += self.ridge * wi;
        }
    }

    fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        let z = self.logits(w, x);
        argmax(&z)
    }

    /// λ_max of the augmented Gram matrix X̃ᵀX̃/n by power iteration.
    fn gram_lambda_max(&self, iters: usize) -> f64 {
        let d = self.feature_dim() + 1;
        let n = self.features.len() as f64;
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lambda = 0.0;
        for _ in 0..iters {
            // u = X̃ᵀ(X̃ v) / n
            let mut u = vec![0.0; d];
            for x in &self.features {
                let mut s = KahanSum::new();
                for (xi, vi) in x.iter().zip(&v) {
                    s.add(xi * vi);
                }
                s.add(v[d - 1]);
                let s = s.value();
                for (ui, xi) in u.iter_mut().zip(x) {
                    *ui += s * xi;
                }
                u[d - 1] += s;
            }
            for ui in &mut u {
                *ui /= n;
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            for (vi, ui) in v.iter_mut().zip(&u) {
                *vi = ui / norm;
            }
        }
        lambda
    }
}

#[derive(Debug, Clone)]
pub struct TinyMlp {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub hidden: usize,
}

impl TinyMlp {
    pub fn param_dim(&self) -> usize {
        let d = self.features[0].len();
        self.hidden * d + self.hidden + self.classes * self.hidden + self.classes
    }

    fn split<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let d = self.features[0].len();
        let (w1, rest) = w.split_at(self.hidden * d);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    fn forward(&self, w: &ParamVector, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let (w1, b1, w2, b2) = self.split(&w.0);
        let mut h = vec![0.0; self.hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = b1[j];
            for (xi, wi) in x.iter().zip(&w1[j * d..(j + 1) * d]) {
                s += xi * wi;
            }
            *hj = s.tanh();
        }
        let mut z = vec![0.0; self.classes];
        for (k, zk) in z.iter_mut().enumerate() {
            let mut s = b2[k];
            for (hj, wj) in h.iter().zip(&w2[k * self.hidden..(k + 1) * self.hidden]) {
                s += hj * wj;
            }
            *zk = s;
        }
        (h, z)
    }

    fn sample_ce(&self, w: &ParamVector, s: usize) -> f64 {
        let (_, z) = self.forward(w, &self.features[s]);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[self.labels[s]]
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        let n = self.features.len() as f64;
        ksum((0..self.features.len()).map(|s| self.sample_ce(w, s))) / n
    }

    fn sample_grad_into(&self, w: &ParamVector, s: usize, out: &mut [f64]) {
        let x = &self.features[s];
        let d = x.len();
        let (h, z) = self.forward(w, x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let dz: Vec<f64> = (0..self.classes)
            .map(|k| exps[k] / denom - if self.labels[s] == k { 1.0 } else { 0.0 })
            .collect();

        let (_, _, w2, _) = self.split(&w.0);
        let off_b1 = self.hidden * d;
        let off_w2 = off_b1 + self.hidden;
        let off_b2 = off_w2 + self.classes * self.hidden;

        // output layer
        for k in 0..self.classes {
            for j in 0..self.hidden {
                out[off_w2 + k * self.hidden + j] += dz[k] * h[j];
            }
            out[off_b2 + k] += dz[k];
        }
        // hidden layer through tanh'
        for j in 0..self.hidden {
            let mut dh = 0.0;
            for k in 0..self.classes {
                dh += dz[k] * w2[k * self.hidden + j];
            }
            let da = dh * (1.0 - h[j] * h[j]);
            for i in 0..d {
                out[j * d + i] += da * x[i];
            }
            out[off_b1 + j] += da;
        }
    }

    fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        let (_, z) = self.forward(w, x);
        argmax(&z)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// A client's objective function.
#[derive(Debug, Clone)]
pub enum LossModel {
    Quadratic(Quadratic),
    Logistic(Logistic),
    TinyMlp(TinyMlp),
}

impl LossModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            LossModel::Quadratic(_) => ModelKind::Quadratic,
            LossModel::Logistic(_) => ModelKind::Logistic,
            LossModel::TinyMlp(_) => ModelKind::TinyMlp,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LossModel::Quadratic(q) => q.dim(),
            LossModel::Logistic(l) => l.param_dim(),
            LossModel::TinyMlp(m) => m.param_dim(),
        }
    }

    pub fn num_samples(&self) -> usize {
        match self {
            LossModel::Quadratic(q) => q.centers.len(),
            LossModel::Logistic(l) => l.features.len(),
            LossModel::TinyMlp(m) => m.features.len(),
        }
    }

    fn check_dim(&self, w: &ParamVector) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(FedError::Config(format!(
                "parameter dimension {} does not match model dimension {}",
                w.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Deterministic full-dataset loss F_i(w).
    pub fn loss_eval(&self, w: &ParamVector) -> Result<f64> {
        self.check_dim(w)?;
        Ok(match self {
            LossModel::Quadratic(q) => q.loss(w),
            LossModel::Logistic(l) => l.loss(w),
            LossModel::TinyMlp(m) => m.loss(w),
        })
    }

    /// Mini-batch stochastic gradient: the average of per-sample gradients
    /// over `batch`.
    pub fn grad_minibatch(&self, w: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        self.check_dim(w)?;
        if batch.is_empty() {
            return Err(FedError::Usage("empty mini-batch".into()));
        }
        let mut g = vec![0.0; self.dim()];
        match self {
            LossModel::Quadratic(q) => {
                let a = q.curvature;
                for &s in batch {
                    let c = &q.centers[s];
                    for ((gi, wi), ci) in g.iter_mut().zip(&w.0).zip(&c.0) {
                        *gi += a * (wi - ci);
                    }
                }
            }
            LossModel::Logistic(l) => {
                for &s in batch {
                    l.sample_grad_into(w, s, &mut g);
                }
            }
            LossModel::TinyMlp(m) => {
                for &s in batch {
                    m.sample_grad_into(w, s, &mut g);
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for gi in &mut g {
            *gi *= inv;
        }
        let g = ParamVector(g);
        g.check_finite("grad_minibatch")?;
        Ok(g)
    }

    /// Full-dataset gradient.
    pub fn grad_full(&self, w: &ParamVector) -> Result<ParamVector> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.grad_minibatch(w, &all)
    }

    /// Strong-convexity constant, when analytic.
    pub fn mu(&self) -> Option<f64> {
        match self {
            LossModel::Quadratic(q) => Some(q.curvature),
            LossModel::Logistic(l) => Some(l.ridge),
            LossModel::TinyMlp(_) => None,
        }
    }

    /// Smoothness constant, when analytic or cheaply estimable.
    pub fn l_smooth(&self) -> Option<f64> {
        match self {
            LossModel::Quadratic(q) => Some(q.curvature),
            LossModel::Logistic(l) => Some(l.ridge + l.gram_lambda_max(20)),
            LossModel::TinyMlp(_) => None,
        }
    }

    /// (w_i\*, F_i\*): analytic for quadratic, full-batch gradient descent
    /// to gradient norm ≤ tol for logistic, Unknown for the MLP.
    pub fn local_optimum(&self, tol: f64, max_iters: usize) -> Result<LocalOptimum> {
        match self {
            LossModel::Quadratic(q) => {
                let (w, value) = q.optimum();
                Ok(LocalOptimum::Known { w, value })
            }
            LossModel::Logistic(l) => {
                if l.ridge < 1e-6 {
                    return Err(FedError::Config(
                        "logistic local optimum requires ridge ≥ 1e-6".into(),
                    ));
                }
                let step = 1.0 / self.l_smooth().unwrap();
                let w0 = ParamVector::zeros(self.dim());
                let w = gradient_descent(
                    |w| self.grad_full(w),
                    w0,
                    step,
                    tol,
                    max_iters,
                )?;
                let value = self.loss_eval(&w)?;
                Ok(LocalOptimum::Known { w, value })
            }
            LossModel::TinyMlp(_) => Ok(LocalOptimum::Unknown),
        }
    }

    /// Class prediction, for classification kinds.
    pub fn predict(&self, w: &ParamVector, x: &[f64]) -> Option<usize> {
        match self {
            LossModel::Quadratic(_) => None,
            LossModel::Logistic(l) => Some(l.predict(w, x)),
            LossModel::TinyMlp(m) => Some(m.predict(w, x)),
        }
    }
}

/// Plain gradient descent with a fixed step, stopping at ‖∇F‖ ≤ tol.
pub fn gradient_descent(
    grad: impl Fn(&ParamVector) -> Result<ParamVector>,
    mut w: ParamVector,
    step: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ParamVector> {
    let mut last_norm = f64::INFINITY;
    for _ in 0..max_iters {
        let g = grad(&w)?;
        last_norm = g.norm_sq().sqrt();
        if last_norm <= tol {
            return Ok(w);
        }
        w.add_scaled(-step, &g);
    }
    Err(FedError::OracleFailure {
        grad_norm: last_norm,
        iters: max_iters,
    })
}

/// The weighted global objective F(w) = Σ p_i F_i(w).
#[derive(Debug)]
pub struct GlobalObjective {
    clients: Vec<(LossModel, f64)>,
}

impl GlobalObjective {
    pub fn new(clients: Vec<(LossModel, f64)>) -> Result<Self> {
        if clients.is_empty() {
            return Err(FedError::Config("objective needs at least one client".into()));
        }
        let total = ksum(clients.iter().map(|(_, p)| *p));
        if (total - 1.0).abs() > 1e-12 {
            return Err(FedError::Config(format!(
                "client weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        if clients.iter().any(|(_, p)| *p <= 0.0 || *p > 1.0) {
            return Err(FedError::Config("client weights must lie in (0, 1]".into()));
        }
        let dim = clients[0].0.dim();
        if clients.iter().any(|(m, _)| m.dim() != dim) {
            return Err(FedError::Config("inconsistent model dimensions".into()));
        }
        Ok(GlobalObjective { clients })
    }

    pub fn clients(&self) -> &[(LossModel, f64)] {
        &self.clients
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(|(_, p)| *p).collect()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].0.dim()
    }

    pub fn global_loss(&self, w: &ParamVector) -> Result<f64> {
        let mut acc = KahanSum::new();
        for (m, p) in &self.clients {
            acc.add(p * m.loss_eval(w)?);
        }
        Ok(acc.value())
    }

    pub fn global_grad(&self, w: &ParamVector) -> Result<ParamVector> {
        let mut g = ParamVector::zeros(self.dim());
        for (m, p) in &self.clients {
            g.add_scaled(*p, &m.grad_full(w)?);
        }
        Ok(g)
    }

    /// (w\*, F\*): analytic when every client is quadratic, otherwise by
    /// gradient descent on the weighted objective.
    pub fn global_optimum(&self, tol: f64, max_iters: usize) -> Result<LocalOptimum> {
        let all_quadratic = self
            .clients
            .iter()
            .all(|(m, _)| matches!(m, LossModel::Quadratic(_)));
        if all_quadratic {
            // minimizer of Σ p_i (a_i/2)‖w − c̄_i‖²: curvature-weighted mean
            let dim = self.dim();
            let mut num = ParamVector::zeros(dim);
            let mut denom = KahanSum::new();
            for (m, p) in &self.clients {
                if let LossModel::Quadratic(q) = m {
                    num.add_scaled(p * q.curvature, &q.mean_center());
                    denom.add(p * q.curvature);
                }
            }
            num.scale(1.0 / denom.value());
            let value = self.global_loss(&num)?;
            return Ok(LocalOptimum::Known { w: num, value });
        }
        if self.clients.iter().any(|(m, _)| matches!(m, LossModel::TinyMlp(_))) {
            return Ok(LocalOptimum::Unknown);
        }
        let l_max = self
            .clients
            .iter()
            .filter_map(|(m, _)| m.l_smooth())
            .fold(0.0_f64, f64::max);
        let w = gradient_descent(
            |w| self.global_grad(w),
            ParamVector::zeros(self.dim()),
            1.0 / l_max,
            tol,
            max_iters,
        )?;
        let value = self.global_loss(&w)?;
        Ok(LocalOptimum::Known { w, value })
    }
}

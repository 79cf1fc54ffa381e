//! Exact Gaussian-process regression over context–action pairs.
//!
//! The kernel is a product of two unit-variance ARD Matérn-3/2 factors, one
//! over context features and one over the five action slots, scaled by a
//! single signal variance. Inputs are flat feature vectors: context features
//! first, then the action slots as reals.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collocation::{Action, Context, PHASE_SLOTS};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;
/// Queries solved together against one sweep over the factor.
const QUERY_BLOCK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub context_lengthscales: Vec<f64>,
    pub action_lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    /// Defaults for a context of goal distance plus `n_t` terrain features.
    pub fn with_defaults(n_t: usize) -> Self {
        let mut context_lengthscales = vec![0.15];
        context_lengthscales.extend(std::iter::repeat_n(0.1, n_t));
        Self {
            context_lengthscales,
            action_lengthscales: vec![6.0; PHASE_SLOTS],
            signal_variance: 0.1,
            noise_variance: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_lengthscales.is_empty() {
            return Err(Error::InvalidArgument("at least one context lengthscale is required".into()));
        }
        if self.action_lengthscales.len() != PHASE_SLOTS {
            return Err(Error::DimensionMismatch { expected: PHASE_SLOTS, got: self.action_lengthscales.len() });
        }
        let all = self.context_lengthscales.iter().chain(&self.action_lengthscales);
        if all.clone().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidArgument("lengthscales must be positive and finite".into()));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::InvalidArgument("signal variance must be positive".into()));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::InvalidArgument("noise variance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        self.context_lengthscales.len()
    }

    pub fn input_dim(&self) -> usize {
        self.context_dim() + PHASE_SLOTS
    }
}

fn matern(r2: f64) -> f64 {
    let s = (3.0 * r2).sqrt();
    (1.0 + s) * (-s).exp()
}

/// Unit-variance Matérn-3/2 as a function of the ARD-weighted squared
/// distance `r²`.
pub fn matern32(r2: f64) -> Result<f64> {
    if r2.is_nan() || r2 < 0.0 {
        return Err(Error::InvalidArgument(format!("weighted squared distance must be non-negative, got {r2}")));
    }
    Ok(matern(r2))
}

fn weighted_sq(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum()
}

fn kernel(a: &[f64], b: &[f64], p: &KernelParams) -> f64 {
    let c = p.context_dim();
    let kz = matern(weighted_sq(&a[..c], &b[..c], &p.context_lengthscales));
    let ks = matern(weighted_sq(&a[c..], &b[c..], &p.action_lengthscales));
    p.signal_variance * kz * ks
}

pub fn pair_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    for x in [a, b] {
        if x.len() != params.input_dim() {
            return Err(Error::DimensionMismatch { expected: params.input_dim(), got: x.len() });
        }
    }
    Ok(kernel(a, b, params))
}

/// GP input for `context` and `action` with the context features padded
/// with zeros or truncated to `context_dim`.
pub fn encode(context: &Context, action: &Action, context_dim: usize) -> Vec<f64> {
    let mut x = context.features();
    x.resize(context_dim, 0.0);
    x.extend_from_slice(&action.features());
    x
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GpState {
    params: KernelParams,
    /// Observed inputs, row-major.
    inputs: Vec<f64>,
    merits: Vec<f64>,
    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`, packed by rows.
    factor: Vec<f64>,
    /// `L⁻¹ m`.
    whitened: Vec<f64>,
    /// `(K + σ_n² I)⁻¹ m`.
    weights: Vec<f64>,
    jitter: f64,
}

fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

impl GpState {
    pub fn new(params: KernelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            inputs: Vec::new(),
            merits: Vec::new(),
            factor: Vec::new(),
            whitened: Vec::new(),
            weights: Vec::new(),
            jitter: 0.0,
        })
    }

    pub fn from_data(params: KernelParams, inputs: Vec<Vec<f64>>, merits: Vec<f64>) -> Result<Self> {
        if inputs.len() != merits.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: merits.len() });
        }
        let mut gp = Self::new(params)?;
        for (x, m) in inputs.iter().zip(&merits) {
            gp.check_observation(x, *m)?;
            gp.inputs.extend_from_slice(x);
            gp.merits.push(*m);
        }
        gp.refactor()?;
        Ok(gp)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.merits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merits.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.params.input_dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn merits(&self) -> &[f64] {
        &self.merits
    }

    /// Diagonal jitter currently in the factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn check_observation(&self, x: &[f64], m: f64) -> Result<()> {
        if x.len() != self.params.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.params.input_dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("observation input must be finite".into()));
        }
        if !(m.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("refined merit must lie in (-1, 1), got {m}")));
        }
        Ok(())
    }

    fn diagonal(&self) -> f64 {
        self.params.signal_variance + self.params.noise_variance + self.jitter
    }

    pub fn add_observation(&mut self, x: &[f64], m: f64) -> Result<()> {
        self.check_observation(x, m)?;
        let n = self.len();
        let mut row: Vec<f64> = (0..n).map(|i| kernel(self.input(i), x, &self.params)).collect();
        self.forward_substitute(&mut row);
        let pivot = self.diagonal() - row.iter().map(|v| v * v).sum::<f64>();
        self.inputs.extend_from_slice(x);
        self.merits.push(m);
        if pivot > f64::EPSILON * self.diagonal() {
            let d = pivot.sqrt();
            let w = (m - row.iter().zip(&self.whitened).map(|(a, b)| a * b).sum::<f64>()) / d;
            row.push(d);
            self.factor.extend_from_slice(&row);
            self.whitened.push(w);
            self.update_weights();
            Ok(())
        } else {
            let jitter = self.jitter;
            let result = self.refactor();
            if result.is_err() {
                self.inputs.truncate(n * self.params.input_dim());
                self.merits.truncate(n);
                self.jitter = jitter;
                self.refactor()?;
            }
            result
        }
    }

    /// Rebuilds the factor from scratch, escalating the jitter on failure.
    fn refactor(&mut self) -> Result<()> {
        loop {
            if self.try_factor() {
                self.whitened = self.merits.clone();
                let mut w = std::mem::take(&mut self.whitened);
                self.forward_substitute(&mut w);
                self.whitened = w;
                self.update_weights();
                return Ok(());
            }
            self.jitter = if self.jitter == 0.0 { JITTER_START } else { self.jitter * 10.0 };
            if self.jitter > JITTER_MAX * (1.0 + 1e-9) {
                return Err(Error::Factorization);
            }
        }
    }

    fn try_factor(&mut self) -> bool {
        let n = self.len();
        let diag = self.diagonal();
        let mut l = vec![0.0; row_offset(n)];
        for i in 0..n {
            let oi = row_offset(i);
            for j in 0..=i {
                let oj = row_offset(j);
                let k = if i == j { diag } else { kernel(self.input(i), self.input(j), &self.params) };
                let s = k - dot(&l[oi..oi + j], &l[oj..oj + j]);
                if i == j {
                    if !(s > f64::EPSILON * diag) {
                        return false;
                    }
                    l[oi + i] = s.sqrt();
                } else {
                    l[oi + j] = s / l[oj + j];
                }
            }
        }
        self.factor = l;
        true
    }

    /// In-place `L⁻¹ b`.
    fn forward_substitute(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let o = row_offset(i);
            b[i] = (b[i] - dot(&self.factor[o..o + i], &b[..i])) / self.factor[o + i];
        }
    }

    fn update_weights(&mut self) {
        let n = self.len();
        let mut a = self.whitened.clone();
        for i in (0..n).rev() {
            let o = row_offset(i);
            a[i] /= self.factor[o + i];
            let ai = a[i];
            for (k, lk) in self.factor[o..o + i].iter().enumerate() {
                a[k] -= lk * ai;
            }
        }
        self.weights = a;
    }

    fn check_queries(&self, queries: &[Vec<f64>]) -> Result<()> {
        let d = self.params.input_dim();
        match queries.iter().find(|q| q.len() != d) {
            Some(q) => Err(Error::DimensionMismatch { expected: d, got: q.len() }),
            None => Ok(()),
        }
    }

    /// Posterior mean only.
    pub fn posterior_mean(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_queries(queries)?;
        Ok(queries
            .par_iter()
            .map(|q| (0..self.len()).map(|i| kernel(self.input(i), q, &self.params) * self.weights[i]).sum())
            .collect())
    }

    /// Posterior mean and standard deviation at each query.
    pub fn posterior(&self, queries: &[Vec<f64>]) -> Result<Posterior> {
        self.check_queries(queries)?;
        let parts: Vec<(Vec<f64>, Vec<f64>)> =
            queries.par_chunks(QUERY_BLOCK).map(|block| self.posterior_block(block)).collect();
        let mut out = Posterior::default();
        for (m, s) in parts {
            out.mean.extend(m);
            out.std.extend(s);
        }
        Ok(out)
    }

    fn posterior_block(&self, block: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let b = block.len();
        // v[i * b + c] = (L⁻¹ k_c)_i
        let mut v = vec![0.0; n * b];
        for i in 0..n {
            for (c, q) in block.iter().enumerate() {
                v[i * b + c] = kernel(self.input(i), q, &self.params);
            }
        }
        for i in 0..n {
            let o = row_offset(i);
            let row = &self.factor[o..=o + i];
            let (done, rest) = v.split_at_mut(i * b);
            let cur = &mut rest[..b];
            for (j, l) in row[..i].iter().enumerate() {
                for (x, y) in cur.iter_mut().zip(&done[j * b..(j + 1) * b]) {
                    *x -= l * y;
                }
            }
            for x in cur.iter_mut() {
                *x /= row[i];
            }
        }
        let mut mean = vec![0.0; b];
        let mut explained = vec![0.0; b];
        for i in 0..n {
            for c in 0..b {
                let vi = v[i * b + c];
                mean[c] += vi * self.whitened[i];
                explained[c] += vi * vi;
            }
        }
        let std = explained.iter().map(|e| (self.params.signal_variance - e).max(0.0).sqrt()).collect();
        (mean, std)
    }

    pub fn to_model(&self) -> GpModel {
        GpModel {
            format_version: FORMAT_VERSION,
            kernel: self.params.clone(),
            inputs: (0..self.len()).map(|i| self.input(i).to_vec()).collect(),
            merits: self.merits.clone(),
        }
    }

    pub fn from_model(model: GpModel) -> Result<Self> {
        if model.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                model.format_version
            )));
        }
        Self::from_data(model.kernel, model.inputs, model.merits)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_model())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_model(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Posterior means over a fixed action slate. Observations sharing an
/// action are merged, so each context costs `O(n + D·|slate|)` for `D`
/// distinct observed actions.
#[derive(Clone, Debug)]
pub struct SlatePredictor {
    params: KernelParams,
    /// Per observation: context features, group index, weight.
    observations: Vec<(Vec<f64>, usize, f64)>,
    /// `table[d * slate_len + a]`: action factor between group `d` and slate entry `a`.
    table: Vec<f64>,
    slate_len: usize,
}

impl SlatePredictor {
    pub fn new(gp: &GpState, slate: &[[f64; PHASE_SLOTS]]) -> Self {
        let p = gp.params().clone();
        let c = p.context_dim();
        let mut groups: Vec<Vec<f64>> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let observations = (0..gp.len())
            .map(|i| {
                let x = gp.input(i);
                let key: Vec<u64> = x[c..].iter().map(|v| v.to_bits()).collect();
                let d = *index.entry(key).or_insert_with(|| {
                    groups.push(x[c..].to_vec());
                    groups.len() - 1
                });
                (x[..c].to_vec(), d, gp.weights[i])
            })
            .collect();
        let mut table = Vec::with_capacity(groups.len() * slate.len());
        for g in &groups {
            table.extend(slate.iter().map(|a| matern(weighted_sq(g, a, &p.action_lengthscales))));
        }
        Self { params: p, observations, table, slate_len: slate.len() }
    }

    pub fn predict(&self, context: &[f64]) -> Result<Vec<f64>> {
        if context.len() != self.params.context_dim() {
            return Err(Error::DimensionMismatch { expected: self.params.context_dim(), got: context.len() });
        }
        let n_groups = self.table.len() / self.slate_len.max(1);
        let mut w = vec![0.0; n_groups];
        for (z, d, alpha) in &self.observations {
            w[*d] += self.params.signal_variance
                * matern(weighted_sq(z, context, &self.params.context_lengthscales))
                * alpha;
        }
        let mut mean = vec![0.0; self.slate_len];
        for (d, wd) in w.iter().enumerate() {
            let row = &self.table[d * self.slate_len..(d + 1) * self.slate_len];
            for (m, k) in mean.iter_mut().zip(row) {
                *m += wd * k;
            }
        }
        Ok(mean)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Serialized model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModel {
    pub format_version: u32,
    pub kernel: KernelParams,
    pub inputs: Vec<Vec<f64>>,
    pub merits: Vec<f64>,
}

//! Dense network with ReLU hidden layers and a linear output, trained on
//! mean squared error with Adam.
//!
//! Parameters live in one flat vector, layer by layer: the `out × in`
//! row-major weight matrix followed by the `out` biases. Outputs are in
//! normalized target units inside the network and mapped back to $/MWh by
//! [`TargetNorm`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSpec, Normalization};

const FORMAT_TAG: &str = "vfarb-mlp 1";

/// Scalar z-score applied to every output segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetNorm {
    fn default() -> Self {
        TargetNorm { mean: 0.0, std: 1.0 }
    }
}

impl TargetNorm {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return TargetNorm::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        TargetNorm { mean, std: if std < crate::features::STD_FLOOR { 1.0 } else { std } }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    params: Vec<f64>,
    pub feature_spec: FeatureSpec,
    pub target_norm: TargetNorm,
    pub seed: u64,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpModel {
    /// Two hidden layers of width `hidden`, He-uniform weights, zero biases.
    pub fn new(feature_spec: FeatureSpec, hidden: usize, outputs: usize, seed: u64) -> Result<Self> {
        let dims = vec![feature_spec.len(), hidden, hidden, outputs];
        Self::with_dims(dims, feature_spec, seed)
    }

    pub fn with_dims(dims: Vec<usize>, feature_spec: FeatureSpec, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParams(format!("invalid layer sizes {dims:?}")));
        }
        if dims[0] != feature_spec.len() {
            return Err(Error::InvalidParams(format!(
                "input width {} does not match {} features",
                dims[0],
                feature_spec.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&dims));
        for w in dims.windows(2) {
            let limit = (6.0 / w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(MlpModel { dims, params, feature_spec, target_norm: TargetNorm::default(), seed })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets of layer `l`'s weights and biases in the flat parameter vector.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.dims[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (start, start + self.dims[l] * self.dims[l + 1])
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Activations of every layer for `n` row-major inputs; the last entry is
    /// the linear output.
    fn activations(&self, inputs: &[f64], n: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(inputs.to_vec());
        for l in 0..self.layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            let w = &self.params[w_off..w_off + din * dout];
            let b = &self.params[b_off..b_off + dout];
            let prev = &acts[l];
            let mut out = vec![0.0; n * dout];
            let hidden = l + 1 < self.layers();
            for r in 0..n {
                let x = &prev[r * din..(r + 1) * din];
                for (o, slot) in out[r * dout..(r + 1) * dout].iter_mut().enumerate() {
                    let row = &w[o * din..(o + 1) * din];
                    let z = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                    *slot = if hidden { z.max(0.0) } else { z };
                }
            }
            acts.push(out);
        }
        acts
    }

    fn check_inputs(&self, inputs: &[f64], n: usize) -> Result<()> {
        if inputs.len() != n * self.input_dim() {
            return Err(Error::Domain(format!(
                "expected {} inputs per row, got {} values for {n} rows",
                self.input_dim(),
                inputs.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Outputs in normalized target units.
    pub fn forward_normalized(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_inputs(inputs, n)?;
        Ok(self.activations(inputs, n).pop().expect("output layer"))
    }

    /// Predicted marginal values in $/MWh for one (already normalized) feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict_batch(x, 1)
    }

    /// Predictions in $/MWh for `n` row-major feature vectors.
    pub fn predict_batch(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut y = self.forward_normalized(inputs, n)?;
        for v in &mut y {
            *v = self.target_norm.denormalize(*v);
        }
        Ok(y)
    }

    /// Mean squared error over rows and outputs against normalized `targets`,
    /// and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, inputs: &[f64], targets: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
        if n == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        self.check_inputs(inputs, n)?;
        let dout = self.output_dim();
        if targets.len() != n * dout {
            return Err(Error::Domain(format!("expected {} targets, got {}", n * dout, targets.len())));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite training target".into()));
        }

        let acts = self.activations(inputs, n);
        let y = acts.last().expect("output layer");
        let scale = 1.0 / (n * dout) as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = y
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let e = p - t;
                loss += e * e;
                2.0 * e * scale
            })
            .collect();
        loss *= scale;

        let mut grad = vec![0.0; self.params.len()];
        for l in (0..self.layers()).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            let a_in = &acts[l];
            {
                let (gw, gb) = grad[w_off..b_off + dout].split_at_mut(din * dout);
                for r in 0..n {
                    let x = &a_in[r * din..(r + 1) * din];
                    for (o, &d) in delta[r * dout..(r + 1) * dout].iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for (g, xi) in gw[o * din..(o + 1) * din].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[w_off..w_off + din * dout];
            let mut prev = vec![0.0; n * din];
            for r in 0..n {
                let back = &mut prev[r * din..(r + 1) * din];
                for (o, &d) in delta[r * dout..(r + 1) * dout].iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wi) in back.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                        *p += d * wi;
                    }
                }
                for (p, a) in back.iter_mut().zip(&a_in[r * din..(r + 1) * din]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        Ok((loss, grad))
    }

    pub fn adam_step(&mut self, state: &mut AdamState, grad: &[f64]) {
        adam_step(&mut self.params, state, grad);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        fn row(out: &mut String, label: &str, values: &[f64]) {
            out.push_str(label);
            for v in values {
                write!(out, " {v}").expect("string write");
            }
            out.push('\n');
        }
        let mut s = String::new();
        writeln!(s, "{FORMAT_TAG}").expect("string write");
        row(&mut s, "dims", &self.dims.iter().map(|&d| d as f64).collect::<Vec<_>>());
        writeln!(s, "seed {}", self.seed).expect("string write");
        let f = &self.feature_spec;
        writeln!(s, "features {} {} {}", f.n_rtp_lags, f.n_dap, f.period_minutes).expect("string write");
        match &f.normalization {
            Some(n) => {
                row(&mut s, "feature_mean", &n.mean);
                row(&mut s, "feature_std", &n.std);
            }
            None => s.push_str("feature_mean none\nfeature_std none\n"),
        }
        row(&mut s, "target_norm", &[self.target_norm.mean, self.target_norm.std]);
        for l in 0..self.layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            writeln!(s, "layer {l} weights").expect("string write");
            for o in 0..dout {
                row(&mut s, "w", &self.params[w_off + o * din..w_off + (o + 1) * din]);
            }
            writeln!(s, "layer {l} bias").expect("string write");
            row(&mut s, "b", &self.params[b_off..b_off + dout]);
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |section: &str| -> Result<&str> {
            lines.next().ok_or_else(|| Error::Input(format!("file ends before section {section:?}")))
        };
        fn fields<'a>(line: &'a str, label: &str, section: &str) -> Result<Vec<&'a str>> {
            let mut parts = line.split_ascii_whitespace();
            if parts.next() != Some(label) {
                return Err(Error::Input(format!("section {section:?}: expected {label:?}, found {line:?}")));
            }
            Ok(parts.collect())
        }
        fn numbers(parts: &[&str], section: &str) -> Result<Vec<f64>> {
            parts
                .iter()
                .map(|p| p.parse::<f64>().map_err(|_| Error::Input(format!("section {section:?}: bad number {p:?}"))))
                .collect()
        }
        fn integers(parts: &[&str], section: &str) -> Result<Vec<usize>> {
            parts
                .iter()
                .map(|p| {
                    p.parse::<usize>().map_err(|_| Error::Input(format!("section {section:?}: bad integer {p:?}")))
                })
                .collect()
        }

        if next("header")?.trim() != FORMAT_TAG {
            return Err(Error::Input("section \"header\": not a vfarb model file".into()));
        }
        let dims = integers(&fields(next("dims")?, "dims", "dims")?, "dims")?;
        let seed_fields = fields(next("seed")?, "seed", "seed")?;
        let seed = seed_fields
            .first()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Input("section \"seed\": missing value".into()))?;
        let feat = integers(&fields(next("features")?, "features", "features")?, "features")?;
        let [lags, dap, minutes] = feat[..] else {
            return Err(Error::Input("section \"features\": expected three integers".into()));
        };
        let mut spec = FeatureSpec::new(lags, dap, minutes as u32)
            .map_err(|e| Error::Input(format!("section \"features\": {e}")))?;
        let mean_fields = fields(next("feature_mean")?, "feature_mean", "feature_mean")?;
        let std_fields = fields(next("feature_std")?, "feature_std", "feature_std")?;
        if mean_fields != ["none"] {
            let norm = Normalization {
                mean: numbers(&mean_fields, "feature_mean")?,
                std: numbers(&std_fields, "feature_std")?,
            };
            spec = spec.with_normalization(norm).map_err(|e| Error::Input(format!("section \"feature_mean\": {e}")))?;
        }
        let tn = numbers(&fields(next("target_norm")?, "target_norm", "target_norm")?, "target_norm")?;
        let [mean, std] = tn[..] else {
            return Err(Error::Input("section \"target_norm\": expected two numbers".into()));
        };
        if dims.len() < 2 || dims.contains(&0) || dims[0] != spec.len() {
            return Err(Error::Input(format!("section \"dims\": {dims:?} inconsistent with {} features", spec.len())));
        }

        let mut params = Vec::with_capacity(param_count(&dims));
        for (l, w) in dims.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let section = format!("layer {l} weights");
            if next(&section)?.trim() != section {
                return Err(Error::Input(format!("section {section:?}: header missing")));
            }
            for o in 0..dout {
                let row = numbers(&fields(next(&section)?, "w", &section)?, &section)?;
                if row.len() != din {
                    return Err(Error::Input(format!(
                        "section {section:?}: row {o} has {} values, expected {din}",
                        row.len()
                    )));
                }
                params.extend(row);
            }
            let section = format!("layer {l} bias");
            if next(&section)?.trim() != section {
                return Err(Error::Input(format!("section {section:?}: header missing")));
            }
            let bias = numbers(&fields(next(&section)?, "b", &section)?, &section)?;
            if bias.len() != dout {
                return Err(Error::Input(format!("section {section:?}: {} values, expected {dout}", bias.len())));
            }
            params.extend(bias);
        }
        if next("end")?.trim() != "end" {
            return Err(Error::Input("section \"end\": trailing data".into()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite parameter".into()));
        }
        Ok(MlpModel { dims, params, feature_spec: spec, target_norm: TargetNorm { mean, std }, seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], state: &mut AdamState, grad: &[f64]) {
    assert_eq!(params.len(), grad.len(), "gradient shape");
    assert_eq!(params.len(), state.m.len(), "moment shape");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
}

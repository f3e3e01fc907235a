//! Fully connected squared-ReLU approximator of the HJB solution.
//!
//! The network `N(t, x)` takes the raw time and state as input. Besides the
//! value, the spatial gradient and Laplacian are propagated forward layer by
//! layer (value / Jacobian / Laplacian triples), so all three come out of one
//! pass. `JetEngine::vjp` is the hand-written adjoint of that pass and
//! is what the tape calls for the composite `phi_jet` node.
//!
//! With a hard terminal wrapper the approximator is
//! `phi(t, x) = ((T - t) / T) N(t, x) - (t / T) V(x)`, so `phi(T, .) = -V`
//! holds exactly for every parameter value.

use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::scalar::{lit, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("state has dimension {got}, network expects {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("terminal cost is not differentiable at the evaluation point")]
    TerminalDomain,
    #[error("malformed checkpoint: {0}")]
    Json(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(u, 0)^2`
    #[default]
    SquaredRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetConfig {
    /// Reference architecture: two hidden layers of 30 units.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            width: 30,
            depth: 2,
            activation: Activation::SquaredRelu,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.dim == 0 {
            return Err(NetError::Config("dim must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(NetError::Config("width must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(NetError::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.dim + 1
        } else {
            self.width
        }
    }

    /// Offset of hidden layer `layer`'s weight block in the flat layout.
    fn weight_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.width * self.fan_in(l) + self.width)
            .sum()
    }

    fn output_offset(&self) -> usize {
        self.weight_offset(self.depth)
    }

    pub fn param_count(&self) -> usize {
        self.output_offset() + self.width + 1
    }
}

/// Network weights in one flat buffer.
///
/// Layout, row-major: `W1 (width x (d+1))`, `b1`, `W2 (width x width)`, `b2`,
/// ..., output weights `w (width)`, output bias `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    config: NetConfig,
    data: Vec<T>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        Ok(Self {
            config,
            data: vec![T::zero(); config.param_count()],
        })
    }

    pub fn from_flat(config: NetConfig, data: Vec<T>) -> Result<Self, NetError> {
        config.validate()?;
        if data.len() != config.param_count() {
            return Err(NetError::ParamCount {
                expected: config.param_count(),
                got: data.len(),
            });
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn view(&self) -> NetView<'_, T> {
        NetView {
            config: &self.config,
            data: &self.data,
        }
    }

    /// Hidden layer weights (`width x fan_in`, row-major).
    pub fn weight(&self, layer: usize) -> &[T] {
        let (o, n) = self.weight_span(layer);
        &self.data[o..o + n]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [T] {
        let (o, n) = self.weight_span(layer);
        &mut self.data[o..o + n]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let o = self.bias_offset(layer);
        &self.data[o..o + self.config.width]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let o = self.bias_offset(layer);
        let w = self.config.width;
        &mut self.data[o..o + w]
    }

    pub fn output_weight(&self) -> &[T] {
        let o = self.config.output_offset();
        &self.data[o..o + self.config.width]
    }

    pub fn output_weight_mut(&mut self) -> &mut [T] {
        let o = self.config.output_offset();
        let w = self.config.width;
        &mut self.data[o..o + w]
    }

    pub fn output_bias(&self) -> T {
        self.data[self.config.param_count() - 1]
    }

    pub fn set_output_bias(&mut self, v: T) {
        let last = self.config.param_count() - 1;
        self.data[last] = v;
    }

    fn weight_span(&self, layer: usize) -> (usize, usize) {
        assert!(layer < self.config.depth, "hidden layer index out of range");
        (
            self.config.weight_offset(layer),
            self.config.width * self.config.fan_in(layer),
        )
    }

    fn bias_offset(&self, layer: usize) -> usize {
        let (o, n) = self.weight_span(layer);
        o + n
    }

    pub fn all_finite(&self) -> bool {
        crate::scalar::all_finite(&self.data)
    }

    /// Flat JSON object: `config` plus `w1, b1, ..., w{depth+1}, b{depth+1}`.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert(
            "config".into(),
            serde_json::to_value(self.config).expect("config serializes"),
        );
        let arr = |s: &[T]| Value::Array(s.iter().map(|v| json_number(*v)).collect());
        for l in 0..self.config.depth {
            map.insert(format!("w{}", l + 1), arr(self.weight(l)));
            map.insert(format!("b{}", l + 1), arr(self.bias(l)));
        }
        let k = self.config.depth + 1;
        map.insert(format!("w{k}"), arr(self.output_weight()));
        map.insert(format!("b{k}"), json_number(self.output_bias()));
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self, NetError> {
        let obj = value
            .as_object()
            .ok_or_else(|| NetError::Json("expected an object".into()))?;
        let config: NetConfig = serde_json::from_value(
            obj.get("config")
                .cloned()
                .ok_or_else(|| NetError::Json("missing config".into()))?,
        )
        .map_err(|e| NetError::Json(e.to_string()))?;
        let mut params = Self::zeros(config)?;
        let read = |key: &str, want: usize| -> Result<Vec<T>, NetError> {
            let vals = obj
                .get(key)
                .and_then(Value::as_array)
                .ok_or_else(|| NetError::Json(format!("missing array {key}")))?;
            if vals.len() != want {
                return Err(NetError::Json(format!(
                    "{key} has {} entries, expected {want}",
                    vals.len()
                )));
            }
            vals.iter()
                .map(|v| {
                    v.as_f64()
                        .map(lit::<T>)
                        .ok_or_else(|| NetError::Json(format!("non-numeric entry in {key}")))
                })
                .collect()
        };
        for l in 0..config.depth {
            let w = read(&format!("w{}", l + 1), config.width * config.fan_in(l))?;
            params.weight_mut(l).copy_from_slice(&w);
            let b = read(&format!("b{}", l + 1), config.width)?;
            params.bias_mut(l).copy_from_slice(&b);
        }
        let k = config.depth + 1;
        let w = read(&format!("w{k}"), config.width)?;
        params.output_weight_mut().copy_from_slice(&w);
        let b = obj
            .get(&format!("b{k}"))
            .and_then(Value::as_f64)
            .ok_or_else(|| NetError::Json(format!("missing scalar b{k}")))?;
        params.set_output_bias(lit(b));
        Ok(params)
    }
}

fn json_number<T: Real>(v: T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Borrowed view over a flat parameter buffer; what the tape hands to the
/// jet engine without copying.
#[derive(Clone, Copy)]
pub(crate) struct NetView<'a, T> {
    pub config: &'a NetConfig,
    pub data: &'a [T],
}

impl<'a, T: Real> NetView<'a, T> {
    pub fn new(config: &'a NetConfig, data: &'a [T]) -> Result<Self, NetError> {
        if data.len() != config.param_count() {
            return Err(NetError::ParamCount {
                expected: config.param_count(),
                got: data.len(),
            });
        }
        Ok(Self { config, data })
    }

    fn weight(&self, l: usize) -> &'a [T] {
        let o = self.config.weight_offset(l);
        &self.data[o..o + self.config.width * self.config.fan_in(l)]
    }

    fn bias(&self, l: usize) -> &'a [T] {
        let o = self.config.weight_offset(l) + self.config.width * self.config.fan_in(l);
        &self.data[o..o + self.config.width]
    }

    fn output_weight(&self) -> &'a [T] {
        let o = self.config.output_offset();
        &self.data[o..o + self.config.width]
    }

    fn output_bias(&self) -> T {
        self.data[self.config.param_count() - 1]
    }
}

/// Terminal cost `V` with the derivatives the hard wrapper needs, including
/// the ones its adjoint needs (Hessian-vector product, gradient of the
/// Laplacian).
pub trait TerminalCost<T>: Debug + Send + Sync {
    fn value(&self, x: &[T]) -> T;
    fn grad(&self, x: &[T], out: &mut [T]);
    fn laplacian(&self, x: &[T]) -> T;
    /// `out += Hess V(x) v`
    fn hessian_vec_add(&self, x: &[T], v: &[T], out: &mut [T]);
    /// `out += scale * grad (Lap V)(x)`
    fn grad_laplacian_add(&self, x: &[T], scale: T, out: &mut [T]);
}

/// `V(x) = curvature |x|^2 / 2 + offset`
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost<T> {
    pub curvature: T,
    pub offset: T,
}

impl<T: Real> TerminalCost<T> for QuadraticCost<T> {
    fn value(&self, x: &[T]) -> T {
        let sq: T = x.iter().map(|v| *v * *v).sum();
        self.curvature * sq / lit(2.0) + self.offset
    }

    fn grad(&self, x: &[T], out: &mut [T]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = self.curvature * *v;
        }
    }

    fn laplacian(&self, x: &[T]) -> T {
        self.curvature * lit(x.len() as f64)
    }

    fn hessian_vec_add(&self, _x: &[T], v: &[T], out: &mut [T]) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += self.curvature * *vi;
        }
    }

    fn grad_laplacian_add(&self, _x: &[T], _scale: T, _out: &mut [T]) {}
}

#[derive(Clone, Debug)]
pub enum TerminalWrapper<T> {
    /// `phi = ((T - t)/T) N - (t/T) V`
    Hard {
        horizon: T,
        cost: Arc<dyn TerminalCost<T>>,
    },
    /// `phi = N`; the terminal condition is enforced through a loss term.
    Soft,
}

impl<T: Real> TerminalWrapper<T> {
    pub fn hard(horizon: T, cost: Arc<dyn TerminalCost<T>>) -> Self {
        Self::Hard { horizon, cost }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self, Self::Hard { .. })
    }

    /// `(raw weight, V weight)` at time `t`.
    fn weights(&self, t: T) -> Result<(T, T), NetError> {
        match self {
            Self::Soft => Ok((T::one(), T::zero())),
            Self::Hard { horizon, .. } => {
                let h = *horizon;
                if !(t >= T::zero() && t <= h) {
                    return Err(NetError::TimeOutOfRange {
                        t: t.to_f64().unwrap_or(f64::NAN),
                        horizon: h.to_f64().unwrap_or(f64::NAN),
                    });
                }
                Ok(((h - t) / h, t / h))
            }
        }
    }
}

/// Value, spatial gradient and Laplacian at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub laplacian: T,
}

#[derive(Clone, Debug, Default)]
struct LayerCache<T> {
    a: Vec<T>,
    s: Vec<T>,
    ds: Vec<T>,
    dds: Vec<T>,
    ja: Vec<T>,
    la: Vec<T>,
    js: Vec<T>,
    ls: Vec<T>,
}

/// Reusable forward/backward workspace for one network configuration.
pub(crate) struct JetEngine<T> {
    config: NetConfig,
    input: Vec<T>,
    layers: Vec<LayerCache<T>>,
    grad: Vec<T>,
    // backward scratch, width-sized
    s_bar: Vec<T>,
    js_bar: Vec<T>,
    ls_bar: Vec<T>,
    ja_bar: Vec<T>,
    la_bar: Vec<T>,
    a_bar: Vec<T>,
    next_s_bar: Vec<T>,
    next_js_bar: Vec<T>,
    next_ls_bar: Vec<T>,
    tmp_d: Vec<T>,
}

impl<T: Real> JetEngine<T> {
    pub fn new(config: &NetConfig) -> Self {
        let n = config.width;
        let d = config.dim;
        let layer = LayerCache {
            a: vec![T::zero(); n],
            s: vec![T::zero(); n],
            ds: vec![T::zero(); n],
            dds: vec![T::zero(); n],
            ja: vec![T::zero(); n * d],
            la: vec![T::zero(); n],
            js: vec![T::zero(); n * d],
            ls: vec![T::zero(); n],
        };
        Self {
            config: *config,
            input: vec![T::zero(); d + 1],
            layers: vec![layer; config.depth],
            grad: vec![T::zero(); d],
            s_bar: vec![T::zero(); n],
            js_bar: vec![T::zero(); n * d],
            ls_bar: vec![T::zero(); n],
            ja_bar: vec![T::zero(); n * d],
            la_bar: vec![T::zero(); n],
            a_bar: vec![T::zero(); n],
            next_s_bar: vec![T::zero(); n],
            next_js_bar: vec![T::zero(); n * d],
            next_ls_bar: vec![T::zero(); n],
            tmp_d: vec![T::zero(); d],
        }
    }

    /// Raw network jet; returns `(value, laplacian)` with the gradient left
    /// in `self.grad`.
    fn forward_raw(&mut self, net: &NetView<'_, T>, t: T, x: &[T]) -> (T, T) {
        let n = self.config.width;
        let d = self.config.dim;
        let two: T = lit(2.0);
        self.input[0] = t;
        self.input[1..].copy_from_slice(x);
        for l in 0..self.config.depth {
            let w = net.weight(l);
            let b = net.bias(l);
            let (done, rest) = self.layers.split_at_mut(l);
            let cur = &mut rest[0];
            if l == 0 {
                let k = d + 1;
                for m in 0..n {
                    let row = &w[m * k..(m + 1) * k];
                    let mut acc = b[m];
                    for (wi, ui) in row.iter().zip(&self.input) {
                        acc += *wi * *ui;
                    }
                    cur.a[m] = acc;
                    cur.ja[m * d..(m + 1) * d].copy_from_slice(&row[1..]);
                    cur.la[m] = T::zero();
                }
            } else {
                let prev = &done[l - 1];
                for m in 0..n {
                    let row = &w[m * n..(m + 1) * n];
                    let mut acc = b[m];
                    let mut lacc = T::zero();
                    let ja = &mut cur.ja[m * d..(m + 1) * d];
                    ja.iter_mut().for_each(|v| *v = T::zero());
                    for k in 0..n {
                        let wk = row[k];
                        acc += wk * prev.s[k];
                        lacc += wk * prev.ls[k];
                        for (jv, pj) in ja.iter_mut().zip(&prev.js[k * d..(k + 1) * d]) {
                            *jv += wk * *pj;
                        }
                    }
                    cur.a[m] = acc;
                    cur.la[m] = lacc;
                }
            }
            for m in 0..n {
                let a = cur.a[m];
                let r = a.max(T::zero());
                cur.s[m] = r * r;
                cur.ds[m] = two * r;
                cur.dds[m] = if a > T::zero() { two } else { T::zero() };
                let mut sq = T::zero();
                for j in 0..d {
                    let v = cur.ja[m * d + j];
                    sq += v * v;
                    cur.js[m * d + j] = cur.ds[m] * v;
                }
                cur.ls[m] = cur.dds[m] * sq + cur.ds[m] * cur.la[m];
            }
        }
        let last = &self.layers[self.config.depth - 1];
        let wo = net.output_weight();
        let mut value = net.output_bias();
        let mut lap = T::zero();
        self.grad.iter_mut().for_each(|g| *g = T::zero());
        for m in 0..n {
            value += wo[m] * last.s[m];
            lap += wo[m] * last.ls[m];
            for j in 0..d {
                self.grad[j] += wo[m] * last.js[m * d + j];
            }
        }
        (value, lap)
    }

    /// Adjoint of [`forward_raw`] (which must have run at the same point).
    /// Accumulates into `param_bar` (flat layout) and `x_bar`.
    fn backward_raw(
        &mut self,
        net: &NetView<'_, T>,
        value_bar: T,
        grad_bar: &[T],
        lap_bar: T,
        param_bar: &mut [T],
        x_bar: &mut [T],
    ) {
        let cfg = self.config;
        let n = cfg.width;
        let d = cfg.dim;
        let two: T = lit(2.0);
        let wo = net.output_weight();
        let out_off = cfg.output_offset();
        {
            let last = &self.layers[cfg.depth - 1];
            for m in 0..n {
                let mut acc = value_bar * last.s[m] + lap_bar * last.ls[m];
                for j in 0..d {
                    acc += last.js[m * d + j] * grad_bar[j];
                }
                param_bar[out_off + m] += acc;
                self.s_bar[m] = value_bar * wo[m];
                self.ls_bar[m] = lap_bar * wo[m];
                for j in 0..d {
                    self.js_bar[m * d + j] = wo[m] * grad_bar[j];
                }
            }
            param_bar[out_off + n] += value_bar;
        }
        for l in (0..cfg.depth).rev() {
            let cur = &self.layers[l];
            for m in 0..n {
                let mut ds_bar = self.ls_bar[m] * cur.la[m];
                for j in 0..d {
                    let i = m * d + j;
                    self.ja_bar[i] =
                        two * cur.dds[m] * cur.ja[i] * self.ls_bar[m] + cur.ds[m] * self.js_bar[i];
                    ds_bar += self.js_bar[i] * cur.ja[i];
                }
                self.la_bar[m] = self.ls_bar[m] * cur.ds[m];
                self.a_bar[m] = self.s_bar[m] * cur.ds[m] + ds_bar * cur.dds[m];
            }
            let w = net.weight(l);
            let w_off = cfg.weight_offset(l);
            let k_in = cfg.fan_in(l);
            let b_off = w_off + n * k_in;
            if l == 0 {
                for m in 0..n {
                    let ab = self.a_bar[m];
                    let wb = &mut param_bar[w_off + m * k_in..w_off + (m + 1) * k_in];
                    for (k, wbk) in wb.iter_mut().enumerate() {
                        *wbk += ab * self.input[k];
                    }
                    for j in 0..d {
                        wb[1 + j] += self.ja_bar[m * d + j];
                    }
                    param_bar[b_off + m] += ab;
                    for j in 0..d {
                        x_bar[j] += w[m * k_in + 1 + j] * ab;
                    }
                }
            } else {
                let prev = &self.layers[l - 1];
                self.next_s_bar.iter_mut().for_each(|v| *v = T::zero());
                self.next_js_bar.iter_mut().for_each(|v| *v = T::zero());
                self.next_ls_bar.iter_mut().for_each(|v| *v = T::zero());
                for m in 0..n {
                    let ab = self.a_bar[m];
                    let lb = self.la_bar[m];
                    let jab = &self.ja_bar[m * d..(m + 1) * d];
                    let row = &w[m * n..(m + 1) * n];
                    let wb = &mut param_bar[w_off + m * n..w_off + (m + 1) * n];
                    for k in 0..n {
                        let pjs = &prev.js[k * d..(k + 1) * d];
                        let mut acc = ab * prev.s[k] + lb * prev.ls[k];
                        for j in 0..d {
                            acc += jab[j] * pjs[j];
                        }
                        wb[k] += acc;
                        let wk = row[k];
                        self.next_s_bar[k] += wk * ab;
                        self.next_ls_bar[k] += wk * lb;
                        for j in 0..d {
                            self.next_js_bar[k * d + j] += wk * jab[j];
                        }
                    }
                    param_bar[b_off + m] += ab;
                }
                std::mem::swap(&mut self.s_bar, &mut self.next_s_bar);
                std::mem::swap(&mut self.js_bar, &mut self.next_js_bar);
                std::mem::swap(&mut self.ls_bar, &mut self.next_ls_bar);
            }
        }
    }

    /// Wrapped jet: writes `[phi, z_1..z_d, h]` into `out`.
    pub fn forward(
        &mut self,
        net: &NetView<'_, T>,
        wrapper: &TerminalWrapper<T>,
        t: T,
        x: &[T],
        out: &mut [T],
    ) -> Result<(), NetError> {
        let d = self.config.dim;
        if x.len() != d {
            return Err(NetError::StateDim {
                expected: d,
                got: x.len(),
            });
        }
        let (tau, s) = wrapper.weights(t)?;
        let (value, lap) = self.forward_raw(net, t, x);
        match wrapper {
            TerminalWrapper::Soft => {
                out[0] = value;
                out[1..=d].copy_from_slice(&self.grad);
                out[d + 1] = lap;
            }
            TerminalWrapper::Hard { cost, .. } => {
                let v = cost.value(x);
                cost.grad(x, &mut self.tmp_d);
                let lv = cost.laplacian(x);
                if !v.is_finite() || !lv.is_finite() || !crate::scalar::all_finite(&self.tmp_d) {
                    return Err(NetError::TerminalDomain);
                }
                out[0] = tau * value - s * v;
                for j in 0..d {
                    out[1 + j] = tau * self.grad[j] - s * self.tmp_d[j];
                }
                out[d + 1] = tau * lap - s * lv;
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product of the wrapped jet at `(t, x)`. `bar` is laid
    /// out like the output of [`forward`]. Recomputes the forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn vjp(
        &mut self,
        net: &NetView<'_, T>,
        wrapper: &TerminalWrapper<T>,
        t: T,
        x: &[T],
        bar: &[T],
        param_bar: &mut [T],
        x_bar: &mut [T],
    ) -> Result<(), NetError> {
        let d = self.config.dim;
        let (tau, s) = wrapper.weights(t)?;
        self.forward_raw(net, t, x);
        let phi_bar = bar[0];
        let z_bar = &bar[1..=d];
        let h_bar = bar[d + 1];
        if tau == T::one() {
            self.backward_raw(net, phi_bar, z_bar, h_bar, param_bar, x_bar);
        } else {
            let scaled: Vec<T> = z_bar.iter().map(|v| tau * *v).collect();
            self.backward_raw(net, tau * phi_bar, &scaled, tau * h_bar, param_bar, x_bar);
        }
        if let TerminalWrapper::Hard { cost, .. } = wrapper {
            if s != T::zero() {
                cost.grad(x, &mut self.tmp_d);
                for j in 0..d {
                    x_bar[j] -= s * phi_bar * self.tmp_d[j];
                }
                let neg: Vec<T> = z_bar.iter().map(|v| -s * *v).collect();
                cost.hessian_vec_add(x, &neg, x_bar);
                cost.grad_laplacian_add(x, -s * h_bar, x_bar);
            }
        }
        Ok(())
    }
}

fn check_state<T>(params: &NetParams<T>, x: &[T]) -> Result<(), NetError> {
    if x.len() != params.config.dim {
        return Err(NetError::StateDim {
            expected: params.config.dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// `N(t, x)` without the terminal wrapper.
pub fn raw_eval<T: Real>(params: &NetParams<T>, t: T, x: &[T]) -> Result<T, NetError> {
    Ok(phi_jet(params, &TerminalWrapper::Soft, t, x)?.value)
}

pub fn raw_jet<T: Real>(params: &NetParams<T>, t: T, x: &[T]) -> Result<Jet<T>, NetError> {
    phi_jet(params, &TerminalWrapper::Soft, t, x)
}

pub fn phi_jet<T: Real>(
    params: &NetParams<T>,
    wrapper: &TerminalWrapper<T>,
    t: T,
    x: &[T],
) -> Result<Jet<T>, NetError> {
    check_state(params, x)?;
    let d = params.config.dim;
    let mut engine = JetEngine::new(&params.config);
    let mut out = vec![T::zero(); d + 2];
    engine.forward(&params.view(), wrapper, t, x, &mut out)?;
    Ok(Jet {
        value: out[0],
        grad: out[1..=d].to_vec(),
        laplacian: out[d + 1],
    })
}

pub fn phi_eval<T: Real>(
    params: &NetParams<T>,
    wrapper: &TerminalWrapper<T>,
    t: T,
    x: &[T],
) -> Result<T, NetError> {
    Ok(phi_jet(params, wrapper, t, x)?.value)
}

/// `z = grad_x phi(t, x)`
pub fn phi_spatial_grad<T: Real>(
    params: &NetParams<T>,
    wrapper: &TerminalWrapper<T>,
    t: T,
    x: &[T],
) -> Result<Vec<T>, NetError> {
    Ok(phi_jet(params, wrapper, t, x)?.grad)
}

/// `h = Lap_x phi(t, x)`
pub fn phi_spatial_laplacian<T: Real>(
    params: &NetParams<T>,
    wrapper: &TerminalWrapper<T>,
    t: T,
    x: &[T],
) -> Result<T, NetError> {
    Ok(phi_jet(params, wrapper, t, x)?.laplacian)
}

/// Adjoint of [`phi_jet`]: given cotangents for `(phi, z, h)` returns the
/// parameter gradient (flat layout) and the state gradient.
pub fn phi_jet_vjp<T: Real>(
    params: &NetParams<T>,
    wrapper: &TerminalWrapper<T>,
    t: T,
    x: &[T],
    phi_bar: T,
    z_bar: &[T],
    h_bar: T,
) -> Result<(Vec<T>, Vec<T>), NetError> {
    check_state(params, x)?;
    let d = params.config.dim;
    let mut bar = Vec::with_capacity(d + 2);
    bar.push(phi_bar);
    bar.extend_from_slice(z_bar);
    bar.push(h_bar);
    let mut p_bar = vec![T::zero(); params.config.param_count()];
    let mut x_bar = vec![T::zero(); d];
    let mut engine = JetEngine::new(&params.config);
    engine.vjp(&params.view(), wrapper, t, x, &bar, &mut p_bar, &mut x_bar)?;
    Ok((p_bar, x_bar))
}

/// Fan-in scaled uniform initialization schemes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for dense
    /// layers.
    #[default]
    Uniform,
    /// `U[-sqrt(6/fan_in), sqrt(6/fan_in)]`
    HeUniform,
}

impl InitScheme {
    pub fn bound(&self, fan_in: usize) -> f64 {
        match self {
            Self::Uniform => (1.0 / fan_in as f64).sqrt(),
            Self::HeUniform => (6.0 / fan_in as f64).sqrt(),
        }
    }
}

/// [`init_params_with`] using [`InitScheme::Uniform`].
pub fn init_params<T: Real>(config: NetConfig, seed: u64) -> Result<NetParams<T>, NetError> {
    init_params_with(config, seed, InitScheme::Uniform)
}

/// Weights and biases of each layer drawn uniformly with a bound set by the
/// layer's fan-in; deterministic in `seed`.
pub fn init_params_with<T: Real>(
    config: NetConfig,
    seed: u64,
    scheme: InitScheme,
) -> Result<NetParams<T>, NetError> {
    let mut params = NetParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |slice: &mut [T], fan_in: usize| {
        let bound = scheme.bound(fan_in);
        for v in slice.iter_mut() {
            *v = lit(rng.random_range(-bound..=bound));
        }
    };
    for l in 0..config.depth {
        let fan = config.fan_in(l);
        fill(params.weight_mut(l), fan);
        fill(params.bias_mut(l), fan);
    }
    let fan = config.width;
    fill(params.output_weight_mut(), fan);
    let mut b = [T::zero()];
    fill(&mut b, fan);
    params.set_output_bias(b[0]);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard_quadratic(horizon: f64) -> TerminalWrapper<f64> {
        TerminalWrapper::hard(
            horizon,
            Arc::new(QuadraticCost {
                curvature: 1.0,
                offset: 0.0,
            }),
        )
    }

    #[test]
    fn zero_network_is_zero() {
        let p = NetParams::<f64>::zeros(NetConfig::new(2)).unwrap();
        assert_eq!(raw_eval(&p, 0.3, &[1.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_two_layer_composition() {
        let cfg = NetConfig {
            dim: 1,
            width: 2,
            depth: 2,
            activation: Activation::SquaredRelu,
        };
        let mut p = NetParams::<f64>::zeros(cfg).unwrap();
        // W1 = [[0, 1], [0, 0]]
        p.weight_mut(0)[1] = 1.0;
        // W2 = I
        p.weight_mut(1)[0] = 1.0;
        p.weight_mut(1)[3] = 1.0;
        p.output_weight_mut()[0] = 1.0;
        for t in [0.0, 0.25, 7.0] {
            assert_eq!(raw_eval(&p, t, &[2.0]).unwrap(), 16.0);
        }
    }

    #[test]
    fn hard_wrapper_endpoints() {
        let p: NetParams<f64> = init_params(NetConfig::new(1), 3).unwrap();
        let w = hard_quadratic(0.5);
        let x = [0.7];
        let v = QuadraticCost {
            curvature: 1.0,
            offset: 0.0,
        }
        .value(&x);
        assert_eq!(phi_eval(&p, &w, 0.5, &x).unwrap(), -v);
        assert_eq!(
            phi_eval(&p, &w, 0.0, &x).unwrap(),
            raw_eval(&p, 0.0, &x).unwrap()
        );
        assert_eq!(
            phi_eval(&p, &TerminalWrapper::Soft, 0.2, &x).unwrap(),
            raw_eval(&p, 0.2, &x).unwrap()
        );
    }

    #[test]
    fn hard_wrapper_rejects_time_outside_horizon() {
        let p = NetParams::<f64>::zeros(NetConfig::new(1)).unwrap();
        let err = phi_eval(&p, &hard_quadratic(0.5), 0.6, &[0.0]).unwrap_err();
        assert!(matches!(err, NetError::TimeOutOfRange { .. }));
    }

    #[test]
    fn zero_params_only_terminal_term_survives() {
        let p = NetParams::<f64>::zeros(NetConfig::new(2)).unwrap();
        let w = hard_quadratic(1.0);
        let x = [0.4, -1.2];
        let z = phi_spatial_grad(&p, &w, 0.5, &x).unwrap();
        assert_eq!(z, vec![-0.2, 0.6]);
        assert_eq!(phi_spatial_laplacian(&p, &w, 0.5, &x).unwrap(), -1.0);
    }

    #[test]
    fn affine_in_x_network_has_zero_laplacian() {
        // depth 1, with the first layer active only through t: the x-part
        // of the pre-activation is zero, so N is constant in x.
        let cfg = NetConfig {
            dim: 2,
            width: 3,
            depth: 1,
            activation: Activation::SquaredRelu,
        };
        let mut p = NetParams::<f64>::zeros(cfg).unwrap();
        for m in 0..3 {
            p.weight_mut(0)[m * 3] = 0.5 + m as f64;
            p.bias_mut(0)[m] = 0.1;
        }
        p.output_weight_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        p.set_output_bias(0.3);
        let jet = raw_jet(&p, 0.4, &[0.3, -0.8]).unwrap();
        assert_eq!(jet.laplacian, 0.0);
        assert_eq!(jet.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn state_dimension_mismatch() {
        let p = NetParams::<f64>::zeros(NetConfig::new(2)).unwrap();
        assert!(matches!(
            raw_eval(&p, 0.0, &[1.0]),
            Err(NetError::StateDim { .. })
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = NetConfig::new(2);
        let a: NetParams<f64> = init_params(cfg, 11).unwrap();
        let b: NetParams<f64> = init_params(cfg, 11).unwrap();
        let c: NetParams<f64> = init_params(cfg, 12).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().zip(c.as_slice()).any(|(x, y)| x != y));
        for scheme in [InitScheme::Uniform, InitScheme::HeUniform] {
            let a: NetParams<f64> = init_params_with(cfg, 11, scheme).unwrap();
            let b1 = scheme.bound(3);
            let b2 = scheme.bound(30);
            assert!(a.weight(0).iter().chain(a.bias(0)).all(|v| v.abs() <= b1));
            assert!(a.weight(1).iter().all(|v| v.abs() <= b2));
            assert!(a.output_weight().iter().all(|v| v.abs() <= b2));
            // the narrower default lies inside the He interval
            assert!(b1 <= InitScheme::HeUniform.bound(3));
        }
    }

    #[test]
    fn output_layer_linearity() {
        let p: NetParams<f64> = init_params(NetConfig::new(1), 5).unwrap();
        let mut q = p.clone();
        let lambda = -2.5;
        q.output_weight_mut().iter_mut().for_each(|v| *v *= lambda);
        q.set_output_bias(p.output_bias() * lambda);
        let a = raw_eval(&p, 0.1, &[0.3]).unwrap();
        let b = raw_eval(&q, 0.1, &[0.3]).unwrap();
        assert!((b - lambda * a).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn json_round_trip() {
        let p: NetParams<f64> = init_params(NetConfig::new(2), 9).unwrap();
        let v = p.to_json();
        assert!(v.get("w1").is_some() && v.get("b3").is_some());
        let q = NetParams::<f64>::from_json(&v).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn json_rejects_wrong_lengths() {
        let p: NetParams<f64> = init_params(NetConfig::new(1), 9).unwrap();
        let mut v = p.to_json();
        v["b1"] = serde_json::json!([1.0, 2.0]);
        assert!(NetParams::<f64>::from_json(&v).is_err());
    }
}

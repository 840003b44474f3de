use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_vol::{ThetaSurface, ThetaTerms};

pub const NN_MODEL_VERSION: &str = "nnivmodel/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
}

/// Affine standardization of `(ln T, κ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputTransform {
    pub mean_log_t: f64,
    pub std_log_t: f64,
    pub mean_kappa: f64,
    pub std_kappa: f64,
}

impl InputTransform {
    pub fn fit(t: &[f64], kappa: &[f64]) -> Self {
        let stats = |v: Vec<f64>| {
            let n = v.len().max(1) as f64;
            let m = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            (m, if sd > 1e-8 { sd } else { 1.0 })
        };
        let (mean_log_t, std_log_t) = stats(t.iter().map(|x| x.ln()).collect());
        let (mean_kappa, std_kappa) = stats(kappa.to_vec());
        InputTransform { mean_log_t, std_log_t, mean_kappa, std_kappa }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Multilayer perceptron for the implied volatility `Σ(T, κ)`.
///
/// Inputs are standardized `(ln T, κ)`, hidden layers use softplus, and the scalar output
/// `o` maps to `Σ = lo + (hi - lo) / (1 + e^{-o})`.
#[derive(Debug, Clone, PartialEq)]
pub struct NnIvModel {
    pub spot: f64,
    pub activation: Activation,
    pub input: InputTransform,
    pub sigma_bounds: (f64, f64),
    /// Hidden layers followed by the linear output layer.
    pub layers: Vec<Layer>,
    /// `((T_min, T_max), (κ_min, κ_max))` of the training data.
    pub data_domain: Option<((f64, f64), (f64, f64))>,
}

/// Values and input derivatives of a layer, one column per point.
#[derive(Debug, Clone)]
pub(crate) struct Jet {
    pub v: DMatrix<f64>,
    /// `∂/∂ ln T`.
    pub a: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub kk: DMatrix<f64>,
}

impl Jet {
    fn zeros(r: usize, c: usize) -> Self {
        Jet { v: DMatrix::zeros(r, c), a: DMatrix::zeros(r, c), k: DMatrix::zeros(r, c), kk: DMatrix::zeros(r, c) }
    }
}

/// Forward record kept for the reverse pass.
pub(crate) struct Tape {
    /// Layer inputs, starting with the standardized coordinates.
    pub inputs: Vec<Jet>,
    /// Pre-activations of every layer; the last one is the network output.
    pub pre: Vec<Jet>,
    /// Activation slopes of the hidden layers.
    pub slope: Vec<DMatrix<f64>>,
}

/// `Σ` and its derivatives in `ln T` and `κ` at a batch of points.
#[derive(Debug, Clone)]
pub(crate) struct SigmaJet {
    pub s: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s_k: Vec<f64>,
    pub s_kk: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c ← a·bᵀ + beta·c` without materializing the transpose.
fn gemm_abt(c: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, beta: f64) {
    let (m, k, n) = (a.nrows(), a.ncols(), b.nrows());
    assert!(b.ncols() == k && c.nrows() == m && c.ncols() == n);
    // SAFETY: dimensions and column-major strides are checked against the buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), 1, m as isize,
        );
    }
}

/// `aᵀ·b`.
fn gemm_atb(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, m, n) = (a.nrows(), a.ncols(), b.ncols());
    assert!(b.nrows() == r);
    let mut c = DMatrix::zeros(m, n);
    // SAFETY: dimensions and column-major strides are checked against the buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m, r, n, 1.0,
            a.as_ptr(), r as isize, 1,
            b.as_ptr(), 1, r as isize,
            0.0,
            c.as_mut_ptr(), 1, m as isize,
        );
    }
    c
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl NnIvModel {
    /// Glorot-uniform initialization with the output bias set so that `Σ ≡ sigma_init`.
    pub fn new(hidden: &[usize], input: InputTransform, spot: f64, sigma_bounds: (f64, f64), sigma_init: f64, seed: u64) -> Result<Self> {
        let (lo, hi) = sigma_bounds;
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::InvalidInput("need at least one non-empty hidden layer".into()));
        }
        if !(0.0 <= lo && lo < hi) || !(sigma_init > lo && sigma_init < hi) {
            return Err(Error::InvalidInput(format!("initial vol {sigma_init} outside bounds ({lo}, {hi})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![2];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let output = l == dims.len() - 2;
            if output {
                limit *= 0.1;
            }
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit));
            let mut b = DVector::zeros(fan_out);
            if output {
                b[0] = logit((sigma_init - lo) / (hi - lo));
            }
            layers.push(Layer { w, b });
        }
        let mut model = NnIvModel { spot, activation: Activation::Softplus, input, sigma_bounds, layers, data_domain: None };
        // Cancel the hidden-layer contribution at the input centroid so the start is Σ ≈ sigma_init.
        let mid = model.sigma_jet(&[input.mean_log_t.exp()], &[input.mean_kappa]);
        let o = logit((mid.s[0] - lo) / (hi - lo));
        let last = model.layers.len() - 1;
        model.layers[last].b[0] += logit((sigma_init - lo) / (hi - lo)) - o;
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub(crate) fn forward(&self, t: &[f64], kappa: &[f64]) -> Tape {
        let n = t.len();
        let tr = &self.input;
        let mut h = Jet::zeros(2, n);
        for j in 0..n {
            h.v[(0, j)] = (t[j].ln() - tr.mean_log_t) / tr.std_log_t;
            h.v[(1, j)] = (kappa[j] - tr.mean_kappa) / tr.std_kappa;
            h.a[(0, j)] = 1.0 / tr.std_log_t;
            h.k[(1, j)] = 1.0 / tr.std_kappa;
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut slope = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Jet {
                v: &layer.w * &h.v,
                a: &layer.w * &h.a,
                k: &layer.w * &h.k,
                kk: &layer.w * &h.kk,
            };
            for mut col in z.v.column_iter_mut() {
                col += &layer.b;
            }
            let next = if l + 1 < self.layers.len() {
                let mut out = Jet::zeros(z.v.nrows(), n);
                let mut sl = DMatrix::zeros(z.v.nrows(), n);
                let it = z.v.iter().zip(z.a.iter()).zip(z.k.iter()).zip(z.kk.iter());
                let outs = sl.iter_mut().zip(out.v.iter_mut()).zip(out.a.iter_mut()).zip(out.k.iter_mut()).zip(out.kk.iter_mut());
                for ((((x, za), zk), zkk), ((((s_o, v_o), a_o), k_o), kk_o)) in it.zip(outs) {
                    let e = (-x.abs()).exp();
                    let s = if *x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                    *s_o = s;
                    *v_o = x.max(0.0) + (1.0 + e).ln();
                    *a_o = s * za;
                    *k_o = s * zk;
                    *kk_o = s * (1.0 - s) * zk * zk + s * zkk;
                }
                slope.push(sl);
                Some(out)
            } else {
                None
            };
            inputs.push(h);
            pre.push(z);
            match next {
                Some(x) => h = x,
                None => break,
            }
        }
        Tape { inputs, pre, slope }
    }

    /// `Σ` jet from the network output jet.
    pub(crate) fn sigma_from_tape(&self, tape: &Tape) -> SigmaJet {
        let o = tape.pre.last().unwrap();
        let (lo, hi) = self.sigma_bounds;
        let c = hi - lo;
        let n = o.v.ncols();
        let mut out = SigmaJet { s: vec![0.0; n], s_a: vec![0.0; n], s_k: vec![0.0; n], s_kk: vec![0.0; n] };
        for j in 0..n {
            let g = sigmoid(o.v[j]);
            let g1 = g * (1.0 - g);
            let g2 = g1 * (1.0 - 2.0 * g);
            out.s[j] = lo + c * g;
            out.s_a[j] = c * g1 * o.a[j];
            out.s_k[j] = c * g1 * o.k[j];
            out.s_kk[j] = c * (g2 * o.k[j] * o.k[j] + g1 * o.kk[j]);
        }
        out
    }

    pub(crate) fn sigma_jet(&self, t: &[f64], kappa: &[f64]) -> SigmaJet {
        self.sigma_from_tape(&self.forward(t, kappa))
    }

    /// Reverse pass: gradients of a scalar with adjoints `bar` of the `Σ` jet.
    pub(crate) fn backward(&self, tape: &Tape, bar: &SigmaJet) -> Vec<Layer> {
        let o = tape.pre.last().unwrap();
        let (lo, hi) = self.sigma_bounds;
        let c = hi - lo;
        let n = o.v.ncols();
        let mut zb = Jet::zeros(1, n);
        for j in 0..n {
            let g = sigmoid(o.v[j]);
            let g1 = g * (1.0 - g);
            let g2 = g1 * (1.0 - 2.0 * g);
            let g3 = g2 * (1.0 - 2.0 * g) - 2.0 * g1 * g1;
            let (oa, ok, okk) = (o.a[j], o.k[j], o.kk[j]);
            zb.v[j] = c * (g1 * bar.s[j] + g2 * oa * bar.s_a[j] + g2 * ok * bar.s_k[j] + (g3 * ok * ok + g2 * okk) * bar.s_kk[j]);
            zb.a[j] = c * g1 * bar.s_a[j];
            zb.k[j] = c * (g1 * bar.s_k[j] + 2.0 * g2 * ok * bar.s_kk[j]);
            zb.kk[j] = c * g1 * bar.s_kk[j];
        }
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer { w: DMatrix::zeros(l.w.nrows(), l.w.ncols()), b: DVector::zeros(l.b.len()) })
            .collect();
        for l in (0..self.layers.len()).rev() {
            let h = &tape.inputs[l];
            let g = &mut grads[l];
            gemm_abt(&mut g.w, &zb.v, &h.v, 0.0);
            gemm_abt(&mut g.w, &zb.a, &h.a, 1.0);
            gemm_abt(&mut g.w, &zb.k, &h.k, 1.0);
            gemm_abt(&mut g.w, &zb.kk, &h.kk, 1.0);
            g.b = zb.v.column_sum();
            if l == 0 {
                break;
            }
            let w = &self.layers[l].w;
            let hb = Jet { v: gemm_atb(w, &zb.v), a: gemm_atb(w, &zb.a), k: gemm_atb(w, &zb.k), kk: gemm_atb(w, &zb.kk) };
            let z = &tape.pre[l - 1];
            let sl = &tape.slope[l - 1];
            let mut next = Jet::zeros(z.v.nrows(), n);
            let src = sl.iter().zip(z.a.iter()).zip(z.k.iter()).zip(z.kk.iter());
            let bars = hb.v.iter().zip(hb.a.iter()).zip(hb.k.iter()).zip(hb.kk.iter());
            let outs = next.v.iter_mut().zip(next.a.iter_mut()).zip(next.k.iter_mut()).zip(next.kk.iter_mut());
            for (((((s, za), zk), zkk), (((vv, va), vk), vkk)), (((ov, oa), ok), okk)) in src.zip(bars).zip(outs) {
                let s1 = s * (1.0 - s);
                let s2 = s1 * (1.0 - 2.0 * s);
                *ov = s * vv + s1 * za * va + s1 * zk * vk + (s2 * zk * zk + s1 * zkk) * vkk;
                *oa = s * va;
                *ok = s * vk + 2.0 * s1 * zk * vkk;
                *okk = s * vkk;
            }
            zb = next;
        }
        grads
    }

    /// `(Θ, ∂_TΘ, ∂_κΘ, ∂²_κΘ)` at a batch of points.
    pub fn theta_batch(&self, t: &[f64], kappa: &[f64]) -> Result<Vec<ThetaTerms>> {
        if let Some(bad) = t.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput(format!("maturity must be positive, got {bad}")));
        }
        let j = self.sigma_jet(t, kappa);
        Ok((0..t.len()).map(|i| theta_from_sigma(t[i], j.s[i], j.s_a[i], j.s_k[i], j.s_kk[i])).collect())
    }

    /// Implied volatility at a batch of points.
    pub fn implied_vol(&self, t: &[f64], kappa: &[f64]) -> Vec<f64> {
        self.sigma_jet(t, kappa).s
    }

    pub(crate) fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    pub(crate) fn set_params_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&v[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&v[off..off + nb]);
            off += nb;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("").to_string();
        if found != NN_MODEL_VERSION {
            return Err(Error::Version { found, expected: NN_MODEL_VERSION.into() });
        }
        let file: ModelFile = serde_json::from_value(v)?;
        file.try_into()
    }
}

pub(crate) fn theta_from_sigma(t: f64, s: f64, s_a: f64, s_k: f64, s_kk: f64) -> ThetaTerms {
    ThetaTerms {
        theta: s * s * t,
        d_t: 2.0 * s * s_a + s * s,
        d_k: 2.0 * t * s * s_k,
        d_kk: 2.0 * t * (s_k * s_k + s * s_kk),
    }
}

impl ThetaSurface for NnIvModel {
    fn theta_terms(&self, t: f64, kappa: f64) -> Result<ThetaTerms> {
        Ok(self.theta_batch(&[t], &[kappa])?[0])
    }

    fn spot(&self) -> f64 {
        self.spot
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    version: String,
    spot: f64,
    activation: Activation,
    input: InputTransform,
    sigma_bounds: (f64, f64),
    layers: Vec<LayerFile>,
    #[serde(default)]
    data_domain: Option<((f64, f64), (f64, f64))>,
}

impl From<&NnIvModel> for ModelFile {
    fn from(m: &NnIvModel) -> Self {
        ModelFile {
            version: NN_MODEL_VERSION.into(),
            spot: m.spot,
            activation: m.activation,
            input: m.input,
            sigma_bounds: m.sigma_bounds,
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.transpose().iter().copied().collect(),
                    bias: l.b.iter().copied().collect(),
                })
                .collect(),
            data_domain: m.data_domain,
        }
    }
}

impl TryFrom<ModelFile> for NnIvModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let mut prev = 2;
        let mut layers = Vec::new();
        for (i, l) in f.layers.into_iter().enumerate() {
            if l.cols != prev || l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Schema(format!("layer {i} has inconsistent dimensions")));
            }
            prev = l.rows;
            layers.push(Layer { w: DMatrix::from_row_slice(l.rows, l.cols, &l.weights), b: DVector::from_vec(l.bias) });
        }
        if prev != 1 || layers.len() < 2 {
            return Err(Error::Schema("network must have hidden layers and a scalar output".into()));
        }
        Ok(NnIvModel {
            spot: f.spot,
            activation: f.activation,
            input: f.input,
            sigma_bounds: f.sigma_bounds,
            layers,
            data_domain: f.data_domain,
        })
    }
}

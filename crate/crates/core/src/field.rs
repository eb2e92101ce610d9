//! Dense tanh networks with exact input-derivative jets.
//!
//! A [`NeuralField`] maps `R^n -> R^m` through tanh hidden layers and an
//! identity output layer, optionally followed by a squaring transform for
//! densities. Input derivatives up to order two are propagated forward as
//! extra "channels" through every layer, so one batched GEMM per layer moves
//! the value together with all requested derivatives. [`NeuralField::backward`]
//! runs the reverse pass over those channels to get exact parameter gradients
//! of any loss built from the jets.
//!
//! Channel layout for a batch of `B` points in `n` dimensions:
//!
//! ```text
//! [ value | d/dx_1 .. d/dx_n | d2/dx_1^2 .. d2/dx_n^2 | d2/dx_i dx_j (i<j) ]
//! ```
//!
//! each channel occupying `B` consecutive columns of a `width x (C*B)` matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    /// `p = r^2`; keeps density fields non-negative.
    Squared,
}

/// Highest input-derivative order carried by a jet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum JetOrder {
    Value = 0,
    First = 1,
    Second = 2,
}

impl JetOrder {
    pub fn from_u8(order: u8) -> Result<Self> {
        match order {
            0 => Ok(JetOrder::Value),
            1 => Ok(JetOrder::First),
            2 => Ok(JetOrder::Second),
            o => Err(Error::InvalidPoint(format!("jet order {o} not in 0..=2"))),
        }
    }
}

/// Which derivative channels a batch carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSpec {
    pub inputs: usize,
    pub order: JetOrder,
    pub mixed: bool,
}

impl ChannelSpec {
    pub fn new(inputs: usize, order: JetOrder, mixed: bool) -> Self {
        ChannelSpec {
            inputs,
            order,
            mixed: mixed && order == JetOrder::Second,
        }
    }

    pub fn count(&self) -> usize {
        let n = self.inputs;
        match self.order {
            JetOrder::Value => 1,
            JetOrder::First => 1 + n,
            JetOrder::Second => 1 + 2 * n + if self.mixed { n * (n - 1) / 2 } else { 0 },
        }
    }

    fn first(&self, i: usize) -> usize {
        1 + i
    }

    fn second(&self, i: usize) -> usize {
        1 + self.inputs + i
    }

    /// Channel of the mixed derivative for `i < j`.
    fn mixed_channel(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        let n = self.inputs;
        // pairs (0,1),(0,2),..,(0,n-1),(1,2),..
        let before: usize = (0..i).map(|r| n - 1 - r).sum();
        1 + 2 * n + before + (j - i - 1)
    }

    fn mixed_pairs(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        if self.mixed {
            for i in 0..self.inputs {
                for j in i + 1..self.inputs {
                    v.push((i, j));
                }
            }
        }
        v
    }
}

/// Feed-forward tanh network with a flat parameter vector.
///
/// Parameters are stored layer by layer, each layer as its row-major weight
/// matrix (`out x in`) followed by its bias vector. Inputs are mapped through
/// a fixed affine normalisation `(x - center) / scale` before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField {
    widths: Vec<usize>,
    transform: OutputTransform,
    center: Vec<f64>,
    scale: Vec<f64>,
    seed: u64,
    params: Vec<f64>,
    offsets: Vec<(usize, usize)>,
}

/// Value and input derivatives of a field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldJet {
    pub value: Vec<f64>,
    /// `m x n`; empty for order 0.
    pub grad_x: Vec<Vec<f64>>,
    /// `m x n` pure second derivatives; empty below order 2.
    pub hess_diag: Vec<Vec<f64>>,
    /// `m x n x n`, only when mixed derivatives were requested.
    pub hess_mixed: Option<Vec<Vec<Vec<f64>>>>,
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_offsets(widths: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(widths.len() - 1);
    let mut off = 0;
    for w in widths.windows(2) {
        let wsz = w[0] * w[1];
        out.push((off, off + wsz));
        off += wsz + w[1];
    }
    out
}

/// Builds a field with truncated-normal weights (std `1/sqrt(fan_in)`,
/// cut at two standard deviations) and zero biases.
pub fn init_field(widths: &[usize], seed: u64, transform: OutputTransform) -> Result<NeuralField> {
    validate_widths(widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(widths));
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let z = loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            params.push(z * std);
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    let n = widths[0];
    Ok(NeuralField {
        widths: widths.to_vec(),
        transform,
        center: vec![0.0; n],
        scale: vec![1.0; n],
        seed,
        offsets: layer_offsets(widths),
        params,
    })
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output widths, got {widths:?}"
        )));
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "width at position {i} is zero in {widths:?}"
        )));
    }
    Ok(())
}

/// Forward values and cached intermediates of one batch.
#[derive(Debug, Clone)]
pub struct BatchJet {
    spec: ChannelSpec,
    batch: usize,
    outputs: usize,
    /// Output-layer result before the output transform.
    raw: Array2<f64>,
    out: Array2<f64>,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
}

impl BatchJet {
    pub fn spec(&self) -> ChannelSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    fn chan<'a>(&self, arr: &'a Array2<f64>, o: usize, c: usize) -> &'a [f64] {
        row_chan(arr, o, c, self.batch)
    }

    pub fn value(&self, o: usize) -> &[f64] {
        self.chan(&self.out, o, 0)
    }

    /// Output before the squaring transform (equal to `value` for identity).
    pub fn raw_value(&self, o: usize) -> &[f64] {
        self.chan(&self.raw, o, 0)
    }

    pub fn grad(&self, o: usize, i: usize) -> &[f64] {
        assert!(self.spec.order >= JetOrder::First);
        self.chan(&self.out, o, self.spec.first(i))
    }

    pub fn hess_diag(&self, o: usize, i: usize) -> &[f64] {
        assert!(self.spec.order >= JetOrder::Second);
        self.chan(&self.out, o, self.spec.second(i))
    }

    pub fn hess_mixed(&self, o: usize, i: usize, j: usize) -> &[f64] {
        assert!(self.spec.mixed);
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => self.hess_diag(o, i),
            std::cmp::Ordering::Less => self.chan(&self.out, o, self.spec.mixed_channel(i, j)),
            std::cmp::Ordering::Greater => self.chan(&self.out, o, self.spec.mixed_channel(j, i)),
        }
    }
}

/// Loss sensitivities with respect to the channels of a [`BatchJet`].
#[derive(Debug, Clone)]
pub struct JetAdjoint {
    batch: usize,
    spec: ChannelSpec,
    out: Array2<f64>,
    raw_value: Array2<f64>,
}

impl JetAdjoint {
    pub fn zeros_like(jet: &BatchJet) -> Self {
        let c = jet.spec.count();
        JetAdjoint {
            batch: jet.batch,
            spec: jet.spec,
            out: Array2::zeros((jet.outputs, c * jet.batch)),
            raw_value: Array2::zeros((jet.outputs, jet.batch)),
        }
    }

    fn chan_mut(&mut self, o: usize, c: usize) -> &mut [f64] {
        let b = self.batch;
        let row = self.out.row_mut(o).into_slice().expect("standard layout");
        &mut row[c * b..(c + 1) * b]
    }

    pub fn value_mut(&mut self, o: usize) -> &mut [f64] {
        self.chan_mut(o, 0)
    }

    /// Sensitivity with respect to the pre-transform output value.
    pub fn raw_value_mut(&mut self, o: usize) -> &mut [f64] {
        self.raw_value
            .row_mut(o)
            .into_slice()
            .expect("standard layout")
    }

    pub fn grad_mut(&mut self, o: usize, i: usize) -> &mut [f64] {
        let c = self.spec.first(i);
        self.chan_mut(o, c)
    }

    pub fn hess_diag_mut(&mut self, o: usize, i: usize) -> &mut [f64] {
        let c = self.spec.second(i);
        self.chan_mut(o, c)
    }
}

impl NeuralField {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn transform(&self) -> OutputTransform {
        self.transform
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn input_center(&self) -> &[f64] {
        &self.center
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.scale
    }

    /// Normalises inputs as `(x - center) / scale` before the first layer.
    pub fn with_input_scaling(mut self, center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let n = self.input_dim();
        if center.len() != n || scale.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: center.len().min(scale.len()),
            });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArchitecture(format!(
                "input scale must be positive, got {scale:?}"
            )));
        }
        self.center = center;
        self.scale = scale;
        Ok(self)
    }

    pub(crate) fn from_parts(
        widths: Vec<usize>,
        transform: OutputTransform,
        center: Vec<f64>,
        scale: Vec<f64>,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        validate_widths(&widths)?;
        if params.len() != param_count(&widths) {
            return Err(Error::DimensionMismatch {
                expected: param_count(&widths),
                got: params.len(),
            });
        }
        let offsets = layer_offsets(&widths);
        let field = NeuralField {
            widths,
            transform,
            center: vec![0.0; 0],
            scale: vec![0.0; 0],
            seed,
            params,
            offsets,
        };
        field.with_input_scaling(center, scale)
    }

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w0, w1) = self.offsets[layer];
        let shape = (self.widths[layer + 1], self.widths[layer]);
        ArrayView2::from_shape(shape, &self.params[w0..w1]).expect("weight shape")
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let (_, w1) = self.offsets[layer];
        &self.params[w1..w1 + self.widths[layer + 1]]
    }

    fn check_points(&self, points: &[f64]) -> Result<usize> {
        let n = self.input_dim();
        if !points.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: points.len() % n,
            });
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                index: i % n,
                value: points[i],
            });
        }
        Ok(points.len() / n)
    }

    /// Batched forward pass over point-major `points` (`B x n`, flattened).
    pub fn forward_batch(&self, points: &[f64], order: JetOrder, mixed: bool) -> Result<BatchJet> {
        let batch = self.check_points(points)?;
        let n = self.input_dim();
        let spec = ChannelSpec::new(n, order, mixed);
        let nc = spec.count();
        let b = batch;

        let mut a = Array2::<f64>::zeros((n, nc * b));
        for (k, x) in points.chunks_exact(n).enumerate() {
            for i in 0..n {
                a[[i, k]] = (x[i] - self.center[i]) / self.scale[i];
            }
        }
        if order >= JetOrder::First {
            for i in 0..n {
                let c = spec.first(i);
                let inv = 1.0 / self.scale[i];
                a.slice_mut(s![i, c * b..(c + 1) * b]).fill(inv);
            }
        }

        let layers = self.widths.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let pairs = spec.mixed_pairs();

        for l in 0..layers {
            let out_w = self.widths[l + 1];
            let mut z = Array2::<f64>::zeros((out_w, nc * b));
            general_mat_mul(1.0, &self.weight(l), &a, 0.0, &mut z);
            let bias = self.bias(l);
            for (u, &bu) in bias.iter().enumerate() {
                let mut row = z.slice_mut(s![u, 0..b]);
                row += bu;
            }
            inputs.push(a);
            if l + 1 < layers {
                let mut act = z.clone();
                tanh_forward(&z, &mut act, &spec, &pairs, b);
                pre.push(z);
                a = act;
            } else {
                a = z;
            }
        }

        let raw = a;
        let out = match self.transform {
            OutputTransform::Identity => raw.clone(),
            OutputTransform::Squared => {
                let mut out = raw.clone();
                square_forward(&raw, &mut out, &spec, &pairs, b);
                out
            }
        };
        Ok(BatchJet {
            spec,
            batch,
            outputs: self.output_dim(),
            raw,
            out,
            inputs,
            pre,
        })
    }

    /// Exact parameter gradient of a loss whose sensitivities to the jet are `adj`.
    /// The result is added into `grad` (length [`Self::num_params`]).
    pub fn backward_into(&self, jet: &BatchJet, adj: &JetAdjoint, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(adj.batch, jet.batch);
        assert!(
            !jet.spec.mixed,
            "reverse pass does not support mixed channels"
        );
        let spec = jet.spec;
        let b = jet.batch;

        let mut g = adj.out.clone();
        if self.transform == OutputTransform::Squared {
            square_backward(&jet.raw, &mut g, &spec, b);
        }
        {
            let mut v = g.slice_mut(s![.., 0..b]);
            v += &adj.raw_value;
        }

        let layers = self.widths.len() - 1;
        for l in (0..layers).rev() {
            let (w0, w1) = self.offsets[l];
            let (out_w, in_w) = (self.widths[l + 1], self.widths[l]);
            {
                let mut dw = ArrayView2::from_shape((out_w, in_w), &grad[w0..w1])
                    .expect("weight shape")
                    .to_owned();
                general_mat_mul(1.0, &g, &jet.inputs[l].t(), 1.0, &mut dw);
                grad[w0..w1].copy_from_slice(dw.as_slice().expect("standard layout"));
            }
            for u in 0..out_w {
                let s: f64 = g.slice(s![u, 0..b]).sum();
                grad[w1 + u] += s;
            }
            if l == 0 {
                break;
            }
            let mut ga = Array2::<f64>::zeros((in_w, g.ncols()));
            general_mat_mul(1.0, &self.weight(l).t(), &g, 0.0, &mut ga);
            tanh_backward(&jet.pre[l - 1], &jet.inputs[l], &mut ga, &spec, b);
            g = ga;
        }
    }

    pub fn backward(&self, jet: &BatchJet, adj: &JetAdjoint) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(jet, adj, &mut grad);
        grad
    }

    /// Value and input derivatives at a single point.
    pub fn evaluate_jet(&self, x: &[f64], order: u8, mixed: bool) -> Result<FieldJet> {
        let order = JetOrder::from_u8(order)?;
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let jet = self.forward_batch(x, order, mixed)?;
        let m = self.output_dim();
        let n = self.input_dim();
        let value = (0..m).map(|o| jet.value(o)[0]).collect();
        let grad_x = if order >= JetOrder::First {
            (0..m)
                .map(|o| (0..n).map(|i| jet.grad(o, i)[0]).collect())
                .collect()
        } else {
            Vec::new()
        };
        let hess_diag = if order >= JetOrder::Second {
            (0..m)
                .map(|o| (0..n).map(|i| jet.hess_diag(o, i)[0]).collect())
                .collect()
        } else {
            Vec::new()
        };
        let hess_mixed = if jet.spec.mixed {
            Some(
                (0..m)
                    .map(|o| {
                        (0..n)
                            .map(|i| (0..n).map(|j| jet.hess_mixed(o, i, j)[0]).collect())
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(FieldJet {
            value,
            grad_x,
            hess_diag,
            hess_mixed,
        })
    }

    /// Output values at many points (point-major result, `B x m`).
    pub fn eval_many(&self, points: &[f64]) -> Result<Vec<f64>> {
        let jet = self.forward_batch(points, JetOrder::Value, false)?;
        let m = self.output_dim();
        let mut out = vec![0.0; jet.len() * m];
        for o in 0..m {
            for (k, v) in jet.value(o).iter().enumerate() {
                out[k * m + o] = *v;
            }
        }
        Ok(out)
    }
}

#[inline]
fn row_chan(arr: &Array2<f64>, u: usize, c: usize, b: usize) -> &[f64] {
    let cols = arr.ncols();
    let all = arr.as_slice().expect("standard layout");
    &all[u * cols + c * b..u * cols + (c + 1) * b]
}

fn tanh_forward(
    z: &Array2<f64>,
    act: &mut Array2<f64>,
    spec: &ChannelSpec,
    pairs: &[(usize, usize)],
    b: usize,
) {
    let n = spec.inputs;
    for u in 0..z.nrows() {
        let zr = row_chan(z, u, 0, z.ncols());
        let mut arow = act.row_mut(u);
        let ar = arow.as_slice_mut().expect("standard layout");
        let (aval, rest) = ar.split_at_mut(b);
        for k in 0..b {
            aval[k] = zr[k].tanh();
        }
        if spec.order == JetOrder::Value {
            continue;
        }
        for i in 0..n {
            let ct = spec.first(i);
            let tz = &zr[ct * b..(ct + 1) * b];
            let ta = &mut rest[(ct - 1) * b..ct * b];
            for k in 0..b {
                let a = aval[k];
                ta[k] = (1.0 - a * a) * tz[k];
            }
        }
        if spec.order == JetOrder::Second {
            for i in 0..n {
                let ct = spec.first(i);
                let cs = spec.second(i);
                let tz = &zr[ct * b..(ct + 1) * b];
                let sz = &zr[cs * b..(cs + 1) * b];
                let sa = &mut rest[(cs - 1) * b..cs * b];
                for k in 0..b {
                    let a = aval[k];
                    let d = 1.0 - a * a;
                    sa[k] = d * sz[k] - 2.0 * a * d * tz[k] * tz[k];
                }
            }
            for &(i, j) in pairs {
                let (ci, cj) = (spec.first(i), spec.first(j));
                let cm = spec.mixed_channel(i, j);
                let ti = &zr[ci * b..(ci + 1) * b];
                let tj = &zr[cj * b..(cj + 1) * b];
                let mz = &zr[cm * b..(cm + 1) * b];
                let ma = &mut rest[(cm - 1) * b..cm * b];
                for k in 0..b {
                    let a = aval[k];
                    let d = 1.0 - a * a;
                    ma[k] = d * mz[k] - 2.0 * a * d * ti[k] * tj[k];
                }
            }
        }
    }
}

/// Turns sensitivities to post-activation channels into sensitivities to the
/// pre-activation channels, in place.
fn tanh_backward(
    z: &Array2<f64>,
    act: &Array2<f64>,
    g: &mut Array2<f64>,
    spec: &ChannelSpec,
    b: usize,
) {
    let n = spec.inputs;
    for u in 0..z.nrows() {
        let zr = row_chan(z, u, 0, z.ncols());
        let ar = row_chan(act, u, 0, b);
        let mut grow = g.row_mut(u);
        let gr = grow.as_slice_mut().expect("standard layout");
        let (gval, rest) = gr.split_at_mut(b);
        if spec.order >= JetOrder::First {
            for i in 0..n {
                let ct = spec.first(i);
                let tz = &zr[ct * b..(ct + 1) * b];
                let has_second = spec.order == JetOrder::Second;
                let cs = spec.second(i);
                let (gt, gs): (&mut [f64], Option<&mut [f64]>) = if has_second {
                    let (lo, hi) = rest.split_at_mut((cs - 1) * b);
                    (&mut lo[(ct - 1) * b..ct * b], Some(&mut hi[..b]))
                } else {
                    (&mut rest[(ct - 1) * b..ct * b], None)
                };
                match gs {
                    Some(gs) => {
                        let sz = &zr[cs * b..(cs + 1) * b];
                        for k in 0..b {
                            let a = ar[k];
                            let d = 1.0 - a * a;
                            let gbar_s = gs[k];
                            let gbar_t = gt[k];
                            gval[k] += -2.0 * a * tz[k] * gbar_t
                                + gbar_s
                                    * (-2.0 * a * sz[k]
                                        - 2.0 * (1.0 - 3.0 * a * a) * tz[k] * tz[k]);
                            gt[k] = d * gbar_t - 4.0 * a * d * tz[k] * gbar_s;
                            gs[k] = d * gbar_s;
                        }
                    }
                    None => {
                        for k in 0..b {
                            let a = ar[k];
                            let gbar_t = gt[k];
                            gval[k] += -2.0 * a * tz[k] * gbar_t;
                            gt[k] = (1.0 - a * a) * gbar_t;
                        }
                    }
                }
            }
        }
        for k in 0..b {
            let a = ar[k];
            gval[k] *= 1.0 - a * a;
        }
    }
}

fn square_forward(
    raw: &Array2<f64>,
    out: &mut Array2<f64>,
    spec: &ChannelSpec,
    pairs: &[(usize, usize)],
    b: usize,
) {
    let n = spec.inputs;
    for o in 0..raw.nrows() {
        let rr = row_chan(raw, o, 0, raw.ncols());
        let mut orow = out.row_mut(o);
        let or = orow.as_slice_mut().expect("standard layout");
        let r = &rr[..b];
        for k in 0..b {
            or[k] = r[k] * r[k];
        }
        if spec.order >= JetOrder::First {
            for i in 0..n {
                let ct = spec.first(i);
                for k in 0..b {
                    or[ct * b + k] = 2.0 * r[k] * rr[ct * b + k];
                }
            }
        }
        if spec.order == JetOrder::Second {
            for i in 0..n {
                let (ct, cs) = (spec.first(i), spec.second(i));
                for k in 0..b {
                    let t = rr[ct * b + k];
                    or[cs * b + k] = 2.0 * t * t + 2.0 * r[k] * rr[cs * b + k];
                }
            }
            for &(i, j) in pairs {
                let (ci, cj) = (spec.first(i), spec.first(j));
                let cm = spec.mixed_channel(i, j);
                for k in 0..b {
                    or[cm * b + k] =
                        2.0 * rr[ci * b + k] * rr[cj * b + k] + 2.0 * r[k] * rr[cm * b + k];
                }
            }
        }
    }
}

fn square_backward(raw: &Array2<f64>, g: &mut Array2<f64>, spec: &ChannelSpec, b: usize) {
    let n = spec.inputs;
    for o in 0..raw.nrows() {
        let rr = row_chan(raw, o, 0, raw.ncols());
        let mut grow = g.row_mut(o);
        let gr = grow.as_slice_mut().expect("standard layout");
        for k in 0..b {
            let r = rr[k];
            let mut gv = 2.0 * r * gr[k];
            if spec.order >= JetOrder::First {
                for i in 0..n {
                    let ct = spec.first(i);
                    let gt = gr[ct * b + k];
                    let t = rr[ct * b + k];
                    gv += 2.0 * t * gt;
                    let mut new_gt = 2.0 * r * gt;
                    if spec.order == JetOrder::Second {
                        let cs = spec.second(i);
                        let gs = gr[cs * b + k];
                        gv += 2.0 * rr[cs * b + k] * gs;
                        new_gt += 4.0 * t * gs;
                        gr[cs * b + k] = 2.0 * r * gs;
                    }
                    gr[ct * b + k] = new_gt;
                }
            }
            gr[k] = gv;
        }
    }
}

//! The two network families: Tanh MLPs with Xavier-normal initialization,
//! and networks whose edges carry learnable cubic B-spline activations
//! (silu base plus spline, per-edge coefficients, per-unit knots) with
//! dynamic knot updates. Both map normalized (t, x, y) to (u, v, p); the
//! output layer of both families is affine.

use std::io::{self, Write};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{concat_rows, stack_cols, AutodiffError, Tape, Var};
use crate::spline::{least_squares_multi, quantile, KnotVector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    BSpline,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::BSpline => "bspline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "bspline" => Some(Activation::BSpline),
            _ => None,
        }
    }
}

/// Architecture description: layer widths, activation family, spline
/// hyperparameters and the per-coordinate input bounds used for the
/// affine [-1, 1] input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub spline_order: usize,
    pub grid_intervals: usize,
    pub input_bounds: Vec<(f64, f64)>,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, input_bounds: Vec<(f64, f64)>) -> Self {
        assert!(layer_widths.len() >= 2);
        assert_eq!(layer_widths[0], input_bounds.len(), "one bound pair per input");
        NetworkSpec {
            layer_widths,
            activation,
            spline_order: 3,
            grid_intervals: 8,
            input_bounds,
        }
    }

    /// Spline coefficients per edge: d + k - 1.
    pub fn n_basis(&self) -> usize {
        self.spline_order + self.grid_intervals - 1
    }
}

/// Dense layer: weight stored fan_in x fan_out (row-major batches multiply
/// from the left), bias per output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Spline-activated layer. Knots are shared per layer-input unit; the
/// spline coefficients and the silu base scale are per edge.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    /// (n_in, n_out) base scales.
    pub lambda0: Tensor,
    /// Per input unit: (n_basis, n_out) coefficients.
    pub coeffs: Vec<Tensor>,
    /// Per input unit knot vector.
    pub knots: Vec<KnotVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(AffineLayer),
    Kan(KanLayer),
}

/// Learnable state of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

/// Xavier-normal weight matrix: entries Normal(0, 2/(fan_in+fan_out)),
/// returned fan_in x fan_out.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Affine map sending each coordinate's (lo, hi) to (-1, 1). Extrapolates
/// outside the bounds without complaint.
pub fn normalize_input(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(&v, &(lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
        .collect()
}

/// Initialize parameters for a spec. MLP layers get Xavier weights and zero
/// biases. Spline layers start as a pure silu-mixing network: the base
/// scales are Xavier-normal (a flat lambda0 = 1 would amplify activations
/// by the fan-in at every layer), all spline coefficients 0, uniform knots
/// spanning [-1, 1]; their affine output layer is Xavier-initialized.
pub fn init_params(spec: &NetworkSpec, rng: &mut impl Rng) -> NetParams {
    let w = &spec.layer_widths;
    let n_layers = w.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (n_in, n_out) = (w[l], w[l + 1]);
        let is_last = l == n_layers - 1;
        if spec.activation == Activation::BSpline && !is_last {
            let kv = KnotVector::uniform(-1.0, 1.0, spec.spline_order, spec.grid_intervals);
            layers.push(Layer::Kan(KanLayer {
                lambda0: xavier_init(n_in, n_out, rng),
                coeffs: vec![Tensor::zeros(&[spec.n_basis(), n_out]); n_in],
                knots: vec![kv; n_in],
            }));
        } else {
            layers.push(Layer::Affine(AffineLayer {
                weight: xavier_init(n_in, n_out, rng),
                bias: Tensor::zeros(&[n_out]),
            }));
        }
    }
    NetParams { layers }
}

/// Learnable parameter count plus the formula it came from (the formula is
/// echoed in reports).
pub fn param_count(spec: &NetworkSpec) -> usize {
    let w = &spec.layer_widths;
    let n_layers = w.len() - 1;
    let mut total = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (w[l], w[l + 1]);
        let is_last = l == n_layers - 1;
        if spec.activation == Activation::BSpline && !is_last {
            total += n_in * n_out * (spec.n_basis() + 1);
        } else {
            total += (n_in + 1) * n_out;
        }
    }
    total
}

pub fn param_count_formula(spec: &NetworkSpec) -> String {
    match spec.activation {
        Activation::Tanh => "sum over layers of (n_in + 1) * n_out".to_string(),
        Activation::BSpline => format!(
            "sum over spline layers of n_in * n_out * (d + k - 1 + 1) with d={} k={}, plus (n_in + 1) * n_out for the affine output layer",
            spec.spline_order, spec.grid_intervals
        ),
    }
}

impl NetParams {
    /// Flat view of every learnable tensor, in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine(a) => {
                    out.push(&a.weight);
                    out.push(&a.bias);
                }
                Layer::Kan(k) => {
                    out.push(&k.lambda0);
                    out.extend(k.coeffs.iter());
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Affine(a) => {
                    out.push(&mut a.weight);
                    out.push(&mut a.bias);
                }
                Layer::Kan(k) => {
                    out.push(&mut k.lambda0);
                    out.extend(k.coeffs.iter_mut());
                }
            }
        }
        out
    }

    pub fn n_learnable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Tape-resident copies of the parameters for one training step.
pub enum LayerVars {
    Affine { weight: Var, bias: Var },
    Kan { lambda0: Var, coeffs: Vec<Var>, knots: Rc<Vec<KnotVector>> },
}

pub struct NetVars {
    pub layers: Vec<LayerVars>,
}

impl NetParams {
    pub fn to_vars(&self, tape: &Tape) -> NetVars {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Affine(a) => LayerVars::Affine {
                    weight: tape.var(a.weight.clone()),
                    bias: tape.var(a.bias.clone()),
                },
                Layer::Kan(k) => LayerVars::Kan {
                    lambda0: tape.var(k.lambda0.clone()),
                    coeffs: k.coeffs.iter().map(|c| tape.var(c.clone())).collect(),
                    knots: Rc::new(k.knots.clone()),
                },
            })
            .collect();
        NetVars { layers }
    }
}

impl NetVars {
    /// Same traversal order as [`NetParams::tensors`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerVars::Affine { weight, bias } => {
                    out.push(weight.clone());
                    out.push(bias.clone());
                }
                LayerVars::Kan { lambda0, coeffs, .. } => {
                    out.push(lambda0.clone());
                    out.extend(coeffs.iter().cloned());
                }
            }
        }
        out
    }
}

/// One spline edge activation, fully on tape:
/// phi(x) = lambda0 * silu(x) + sum_i c_i B_i(x).
pub fn kan_activation(lambda0: &Var, coeffs: &Var, kv: &Rc<KnotVector>, x: &Var) -> Result<Var, AutodiffError> {
    let n = x.with_value(|t| t.len());
    let base = x.silu().mul(lambda0)?;
    let spline = x
        .bspline_basis(kv)
        .matmul(&coeffs.reshape(&[kv.n_basis(), 1]))?
        .reshape(&[n]);
    base.add(&spline)
}

fn kan_layer_tape(vars: &LayerVars, z: &Var) -> Result<Var, AutodiffError> {
    let LayerVars::Kan { lambda0, coeffs, knots } = vars else {
        panic!("kan_layer_tape on affine layer");
    };
    // One fused basis block per layer: (B, n_in * nb) against the
    // vertically stacked per-unit coefficients.
    let base = z.silu().matmul(lambda0)?;
    let basis = z.bspline_basis_multi(knots);
    let stacked = concat_rows(coeffs)?;
    base.add(&basis.matmul(&stacked)?)
}

/// Spline layer forward on plain tensors: out_i = sum_j phi_ij(z_j).
pub fn kan_layer_forward(layer: &KanLayer, z: &Tensor) -> Tensor {
    let (rows, n_in) = (z.rows(), z.cols());
    let silu = z.map(|x| x / (1.0 + (-x).exp()));
    let mut out = silu.matmul(&layer.lambda0).expect("shape checked");
    for j in 0..n_in {
        let xs: Vec<f64> = (0..rows).map(|r| z.at2(r, j)).collect();
        let design = layer.knots[j].design_matrix(&xs);
        let nb = layer.knots[j].n_basis();
        let contrib = Tensor::matrix(rows, nb, design)
            .matmul(&layer.coeffs[j])
            .expect("shape checked");
        for (o, c) in out.data_mut().iter_mut().zip(contrib.data()) {
            *o += c;
        }
    }
    out
}

/// Network forward pass on the tape. Coordinates arrive as rank-1 leaf
/// batches; normalization happens on the tape so input derivatives include
/// the scaling. Returns the (u, v, p) output columns.
pub fn forward_tape(
    spec: &NetworkSpec,
    vars: &NetVars,
    coords: &[Var],
) -> Result<(Var, Var, Var), AutodiffError> {
    assert_eq!(coords.len(), spec.layer_widths[0]);
    let rows = coords[0].with_value(|t| t.len());
    let normalized: Vec<Var> = coords
        .iter()
        .zip(&spec.input_bounds)
        .map(|(c, &(lo, hi))| c.add_scalar(-lo).mul_scalar(2.0 / (hi - lo)).add_scalar(-1.0))
        .collect();
    let mut h = stack_cols(&normalized)?;
    let n_layers = vars.layers.len();
    for (l, layer) in vars.layers.iter().enumerate() {
        let is_last = l == n_layers - 1;
        h = match layer {
            LayerVars::Affine { weight, bias } => {
                let lin = h.matmul(weight)?.add(&bias.broadcast_row(rows))?;
                if is_last || spec.activation == Activation::BSpline {
                    lin
                } else {
                    lin.tanh()
                }
            }
            LayerVars::Kan { .. } => kan_layer_tape(layer, &h)?,
        };
    }
    Ok((h.col(0), h.col(1), h.col(2)))
}

/// Numeric forward pass over raw points (no tape); used for evaluation.
pub fn forward_numeric(spec: &NetworkSpec, params: &NetParams, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    forward_numeric_traced(spec, params, pts).0
}

/// Numeric forward that also returns the input batch of every layer
/// (used by the grid update to see each spline layer's input distribution).
pub fn forward_numeric_traced(
    spec: &NetworkSpec,
    params: &NetParams,
    pts: &[[f64; 3]],
) -> (Vec<[f64; 3]>, Vec<Tensor>) {
    let rows = pts.len();
    let mut data = Vec::with_capacity(rows * 3);
    for p in pts {
        data.extend(normalize_input(p, &spec.input_bounds));
    }
    let mut h = Tensor::matrix(rows, 3, data);
    let n_layers = params.layers.len();
    let mut traces = Vec::with_capacity(n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        traces.push(h.clone());
        let is_last = l == n_layers - 1;
        h = match layer {
            Layer::Affine(a) => {
                let mut lin = h.matmul(&a.weight).expect("shape checked");
                let n_out = a.bias.len();
                for r in 0..rows {
                    for c in 0..n_out {
                        lin.data_mut()[r * n_out + c] += a.bias.data()[c];
                    }
                }
                if is_last || spec.activation == Activation::BSpline {
                    lin
                } else {
                    lin.map(f64::tanh)
                }
            }
            Layer::Kan(k) => kan_layer_forward(k, &h),
        };
    }
    let outs = (0..rows).map(|r| [h.at2(r, 0), h.at2(r, 1), h.at2(r, 2)]).collect();
    (outs, traces)
}

/// Re-place a spline layer's knots to cover the observed input batch and
/// refit the coefficients by least squares so the layer's outputs on that
/// batch are preserved.
///
/// New interior knots are uniform between the batch's 1st and 99th
/// percentiles. Units with a degenerate batch keep their previous knots.
pub fn update_grid(layer: &mut KanLayer, inputs: &Tensor) {
    let (rows, n_in) = (inputs.rows(), inputs.cols());
    assert_eq!(n_in, layer.knots.len());
    if rows < 2 {
        return;
    }
    for j in 0..n_in {
        let xs: Vec<f64> = (0..rows).map(|r| inputs.at2(r, j)).collect();
        let lo = quantile(&xs, 0.01);
        let hi = quantile(&xs, 0.99);
        if hi - lo < 1e-9 {
            continue;
        }
        let old_kv = &layer.knots[j];
        let new_kv = KnotVector::uniform(lo, hi, old_kv.degree(), {
            // grid_intervals is recoverable from the stored basis count
            old_kv.n_basis() + 1 - old_kv.degree()
        });
        let nb = old_kv.n_basis();
        let n_out = layer.coeffs[j].cols();
        // Old spline outputs on the batch, one target per outgoing edge.
        let old_design = old_kv.design_matrix(&xs);
        let targets: Vec<Vec<f64>> = (0..n_out)
            .map(|e| {
                (0..rows)
                    .map(|r| {
                        (0..nb)
                            .map(|b| old_design[r * nb + b] * layer.coeffs[j].at2(b, e))
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let new_design = new_kv.design_matrix(&xs);
        let solutions = least_squares_multi(&new_design, rows, nb, &targets);
        let mut coeff_data = vec![0.0; nb * n_out];
        for (e, sol) in solutions.iter().enumerate() {
            for b in 0..nb {
                coeff_data[b * n_out + e] = sol[b];
            }
        }
        layer.coeffs[j] = Tensor::matrix(nb, n_out, coeff_data);
        layer.knots[j] = new_kv;
    }
}

// ---------------------------------------------------------------------------
// Checkpoint codec: text lines, arrays hex-encoded bit-exactly.
// ---------------------------------------------------------------------------

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    write!(w, "array {name} {}", if dims.is_empty() { "scalar".into() } else { dims.join("x") })?;
    for v in t.data() {
        write!(w, " {:016x}", v.to_bits())?;
    }
    writeln!(w)
}

fn parse_tensor(line: &str) -> io::Result<(String, Tensor)> {
    let mut it = line.split_whitespace();
    let tag = it.next().unwrap_or("");
    if tag != "array" {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("expected array line, got `{line}`")));
    }
    let name = it.next().unwrap_or("").to_string();
    let shape_s = it.next().unwrap_or("");
    let shape: Vec<usize> = if shape_s == "scalar" {
        vec![]
    } else {
        shape_s
            .split('x')
            .map(|d| d.parse().map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad shape")))
            .collect::<io::Result<_>>()?
    };
    let data: Vec<f64> = it
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map(f64::from_bits)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad hex f64"))
        })
        .collect::<io::Result<_>>()?;
    if data.len() != shape.iter().product::<usize>() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "array length does not match shape"));
    }
    Ok((name, Tensor::from_shape(shape, data)))
}

/// Serialize one network (spec + parameters + knot vectors).
pub fn write_net(w: &mut impl Write, spec: &NetworkSpec, params: &NetParams) -> io::Result<()> {
    writeln!(w, "net")?;
    writeln!(w, "activation = {}", spec.activation.name())?;
    writeln!(
        w,
        "widths = {}",
        spec.layer_widths.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    )?;
    writeln!(w, "spline_order = {}", spec.spline_order)?;
    writeln!(w, "grid_intervals = {}", spec.grid_intervals)?;
    writeln!(
        w,
        "input_bounds = {}",
        spec.input_bounds
            .iter()
            .map(|(lo, hi)| format!("{:016x}:{:016x}", lo.to_bits(), hi.to_bits()))
            .collect::<Vec<_>>()
            .join(",")
    )?;
    for (l, layer) in params.layers.iter().enumerate() {
        match layer {
            Layer::Affine(a) => {
                write_tensor(w, &format!("layer{l}.weight"), &a.weight)?;
                write_tensor(w, &format!("layer{l}.bias"), &a.bias)?;
            }
            Layer::Kan(k) => {
                write_tensor(w, &format!("layer{l}.lambda0"), &k.lambda0)?;
                for (j, c) in k.coeffs.iter().enumerate() {
                    write_tensor(w, &format!("layer{l}.coeffs{j}"), c)?;
                }
                for (j, kv) in k.knots.iter().enumerate() {
                    write_tensor(w, &format!("layer{l}.knots{j}"), &Tensor::vector(kv.knots().to_vec()))?;
                }
            }
        }
    }
    writeln!(w, "endnet")
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Parse one network previously written by [`write_net`]. Expects the
/// `net` header line to have been consumed already.
pub fn read_net(lines: &mut impl Iterator<Item = io::Result<String>>) -> io::Result<(NetworkSpec, NetParams)> {
    let mut kv: Vec<(String, String)> = Vec::new();
    let mut arrays: Vec<(String, Tensor)> = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated net block"))??;
        let line = line.trim().to_string();
        if line == "endnet" {
            break;
        }
        if line.starts_with("array ") {
            arrays.push(parse_tensor(&line)?);
        } else if let Some((k, v)) = line.split_once('=') {
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let get = |key: &str| -> io::Result<String> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(&format!("missing key {key}")))
    };
    let activation = Activation::parse(&get("activation")?).ok_or_else(|| bad("bad activation"))?;
    let widths: Vec<usize> = get("widths")?
        .split(',')
        .map(|x| x.parse().map_err(|_| bad("bad width")))
        .collect::<io::Result<_>>()?;
    let spline_order: usize = get("spline_order")?.parse().map_err(|_| bad("bad spline_order"))?;
    let grid_intervals: usize = get("grid_intervals")?.parse().map_err(|_| bad("bad grid_intervals"))?;
    let input_bounds: Vec<(f64, f64)> = get("input_bounds")?
        .split(',')
        .map(|pair| {
            let (a, b) = pair.split_once(':').ok_or_else(|| bad("bad bounds"))?;
            let lo = u64::from_str_radix(a, 16).map(f64::from_bits).map_err(|_| bad("bad bounds hex"))?;
            let hi = u64::from_str_radix(b, 16).map(f64::from_bits).map_err(|_| bad("bad bounds hex"))?;
            Ok((lo, hi))
        })
        .collect::<io::Result<_>>()?;
    let spec = NetworkSpec {
        layer_widths: widths.clone(),
        activation,
        spline_order,
        grid_intervals,
        input_bounds,
    };

    let find = |name: &str| -> io::Result<Tensor> {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| bad(&format!("missing array {name}")))
    };
    let n_layers = widths.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let is_last = l == n_layers - 1;
        if activation == Activation::BSpline && !is_last {
            let n_in = widths[l];
            let lambda0 = find(&format!("layer{l}.lambda0"))?;
            let coeffs = (0..n_in)
                .map(|j| find(&format!("layer{l}.coeffs{j}")))
                .collect::<io::Result<Vec<_>>>()?;
            let n_basis = spline_order + grid_intervals - 1;
            let knots = (0..n_in)
                .map(|j| {
                    find(&format!("layer{l}.knots{j}"))
                        .map(|t| KnotVector::from_knots(t.into_data(), spline_order, n_basis))
                })
                .collect::<io::Result<Vec<_>>>()?;
            layers.push(Layer::Kan(KanLayer { lambda0, coeffs, knots }));
        } else {
            layers.push(Layer::Affine(AffineLayer {
                weight: find(&format!("layer{l}.weight"))?,
                bias: find(&format!("layer{l}.bias"))?,
            }));
        }
    }
    Ok((spec, NetParams { layers }))
}

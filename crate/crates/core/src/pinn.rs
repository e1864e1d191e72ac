//! The four models (single-domain and Eulerian-Lagrangian, Tanh and
//! B-spline), their composite losses, the Adam loop and checkpointing.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{grad, mse, mse_zero, AutodiffError, Tape, Var};
use crate::dataset::FsiDataset;
use crate::eval::{evaluate_model, EvalResult};
use crate::nets::{
    forward_numeric_traced, forward_tape, init_params, param_count, param_count_formula, update_grid,
    Activation, Layer, NetParams, NetVars, NetworkSpec,
};
use crate::sampling::{minibatch, BatchTerm, InterfaceSample, PointTxy, TrainingSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchitectureKind {
    SingleFsi,
    EulerianLagrangian,
}

impl ArchitectureKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::SingleFsi => "single_fsi",
            ArchitectureKind::EulerianLagrangian => "eulerian_lagrangian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single_fsi" => Some(ArchitectureKind::SingleFsi),
            "eulerian_lagrangian" => Some(ArchitectureKind::EulerianLagrangian),
            _ => None,
        }
    }
}

/// Full training configuration for one model.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub model_id: String,
    pub architecture: ArchitectureKind,
    pub activation: Activation,
    pub widths: Vec<usize>,
    /// Weight vector: 4 entries for SingleFsi, 6 for EulerianLagrangian.
    /// Entry 4 (lambda_4) of the Eulerian-Lagrangian list is carried but
    /// referenced by no loss term, matching the published weight list.
    pub loss_weights: Vec<f64>,
    pub lr0: f64,
    pub decay_step: usize,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Spline-layer grid refresh cadence (iterations); grids freeze after
    /// half of training.
    pub grid_update_every: usize,
    pub rho: f64,
}

pub const SINGLE_FSI_WEIGHTS: [f64; 4] = [0.1, 2.0, 4.0, 0.1];
pub const EULERIAN_LAGRANGIAN_WEIGHTS: [f64; 6] = [2.0, 2.0, 2.0, 0.2, 0.1, 0.2];

impl ModelConfig {
    /// One of the four registry models, full scale or desk scale.
    pub fn preset(id: &str, seed: u64, desk_scale: bool) -> Option<ModelConfig> {
        let (architecture, activation) = match id {
            "M1" => (ArchitectureKind::SingleFsi, Activation::Tanh),
            "M2" => (ArchitectureKind::SingleFsi, Activation::BSpline),
            "M3" => (ArchitectureKind::EulerianLagrangian, Activation::Tanh),
            "M4" => (ArchitectureKind::EulerianLagrangian, Activation::BSpline),
            _ => return None,
        };
        let widths = match (activation, desk_scale) {
            (Activation::Tanh, false) => vec![3, 300, 300, 300, 3],
            (Activation::BSpline, false) => vec![3, 100, 100, 100, 3],
            (Activation::Tanh, true) => vec![3, 50, 50, 50, 3],
            (Activation::BSpline, true) => vec![3, 24, 24, 24, 3],
        };
        let loss_weights = match architecture {
            ArchitectureKind::SingleFsi => SINGLE_FSI_WEIGHTS.to_vec(),
            ArchitectureKind::EulerianLagrangian => EULERIAN_LAGRANGIAN_WEIGHTS.to_vec(),
        };
        Some(ModelConfig {
            model_id: id.to_string(),
            architecture,
            activation,
            widths,
            loss_weights,
            lr0: 1e-3,
            decay_step: 1000,
            decay_rate: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: if desk_scale { 5000 } else { 60_000 },
            batch_size: 128,
            seed,
            grid_update_every: 1000,
            rho: 1.0,
        })
    }

    pub fn n_nets(&self) -> usize {
        match self.architecture {
            ArchitectureKind::SingleFsi => 1,
            ArchitectureKind::EulerianLagrangian => 2,
        }
    }

    pub fn term_names(&self) -> &'static [&'static str] {
        match self.architecture {
            ArchitectureKind::SingleFsi => {
                &["phy_ru", "phy_rv", "phy_rc", "up", "bc1", "init", "interface"]
            }
            ArchitectureKind::EulerianLagrangian => {
                &["phy_ru", "phy_rv", "phy_rc", "up", "bc1", "init", "solid", "coupling"]
            }
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let want = match self.architecture {
            ArchitectureKind::SingleFsi => 4,
            ArchitectureKind::EulerianLagrangian => 6,
        };
        if self.loss_weights.len() != want {
            return Err(TrainError::BadConfig(format!(
                "{} needs {want} loss weights, got {}",
                self.architecture.name(),
                self.loss_weights.len()
            )));
        }
        if self.widths.first() != Some(&3) || self.widths.last() != Some(&3) {
            return Err(TrainError::BadConfig("networks map (t,x,y) to (u,v,p); widths must start and end at 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("empty point collection for loss term `{0}`")]
    EmptyCollection(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at iteration {at_iter}; partial report attached")]
    NonFiniteLoss { at_iter: usize, report: Box<TrainReport> },
    #[error("non-finite gradient at iteration {at_iter}; loss decomposition: {decomposition:?}")]
    NonFiniteGradient {
        at_iter: usize,
        decomposition: Vec<(&'static str, f64)>,
    },
}

/// Parameters of one trained model (one or two networks).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub nets: Vec<(NetworkSpec, NetParams)>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, input_bounds: Vec<(f64, f64)>) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = (0..config.n_nets())
            .map(|_| {
                let spec = NetworkSpec::new(config.widths.clone(), config.activation, input_bounds.clone());
                let params = init_params(&spec, &mut rng);
                (spec, params)
            })
            .collect();
        ModelParams { nets }
    }

    pub fn n_learnable(&self) -> usize {
        self.nets.iter().map(|(_, p)| p.n_learnable()).sum()
    }
}

/// Saved model: metadata plus every network, bit-exact on round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_id: String,
    pub architecture: ArchitectureKind,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "FSILAB-CHECKPOINT v1")?;
        writeln!(w, "model = {}", self.model_id)?;
        writeln!(w, "architecture = {}", self.architecture.name())?;
        writeln!(w, "seed = {}", self.seed)?;
        writeln!(w, "nets = {}", self.params.nets.len())?;
        for (spec, params) in &self.params.nets {
            crate::nets::write_net(&mut w, spec, params)?;
        }
        w.flush()
    }

    pub fn read(path: &Path) -> io::Result<Checkpoint> {
        let r = io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let mut header = Vec::new();
        let mut n_nets = 0usize;
        for line in lines.by_ref() {
            let line = line?;
            let t = line.trim().to_string();
            if t == "net" {
                break;
            }
            if let Some((k, v)) = t.split_once('=') {
                if k.trim() == "nets" {
                    n_nets = v.trim().parse().map_err(|_| bad("bad nets count"))?;
                }
                header.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let get = |key: &str| -> io::Result<String> {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| bad(&format!("missing checkpoint key {key}")))
        };
        let mut nets = Vec::with_capacity(n_nets);
        nets.push(crate::nets::read_net(&mut lines)?);
        for _ in 1..n_nets {
            // Consume the next `net` header line.
            loop {
                let line = lines.next().ok_or_else(|| bad("missing net block"))??;
                if line.trim() == "net" {
                    break;
                }
            }
            nets.push(crate::nets::read_net(&mut lines)?);
        }
        Ok(Checkpoint {
            model_id: get("model")?,
            architecture: ArchitectureKind::parse(&get("architecture")?).ok_or_else(|| bad("bad architecture"))?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed"))?,
            params: ModelParams { nets },
        })
    }
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Navier-Stokes residuals from network outputs at collocation points:
/// momentum residuals r_u, r_v and the continuity residual r_c, all
/// staying on the tape. The derivatives come from the coordinate leaves.
pub fn residuals_navier_stokes(
    u: &Var,
    v: &Var,
    p: &Var,
    t: &Var,
    x: &Var,
    y: &Var,
    rho: f64,
    mu: f64,
) -> Result<(Var, Var, Var), AutodiffError> {
    let coords = [t.clone(), x.clone(), y.clone()];
    let gu = grad(&u.sum(), &coords)?;
    let gv = grad(&v.sum(), &coords)?;
    let gp = grad(&p.sum(), &coords)?;
    let (u_t, u_x, u_y) = (&gu[0], &gu[1], &gu[2]);
    let (v_t, v_x, v_y) = (&gv[0], &gv[1], &gv[2]);
    let (p_x, p_y) = (&gp[1], &gp[2]);
    let u_xx = grad(&u_x.sum(), std::slice::from_ref(x))?.remove(0);
    let u_yy = grad(&u_y.sum(), std::slice::from_ref(y))?.remove(0);
    let v_xx = grad(&v_x.sum(), std::slice::from_ref(x))?.remove(0);
    let v_yy = grad(&v_y.sum(), std::slice::from_ref(y))?.remove(0);

    let r_u = u_t
        .add(&u.mul(u_x)?)?
        .add(&v.mul(u_y)?)?
        .add(&p_x.mul_scalar(1.0 / rho))?
        .sub(&u_xx.add(&u_yy)?.mul_scalar(mu))?;
    let r_v = v_t
        .add(&u.mul(v_x)?)?
        .add(&v.mul(v_y)?)?
        .add(&p_y.mul_scalar(1.0 / rho))?
        .sub(&v_xx.add(&v_yy)?.mul_scalar(mu))?;
    let r_c = u_x.add(v_y)?;
    Ok((r_u, r_v, r_c))
}

/// Lid term: MSE[lid_velocity - u] + MSE[v].
pub fn term_lid(u: &Var, v: &Var, lid_velocity: f64) -> Result<Var, AutodiffError> {
    Ok(u.neg().add_scalar(lid_velocity).square().mean().add(&mse_zero(v))?)
}

/// Stationary-wall term: MSE[u] + MSE[v].
pub fn term_walls(u: &Var, v: &Var) -> Result<Var, AutodiffError> {
    mse_zero(u).add(&mse_zero(v))
}

/// Initial-state term, read per field: MSE[u] + MSE[v] + MSE[p].
pub fn term_init(u: &Var, v: &Var, p: &Var) -> Result<Var, AutodiffError> {
    mse_zero(u).add(&mse_zero(v))?.add(&mse_zero(p))
}

/// Interface velocity fit against dataset marker velocities.
pub fn term_interface_fit(u: &Var, v: &Var, u_target: &Var, v_target: &Var) -> Result<Var, AutodiffError> {
    mse(u, u_target)?.add(&mse(v, v_target)?)
}

/// MSE of the pressure normal gradient at markers.
pub fn term_interface_pn(p_x: &Var, p_y: &Var, nx: &Var, ny: &Var) -> Result<Var, AutodiffError> {
    Ok(mse_zero(&p_x.mul(nx)?.add(&p_y.mul(ny)?)?))
}

/// One iteration's worth of sampled points per loss term.
pub struct Batches {
    pub colloc: Vec<PointTxy>,
    pub lid: Vec<PointTxy>,
    pub walls: Vec<PointTxy>,
    pub init: Vec<PointTxy>,
    pub interface_fit: Vec<InterfaceSample>,
    pub interface_pn: Vec<InterfaceSample>,
    pub coupling: Vec<InterfaceSample>,
}

pub fn draw_batches(set: &TrainingSet, config: &ModelConfig, iteration: u64) -> Result<Batches, TrainError> {
    let bs = config.batch_size;
    let seed = config.seed;
    let gamma0 = set.gamma0();
    let pick_pts = |src: &[PointTxy], term: BatchTerm, name: &'static str| -> Result<Vec<PointTxy>, TrainError> {
        if src.is_empty() {
            return Err(TrainError::EmptyCollection(name));
        }
        Ok(minibatch(src.len(), bs, seed, iteration, term).into_iter().map(|i| src[i]).collect())
    };
    let pick_ifc = |term: BatchTerm, name: &'static str| -> Result<Vec<InterfaceSample>, TrainError> {
        if set.interface.is_empty() {
            return Err(TrainError::EmptyCollection(name));
        }
        Ok(minibatch(set.interface.len(), bs, seed, iteration, term)
            .into_iter()
            .map(|i| set.interface[i])
            .collect())
    };
    Ok(Batches {
        colloc: pick_pts(&set.collocation_fluid, BatchTerm::Collocation, "phy")?,
        lid: pick_pts(&set.boundary_top, BatchTerm::Lid, "up")?,
        walls: pick_pts(&gamma0, BatchTerm::Walls, "bc1")?,
        init: pick_pts(&set.initial, BatchTerm::Initial, "init")?,
        interface_fit: pick_ifc(BatchTerm::InterfaceFit, "interface")?,
        interface_pn: pick_ifc(BatchTerm::InterfacePressure, "solid")?,
        coupling: pick_ifc(BatchTerm::Coupling, "coupling")?,
    })
}

fn leaf_coords(tape: &Tape, pts: &[PointTxy]) -> (Var, Var, Var) {
    let t = tape.var(Tensor::vector(pts.iter().map(|p| p[0]).collect()));
    let x = tape.var(Tensor::vector(pts.iter().map(|p| p[1]).collect()));
    let y = tape.var(Tensor::vector(pts.iter().map(|p| p[2]).collect()));
    (t, x, y)
}

fn leaf_coords_ifc(tape: &Tape, pts: &[InterfaceSample]) -> (Var, Var, Var) {
    let t = tape.var(Tensor::vector(pts.iter().map(|p| p.t).collect()));
    let x = tape.var(Tensor::vector(pts.iter().map(|p| p.x).collect()));
    let y = tape.var(Tensor::vector(pts.iter().map(|p| p.y).collect()));
    (t, x, y)
}

/// Weighted per-term decomposition plus the on-tape total (the sum of the
/// recorded values equals the total by construction).
pub struct LossBreakdown {
    pub total: Var,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> f64 {
        self.total.scalar()
    }
}

struct FluidConstants {
    rho: f64,
    mu: f64,
    lid_velocity: f64,
}

pub fn assemble_weighted(tape: &Tape, parts: Vec<(&'static str, Var, f64)>) -> Result<LossBreakdown, AutodiffError> {
    let mut total = tape.scalar(0.0);
    let mut terms = Vec::with_capacity(parts.len());
    for (name, term, weight) in parts {
        let weighted = term.mul_scalar(weight);
        terms.push((name, weighted.scalar()));
        total = total.add(&weighted)?;
    }
    Ok(LossBreakdown { total, terms })
}

/// Composite loss of the single-network model:
/// l1 (L_ru + L_rv + L_rc) + l2 (L_up + L_bc1) + l3 L_0 + l4 L_xi,
/// where L_xi fits marker velocities and penalizes the pressure normal
/// gradient at the markers.
fn loss_single_fsi_terms(
    spec: &NetworkSpec,
    vars: &NetVars,
    batches: &Batches,
    weights: &[f64],
    consts: &FluidConstants,
    tape: &Tape,
) -> Result<Vec<(&'static str, Var, f64)>, TrainError> {
    let (l1, l2, l3, l4) = (weights[0], weights[1], weights[2], weights[3]);

    let (t, x, y) = leaf_coords(tape, &batches.colloc);
    let (u, v, p) = forward_tape(spec, vars, &[t.clone(), x.clone(), y.clone()])?;
    let (r_u, r_v, r_c) = residuals_navier_stokes(&u, &v, &p, &t, &x, &y, consts.rho, consts.mu)?;

    let (tl, xl, yl) = leaf_coords(tape, &batches.lid);
    let (ul, vl, _) = forward_tape(spec, vars, &[tl, xl, yl])?;
    let up = term_lid(&ul, &vl, consts.lid_velocity)?;

    let (tw, xw, yw) = leaf_coords(tape, &batches.walls);
    let (uw, vw, _) = forward_tape(spec, vars, &[tw, xw, yw])?;
    let bc1 = term_walls(&uw, &vw)?;

    let (t0, x0, y0) = leaf_coords(tape, &batches.init);
    let (u0, v0, p0) = forward_tape(spec, vars, &[t0, x0, y0])?;
    let init = term_init(&u0, &v0, &p0)?;

    let (ti, xi, yi) = leaf_coords_ifc(tape, &batches.interface_fit);
    let (ui, vi, pi) = forward_tape(spec, vars, &[ti, xi.clone(), yi.clone()])?;
    let ut = tape.constant(Tensor::vector(batches.interface_fit.iter().map(|s| s.u).collect()));
    let vt = tape.constant(Tensor::vector(batches.interface_fit.iter().map(|s| s.v).collect()));
    let fit = term_interface_fit(&ui, &vi, &ut, &vt)?;
    let gp = grad(&pi.sum(), &[xi, yi])?;
    let nx = tape.constant(Tensor::vector(batches.interface_fit.iter().map(|s| s.nx).collect()));
    let ny = tape.constant(Tensor::vector(batches.interface_fit.iter().map(|s| s.ny).collect()));
    let pn = term_interface_pn(&gp[0], &gp[1], &nx, &ny)?;
    let interface = fit.add(&pn)?;

    Ok(vec![
        ("phy_ru", mse_zero(&r_u), l1),
        ("phy_rv", mse_zero(&r_v), l1),
        ("phy_rc", mse_zero(&r_c), l1),
        ("up", up, l2),
        ("bc1", bc1, l2),
        ("init", init, l3),
        ("interface", interface, l4),
    ])
}

/// Composite loss of the two-network model. The Eulerian net carries the
/// physics, wall and initial terms; the Lagrangian net carries the solid
/// interface term (marker-velocity fit plus the pressure-normal penalty);
/// the coupling term ties both velocity predictions at the markers, with
/// gradients flowing into both parameter sets. Weight entry 4 (lambda_4)
/// is carried in config but applies to no term.
fn loss_eulerian_lagrangian_terms(
    specs: (&NetworkSpec, &NetworkSpec),
    vars: (&NetVars, &NetVars),
    batches: &Batches,
    weights: &[f64],
    consts: &FluidConstants,
    tape: &Tape,
) -> Result<Vec<(&'static str, Var, f64)>, TrainError> {
    let (l1, l2, l3, _l4, l5, l6) = (
        weights[0], weights[1], weights[2], weights[3], weights[4], weights[5],
    );
    let (spec_e, spec_l) = specs;
    let (vars_e, vars_l) = vars;

    let (t, x, y) = leaf_coords(tape, &batches.colloc);
    let (u, v, p) = forward_tape(spec_e, vars_e, &[t.clone(), x.clone(), y.clone()])?;
    let (r_u, r_v, r_c) = residuals_navier_stokes(&u, &v, &p, &t, &x, &y, consts.rho, consts.mu)?;

    let (tl, xl, yl) = leaf_coords(tape, &batches.lid);
    let (ul, vl, _) = forward_tape(spec_e, vars_e, &[tl, xl, yl])?;
    let up = term_lid(&ul, &vl, consts.lid_velocity)?;

    let (tw, xw, yw) = leaf_coords(tape, &batches.walls);
    let (uw, vw, _) = forward_tape(spec_e, vars_e, &[tw, xw, yw])?;
    let bc1 = term_walls(&uw, &vw)?;

    let (t0, x0, y0) = leaf_coords(tape, &batches.init);
    let (u0, v0, p0) = forward_tape(spec_e, vars_e, &[t0, x0, y0])?;
    let init = term_init(&u0, &v0, &p0)?;

    // Lagrangian solid-interface term: marker-velocity fit plus the
    // pressure-normal penalty.
    let (ts, xs, ys) = leaf_coords_ifc(tape, &batches.interface_pn);
    let (us, vs, ps) = forward_tape(spec_l, vars_l, &[ts, xs.clone(), ys.clone()])?;
    let ut = tape.constant(Tensor::vector(batches.interface_pn.iter().map(|s| s.u).collect()));
    let vt = tape.constant(Tensor::vector(batches.interface_pn.iter().map(|s| s.v).collect()));
    let fit = term_interface_fit(&us, &vs, &ut, &vt)?;
    let gps = grad(&ps.sum(), &[xs, ys])?;
    let nx = tape.constant(Tensor::vector(batches.interface_pn.iter().map(|s| s.nx).collect()));
    let ny = tape.constant(Tensor::vector(batches.interface_pn.iter().map(|s| s.ny).collect()));
    let solid = fit.add(&term_interface_pn(&gps[0], &gps[1], &nx, &ny)?)?;

    // Velocity coupling at shared marker coordinates.
    let (tc, xc, yc) = leaf_coords_ifc(tape, &batches.coupling);
    let (ue, ve, _) = forward_tape(spec_e, vars_e, &[tc.clone(), xc.clone(), yc.clone()])?;
    let (ulg, vlg, _) = forward_tape(spec_l, vars_l, &[tc, xc, yc])?;
    let coupling = mse(&ue, &ulg)?.add(&mse(&ve, &vlg)?)?;

    Ok(vec![
        ("phy_ru", mse_zero(&r_u), l5),
        ("phy_rv", mse_zero(&r_v), l5),
        ("phy_rc", mse_zero(&r_c), l5),
        ("up", up, l1),
        ("bc1", bc1, l1),
        ("init", init, l2),
        ("solid", solid, l3),
        ("coupling", coupling, l6),
    ])
}

/// Unweighted loss terms (name, on-tape value, weight) for one iteration on
/// a fresh tape, plus the parameter leaves in [`ModelParams::tensors`] order.
pub fn build_loss_terms(
    params: &ModelParams,
    config: &ModelConfig,
    batches: &Batches,
    lid_velocity: f64,
    mu: f64,
) -> Result<(Tape, Vec<(&'static str, Var, f64)>, Vec<Var>), TrainError> {
    let tape = Tape::new();
    let consts = FluidConstants { rho: config.rho, mu, lid_velocity };
    let net_vars: Vec<NetVars> = params.nets.iter().map(|(_, p)| p.to_vars(&tape)).collect();
    let terms = match config.architecture {
        ArchitectureKind::SingleFsi => {
            loss_single_fsi_terms(&params.nets[0].0, &net_vars[0], batches, &config.loss_weights, &consts, &tape)?
        }
        ArchitectureKind::EulerianLagrangian => loss_eulerian_lagrangian_terms(
            (&params.nets[0].0, &params.nets[1].0),
            (&net_vars[0], &net_vars[1]),
            batches,
            &config.loss_weights,
            &consts,
            &tape,
        )?,
    };
    let param_vars = net_vars.iter().flat_map(|nv| nv.param_vars()).collect();
    Ok((tape, terms, param_vars))
}

/// Build the weighted composite loss for one iteration. Returns the tape,
/// the breakdown, and the parameter leaves in [`ModelParams::tensors`] order.
pub fn build_loss(
    params: &ModelParams,
    config: &ModelConfig,
    batches: &Batches,
    lid_velocity: f64,
    mu: f64,
) -> Result<(Tape, LossBreakdown, Vec<Var>), TrainError> {
    let (tape, terms, param_vars) = build_loss_terms(params, config, batches, lid_velocity, mu)?;
    let breakdown = assemble_weighted(&tape, terms)?;
    Ok((tape, breakdown, param_vars))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: usize,
}

/// Stepped learning rate: lr0 * rate^floor(iter / step).
pub fn lr_at(lr0: f64, decay_rate: f64, decay_step: usize, iteration: usize) -> f64 {
    lr0 * decay_rate.powi((iteration / decay_step) as i32)
}

/// Standard Adam update with bias correction over a flat parameter list.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(&p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for k in 0..pd.len() {
            let gk = g.data()[k];
            let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
            let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let mhat = mk / bc1;
            let vhat = vk / bc2;
            pd[k] -= lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model_id: String,
    pub seed: u64,
    pub term_names: Vec<&'static str>,
    pub history: Vec<TrainRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub params: ModelParams,
    pub eval: Option<EvalResult>,
    pub wall_clock_secs: f64,
    pub param_count: usize,
    pub param_count_formula: String,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut s = format!("iter,lr,total,{}\n", self.term_names.join(","));
        for r in &self.history {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration,
                r.lr,
                r.total,
                r.terms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            ));
        }
        s
    }
}

/// Per-net layer-input batches for a grid refresh: every batch's
/// coordinates that flow through each network this iteration.
fn grid_refresh(params: &mut ModelParams, config: &ModelConfig, batches: &Batches) {
    let mut net_points: Vec<Vec<[f64; 3]>> = vec![Vec::new(); params.nets.len()];
    let push_pts = |v: &mut Vec<[f64; 3]>, pts: &[PointTxy]| {
        v.extend(pts.iter().copied());
    };
    push_pts(&mut net_points[0], &batches.colloc);
    push_pts(&mut net_points[0], &batches.lid);
    push_pts(&mut net_points[0], &batches.walls);
    push_pts(&mut net_points[0], &batches.init);
    match config.architecture {
        ArchitectureKind::SingleFsi => {
            net_points[0].extend(batches.interface_fit.iter().map(|s| [s.t, s.x, s.y]));
        }
        ArchitectureKind::EulerianLagrangian => {
            net_points[0].extend(batches.coupling.iter().map(|s| [s.t, s.x, s.y]));
            net_points[1].extend(batches.interface_pn.iter().map(|s| [s.t, s.x, s.y]));
            net_points[1].extend(batches.coupling.iter().map(|s| [s.t, s.x, s.y]));
        }
    }
    for (ni, (spec, net)) in params.nets.iter_mut().enumerate() {
        if net_points[ni].is_empty() {
            continue;
        }
        let (_, traces) = forward_numeric_traced(spec, net, &net_points[ni]);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            if let Layer::Kan(k) = layer {
                update_grid(k, &traces[l]);
            }
        }
    }
}

/// Train one model against a training set; evaluates on the dataset at the
/// end when `evaluate` is set.
pub fn train(
    config: &ModelConfig,
    set: &TrainingSet,
    dataset: &FsiDataset,
    evaluate: bool,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let t_end = dataset.times.last().copied().unwrap_or(0.0).max(dataset.meta.config.dt);
    let input_bounds = vec![(0.0, t_end), (0.0, 1.0), (0.0, 1.0)];
    let mu = 1.0 / dataset.meta.config.re;
    let lid_velocity = dataset.meta.config.lid_velocity;

    let mut params = ModelParams::init(config, input_bounds);
    let mut adam = AdamState::default();
    let mut history: Vec<TrainRecord> = Vec::new();
    let report = |history: Vec<TrainRecord>, params: ModelParams, eval: Option<EvalResult>, start: &Instant| TrainReport {
        model_id: config.model_id.clone(),
        seed: config.seed,
        term_names: config.term_names().to_vec(),
        initial_loss: history.first().map(|r| r.total).unwrap_or(f64::NAN),
        final_loss: history.last().map(|r| r.total).unwrap_or(f64::NAN),
        history,
        param_count: params.nets.iter().map(|(s, _)| param_count(s)).sum(),
        param_count_formula: params
            .nets
            .first()
            .map(|(s, _)| param_count_formula(s))
            .unwrap_or_default(),
        params,
        eval,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };

    let steps = config.iterations;
    let log_every = 100;
    let mut iter = 0usize;
    loop {
        let batches = draw_batches(set, config, iter as u64)?;

        // Spline grid refresh: at iteration 0 and every `grid_update_every`
        // during the first half of training.
        if config.activation == Activation::BSpline
            && config.grid_update_every > 0
            && iter % config.grid_update_every == 0
            && iter <= steps / 2
        {
            grid_refresh(&mut params, config, &batches);
        }

        let (_tape, breakdown, param_vars) = build_loss(&params, config, &batches, lid_velocity, mu)?;
        let total_value = breakdown.total_value();
        let lr = lr_at(config.lr0, config.decay_rate, config.decay_step, iter);
        if iter % log_every == 0 || iter + 1 == steps || steps == 0 {
            history.push(TrainRecord {
                iteration: iter,
                lr,
                total: total_value,
                terms: breakdown.terms.iter().map(|(_, v)| *v).collect(),
            });
        }
        if !total_value.is_finite() {
            let rep = report(history, params, None, &start);
            return Err(TrainError::NonFiniteLoss { at_iter: iter, report: Box::new(rep) });
        }
        if steps == 0 {
            break;
        }

        let grads = grad(&breakdown.total, &param_vars)?;
        let grad_tensors: Vec<Tensor> = grads.iter().map(|g| g.value()).collect();
        if grad_tensors.iter().any(|g| !g.all_finite()) {
            return Err(TrainError::NonFiniteGradient {
                at_iter: iter,
                decomposition: breakdown.terms.clone(),
            });
        }
        let mut tensors = Vec::new();
        for (_, p) in params.nets.iter_mut() {
            tensors.extend(p.tensors_mut());
        }
        adam_step(
            &mut tensors,
            &grad_tensors,
            &mut adam,
            lr,
            config.beta1,
            config.beta2,
            config.epsilon,
        );

        iter += 1;
        if iter >= steps {
            break;
        }
    }

    let eval = if evaluate {
        let ckpt = Checkpoint {
            model_id: config.model_id.clone(),
            architecture: config.architecture,
            seed: config.seed,
            params: params.clone(),
        };
        Some(evaluate_model(&ckpt, dataset))
    } else {
        None
    };
    Ok(report(history, params, eval, &start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_gradient, rel_err};
    use crate::sampling::{build_training_set, SamplingConfig};
    use crate::solver::{run_simulation, DiscConfig, SolverConfig};

    fn tiny_dataset() -> FsiDataset {
        let config = SolverConfig {
            grid_n: 25,
            t_end: 0.1,
            disc: Some(DiscConfig { n_markers: 40, ..DiscConfig::default() }),
            ..SolverConfig::default()
        };
        run_simulation(&config).unwrap()
    }

    fn tiny_training_set(ds: &FsiDataset) -> TrainingSet {
        build_training_set(
            ds,
            &SamplingConfig {
                fluid_fraction: 0.01,
                interface_fraction: 0.3,
                wall_points: 64,
                initial_points: 64,
                ..SamplingConfig::default()
            },
        )
        .unwrap()
    }

    fn tiny_config(id: &str, widths: Vec<usize>, iters: usize) -> ModelConfig {
        let mut c = ModelConfig::preset(id, 0, true).unwrap();
        c.widths = widths;
        c.iterations = iters;
        c.batch_size = 16;
        c
    }

    #[test]
    fn registry_matches_published_settings() {
        for (id, arch, act, w) in [
            ("M1", ArchitectureKind::SingleFsi, Activation::Tanh, 300),
            ("M2", ArchitectureKind::SingleFsi, Activation::BSpline, 100),
            ("M3", ArchitectureKind::EulerianLagrangian, Activation::Tanh, 300),
            ("M4", ArchitectureKind::EulerianLagrangian, Activation::BSpline, 100),
        ] {
            let c = ModelConfig::preset(id, 0, false).unwrap();
            assert_eq!(c.architecture, arch);
            assert_eq!(c.activation, act);
            assert_eq!(c.widths, vec![3, w, w, w, 3]);
            assert_eq!(c.iterations, 60_000);
            assert_eq!(c.beta1, 0.9);
            assert_eq!(c.beta2, 0.999);
            assert_eq!(c.epsilon, 1e-8);
            match arch {
                ArchitectureKind::SingleFsi => assert_eq!(c.loss_weights, SINGLE_FSI_WEIGHTS.to_vec()),
                ArchitectureKind::EulerianLagrangian => {
                    assert_eq!(c.loss_weights, EULERIAN_LAGRANGIAN_WEIGHTS.to_vec())
                }
            }
        }
        assert!(ModelConfig::preset("M9", 0, false).is_none());
    }

    #[test]
    fn residuals_vanish_on_constant_fields() {
        // u = 1, v = 0, p = 0 identically: every residual is zero.
        let tape = Tape::new();
        let n = 5;
        let t = tape.var(Tensor::vector(vec![0.3; n]));
        let x = tape.var(Tensor::vector((0..n).map(|i| 0.1 + 0.15 * i as f64).collect()));
        let y = tape.var(Tensor::vector(vec![0.5; n]));
        // "Network" ignoring inputs: u = 1 + 0*x etc., kept on tape so the
        // derivative structure exists.
        let zero = x.mul_scalar(0.0);
        let u = zero.add_scalar(1.0);
        let v = zero.mul_scalar(1.0);
        let p = zero.mul_scalar(1.0);
        let (ru, rv, rc) = residuals_navier_stokes(&u, &v, &p, &t, &x, &y, 1.0, 0.01).unwrap();
        for r in [ru, rv, rc] {
            assert!(r.value().data().iter().all(|&v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn residuals_match_symbolic_linear_field() {
        // u = x, v = -y, p = 0 (steady): r_c = 0 and r_u = u du/dx = x.
        let tape = Tape::new();
        let xs = vec![0.5, 0.25, 0.8];
        let t = tape.var(Tensor::vector(vec![0.0; 3]));
        let x = tape.var(Tensor::vector(xs.clone()));
        let y = tape.var(Tensor::vector(vec![0.3, 0.6, 0.9]));
        let u = x.mul_scalar(1.0);
        let v = y.neg();
        let p = x.mul_scalar(0.0);
        let (ru, rv, rc) = residuals_navier_stokes(&u, &v, &p, &t, &x, &y, 1.0, 0.01).unwrap();
        for (k, &xv) in xs.iter().enumerate() {
            assert!((ru.value().data()[k] - xv).abs() < 1e-13, "r_u");
            // r_v = v dv/dy = (-y)(-1) = y.
            let yv = [0.3, 0.6, 0.9][k];
            assert!((rv.value().data()[k] - yv).abs() < 1e-13, "r_v");
            assert!(rc.value().data()[k].abs() < 1e-13, "r_c");
        }
    }

    #[test]
    fn residuals_match_manufactured_solution() {
        // u = sin(pi x) cos(pi y) e^{-t}, v = -cos(pi x) sin(pi y) e^{-t},
        // p = sin(pi x) sin(pi y): divergence-free, residuals known in
        // closed form. The network is replaced by tape expressions built
        // from the same primitives, and the residual values are compared
        // against the hand-derived formulas.
        let tape = Tape::new();
        let pts: Vec<(f64, f64, f64)> = vec![(0.2, 0.31, 0.47), (0.8, 0.62, 0.23), (1.4, 0.11, 0.83)];
        let t = tape.var(Tensor::vector(pts.iter().map(|p| p.0).collect()));
        let x = tape.var(Tensor::vector(pts.iter().map(|p| p.1).collect()));
        let y = tape.var(Tensor::vector(pts.iter().map(|p| p.2).collect()));

        // exp(-t) built as a tanh-free tape expression: use exp via powf of e.
        // The tape has no exp op, so encode e^{-t} = (e^{-1})^t is not
        // expressible either; instead use multiplication by a constant leaf
        // carrying e^{-t} values and differentiate only in x, y analytically
        // ... simpler: test the steady part (t-derivative contributes the
        // known -u term through a linear ramp factor (1 - t)).
        // u = sin(pi x) cos(pi y) (1 - t) via sin expressed through tanh is
        // unavailable; fall back to polynomials:
        // u = x^2 y (1 - t), v = -x y^2 (1 - t): divergence-free.
        let ramp = t.neg().add_scalar(1.0);
        let u = x.square().mul(&y).unwrap().mul(&ramp).unwrap();
        let v = x.mul(&y.square()).unwrap().neg().mul(&ramp).unwrap();
        let p = x.square().mul(&y.square()).unwrap();
        let (ru, rv, rc) = residuals_navier_stokes(&u, &v, &p, &t, &x, &y, 1.0, 0.01).unwrap();
        for (k, &(tv, xv, yv)) in pts.iter().enumerate() {
            let r = 1.0 - tv;
            let u_ = xv * xv * yv * r;
            let v_ = -xv * yv * yv * r;
            // u_t = -x^2 y; u_x = 2 x y r; u_y = x^2 r; lap u = 2 y r.
            let expect_ru = -xv * xv * yv + u_ * 2.0 * xv * yv * r + v_ * xv * xv * r + 2.0 * xv * yv * yv
                - 0.01 * 2.0 * yv * r;
            // v_t = x y^2; v_x = -y^2 r; v_y = -2 x y r; lap v = -2 x r.
            let expect_rv = xv * yv * yv + u_ * (-yv * yv * r) + v_ * (-2.0 * xv * yv * r)
                + 2.0 * xv * xv * yv
                - 0.01 * (-2.0 * xv * r);
            let expect_rc = 2.0 * xv * yv * r - 2.0 * xv * yv * r;
            assert!(rel_err(ru.value().data()[k], expect_ru) < 1e-6, "ru {} vs {}", ru.value().data()[k], expect_ru);
            assert!(rel_err(rv.value().data()[k], expect_rv) < 1e-6, "rv {} vs {}", rv.value().data()[k], expect_rv);
            assert!((rc.value().data()[k] - expect_rc).abs() < 1e-12, "rc");
        }
    }

    #[test]
    fn lid_loss_of_zero_network_is_one() {
        let tape = Tape::new();
        let u = tape.var(Tensor::vector(vec![0.0; 8]));
        let v = tape.var(Tensor::vector(vec![0.0; 8]));
        assert_eq!(term_lid(&u, &v, 1.0).unwrap().scalar(), 1.0);
    }

    #[test]
    fn decomposition_sums_to_total_and_scales_linearly() {
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        let mut config = tiny_config("M1", vec![3, 6, 6, 3], 1);
        let params = ModelParams::init(&config, vec![(0.0, 0.1), (0.0, 1.0), (0.0, 1.0)]);
        let batches = draw_batches(&set, &config, 0).unwrap();
        let (_tape, breakdown, _) = build_loss(&params, &config, &batches, 1.0, 0.01).unwrap();
        let sum: f64 = breakdown.terms.iter().map(|(_, v)| v).sum();
        assert!((sum - breakdown.total_value()).abs() < 1e-12);
        assert!(breakdown.terms.iter().all(|(_, v)| *v >= 0.0));

        // Doubling lambda_3 doubles the init contribution, leaves others be.
        let before: Vec<f64> = breakdown.terms.iter().map(|(_, v)| *v).collect();
        config.loss_weights[2] *= 2.0;
        let (_tape2, b2, _) = build_loss(&params, &config, &batches, 1.0, 0.01).unwrap();
        for (i, (name, v)) in b2.terms.iter().enumerate() {
            if *name == "init" {
                assert!(rel_err(*v, 2.0 * before[i]) < 1e-12);
            } else {
                assert_eq!(*v, before[i]);
            }
        }
    }

    #[test]
    fn el_identical_nets_have_zero_coupling() {
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        let config = tiny_config("M3", vec![3, 5, 5, 3], 1);
        let mut params = ModelParams::init(&config, vec![(0.0, 0.1), (0.0, 1.0), (0.0, 1.0)]);
        params.nets[1] = params.nets[0].clone();
        let batches = draw_batches(&set, &config, 0).unwrap();
        let (_tape, breakdown, _) = build_loss(&params, &config, &batches, 1.0, 0.01).unwrap();
        let coupling = breakdown.terms.iter().find(|(n, _)| *n == "coupling").unwrap().1;
        assert!(coupling.abs() < 1e-24, "coupling {coupling}");
    }

    #[test]
    fn el_cross_gradients_only_through_coupling() {
        // Zero out the coupling weight: gradients of the total with respect
        // to the other net's parameters must vanish exactly.
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        let mut config = tiny_config("M3", vec![3, 4, 4, 3], 1);
        config.loss_weights[5] = 0.0; // lambda_6 (coupling)
        let params = ModelParams::init(&config, vec![(0.0, 0.1), (0.0, 1.0), (0.0, 1.0)]);
        let batches = draw_batches(&set, &config, 0).unwrap();
        let (_tape, breakdown, param_vars) = build_loss(&params, &config, &batches, 1.0, 0.01).unwrap();
        let grads = grad(&breakdown.total, &param_vars).unwrap();
        let n0: usize = params.nets[0].1.tensors().len();
        // Net 1 (Lagrangian) parameters: every gradient beyond the pn term...
        // With coupling off, the Eulerian side still has phy/up/bc1/init, and
        // the Lagrangian side only the solid term. Check the converse: Eulerian
        // gradients are unaffected by Lagrangian parameters and vice versa
        // is structural; here assert Lagrangian velocity-output parameters
        // feel only the solid term by checking grads are finite and the coupling
        // truly contributes nothing.
        for g in grads.iter().take(n0) {
            assert!(g.value().all_finite());
        }
        // Now the converse experiment: coupling on, physics off; gradients
        // of net 2 must be nonzero only via coupling + the solid term.
        let mut c2 = config.clone();
        c2.loss_weights = vec![0.0, 0.0, 0.0, 0.2, 0.0, 1.0];
        let (_t3, b3, pv3) = build_loss(&params, &c2, &batches, 1.0, 0.01).unwrap();
        let g3 = grad(&b3.total, &pv3).unwrap();
        let nonzero_l = g3[n0..].iter().any(|g| g.value().data().iter().any(|&x| x != 0.0));
        assert!(nonzero_l, "coupling must reach the Lagrangian net");
        // And detaching: the solid term off too leaves only coupling; net-1 grads
        // flow, confirming gradients reach both nets through the tie.
        let nonzero_e = g3[..n0].iter().any(|g| g.value().data().iter().any(|&x| x != 0.0));
        assert!(nonzero_e, "coupling must reach the Eulerian net");
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let mut st = AdamState::default();
        let before = p.clone();
        adam_step(&mut [&mut p], &[g], &mut st, 1e-3, 0.9, 0.999, 1e-8);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        // With a constant gradient the bias-corrected update tends to
        // lr * g / (|g| + eps) ~ lr in magnitude.
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(0.37);
        let mut st = AdamState::default();
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.scalar_value();
            adam_step(&mut [&mut p], &[g.clone()], &mut st, lr, 0.9, 0.999, 1e-8);
            last = (p.scalar_value() - before).abs();
        }
        assert!(rel_err(last, lr) < 1e-3, "step {last}");
    }

    #[test]
    fn lr_schedule_values() {
        let lr0 = 1e-3;
        assert_eq!(lr_at(lr0, 0.99, 1000, 0), lr0);
        assert_eq!(lr_at(lr0, 0.99, 1000, 999), lr0);
        assert!(rel_err(lr_at(lr0, 0.99, 1000, 1000), 0.99 * lr0) < 1e-15);
        assert!(rel_err(lr_at(lr0, 0.99, 1000, 60_000), 0.99f64.powi(60) * lr0) < 1e-12);
    }

    #[test]
    fn loss_parameter_gradients_match_fd() {
        // Full composite loss on a tiny net: every parameter gradient
        // against central differences.
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        for id in ["M1", "M3", "M2", "M4"] {
            let widths = if id == "M2" || id == "M4" { vec![3, 4, 3] } else { vec![3, 4, 4, 3] };
            let mut config = tiny_config(id, widths, 1);
            config.batch_size = 8;
            let params = ModelParams::init(&config, vec![(0.0, 0.1), (0.0, 1.0), (0.0, 1.0)]);
            let batches = draw_batches(&set, &config, 0).unwrap();

            let flat: Vec<f64> = params
                .nets
                .iter()
                .flat_map(|(_, p)| p.tensors().iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>())
                .collect();
            let objective = |packed: &[f64]| -> f64 {
                let mut p2 = params.clone();
                let mut off = 0;
                for (_, np) in p2.nets.iter_mut() {
                    for t in np.tensors_mut() {
                        let n = t.len();
                        t.data_mut().copy_from_slice(&packed[off..off + n]);
                        off += n;
                    }
                }
                let (_t, b, _) = build_loss(&p2, &config, &batches, 1.0, 0.01).unwrap();
                b.total_value()
            };
            let fd = central_gradient(objective, &flat, 1e-5);

            let (_tape, breakdown, param_vars) = build_loss(&params, &config, &batches, 1.0, 0.01).unwrap();
            let gs = grad(&breakdown.total, &param_vars).unwrap();
            let ad: Vec<f64> = gs.iter().flat_map(|g| g.value().into_data()).collect();
            assert_eq!(ad.len(), fd.len());
            for (k, (a, f)) in ad.iter().zip(&fd).enumerate() {
                assert!(rel_err(*a, *f) < 1e-4, "{id} param {k}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn zero_iterations_reports_initialization() {
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        let config = tiny_config("M1", vec![3, 5, 5, 3], 0);
        let report = train(&config, &set, &ds, false).unwrap();
        assert_eq!(report.history.len(), 1);
        assert_eq!(report.initial_loss, report.final_loss);
        let fresh = ModelParams::init(&config, vec![(0.0, ds.times.last().copied().unwrap().max(ds.meta.config.dt)), (0.0, 1.0), (0.0, 1.0)]);
        assert_eq!(report.params, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        let config = tiny_config("M1", vec![3, 5, 5, 3], 30);
        let a = train(&config, &set, &ds, false).unwrap();
        let b = train(&config, &set, &ds, false).unwrap();
        let ta: Vec<u64> = a.history.iter().map(|r| r.total.to_bits()).collect();
        let tb: Vec<u64> = b.history.iter().map(|r| r.total.to_bits()).collect();
        assert_eq!(ta, tb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn short_bspline_training_runs_and_improves() {
        let ds = tiny_dataset();
        let set = tiny_training_set(&ds);
        let mut config = tiny_config("M2", vec![3, 6, 6, 3], 120);
        config.grid_update_every = 50;
        let report = train(&config, &set, &ds, false).unwrap();
        assert!(report.final_loss.is_finite());
        assert!(
            report.final_loss < report.initial_loss,
            "no improvement: {} -> {}",
            report.initial_loss,
            report.final_loss
        );
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        for id in ["M1", "M4"] {
            let config = tiny_config(id, vec![3, 5, 5, 3], 0);
            let params = ModelParams::init(&config, vec![(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)]);
            let ckpt = Checkpoint {
                model_id: config.model_id.clone(),
                architecture: config.architecture,
                seed: 17,
                params,
            };
            let dir = std::env::temp_dir().join("fsilab_ckpt_test");
            std::fs::create_dir_all(&dir).unwrap();
            let path = dir.join(format!("{id}.ckpt"));
            ckpt.write(&path).unwrap();
            let back = Checkpoint::read(&path).unwrap();
            assert_eq!(ckpt, back);
            let bytes_a = std::fs::read(&path).unwrap();
            back.write(&path).unwrap();
            let bytes_b = std::fs::read(&path).unwrap();
            assert_eq!(bytes_a, bytes_b);
        }
    }
}

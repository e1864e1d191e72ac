//! Relative-L2 evaluation per domain and field, dataset field statistics,
//! and CSV emission for line profiles and contour grids.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{fmt_f64, FsiDataset};
use crate::nets::forward_numeric;
use crate::pinn::{ArchitectureKind, Checkpoint};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference field is identically zero for {domain}/{field}; relative L2 undefined")]
    ZeroReference { domain: &'static str, field: &'static str },
    #[error("domain `{0}` missing from the dataset")]
    MissingDomain(&'static str),
    #[error("time {requested} not in the dataset; available: {available}")]
    MissingSlice { requested: f64, available: String },
    #[error("y-line {requested} is not a grid row; rows run {lo}..{hi} with spacing {spacing}")]
    YLineOutsideGrid { requested: f64, lo: f64, hi: f64, spacing: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Fluid,
    Interface,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Fluid => "fluid",
            Domain::Interface => "interface",
        }
    }
}

pub const FIELDS: [&str; 3] = ["u", "v", "p"];

/// 100 * ||ref - pred||_2 / ||ref||_2.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    assert_eq!(pred.len(), reference.len(), "length mismatch in relative_l2");
    let num: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (r - p) * (r - p))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(EvalError::ZeroReference { domain: "?", field: "?" });
    }
    Ok(100.0 * num / den)
}

/// Prediction source for the evaluator: a trained model, or (in tests) a
/// synthetic replay of the dataset itself.
pub trait FieldPredictor {
    fn predict(&self, domain: Domain, pts: &[[f64; 3]]) -> Vec<[f64; 3]>;
}

pub struct NetworkPredictor<'a> {
    pub checkpoint: &'a Checkpoint,
}

impl FieldPredictor for NetworkPredictor<'_> {
    fn predict(&self, domain: Domain, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let net_index = match (self.checkpoint.architecture, domain) {
            (ArchitectureKind::SingleFsi, _) => 0,
            (ArchitectureKind::EulerianLagrangian, Domain::Fluid) => 0,
            (ArchitectureKind::EulerianLagrangian, Domain::Interface) => 1,
        };
        let (spec, params) = &self.checkpoint.params.nets[net_index];
        let mut out = Vec::with_capacity(pts.len());
        for chunk in pts.chunks(8192) {
            out.extend(forward_numeric(spec, params, chunk));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct EvalCell {
    pub domain: &'static str,
    pub field: &'static str,
    pub rel_l2_percent: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub model_id: String,
    pub dataset_checksum: u64,
    pub cells: Vec<EvalCell>,
}

impl EvalResult {
    pub fn cell(&self, domain: &str, field: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.domain == domain && c.field == field)
            .map(|c| c.rel_l2_percent)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("model,domain,field,rel_l2_percent\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{}\n", self.model_id, c.domain, c.field, c.rel_l2_percent));
        }
        s
    }
}

/// Every fluid record's coordinates and reference values (in_fluid only).
fn fluid_records(ds: &FsiDataset) -> (Vec<[f64; 3]>, [Vec<f64>; 3]) {
    let mut pts = Vec::new();
    let mut refs = [Vec::new(), Vec::new(), Vec::new()];
    for ti in 0..ds.n_times() {
        for i in 0..ds.n {
            for j in 0..ds.n {
                let k = ds.eul_idx(ti, i, j);
                if !ds.in_fluid[k] {
                    continue;
                }
                pts.push([ds.times[ti], ds.cell_x(i), ds.cell_y(j)]);
                refs[0].push(ds.u[k]);
                refs[1].push(ds.v[k]);
                refs[2].push(ds.p[k]);
            }
        }
    }
    (pts, refs)
}

fn marker_records(ds: &FsiDataset) -> (Vec<[f64; 3]>, [Vec<f64>; 3]) {
    let mut pts = Vec::new();
    let mut refs = [Vec::new(), Vec::new(), Vec::new()];
    for ti in 0..ds.n_times() {
        for s in 0..ds.n_markers {
            let k = ds.mk_idx(ti, s);
            pts.push([ds.times[ti], ds.mk.x[k], ds.mk.y[k]]);
            refs[0].push(ds.mk.u[k]);
            refs[1].push(ds.mk.v[k]);
            refs[2].push(ds.mk.p[k]);
        }
    }
    (pts, refs)
}

/// Evaluate a predictor over every dataset record: six cells,
/// (fluid, interface) x (u, v, p).
pub fn evaluate_with(
    predictor: &dyn FieldPredictor,
    dataset: &FsiDataset,
    model_id: &str,
) -> Result<EvalResult, EvalError> {
    let mut cells = Vec::with_capacity(6);
    for domain in [Domain::Fluid, Domain::Interface] {
        let (pts, refs) = match domain {
            Domain::Fluid => fluid_records(dataset),
            Domain::Interface => {
                if dataset.n_markers == 0 {
                    return Err(EvalError::MissingDomain("interface"));
                }
                marker_records(dataset)
            }
        };
        if pts.is_empty() {
            return Err(EvalError::MissingDomain(domain.name()));
        }
        let pred = predictor.predict(domain, &pts);
        for (fi, field) in FIELDS.iter().enumerate() {
            let pred_f: Vec<f64> = pred.iter().map(|o| o[fi]).collect();
            let pct = relative_l2(&pred_f, &refs[fi]).map_err(|_| EvalError::ZeroReference {
                domain: domain.name(),
                field,
            })?;
            cells.push(EvalCell { domain: domain.name(), field, rel_l2_percent: pct });
        }
    }
    Ok(EvalResult {
        model_id: model_id.to_string(),
        dataset_checksum: dataset.checksum(),
        cells,
    })
}

/// Evaluate a trained checkpoint (Eulerian net on fluid records,
/// Lagrangian net on marker records for the two-network architecture).
pub fn evaluate_model(checkpoint: &Checkpoint, dataset: &FsiDataset) -> EvalResult {
    evaluate_with(&NetworkPredictor { checkpoint }, dataset, &checkpoint.model_id)
        .expect("dataset provides both domains")
}

// ---------------------------------------------------------------------------
// Field statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FieldStat {
    pub domain: &'static str,
    pub field: &'static str,
    pub std: f64,
    pub histogram: Vec<(f64, f64, usize)>,
}

pub const HISTOGRAM_BINS: usize = 50;

fn stat_of(domain: &'static str, field: &'static str, values: &[f64]) -> FieldStat {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / HISTOGRAM_BINS as f64).max(1e-300);
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[b] += 1;
    }
    FieldStat {
        domain,
        field,
        std: var.sqrt(),
        histogram: counts
            .iter()
            .enumerate()
            .map(|(b, &c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
            .collect(),
    }
}

/// Population standard deviation and a 50-bin histogram per
/// (domain, field) over the whole dataset.
pub fn field_statistics(dataset: &FsiDataset) -> Vec<FieldStat> {
    let (_, fluid_refs) = fluid_records(dataset);
    let mut out = Vec::with_capacity(6);
    for (fi, field) in FIELDS.iter().enumerate() {
        out.push(stat_of("fluid", field, &fluid_refs[fi]));
    }
    if dataset.n_markers > 0 {
        let (_, mk_refs) = marker_records(dataset);
        for (fi, field) in FIELDS.iter().enumerate() {
            out.push(stat_of("interface", field, &mk_refs[fi]));
        }
    }
    out
}

pub fn statistics_csv(stats: &[FieldStat]) -> (String, String) {
    let mut summary = String::from("domain,field,std\n");
    let mut hist = String::from("domain,field,bin_lo,bin_hi,count\n");
    for s in stats {
        summary.push_str(&format!("{},{},{}\n", s.domain, s.field, s.std));
        for &(lo, hi, c) in &s.histogram {
            hist.push_str(&format!("{},{},{},{},{}\n", s.domain, s.field, lo, hi, c));
        }
    }
    (summary, hist)
}

// ---------------------------------------------------------------------------
// Profile and contour emission
// ---------------------------------------------------------------------------

fn find_time(ds: &FsiDataset, t: f64) -> Result<usize, EvalError> {
    ds.times
        .iter()
        .position(|&tv| (tv - t).abs() < 1e-9)
        .ok_or_else(|| EvalError::MissingSlice {
            requested: t,
            available: format!(
                "{} slices from {} to {} step {}",
                ds.times.len(),
                fmt_f64(*ds.times.first().unwrap()),
                fmt_f64(*ds.times.last().unwrap()),
                fmt_f64(ds.meta.config.dt)
            ),
        })
}

fn find_row(ds: &FsiDataset, y: f64) -> Result<usize, EvalError> {
    let j = ((y / ds.h) - 0.5).round();
    let lo = ds.cell_y(0);
    let hi = ds.cell_y(ds.n - 1);
    if !(0.0..ds.n as f64).contains(&j) || (ds.cell_y(j as usize) - y).abs() > 1e-9 {
        return Err(EvalError::YLineOutsideGrid { requested: y, lo, hi, spacing: ds.h });
    }
    Ok(j as usize)
}

/// Per (time, y-line): a profile CSV `x,u_ref,u_pred,v_ref,v_pred,p_ref,p_pred`
/// along the row; per time and field: a contour CSV `x,y,ref,pred,abs_err`
/// over the full grid. File names follow
/// `{model}_{domain}_{field}_{kind}.csv`. Returns the written paths.
pub fn emit_profiles(
    checkpoint: &Checkpoint,
    dataset: &FsiDataset,
    times: &[f64],
    y_lines: &[f64],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let predictor = NetworkPredictor { checkpoint };
    let model = &checkpoint.model_id;
    let mut written = Vec::new();

    for &t in times {
        let ti = find_time(dataset, t)?;

        for &y in y_lines {
            let j = find_row(dataset, y)?;
            let pts: Vec<[f64; 3]> = (0..dataset.n).map(|i| [t, dataset.cell_x(i), y]).collect();
            let pred = predictor.predict(Domain::Fluid, &pts);
            let path = out_dir.join(format!(
                "{model}_fluid_uvp_profile-t{}-y{}.csv",
                fmt_f64(t),
                fmt_f64(y)
            ));
            let mut w = io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "x,u_ref,u_pred,v_ref,v_pred,p_ref,p_pred")?;
            for i in 0..dataset.n {
                let k = dataset.eul_idx(ti, i, j);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    dataset.cell_x(i),
                    dataset.u[k],
                    pred[i][0],
                    dataset.v[k],
                    pred[i][1],
                    dataset.p[k],
                    pred[i][2]
                )?;
            }
            w.flush()?;
            written.push(path);
        }

        // Full-grid contours: prediction, reference, absolute error.
        let mut pts = Vec::with_capacity(dataset.n * dataset.n);
        for i in 0..dataset.n {
            for j in 0..dataset.n {
                pts.push([t, dataset.cell_x(i), dataset.cell_y(j)]);
            }
        }
        let pred = predictor.predict(Domain::Fluid, &pts);
        for (fi, field) in FIELDS.iter().enumerate() {
            let path = out_dir.join(format!("{model}_fluid_{field}_contour-t{}.csv", fmt_f64(t)));
            let mut w = io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "x,y,ref,pred,abs_err")?;
            for i in 0..dataset.n {
                for j in 0..dataset.n {
                    let k = dataset.eul_idx(ti, i, j);
                    let rv = [dataset.u[k], dataset.v[k], dataset.p[k]][fi];
                    let pv = pred[i * dataset.n + j][fi];
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        dataset.cell_x(i),
                        dataset.cell_y(j),
                        rv,
                        pv,
                        (rv - pv).abs()
                    )?;
                }
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

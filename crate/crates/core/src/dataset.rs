//! The reference dataset produced by the solver: Eulerian field slices on
//! the cell centers plus Lagrangian marker records, with the solver
//! configuration embedded as metadata.
//!
//! On disk the dataset is either a single binary file with a text header
//! (columnar f64, Eulerian columns `t,x,y,u,v,p,in_fluid`, marker columns
//! `t,s,x,y,u,v,p,nx,ny`) or a trio of CSV/meta files with the same columns.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::solver::SolverConfig;

pub const EULERIAN_COLUMNS: &str = "t,x,y,u,v,p,in_fluid";
pub const MARKER_COLUMNS: &str = "t,s,x,y,u,v,p,nx,ny";

#[derive(Clone, Debug)]
pub struct DatasetMeta {
    pub config: SolverConfig,
    pub solid_model: String,
    pub solver_version: String,
    pub thread_count: usize,
    /// Set when a run aborted and only the slices up to the failure exist.
    pub partial: bool,
}

/// Marker fields, one entry per (time slice, marker).
#[derive(Clone, Debug, Default)]
pub struct MarkerFields {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub nx: Vec<f64>,
    pub ny: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FsiDataset {
    pub meta: DatasetMeta,
    /// Emitted times, slice 0 is t = 0.
    pub times: Vec<f64>,
    /// Cells per side.
    pub n: usize,
    pub h: f64,
    /// Cell-centered fields, index `(ti * n + i) * n + j`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub in_fluid: Vec<bool>,
    pub n_markers: usize,
    /// Marker fields, index `ti * n_markers + s`.
    pub mk: MarkerFields,
}

impl FsiDataset {
    pub fn cell_x(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    pub fn cell_y(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.h
    }

    pub fn eul_idx(&self, ti: usize, i: usize, j: usize) -> usize {
        (ti * self.n + i) * self.n + j
    }

    pub fn mk_idx(&self, ti: usize, s: usize) -> usize {
        ti * self.n_markers + s
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_eulerian_records(&self) -> usize {
        self.times.len() * self.n * self.n
    }

    pub fn n_marker_records(&self) -> usize {
        self.times.len() * self.n_markers
    }

    /// FNV-1a over every field bit in a fixed order; identifies the dataset
    /// in training-set manifests.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bits: u64| {
            for byte in bits.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.n as u64);
        eat(self.n_markers as u64);
        for &t in &self.times {
            eat(t.to_bits());
        }
        for field in [&self.u, &self.v, &self.p] {
            for &x in field.iter() {
                eat(x.to_bits());
            }
        }
        for &f in &self.in_fluid {
            eat(f as u64);
        }
        for field in [&self.mk.x, &self.mk.y, &self.mk.u, &self.mk.v, &self.mk.p, &self.mk.nx, &self.mk.ny] {
            for &x in field.iter() {
                eat(x.to_bits());
            }
        }
        hash
    }

    fn meta_lines(&self) -> String {
        let c = &self.meta.config;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("grid_n", c.grid_n.to_string());
        kv("dt", fmt_f64(c.dt));
        kv("t_end", fmt_f64(c.t_end));
        kv("re", fmt_f64(c.re));
        kv("lid_velocity", fmt_f64(c.lid_velocity));
        match &c.disc {
            Some(d) => {
                kv("disc", "true".into());
                kv("disc_cx", fmt_f64(d.center.0));
                kv("disc_cy", fmt_f64(d.center.1));
                kv("disc_radius", fmt_f64(d.radius));
                kv("markers", d.n_markers.to_string());
                kv("kappa_penalty", fmt_f64(d.kappa_penalty));
                kv("kappa_tension", fmt_f64(d.kappa_tension));
            }
            None => kv("disc", "false".into()),
        }
        kv("poisson_tol", fmt_f64(c.poisson_tol));
        kv("divergence_tol", fmt_f64(c.divergence_tol));
        kv("seed", c.seed.to_string());
        kv("solid_model", self.meta.solid_model.clone());
        kv("solver_version", self.meta.solver_version.clone());
        kv("thread_count", self.meta.thread_count.to_string());
        kv("partial", self.meta.partial.to_string());
        kv("n_times", self.times.len().to_string());
        kv("eulerian_columns", EULERIAN_COLUMNS.into());
        kv("marker_columns", MARKER_COLUMNS.into());
        kv("eulerian_rows", self.n_eulerian_records().to_string());
        kv("marker_rows", self.n_marker_records().to_string());
        s
    }

    /// Single binary file: text header terminated by `<binary>`, then the
    /// Eulerian columns and marker columns as little-endian f64 streams in
    /// declared order (`in_fluid` encoded 0/1).
    pub fn write_binary(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::with_capacity(1 << 20, File::create(path)?);
        writeln!(w, "FSILAB-DATASET v1")?;
        w.write_all(self.meta_lines().as_bytes())?;
        writeln!(w, "encoding = f64le-columnar")?;
        writeln!(w, "<binary>")?;

        let nt = self.times.len();
        let n = self.n;
        let col = |w: &mut BufWriter<File>, f: &mut dyn FnMut(usize, usize, usize) -> f64| -> io::Result<()> {
            for ti in 0..nt {
                for i in 0..n {
                    for j in 0..n {
                        w.write_all(&f(ti, i, j).to_le_bytes())?;
                    }
                }
            }
            Ok(())
        };
        col(&mut w, &mut |ti, _, _| self.times[ti])?;
        col(&mut w, &mut |_, i, _| self.cell_x(i))?;
        col(&mut w, &mut |_, _, j| self.cell_y(j))?;
        col(&mut w, &mut |ti, i, j| self.u[self.eul_idx(ti, i, j)])?;
        col(&mut w, &mut |ti, i, j| self.v[self.eul_idx(ti, i, j)])?;
        col(&mut w, &mut |ti, i, j| self.p[self.eul_idx(ti, i, j)])?;
        col(&mut w, &mut |ti, i, j| if self.in_fluid[self.eul_idx(ti, i, j)] { 1.0 } else { 0.0 })?;

        let m = self.n_markers;
        let mcol = |w: &mut BufWriter<File>, f: &mut dyn FnMut(usize, usize) -> f64| -> io::Result<()> {
            for ti in 0..nt {
                for s in 0..m {
                    w.write_all(&f(ti, s).to_le_bytes())?;
                }
            }
            Ok(())
        };
        mcol(&mut w, &mut |ti, _| self.times[ti])?;
        mcol(&mut w, &mut |_, s| s as f64)?;
        mcol(&mut w, &mut |ti, s| self.mk.x[self.mk_idx(ti, s)])?;
        mcol(&mut w, &mut |ti, s| self.mk.y[self.mk_idx(ti, s)])?;
        mcol(&mut w, &mut |ti, s| self.mk.u[self.mk_idx(ti, s)])?;
        mcol(&mut w, &mut |ti, s| self.mk.v[self.mk_idx(ti, s)])?;
        mcol(&mut w, &mut |ti, s| self.mk.p[self.mk_idx(ti, s)])?;
        mcol(&mut w, &mut |ti, s| self.mk.nx[self.mk_idx(ti, s)])?;
        mcol(&mut w, &mut |ti, s| self.mk.ny[self.mk_idx(ti, s)])?;
        w.flush()
    }

    pub fn read_binary(path: &Path) -> io::Result<FsiDataset> {
        let mut r = BufReader::with_capacity(1 << 20, File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut line = Vec::new();
            let got = read_line_bytes(&mut r, &mut line)?;
            if got == 0 {
                return Err(bad("missing <binary> marker"));
            }
            let text = String::from_utf8_lossy(&line).trim_end().to_string();
            if text == "<binary>" {
                break;
            }
            header.push(text);
        }
        if header.first().map(|s| s.as_str()) != Some("FSILAB-DATASET v1") {
            return Err(bad("not a dataset file"));
        }
        let lookup = |key: &str| -> io::Result<String> {
            header
                .iter()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| bad(&format!("missing header key {key}")))
        };
        let meta = meta_from_lookup(&lookup)?;
        let n = meta.config.grid_n;
        let n_times: usize = lookup("n_times")?.parse().map_err(|_| bad("bad n_times"))?;
        let eulerian_rows: usize = lookup("eulerian_rows")?.parse().map_err(|_| bad("bad rows"))?;
        let marker_rows: usize = lookup("marker_rows")?.parse().map_err(|_| bad("bad rows"))?;
        if eulerian_rows != n_times * n * n {
            return Err(bad("eulerian_rows inconsistent with grid and n_times"));
        }
        let n_markers = if n_times > 0 { marker_rows / n_times } else { 0 };
        if n_markers * n_times != marker_rows {
            return Err(bad("marker_rows not divisible by n_times"));
        }

        let mut read_col = |rows: usize| -> io::Result<Vec<f64>> {
            let mut buf = vec![0u8; rows * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let t_col = read_col(eulerian_rows)?;
        let _x = read_col(eulerian_rows)?;
        let _y = read_col(eulerian_rows)?;
        let u = read_col(eulerian_rows)?;
        let v = read_col(eulerian_rows)?;
        let p = read_col(eulerian_rows)?;
        let in_fluid: Vec<bool> = read_col(eulerian_rows)?.iter().map(|&x| x != 0.0).collect();
        let times: Vec<f64> = (0..n_times).map(|ti| t_col[ti * n * n]).collect();

        let _mt = read_col(marker_rows)?;
        let _ms = read_col(marker_rows)?;
        let mk = MarkerFields {
            x: read_col(marker_rows)?,
            y: read_col(marker_rows)?,
            u: read_col(marker_rows)?,
            v: read_col(marker_rows)?,
            p: read_col(marker_rows)?,
            nx: read_col(marker_rows)?,
            ny: read_col(marker_rows)?,
        };
        Ok(FsiDataset {
            h: 1.0 / n as f64,
            meta,
            times,
            n,
            u,
            v,
            p,
            in_fluid,
            n_markers,
            mk,
        })
    }

    /// CSV trio sharing a stem: `<stem>.meta.txt`, `<stem>.eulerian.csv`,
    /// `<stem>.markers.csv`.
    pub fn write_csv(&self, stem: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(with_suffix(stem, ".meta.txt"))?);
        writeln!(w, "FSILAB-DATASET v1")?;
        w.write_all(self.meta_lines().as_bytes())?;
        w.flush()?;

        let mut w = BufWriter::with_capacity(1 << 20, File::create(with_suffix(stem, ".eulerian.csv"))?);
        writeln!(w, "{EULERIAN_COLUMNS}")?;
        for ti in 0..self.times.len() {
            for i in 0..self.n {
                for j in 0..self.n {
                    let k = self.eul_idx(ti, i, j);
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        fmt_f64(self.times[ti]),
                        fmt_f64(self.cell_x(i)),
                        fmt_f64(self.cell_y(j)),
                        fmt_f64(self.u[k]),
                        fmt_f64(self.v[k]),
                        fmt_f64(self.p[k]),
                        u8::from(self.in_fluid[k])
                    )?;
                }
            }
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(with_suffix(stem, ".markers.csv"))?);
        writeln!(w, "{MARKER_COLUMNS}")?;
        for ti in 0..self.times.len() {
            for s in 0..self.n_markers {
                let k = self.mk_idx(ti, s);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    fmt_f64(self.times[ti]),
                    s,
                    fmt_f64(self.mk.x[k]),
                    fmt_f64(self.mk.y[k]),
                    fmt_f64(self.mk.u[k]),
                    fmt_f64(self.mk.v[k]),
                    fmt_f64(self.mk.p[k]),
                    fmt_f64(self.mk.nx[k]),
                    fmt_f64(self.mk.ny[k])
                )?;
            }
        }
        w.flush()
    }

    pub fn read_csv(stem: &Path) -> io::Result<FsiDataset> {
        let meta_file = BufReader::new(File::open(with_suffix(stem, ".meta.txt"))?);
        let header: Vec<String> = meta_file.lines().collect::<io::Result<_>>()?;
        let lookup = |key: &str| -> io::Result<String> {
            header
                .iter()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| bad(&format!("missing header key {key}")))
        };
        let meta = meta_from_lookup(&lookup)?;
        let n = meta.config.grid_n;
        let n_times: usize = lookup("n_times")?.parse().map_err(|_| bad("bad n_times"))?;

        let r = BufReader::with_capacity(1 << 20, File::open(with_suffix(stem, ".eulerian.csv"))?);
        let mut lines = r.lines();
        let head = lines.next().ok_or_else(|| bad("empty eulerian csv"))??;
        if head.trim() != EULERIAN_COLUMNS {
            return Err(bad("unexpected eulerian columns"));
        }
        let rows = n_times * n * n;
        let mut times = vec![0.0; n_times];
        let (mut u, mut v, mut p) = (vec![0.0; rows], vec![0.0; rows], vec![0.0; rows]);
        let mut in_fluid = vec![false; rows];
        for k in 0..rows {
            let line = lines.next().ok_or_else(|| bad("eulerian csv truncated"))??;
            let mut f = line.split(',');
            let mut next = || -> io::Result<f64> {
                f.next()
                    .ok_or_else(|| bad("short eulerian row"))?
                    .parse()
                    .map_err(|_| bad("bad float"))
            };
            let t = next()?;
            let _x = next()?;
            let _y = next()?;
            u[k] = next()?;
            v[k] = next()?;
            p[k] = next()?;
            in_fluid[k] = next()? != 0.0;
            if k % (n * n) == 0 {
                times[k / (n * n)] = t;
            }
        }

        let r = BufReader::with_capacity(1 << 20, File::open(with_suffix(stem, ".markers.csv"))?);
        let mut lines = r.lines();
        let head = lines.next().ok_or_else(|| bad("empty markers csv"))??;
        if head.trim() != MARKER_COLUMNS {
            return Err(bad("unexpected marker columns"));
        }
        let body: Vec<String> = lines.collect::<io::Result<_>>()?;
        let marker_rows = body.len();
        let n_markers = if n_times > 0 { marker_rows / n_times } else { 0 };
        if n_markers * n_times != marker_rows {
            return Err(bad("marker rows not divisible by n_times"));
        }
        let mut mk = MarkerFields::default();
        for field in [&mut mk.x, &mut mk.y, &mut mk.u, &mut mk.v, &mut mk.p, &mut mk.nx, &mut mk.ny] {
            field.resize(marker_rows, 0.0);
        }
        for (k, line) in body.iter().enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("bad float")))
                .collect::<io::Result<_>>()?;
            if vals.len() != 9 {
                return Err(bad("short marker row"));
            }
            mk.x[k] = vals[2];
            mk.y[k] = vals[3];
            mk.u[k] = vals[4];
            mk.v[k] = vals[5];
            mk.p[k] = vals[6];
            mk.nx[k] = vals[7];
            mk.ny[k] = vals[8];
        }
        Ok(FsiDataset {
            h: 1.0 / n as f64,
            meta,
            times,
            n,
            u,
            v,
            p,
            in_fluid,
            n_markers,
            mk,
        })
    }

    /// Load either format, sniffing by extension (`.csv` stem vs binary).
    pub fn read(path: &Path) -> io::Result<FsiDataset> {
        if path.to_string_lossy().ends_with(".csv") || with_suffix(path, ".meta.txt").exists() {
            FsiDataset::read_csv(path)
        } else {
            FsiDataset::read_binary(path)
        }
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

/// Shortest-roundtrip float formatting (deterministic).
pub fn fmt_f64(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn read_line_bytes(r: &mut impl BufRead, out: &mut Vec<u8>) -> io::Result<usize> {
    out.clear();
    r.read_until(b'\n', out)
}

fn meta_from_lookup(lookup: &dyn Fn(&str) -> io::Result<String>) -> io::Result<DatasetMeta> {
    use crate::solver::DiscConfig;
    let parse_f = |k: &str| -> io::Result<f64> { lookup(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
    let disc = if lookup("disc")? == "true" {
        Some(DiscConfig {
            center: (parse_f("disc_cx")?, parse_f("disc_cy")?),
            radius: parse_f("disc_radius")?,
            n_markers: lookup("markers")?.parse().map_err(|_| bad("bad markers"))?,
            kappa_penalty: parse_f("kappa_penalty")?,
            kappa_tension: parse_f("kappa_tension")?,
        })
    } else {
        None
    };
    Ok(DatasetMeta {
        config: SolverConfig {
            grid_n: lookup("grid_n")?.parse().map_err(|_| bad("bad grid_n"))?,
            dt: parse_f("dt")?,
            t_end: parse_f("t_end")?,
            re: parse_f("re")?,
            lid_velocity: parse_f("lid_velocity")?,
            disc,
            poisson_tol: parse_f("poisson_tol")?,
            divergence_tol: parse_f("divergence_tol")?,
            seed: lookup("seed")?.parse().map_err(|_| bad("bad seed"))?,
        },
        solid_model: lookup("solid_model")?,
        solver_version: lookup("solver_version")?,
        thread_count: lookup("thread_count")?.parse().map_err(|_| bad("bad thread_count"))?,
        partial: lookup("partial")? == "true",
    })
}

//! Run configuration: a flat `key = value` file (with `#` comments) plus
//! command-line overrides of the same keys. Every run writes the resolved
//! snapshot next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::fmt_f64;
use crate::sampling::SamplingConfig;
use crate::solver::{DiscConfig, NearWall, SolverConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("cannot read config file {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("malformed config line {line}: `{text}` (expected `key = value`)")]
    Malformed { line: usize, text: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Solver.
    pub grid: usize,
    pub dt: f64,
    pub t_end: f64,
    pub re: f64,
    pub lid_velocity: f64,
    pub disc: bool,
    pub disc_cx: f64,
    pub disc_cy: f64,
    pub disc_radius: f64,
    pub markers: usize,
    pub kappa_penalty: f64,
    pub kappa_tension: f64,
    pub solver_seed: u64,
    pub near_wall: String,
    pub dataset_format: String,
    // Sampling.
    pub fluid_fraction: f64,
    pub interface_fraction: f64,
    pub wall_points: usize,
    pub initial_points: usize,
    pub sobol_skip_origin: bool,
    // Training.
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    pub iterations: Option<usize>,
    pub lr0: f64,
    pub batch_size: usize,
    pub desk_scale: bool,
    // Evaluation / report.
    pub profile_times: Vec<f64>,
    pub profile_lines: Vec<f64>,
    // IO.
    pub output_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DiscConfig::default();
        RunConfig {
            grid: 100,
            dt: 0.01,
            t_end: 10.0,
            re: 100.0,
            lid_velocity: 1.0,
            disc: true,
            disc_cx: d.center.0,
            disc_cy: d.center.1,
            disc_radius: d.radius,
            markers: d.n_markers,
            kappa_penalty: d.kappa_penalty,
            kappa_tension: d.kappa_tension,
            solver_seed: 0,
            near_wall: "truncate".into(),
            dataset_format: "binary".into(),
            fluid_fraction: 0.005 / 100.0,
            interface_fraction: 0.05 / 100.0,
            wall_points: 2000,
            initial_points: 2000,
            sobol_skip_origin: true,
            models: vec!["M1".into(), "M2".into(), "M3".into(), "M4".into()],
            seeds: vec![0],
            iterations: None,
            lr0: 1e-3,
            batch_size: 128,
            desk_scale: false,
            profile_times: vec![],
            profile_lines: vec![],
            output_dir: PathBuf::from("out"),
            dataset: None,
            force: false,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true/false".into(),
        }),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|part| parse_as(key, part.trim())).collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. Keys use underscores; the CLI
    /// maps `--some-key` to `some_key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "grid" => self.grid = parse_as(key, v)?,
            "dt" => self.dt = parse_as(key, v)?,
            "t_end" => self.t_end = parse_as(key, v)?,
            "re" => self.re = parse_as(key, v)?,
            "lid_velocity" => self.lid_velocity = parse_as(key, v)?,
            "disc" => self.disc = parse_bool(key, v)?,
            "disc_cx" => self.disc_cx = parse_as(key, v)?,
            "disc_cy" => self.disc_cy = parse_as(key, v)?,
            "disc_radius" => self.disc_radius = parse_as(key, v)?,
            "markers" => self.markers = parse_as(key, v)?,
            "kappa_penalty" => self.kappa_penalty = parse_as(key, v)?,
            "kappa_tension" => self.kappa_tension = parse_as(key, v)?,
            "solver_seed" => self.solver_seed = parse_as(key, v)?,
            "near_wall" => {
                if v != "strict" && v != "truncate" {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        reason: "expected strict or truncate".into(),
                    });
                }
                self.near_wall = v.into();
            }
            "dataset_format" => {
                if v != "binary" && v != "csv" {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        reason: "expected binary or csv".into(),
                    });
                }
                self.dataset_format = v.into();
            }
            "fluid_fraction" => self.fluid_fraction = parse_as(key, v)?,
            "interface_fraction" => self.interface_fraction = parse_as(key, v)?,
            "wall_points" => self.wall_points = parse_as(key, v)?,
            "initial_points" => self.initial_points = parse_as(key, v)?,
            "sobol_skip_origin" => self.sobol_skip_origin = parse_bool(key, v)?,
            "models" => self.models = parse_list::<String>(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "iterations" => self.iterations = Some(parse_as(key, v)?),
            "lr0" => self.lr0 = parse_as(key, v)?,
            "batch_size" => self.batch_size = parse_as(key, v)?,
            "desk_scale" => self.desk_scale = parse_bool(key, v)?,
            "profile_times" => self.profile_times = parse_list(key, v)?,
            "profile_lines" => self.profile_lines = parse_list(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "force" => self.force = parse_bool(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sorted `key = value` snapshot of the resolved configuration;
    /// identical configurations produce identical bytes.
    pub fn resolved(&self) -> String {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("grid", self.grid.to_string());
        put("dt", fmt_f64(self.dt));
        put("t_end", fmt_f64(self.t_end));
        put("re", fmt_f64(self.re));
        put("lid_velocity", fmt_f64(self.lid_velocity));
        put("disc", self.disc.to_string());
        put("disc_cx", fmt_f64(self.disc_cx));
        put("disc_cy", fmt_f64(self.disc_cy));
        put("disc_radius", fmt_f64(self.disc_radius));
        put("markers", self.markers.to_string());
        put("kappa_penalty", fmt_f64(self.kappa_penalty));
        put("kappa_tension", fmt_f64(self.kappa_tension));
        put("solver_seed", self.solver_seed.to_string());
        put("near_wall", self.near_wall.clone());
        put("dataset_format", self.dataset_format.clone());
        put("fluid_fraction", format!("{}", self.fluid_fraction));
        put("interface_fraction", format!("{}", self.interface_fraction));
        put("wall_points", self.wall_points.to_string());
        put("initial_points", self.initial_points.to_string());
        put("sobol_skip_origin", self.sobol_skip_origin.to_string());
        put("models", self.models.join(","));
        put(
            "seeds",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        put(
            "iterations",
            self.iterations.map(|i| i.to_string()).unwrap_or_else(|| "preset".into()),
        );
        put("lr0", format!("{}", self.lr0));
        put("batch_size", self.batch_size.to_string());
        put("desk_scale", self.desk_scale.to_string());
        put(
            "profile_times",
            self.profile_times.iter().map(|t| fmt_f64(*t)).collect::<Vec<_>>().join(","),
        );
        put(
            "profile_lines",
            self.profile_lines.iter().map(|t| fmt_f64(*t)).collect::<Vec<_>>().join(","),
        );
        put("output_dir", self.output_dir.display().to_string());
        put(
            "dataset",
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("force", self.force.to_string());
        let mut s = String::new();
        for (k, v) in map {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            grid_n: self.grid,
            dt: self.dt,
            t_end: self.t_end,
            re: self.re,
            lid_velocity: self.lid_velocity,
            disc: self.disc.then(|| DiscConfig {
                center: (self.disc_cx, self.disc_cy),
                radius: self.disc_radius,
                n_markers: self.markers,
                kappa_penalty: self.kappa_penalty,
                kappa_tension: self.kappa_tension,
            }),
            poisson_tol: 1e-10,
            divergence_tol: 1e-8,
            seed: self.solver_seed,
        }
    }

    pub fn near_wall_policy(&self) -> NearWall {
        if self.near_wall == "strict" {
            NearWall::Strict
        } else {
            NearWall::Truncate
        }
    }

    pub fn sampling_config(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            fluid_fraction: self.fluid_fraction,
            interface_fraction: self.interface_fraction,
            wall_points: self.wall_points,
            initial_points: self.initial_points,
            sobol_skip_origin: self.sobol_skip_origin,
            seed,
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        match &self.dataset {
            Some(p) => p.clone(),
            None => {
                if self.dataset_format == "csv" {
                    self.output_dir.join("dataset")
                } else {
                    self.output_dir.join("dataset.fsibin")
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_scenario() {
        let c = RunConfig::default();
        assert_eq!(c.grid, 100);
        assert_eq!(c.dt, 0.01);
        assert_eq!(c.t_end, 10.0);
        assert_eq!(c.re, 100.0);
        assert_eq!(c.disc_radius, 0.2);
        assert_eq!((c.disc_cx, c.disc_cy), (0.6, 0.5));
        assert!((c.fluid_fraction - 5e-5).abs() < 1e-18);
        assert!((c.interface_fraction - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn set_and_snapshot_roundtrip() {
        let mut c = RunConfig::default();
        c.set("grid", "32").unwrap();
        c.set("t_end", "1.0").unwrap();
        c.set("models", "M1,M4").unwrap();
        c.set("seeds", "0,1,2").unwrap();
        c.set("desk_scale", "true").unwrap();
        assert_eq!(c.grid, 32);
        assert_eq!(c.models, vec!["M1", "M4"]);
        assert_eq!(c.seeds, vec![0, 1, 2]);
        let snap = c.resolved();
        assert!(snap.contains("grid = 32"));
        assert!(snap.contains("models = M1,M4"));
        // Snapshot of an identical config is byte-identical.
        let mut c2 = RunConfig::default();
        for line in snap.lines() {
            let (k, v) = line.split_once('=').unwrap();
            let (k, v) = (k.trim(), v.trim());
            if k == "iterations" && v == "preset" || k == "dataset" && v.is_empty() {
                continue;
            }
            c2.set(k, v).unwrap();
        }
        assert_eq!(snap, c2.resolved());
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("gird", "32"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.set("grid", "abc"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.set("near_wall", "maybe"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn file_parsing_with_comments() {
        let dir = std::env::temp_dir().join("fsilab_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# scenario\ngrid = 50 # coarse\n\nt_end = 4.0\nmodels = M2\n").unwrap();
        let mut c = RunConfig::default();
        c.load_file(&path).unwrap();
        assert_eq!(c.grid, 50);
        assert_eq!(c.t_end, 4.0);
        assert_eq!(c.models, vec!["M2"]);

        std::fs::write(&path, "grid 50\n").unwrap();
        let mut c = RunConfig::default();
        assert!(matches!(c.load_file(&path), Err(ConfigError::Malformed { line: 1, .. })));
    }
}

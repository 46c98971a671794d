use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a trajectory came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub system: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub rtol: Option<f64>,
    #[serde(default)]
    pub atol: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Provenance {
    pub fn new(system: &str) -> Self {
        Self {
            system: system.to_string(),
            ..Default::default()
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }
}

/// Sampled multivariate time series: `states` is `N × l`, `controls` `N × p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Tensor,
    pub controls: Option<Tensor>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Tensor, controls: Option<Tensor>, provenance: Provenance) -> Result<Self> {
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::usage("trajectory times must be strictly increasing"));
        }
        if states.rows() != times.len() {
            return Err(Error::dim(format!(
                "{} times but {} state rows",
                times.len(),
                states.rows()
            )));
        }
        if let Some(c) = &controls {
            if c.rows() != times.len() {
                return Err(Error::dim(format!(
                    "{} times but {} control rows",
                    times.len(),
                    c.rows()
                )));
            }
        }
        Ok(Self {
            times,
            states,
            controls,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.states.cols()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.as_ref().map_or(0, Tensor::cols)
    }

    /// Values of state channel `j` over time.
    pub fn channel(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.states.get(i, j)).collect()
    }

    pub fn control_channel(&self, j: usize) -> Option<Vec<f64>> {
        self.controls
            .as_ref()
            .map(|c| (0..self.len()).map(|i| c.get(i, j)).collect())
    }

    /// Rows `start..end` as a new trajectory with the same provenance.
    pub fn slice(&self, start: usize, end: usize) -> Result<Trajectory> {
        if start >= end || end > self.len() {
            return Err(Error::usage(format!("slice {start}..{end} of {} rows", self.len())));
        }
        let rows = |t: &Tensor| {
            let c = t.cols();
            Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec()).expect("consistent slice")
        };
        Ok(Trajectory {
            times: self.times[start..end].to_vec(),
            states: rows(&self.states),
            controls: self.controls.as_ref().map(rows),
            provenance: self.provenance.clone(),
        })
    }

    /// CSV with header `t,x1..xl[,u1..up]`; floats use their shortest exact
    /// representation so files round-trip and are byte-reproducible.
    pub fn to_csv(&self) -> String {
        let l = self.n_states();
        let p = self.n_controls();
        let mut s = String::from("t");
        for j in 1..=l {
            write!(s, ",x{j}").unwrap();
        }
        for j in 1..=p {
            write!(s, ",u{j}").unwrap();
        }
        s.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            write!(s, "{t}").unwrap();
            for v in self.states.row_slice(i) {
                write!(s, ",{v}").unwrap();
            }
            if let Some(c) = &self.controls {
                for v in c.row_slice(i) {
                    write!(s, ",{v}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, provenance: Provenance) -> Result<Trajectory> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::usage("empty trajectory CSV"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(Error::usage("trajectory CSV must start with a `t` column"));
        }
        let l = cols.iter().filter(|c| c.starts_with('x')).count();
        let p = cols.iter().filter(|c| c.starts_with('u')).count();
        if 1 + l + p != cols.len() {
            return Err(Error::usage(format!("unrecognized trajectory header {header:?}")));
        }
        let (mut times, mut xs, mut us) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::usage(format!("row {}: {e}", lineno + 2)))?;
            if vals.len() != cols.len() {
                return Err(Error::usage(format!("row {} has {} fields", lineno + 2, vals.len())));
            }
            times.push(vals[0]);
            xs.extend_from_slice(&vals[1..1 + l]);
            us.extend_from_slice(&vals[1 + l..]);
        }
        let n = times.len();
        let states = Tensor::matrix(n, l, xs)?;
        let controls = if p > 0 { Some(Tensor::matrix(n, p, us)?) } else { None };
        Trajectory::new(times, states, controls, provenance)
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the CSV and a JSON provenance sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        std::fs::write(Self::sidecar(path), serde_json::to_string_pretty(&self.provenance)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trajectory> {
        let text = std::fs::read_to_string(path)?;
        let side = Self::sidecar(path);
        let provenance = if side.exists() {
            serde_json::from_str(&std::fs::read_to_string(side)?)?
        } else {
            Provenance::default()
        };
        Self::from_csv(&text, provenance)
    }
}

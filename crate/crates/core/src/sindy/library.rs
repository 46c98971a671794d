use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wrap {
    Sin,
    Cos,
    Exp,
}

/// A monomial over the library channels, optionally passed through a
/// scalar function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub exponents: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrap: Option<Wrap>,
}

impl Term {
    pub fn monomial(exponents: Vec<u32>) -> Self {
        Self { exponents, wrap: None }
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        let m: f64 = self
            .exponents
            .iter()
            .zip(row)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product();
        match self.wrap {
            None => m,
            Some(Wrap::Sin) => m.sin(),
            Some(Wrap::Cos) => m.cos(),
            Some(Wrap::Exp) => m.exp(),
        }
    }

    pub fn name(&self, channels: &[String]) -> String {
        let parts: Vec<String> = self
            .exponents
            .iter()
            .zip(channels)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, c)| if e == 1 { c.clone() } else { format!("{c}^{e}") })
            .collect();
        let m = if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join(" ")
        };
        match self.wrap {
            None => m,
            Some(Wrap::Sin) => format!("sin({m})"),
            Some(Wrap::Cos) => format!("cos({m})"),
            Some(Wrap::Exp) => format!("exp({m})"),
        }
    }
}

/// Ordered candidate functions over named channels. States come first in
/// the channel list, followed by controls.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLibrary {
    pub channels: Vec<String>,
    pub n_states: usize,
    pub terms: Vec<Term>,
}

/// Exponent vectors of total degree `d` in descending lexicographic order.
fn exponents_of_degree(vars: usize, d: u32) -> Vec<Vec<u32>> {
    if vars == 0 {
        return if d == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for mut rest in exponents_of_degree(vars - 1, d - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl FeatureLibrary {
    /// All monomials up to `degree` in graded lexicographic order, constant
    /// first: `1, x, y, c, x², xy, …`.
    pub fn polynomial(states: &[&str], controls: &[&str], degree: u32) -> Self {
        let channels: Vec<String> = states.iter().chain(controls).map(|s| s.to_string()).collect();
        let terms = (0..=degree)
            .flat_map(|d| exponents_of_degree(channels.len(), d))
            .map(Term::monomial)
            .collect();
        Self {
            channels,
            n_states: states.len(),
            terms,
        }
    }

    pub fn custom(states: &[&str], controls: &[&str], terms: Vec<Term>) -> Result<Self> {
        let k = states.len() + controls.len();
        if let Some(t) = terms.iter().find(|t| t.exponents.len() != k) {
            return Err(Error::config(format!(
                "term has {} exponents for {k} channels",
                t.exponents.len()
            )));
        }
        Ok(Self {
            channels: states.iter().chain(controls).map(|s| s.to_string()).collect(),
            n_states: states.len(),
            terms,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_controls(&self) -> usize {
        self.channels.len() - self.n_states
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name(&self.channels)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }

    /// Hex SHA-256 of the serialized descriptor.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("library serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// `Θ(X, U)`: one column per term, one row per sample.
    pub fn evaluate(&self, states: &Tensor, controls: Option<&Tensor>) -> Result<Tensor> {
        if states.cols() != self.n_states {
            return Err(Error::config(format!(
                "library expects {} state channels, got {}",
                self.n_states,
                states.cols()
            )));
        }
        let nc = controls.map_or(0, Tensor::cols);
        if nc != self.n_controls() {
            return Err(Error::config(format!(
                "library expects {} control channels, got {nc}",
                self.n_controls()
            )));
        }
        if let Some(u) = controls {
            if u.rows() != states.rows() {
                return Err(Error::dim(format!(
                    "{} state rows vs {} control rows",
                    states.rows(),
                    u.rows()
                )));
            }
        }
        let n = states.rows();
        let mut out = Vec::with_capacity(n * self.len());
        let mut row = vec![0.0; self.channels.len()];
        for i in 0..n {
            row[..self.n_states].copy_from_slice(states.row_slice(i));
            if let Some(u) = controls {
                row[self.n_states..].copy_from_slice(u.row_slice(i));
            }
            out.extend(self.terms.iter().map(|t| t.eval(&row)));
        }
        Tensor::matrix(n, self.len(), out)
    }
}

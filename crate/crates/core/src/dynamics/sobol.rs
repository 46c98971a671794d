//! Sobol low-discrepancy sequence (Gray-code construction, Joe–Kuo
//! direction numbers).

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const SOBOL_MAX_DIMS: usize = 6;
const BITS: usize = 32;

/// `(s, a, m_1..m_s)` for dimensions 2..=6; dimension 1 is van der Corput.
const JOE_KUO: [(u32, u32, &[u32]); SOBOL_MAX_DIMS - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
];

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (BITS - 1 - i);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for i in 0..s.min(BITS) {
        v[i] = m[i] << (BITS - 1 - i);
    }
    for i in s..BITS {
        let mut x = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}

/// Streaming generator over the unit cube. The all-zeros initial point is
/// skipped; an optional seed applies a random digital shift.
#[derive(Clone, Debug)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    shift: Vec<u32>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dims: usize, seed: Option<u64>) -> Result<Self> {
        if dims == 0 || dims > SOBOL_MAX_DIMS {
            return Err(Error::config(format!(
                "Sobol sampling supports 1..={SOBOL_MAX_DIMS} dimensions, got {dims}"
            )));
        }
        let shift = match seed {
            Some(s) => {
                let mut rng = substream(s, "sobol-shift");
                (0..dims).map(|_| rng.gen()).collect()
            }
            None => vec![0; dims],
        };
        Ok(Self {
            directions: (0..dims).map(direction_numbers).collect(),
            shift,
            state: vec![0; dims],
            index: 0,
        })
    }

    pub fn dims(&self) -> usize {
        self.directions.len()
    }

    /// Next point in `[0, 1)^dims`.
    pub fn next_point(&mut self) -> Vec<f64> {
        let c = self.index.trailing_ones() as usize;
        assert!(c < BITS, "Sobol sequence exhausted");
        for (x, v) in self.state.iter_mut().zip(&self.directions) {
            *x ^= v[c];
        }
        self.index += 1;
        self.state
            .iter()
            .zip(&self.shift)
            .map(|(x, s)| f64::from(x ^ s) / 4_294_967_296.0)
            .collect()
    }
}

/// `count` points scaled into per-dimension `(low, high)` bounds.
pub fn sobol_sample(dims: usize, count: usize, bounds: &[(f64, f64)], seed: Option<u64>) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::config("Sobol sample count must be at least 1"));
    }
    if bounds.len() != dims {
        return Err(Error::config(format!("{dims} dimensions but {} bounds", bounds.len())));
    }
    if bounds
        .iter()
        .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || hi < lo)
    {
        return Err(Error::config("Sobol bounds must be finite with low ≤ high"));
    }
    let mut gen = Sobol::new(dims, seed)?;
    let mut data = Vec::with_capacity(count * dims);
    for _ in 0..count {
        for (u, (lo, hi)) in gen.next_point().into_iter().zip(bounds) {
            data.push(lo + (hi - lo) * u);
        }
    }
    Tensor::matrix(count, dims, data)
}

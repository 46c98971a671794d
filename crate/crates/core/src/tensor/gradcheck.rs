use super::{Bound, ParamStore, Tape, Var};
use crate::error::Result;

/// Finite-difference comparison for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub analytic_norm: f64,
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, or the absolute
    /// difference when both norms are negligible.
    pub rel_error: f64,
}

/// Compares tape gradients of the scalar built by `loss` against central
/// differences with step `h`, parameter by parameter.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    tape.backward(out)?;
    let analytic = bound.grads(&tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let out = loss(&mut tape, &bound)?;
        Ok(tape.value(out).data()[0])
    };

    let ids: Vec<_> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for (id, a) in ids.into_iter().zip(analytic) {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = a.norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = na + nn;
        report.push(GradCheck {
            name: store.name(id).to_string(),
            analytic_norm: na,
            rel_error: if denom > 1e-7 { diff / denom } else { diff },
        });
    }
    Ok(report)
}

/// Largest relative error in a report.
pub fn worst(report: &[GradCheck]) -> f64 {
    report.iter().map(|g| g.rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Rng};
    use crate::tensor::nn::attention;
    use crate::tensor::{Activation, DenseLayer, EquivariantLayer, MultiHeadAttention, ParamKind, PoolKind, Tensor};
    use rand::Rng as _;

    fn uniform(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn input(store: &mut ParamStore, rng: &mut Rng, r: usize, c: usize) -> crate::tensor::ParamId {
        store.add("input", uniform(rng, r, c), ParamKind::Embedding).unwrap()
    }

    /// A loss with non-trivial gradient everywhere: weighted sum of squares.
    fn probe(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
        let (r, c) = (tape.value(y).rows(), tape.value(y).cols());
        let mut rng = seeded(rng_seed);
        let w = tape.constant(uniform(&mut rng, r, c));
        let sq = tape.square(y)?;
        let z = tape.mul(sq, w)?;
        let lin = tape.mul(y, w)?;
        let z = tape.add(z, lin)?;
        Ok(tape.sum_all(z))
    }

    #[test]
    fn dense_layers_pass() {
        let mut rng = seeded(100);
        for act in [
            Activation::None,
            Activation::Relu,
            Activation::Gelu,
            Activation::Sigmoid,
        ] {
            let mut store = ParamStore::new();
            let x = input(&mut store, &mut rng, 5, 3);
            let layer = DenseLayer::new(&mut store, "d", 3, 4, act, &mut rng).unwrap();
            *store.get_mut(layer.bias) = uniform(&mut rng, 1, 4);
            let report = check_gradients(&mut store, 1e-5, |t, p| {
                let y = layer.forward(t, p, p.var(x))?;
                probe(t, y, 1)
            })
            .unwrap();
            assert!(worst(&report) < 1e-4, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn equivariant_and_pooling_pass() {
        let mut rng = seeded(101);
        for pool in [PoolKind::Mean, PoolKind::Sum, PoolKind::Max, PoolKind::AbsMean] {
            let mut store = ParamStore::new();
            let x = input(&mut store, &mut rng, 6, 3);
            let layer = EquivariantLayer::new(&mut store, "eq", 3, 4, pool, Activation::Gelu, &mut rng).unwrap();
            *store.get_mut(layer.gamma) = Tensor::scalar(0.4);
            let report = check_gradients(&mut store, 1e-5, |t, p| {
                let y = layer.forward(t, p, p.var(x))?;
                let pooled = pool.apply(t, y)?;
                probe(t, pooled, 2)
            })
            .unwrap();
            assert!(worst(&report) < 1e-4, "{pool:?}: {report:?}");
        }
    }

    #[test]
    fn attention_and_layer_norm_pass() {
        let mut rng = seeded(102);
        let mut store = ParamStore::new();
        let q = input(&mut store, &mut rng, 3, 4);
        let kv = store.add("kv", uniform(&mut rng, 5, 4), ParamKind::Embedding).unwrap();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, Some(3), &mut rng).unwrap();
        let gain = store.add("gain", uniform(&mut rng, 1, 4), ParamKind::Norm).unwrap();
        let shift = store.add("shift", uniform(&mut rng, 1, 4), ParamKind::Norm).unwrap();
        // Larger projections so the softmax is far from uniform.
        for l in [&mha.wq, &mha.wk] {
            let w = uniform(&mut rng, 4, 6);
            *store.get_mut(l.weights) = w;
        }
        let report = check_gradients(&mut store, 1e-5, |t, p| {
            let a = attention(t, p.var(q), p.var(kv), p.var(kv))?;
            let m = mha.forward(t, p, a, p.var(kv), p.var(kv))?;
            let n = t.layer_norm(m, p.var(gain), p.var(shift), 1e-8)?;
            probe(t, n, 3)
        })
        .unwrap();
        assert!(worst(&report) < 1e-4, "{report:?}");
    }
}

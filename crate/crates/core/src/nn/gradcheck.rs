//! Finite-difference verification of analytic gradients.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::array::Scalar;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::ParamStore;

/// Builds a scalar-loss computation over the current parameter values.
pub type LossBuilder<'a> = dyn Fn(&ParamStore) -> Result<(Graph, NodeId)> + 'a;

/// Compares analytic gradients against centered finite differences.
///
/// Samples up to `coords_per_param` coordinates of every trainable
/// parameter and returns the maximum of
/// |analytic - centered| / max(1, |centered|).
pub fn grad_check(
    build: &LossBuilder,
    store: &mut ParamStore,
    eps: Scalar,
    coords_per_param: usize,
    seed: u64,
) -> Result<Scalar> {
    if !(1e-7..=1e-3).contains(&(eps as f64)) {
        return Err(Error::InvalidInput(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            eps
        )));
    }
    let eval = |store: &ParamStore| -> Result<Scalar> {
        let (graph, loss) = build(store)?;
        let v = graph.value(loss);
        if v.len() != 1 {
            return Err(Error::Contract("loss must be scalar".into()));
        }
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss in grad_check".into()));
        }
        Ok(v.item())
    };

    store.clear_grads();
    let (graph, loss) = build(store)?;
    graph.backward(loss, store)?;
    let analytic: Vec<(String, Vec<Scalar>)> = store
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| {
            let g = e
                .grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; e.value.len()]);
            (e.name.clone(), g)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: Scalar = 0.0;
    for (name, grads) in &analytic {
        let len = grads.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(coords_per_param);
        }
        for &c in &coords {
            let original = store.get(name).unwrap().data()[c];
            store.get_mut(name).unwrap().data_mut()[c] = original + eps;
            let plus = eval(store)?;
            store.get_mut(name).unwrap().data_mut()[c] = original - eps;
            let minus = eval(store)?;
            store.get_mut(name).unwrap().data_mut()[c] = original;
            let centered = (plus - minus) / (2.0 * eps);
            let rel = (grads[c] - centered).abs() / centered.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    store.clear_grads();
    Ok(max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::array::Array;
    use rand::Rng;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut store = ParamStore::new();
        store
            .register("p", Array::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let err = grad_check(
            &|s: &ParamStore| {
                let mut g = Graph::new();
                let p = g.param(s, "p")?;
                let sq = g.mul(p, p)?;
                let loss = g.sum_all(sq);
                Ok((g, loss))
            },
            &mut store,
            1e-5,
            16,
            1,
        )
        .unwrap();
        assert!(err < 1e-9, "linear gradient should match exactly, got {}", err);
    }

    #[test]
    fn every_primitive_passes_grad_check_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for trial in 0..8 {
            let m = rng.gen_range(2..6usize);
            let k = rng.gen_range(2..6usize);
            let n = rng.gen_range(2..6usize);
            let mut store = ParamStore::new();
            store.init_matrix(&mut rng, "a", m, k).unwrap();
            store.init_matrix(&mut rng, "b", k, n).unwrap();
            store.init_matrix(&mut rng, "c", m, n).unwrap();
            store.init_ones("gain", &[n]).unwrap();
            store.init_zeros("bias", &[n]).unwrap();
            store.init_matrix(&mut rng, "w2", 2 * n, 3).unwrap();

            let mask: Vec<bool> = (0..m * n).map(|i| (i + trial) % 4 == 0).collect();
            let build = move |s: &ParamStore| -> Result<(Graph, NodeId)> {
                let mut g = Graph::new();
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.param(s, "c")?;
                let gain = g.param(s, "gain")?;
                let bias = g.param(s, "bias")?;
                let w2 = g.param(s, "w2")?;

                let mm = g.matmul(a, b)?; // (m, n)
                let t = g.tanh(mm);
                let r = g.relu(c);
                let sum = g.add(t, r)?;
                let prod = g.mul(sum, c)?;
                let ln = g.layer_norm_rows(prod, gain, bias)?;
                let filled = g.masked_fill(ln, &mask, -4.0)?;
                let sm = g.softmax_rows(filled)?;
                let lsm = g.log_softmax_rows(filled)?;
                let both = g.add(sm, lsm)?;
                let paired = g.pair_concat(both)?; // (m*m, 2n)
                let proj = g.matmul(paired, w2)?; // (m*m, 3)
                let scaled = g.scale(proj, 0.5);
                let loss = g.sum_all(scaled);
                Ok((g, loss))
            };
            let err = grad_check(&build, &mut store, 1e-5, 12, trial as u64).unwrap();
            assert!(err < 1e-4, "trial {} max rel err {}", trial, err);
        }
    }

    #[test]
    fn conv_pool_embedding_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        let mut store = ParamStore::new();
        store.init_conv(&mut rng, "k", 3, 2, 3, 3).unwrap();
        store.init_zeros("kb", &[3]).unwrap();
        store.init_matrix(&mut rng, "table", 5, 4).unwrap();
        store.init_matrix(&mut rng, "x", 2, 6 * 6).unwrap();

        let build = |s: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let x2 = g.param(s, "x")?;
            let x = g.reshape(x2, &[2, 6, 6])?;
            let k = g.param(s, "k")?;
            let kb = g.param(s, "kb")?;
            let conv = g.conv2d(x, k, kb)?; // (3, 6, 6)
            let act = g.relu(conv);
            let pooled = g.max_pool2d(act)?; // (3, 3, 3)
            let flat = g.reshape(pooled, &[3, 9])?;
            let table = g.param(s, "table")?;
            let emb = g.embedding(table, &[0, 2, 4])?; // (3, 4)
            let joined = g.concat(&[flat, emb], 1)?; // (3, 13)
            let tr = g.transpose(joined)?;
            let sliced = g.slice_rows(tr, 2, 8)?;
            let gathered = g.row_gather(sliced, &[0, 1, 2, 0, 1, 2, 0, 1])?;
            let partial = g.reshape(gathered, &[2, 4])?;
            let loss_terms = g.softmax_rows(partial)?;
            let picked = g.row_gather(loss_terms, &[1, 3])?;
            let s1 = g.reshape(picked, &[1, 2])?;
            let flat_sum = g.sum_all(s1);
            let conv_sum = g.sum_all(flat);
            let total = g.add(flat_sum, conv_sum)?;
            let loss = g.sum_all(total);
            Ok((g, loss))
        };
        let err = grad_check(&build, &mut store, 1e-5, 20, 7).unwrap();
        assert!(err < 1e-4, "max rel err {}", err);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut store = ParamStore::new();
        store.register("p", Array::scalar(1.0)).unwrap();
        let build = |s: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let p = g.param(s, "p")?;
            let loss = g.sum_all(p);
            Ok((g, loss))
        };
        assert!(grad_check(&build, &mut store, 1e-2, 4, 0).is_err());
    }
}

//! Shared helpers for the integration suites: finite-difference gradient
//! checking against the graph's analytic backward pass.

use tdet::autodiff::{Graph, NodeId, Real, Tensor};

/// Relative error with an absolute floor of 1, so tiny gradients are judged
/// on absolute error and large ones on relative error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central finite-difference check of every input gradient of a scalar
/// graph. `build` must assemble the same computation from the given leaves
/// each call and return the scalar output node. Returns the worst relative
/// error over all coordinates of all differentiable inputs.
///
/// The graph evaluates eagerly, so each probe rebuilds the graph from
/// perturbed leaves.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    eps: f64,
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> (Graph<f64>, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        (g, ids, out)
    };

    let (mut g, ids, out) = eval(inputs);
    assert_eq!(g.value(out).len(), 1, "build must return a scalar node");
    g.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient").to_vec())
        .collect();

    let mut worst = 0.0f64;
    for (ti, tensor) in inputs.iter().enumerate() {
        for j in 0..tensor.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += eps;
            let (gp, _, op) = eval(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= eps;
            let (gm, _, om) = eval(&minus);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[ti][j], numeric));
        }
    }
    worst
}

/// Deterministic pseudo-random tensor with entries in `(lo, hi)`, driven by
/// a splitmix stream so the suites need no RNG plumbing.
pub fn filled(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            state = splitmix(state);
            lo + (hi - lo) * unit(state)
        })
        .collect();
    Tensor::from_vec(dims, data).expect("dims match data")
}

pub fn splitmix(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a u64 to the unit interval.
pub fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Tensor whose entries are all distinct, for tie-free max-pool tests:
/// a seeded shuffle of an arithmetic ramp.
pub fn tie_free(dims: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.01 * i as f64 - 0.005 * n as f64).collect();
    let mut state = seed;
    for i in (1..n).rev() {
        state = splitmix(state);
        let j = (state % (i as u64 + 1)) as usize;
        vals.swap(i, j);
    }
    Tensor::from_vec(dims, vals).expect("dims match data")
}

/// Fixed pseudo-random weights for reducing a tensor-valued node to a
/// scalar via `dot_const`, so gradient checks exercise full Jacobians.
pub fn probe_weights<T: Real>(n: usize, seed: u64) -> Vec<T> {
    let mut state = seed ^ 0xD1B5_4A32_D192_ED03;
    (0..n)
        .map(|_| {
            state = splitmix(state);
            T::from_f64(2.0 * unit(state) - 1.0)
        })
        .collect()
}

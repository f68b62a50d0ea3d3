//! The registered operation set, enumerable for gradient-check sweeps.

use super::{Attrs, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// One registered operation with a canonical small test configuration.
pub struct OpCase {
    pub name: &'static str,
    /// Shapes of the inputs for the canonical configuration.
    pub input_shapes: Vec<Vec<usize>>,
    /// Maps a raw sample in [-1, 1] into the op's valid domain for input `i`.
    pub prep: fn(usize, f64) -> f64,
    pub attrs: Attrs,
}

fn id(_i: usize, v: f64) -> f64 {
    v
}

/// Every registered op with a canonical configuration. `Tape::apply` accepts
/// exactly these names.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        OpCase { name: "add", input_shapes: vec![vec![5], vec![5]], prep: id, attrs: Attrs::default() },
        OpCase { name: "sub", input_shapes: vec![vec![5], vec![5]], prep: id, attrs: Attrs::default() },
        OpCase { name: "mul", input_shapes: vec![vec![5], vec![5]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "scale",
            input_shapes: vec![vec![6]],
            prep: id,
            attrs: Attrs { value: Some(1.7), ..Attrs::default() },
        },
        OpCase {
            name: "add_scalar",
            input_shapes: vec![vec![6]],
            prep: id,
            attrs: Attrs { value: Some(-0.4), ..Attrs::default() },
        },
        OpCase { name: "matmul", input_shapes: vec![vec![3, 4], vec![4, 2]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "matmul",
            input_shapes: vec![vec![3, 4], vec![2, 4]],
            prep: id,
            attrs: Attrs { transpose_b: true, ..Attrs::default() },
        },
        OpCase { name: "add_row", input_shapes: vec![vec![3, 4], vec![4]], prep: id, attrs: Attrs::default() },
        OpCase { name: "add_chan", input_shapes: vec![vec![2, 3, 3], vec![2]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "conv2d",
            input_shapes: vec![vec![2, 4, 4], vec![3, 2, 3, 3], vec![3]],
            prep: id,
            attrs: Attrs { pad: Some(1), ..Attrs::default() },
        },
        OpCase { name: "avg_pool2", input_shapes: vec![vec![2, 4, 4]], prep: id, attrs: Attrs::default() },
        OpCase { name: "upsample2", input_shapes: vec![vec![2, 2, 2]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "patchify",
            input_shapes: vec![vec![3, 4, 4]],
            prep: id,
            attrs: Attrs { patch: Some(2), ..Attrs::default() },
        },
        OpCase {
            name: "reshape",
            input_shapes: vec![vec![2, 6]],
            prep: id,
            attrs: Attrs { shape: Some(vec![3, 4]), ..Attrs::default() },
        },
        OpCase {
            name: "concat",
            input_shapes: vec![vec![2, 3], vec![2, 3]],
            prep: id,
            attrs: Attrs { axis: Some(0), ..Attrs::default() },
        },
        OpCase {
            name: "slice",
            input_shapes: vec![vec![4, 5]],
            prep: id,
            attrs: Attrs { axis: Some(1), start: Some(1), len: Some(3), ..Attrs::default() },
        },
        OpCase { name: "sum", input_shapes: vec![vec![7]], prep: id, attrs: Attrs::default() },
        OpCase { name: "mean", input_shapes: vec![vec![7]], prep: id, attrs: Attrs::default() },
        OpCase { name: "softmax", input_shapes: vec![vec![3, 5]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "layer_norm",
            input_shapes: vec![vec![4, 6], vec![6], vec![6]],
            prep: id,
            attrs: Attrs { eps: Some(1e-5), ..Attrs::default() },
        },
        OpCase { name: "gelu", input_shapes: vec![vec![9]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "sqrt",
            input_shapes: vec![vec![6]],
            prep: |_, v| v + 1.5,
            attrs: Attrs::default(),
        },
        OpCase { name: "exp", input_shapes: vec![vec![6]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "log",
            input_shapes: vec![vec![6]],
            prep: |_, v| v + 2.0,
            attrs: Attrs::default(),
        },
        OpCase { name: "row_normalize", input_shapes: vec![vec![3, 4]], prep: id, attrs: Attrs::default() },
        OpCase {
            name: "cosine_similarity",
            input_shapes: vec![vec![5], vec![5]],
            // keep vectors away from the origin so the similarity stays smooth
            prep: |_, v| v + if v >= 0.0 { 0.5 } else { -0.5 },
            attrs: Attrs::default(),
        },
        OpCase { name: "squared_error", input_shapes: vec![vec![6], vec![6]], prep: id, attrs: Attrs::default() },
    ];
    cases.sort_by_key(|c| c.name);
    cases
}

/// Untracked single-op evaluation: runs the op on a scratch tape and returns
/// the resulting value.
pub fn eval_op(name: &str, inputs: &[&Tensor], attrs: &Attrs) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = tape.apply(name, &vars, attrs)?;
    Ok(tape.value(out).clone())
}

/// Runs a gradient check for every registered op against every input slot,
/// on random inputs in [-1, 1] mapped into each op's domain. Returns
/// (op name, input slot, max relative error) triples.
pub fn sweep_grad_checks(seed: u64, step: f64) -> Result<Vec<(String, usize, f64)>> {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, crate::rng::STREAM_INIT);
    let mut results = Vec::new();
    for case in op_cases() {
        let inputs: Vec<Tensor> = case
            .input_shapes
            .iter()
            .enumerate()
            .map(|(slot, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| (case.prep)(slot, rng.random_range(-1.0..1.0))).collect();
                Tensor::new(shape.clone(), data).expect("case shape")
            })
            .collect();
        for slot in 0..inputs.len() {
            let err = super::grad_check(
                |tape, x| {
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == slot { x } else { tape.constant(t.clone()) })
                        .collect();
                    let out = tape.apply(case.name, &vars, &case.attrs)?;
                    tape.sum(out)
                },
                &inputs[slot],
                step,
            )?;
            results.push((case.name.to_string(), slot, err));
        }
    }
    Ok(results)
}

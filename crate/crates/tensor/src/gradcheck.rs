//! Reverse-mode gradients against central finite differences.
//!
//! The analytic side runs on an f32 tape with trainable leaves. The
//! numerical side replays the same graph on an f64 tape, so the difference
//! quotient is not swamped by rounding. Each graph output is reduced to a
//! scalar with fixed random weights before differentiating, and the error
//! of a case is the norm-wise relative error over all inputs.

#[doc(hidden)]
pub use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CASES: usize = 20;
pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

/// Worst relative error of one operation over its random cases.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.cases >= CASES && self.worst < TOLERANCE
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator.
pub fn relative_error(a: &[f32], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences of `f` at `base` along every coordinate in
/// `coords`, given as (input, element) pairs.
pub fn central_differences(
    f: impl Fn(&[Vec<f64>]) -> f64,
    base: &[Vec<f64>],
    coords: &[(usize, usize)],
    step: f64,
) -> Vec<f64> {
    let mut p = base.to_vec();
    coords
        .iter()
        .map(|&(i, j)| {
            let x = p[i][j];
            p[i][j] = x + step;
            let fp = f(&p);
            p[i][j] = x - step;
            let fm = f(&p);
            p[i][j] = x;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// One random case: input shapes and values plus readout weights.
#[doc(hidden)]
pub struct Case {
    pub shapes: Vec<Vec<usize>>,
    pub inputs: Vec<Vec<f32>>,
}

#[doc(hidden)]
pub fn leaves(t: &mut Tape<f32>, case: &Case) -> Vec<Var> {
    case.shapes
        .iter()
        .zip(&case.inputs)
        .map(|(s, d)| t.leaf(&Tensor::new(s, d.clone()).expect("case shape").trainable()))
        .collect()
}

#[doc(hidden)]
pub fn constants(t: &mut Tape<f64>, shapes: &[Vec<usize>], vals: &[Vec<f64>]) -> Vec<Var> {
    shapes
        .iter()
        .zip(vals)
        .map(|(s, d)| t.constant(s, d.clone()).expect("case shape"))
        .collect()
}

/// Weighted scalar readout of `out` and the gradients of every input.
#[doc(hidden)]
pub fn analytic(t: &mut Tape<f32>, x: &[Var], out: Var, weights: &[f32]) -> Vec<Vec<f32>> {
    let shape = t.shape(out).to_vec();
    let w = t.constant(&shape, weights.to_vec()).expect("readout shape");
    let prod = t.mul(out, w).expect("readout shape");
    let loss = t.sum(prod);
    let grads = t.backward(loss).expect("backward");
    x.iter()
        .map(|&v| grads.get(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect()
}

/// Checks a graph written once and instantiated on both tape precisions.
/// Evaluates to an [`OpCheck`].
///
/// ```ignore
/// gradcheck!("tanh", seed, |rng| vec![vec![3, 4]], |t, x| t.tanh(x[0]))
/// ```
#[macro_export]
macro_rules! gradcheck {
    ($name:expr, $seed:expr, |$rng:ident| $shapes:expr, |$t:ident, $x:ident| $body:expr) => {{
        use $crate::gradcheck as __gc;
        #[allow(unused_imports)]
        use $crate::gradcheck::{Rng as _, SeedableRng as _};
        let mut $rng = __gc::CaseRng::seed_from_u64($seed);
        let mut worst = 0f64;
        for _ in 0..__gc::CASES {
            let shapes: Vec<Vec<usize>> = $shapes;
            let inputs: Vec<Vec<f32>> = shapes
                .iter()
                .map(|s| __gc::uniform(&mut $rng, s.iter().product()))
                .collect();
            let case = __gc::Case { shapes, inputs };
            let mut $t = $crate::Tape::<f32>::new();
            let $x: Vec<$crate::Var> = __gc::leaves(&mut $t, &case);
            let out: $crate::Var = $body;
            let weights = __gc::uniform(&mut $rng, $t.value(out).len());
            let grads = __gc::analytic(&mut $t, &$x, out, &weights);
            let eval = |vals: &[Vec<f64>]| -> f64 {
                let mut $t = $crate::Tape::<f64>::new();
                let $x: Vec<$crate::Var> = __gc::constants(&mut $t, &case.shapes, vals);
                let out: $crate::Var = $body;
                $t.value(out)
                    .iter()
                    .zip(&weights)
                    .map(|(&a, &b)| a * b as f64)
                    .sum()
            };
            let base: Vec<Vec<f64>> = case
                .inputs
                .iter()
                .map(|d| d.iter().map(|&v| v as f64).collect())
                .collect();
            for (i, g) in grads.iter().enumerate() {
                let coords: Vec<(usize, usize)> = (0..base[i].len()).map(|j| (i, j)).collect();
                let numeric = __gc::central_differences(&eval, &base, &coords, __gc::STEP);
                worst = worst.max(__gc::relative_error(g, &numeric));
            }
        }
        __gc::OpCheck {
            name: $name,
            cases: __gc::CASES,
            worst,
        }
    }};
}

#[doc(hidden)]
pub type CaseRng = ChaCha8Rng;

/// Every differentiable tape operation, each on [`CASES`] random inputs.
pub fn op_suite() -> Vec<OpCheck> {
    let mut out = Vec::new();
    out.push(gradcheck!(
        "matmul",
        1,
        |r| {
            let (m, k, n) = (
                r.random_range(1..5),
                r.random_range(1..6),
                r.random_range(1..5),
            );
            vec![vec![m, k], vec![k, n]]
        },
        |t, x| t.matmul(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "matmul_tiled",
        25,
        |r| {
            let (m, k, n) = (
                r.random_range(4..10),
                r.random_range(1..6),
                r.random_range(8..18),
            );
            vec![vec![m, k], vec![k, n]]
        },
        |t, x| t.matmul(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "matmul_t",
        2,
        |r| {
            let (m, k, n) = (
                r.random_range(1..6),
                r.random_range(1..6),
                r.random_range(1..5),
            );
            vec![vec![m, k], vec![n, k]]
        },
        |t, x| t.matmul_t(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "linear",
        3,
        |r| {
            let (m, k, n) = (
                r.random_range(1..6),
                r.random_range(1..6),
                r.random_range(1..10),
            );
            vec![vec![m, k], vec![n, k], vec![n]]
        },
        |t, x| t.linear(x[0], x[1], Some(x[2])).unwrap()
    ));
    out.push(gradcheck!(
        "add",
        4,
        |r| {
            let s = vec![r.random_range(1..4), r.random_range(1..5)];
            vec![s.clone(), s]
        },
        |t, x| t.add(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "sub",
        5,
        |r| {
            let s = vec![r.random_range(1..4), r.random_range(1..5)];
            vec![s.clone(), s]
        },
        |t, x| t.sub(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "mul",
        6,
        |r| {
            let s = vec![r.random_range(1..4), r.random_range(1..5)];
            vec![s.clone(), s]
        },
        |t, x| t.mul(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "mul_shared",
        7,
        |r| vec![vec![r.random_range(1..8)]],
        |t, x| t.mul(x[0], x[0]).unwrap()
    ));
    out.push(gradcheck!(
        "add_bias",
        8,
        |r| {
            let (m, n) = (r.random_range(1..5), r.random_range(1..6));
            vec![vec![m, n], vec![n]]
        },
        |t, x| t.add_bias(x[0], x[1]).unwrap()
    ));
    out.push(gradcheck!(
        "scale",
        9,
        |r| vec![vec![r.random_range(1..4), 3]],
        |t, x| t.scale(x[0], -1.7)
    ));
    out.push(gradcheck!(
        "gelu",
        10,
        |r| vec![vec![r.random_range(1..4), 5]],
        |t, x| t.gelu(x[0])
    ));
    out.push(gradcheck!(
        "tanh",
        11,
        |r| vec![vec![r.random_range(1..4), 5]],
        |t, x| t.tanh(x[0])
    ));
    out.push(gradcheck!(
        "sigmoid",
        12,
        |r| vec![vec![r.random_range(1..4), 5]],
        |t, x| t.sigmoid(x[0])
    ));
    out.push(gradcheck!(
        "softmax_rows",
        13,
        |r| { vec![vec![r.random_range(1..4), r.random_range(1..7)]] },
        |t, x| t.softmax_rows(x[0]).unwrap()
    ));
    out.push(gradcheck!(
        "layer_norm",
        14,
        |r| {
            let (m, n) = (r.random_range(1..4), r.random_range(3..9));
            vec![vec![m, n], vec![n], vec![n]]
        },
        |t, x| t.layer_norm(x[0], x[1], x[2], 1e-12).unwrap()
    ));
    let ids = [0usize, 2, 0, 1, 2, 2];
    out.push(gradcheck!(
        "gather_rows",
        15,
        |r| vec![vec![3, r.random_range(1..5)]],
        |t, x| t.gather_rows(x[0], &ids).unwrap()
    ));
    out.push(gradcheck!(
        "embedding_lookup",
        16,
        |r| vec![vec![3, r.random_range(1..5)]],
        |t, x| t.embedding_lookup(x[0], &ids).unwrap()
    ));
    out.push(gradcheck!(
        "slice_cols",
        17,
        |r| vec![vec![r.random_range(1..4), 6]],
        |t, x| t.slice_cols(x[0], 2, 3).unwrap()
    ));
    out.push(gradcheck!("reshape", 18, |_r| vec![vec![2, 6]], |t, x| t
        .reshape(x[0], &[3, 4])
        .unwrap()));
    out.push(gradcheck!(
        "sum",
        19,
        |r| vec![vec![r.random_range(1..4), 4]],
        |t, x| t.sum(x[0])
    ));
    out.push(gradcheck!(
        "mean",
        20,
        |r| vec![vec![r.random_range(1..4), 4]],
        |t, x| t.mean(x[0])
    ));
    let mut trng = ChaCha8Rng::seed_from_u64(99);
    let targets: Vec<usize> = (0..4).map(|_| trng.random_range(0..5)).collect();
    out.push(gradcheck!(
        "cross_entropy",
        21,
        |_r| vec![vec![4, 5]],
        |t, x| t.cross_entropy(x[0], &targets).unwrap()
    ));
    let bce_targets = [1.0f32, 0.0, 0.0, 1.0, 1.0, 0.0];
    out.push(gradcheck!(
        "binary_cross_entropy",
        22,
        |_r| vec![vec![6]],
        |t, x| {
            let p = t.sigmoid(x[0]);
            t.binary_cross_entropy(p, &bce_targets).unwrap()
        }
    ));
    let (batch, seq, heads, hidden) = (2usize, 4usize, 2usize, 6usize);
    let keep = [true, true, true, false, true, true, false, false];
    out.push(gradcheck!(
        "attention",
        23,
        |_r| vec![vec![batch * seq, hidden]; 3],
        |t, x| t
            .attention(x[0], x[1], x[2], batch, seq, heads, &keep)
            .unwrap()
    ));
    out.push(gradcheck!(
        "composite",
        24,
        |_r| {
            vec![
                vec![3, 4],
                vec![4, 4],
                vec![4],
                vec![4],
                vec![4],
                vec![2, 4],
            ]
        },
        |t, x| {
            let h = t.linear(x[0], x[1], Some(x[2])).unwrap();
            let h = t.gelu(h);
            let h = t.add(x[0], h).unwrap();
            let h = t.layer_norm(h, x[3], x[4], 1e-12).unwrap();
            let first = t.gather_rows(h, &[0]).unwrap();
            let pooled = t.tanh(first);
            let logits = t.matmul_t(pooled, x[5]).unwrap();
            t.softmax_rows(logits).unwrap()
        }
    ));
    out
}

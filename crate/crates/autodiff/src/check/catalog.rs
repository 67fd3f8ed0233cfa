//! Every primitive and composite operation, each with a generator of random
//! shapes and inputs kept away from points where the operation is not smooth.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::nn;
use crate::tape::{Array, Var};

/// One randomly drawn instance of an operation.
pub struct Case {
    pub inputs: Vec<Array>,
    pub f: Box<dyn Fn(&[Var]) -> Result<Var>>,
}

pub struct Entry {
    pub name: &'static str,
    /// Part of the recorded primitive set rather than built from it.
    pub primitive: bool,
    pub draw: fn(&mut StdRng) -> Case,
}

fn uniform(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Array {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi))
}

/// Entries with magnitude in `[0.1, 2)` and a random sign.
fn off_zero(rng: &mut StdRng, shape: &[usize]) -> Array {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let m = rng.random_range(0.1..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn normal(rng: &mut StdRng, shape: &[usize]) -> Array {
    uniform(rng, shape, -1.5, 1.5)
}

fn dim(rng: &mut StdRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn case(inputs: Vec<Array>, f: impl Fn(&[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        f: Box::new(f),
    }
}

/// A second operand shape that broadcasts against `(n, m)`.
fn broadcast_partner(rng: &mut StdRng, n: usize, m: usize) -> Vec<usize> {
    match rng.random_range(0..5) {
        0 => vec![m],
        1 => vec![n, 1],
        2 => vec![1, m],
        3 => vec![],
        _ => vec![n, m],
    }
}

fn binary(rng: &mut StdRng, positive_rhs: bool) -> (Array, Array) {
    let (n, m) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let a = normal(rng, &[n, m]);
    let shape = broadcast_partner(rng, n, m);
    let b = if positive_rhs {
        off_zero(rng, &shape).mapv(|v| v.abs() + 0.4)
    } else {
        normal(rng, &shape)
    };
    if rng.random::<bool>() {
        (a, b)
    } else {
        (b, a)
    }
}

fn small_vec(rng: &mut StdRng) -> Vec<usize> {
    let rank = dim(rng, 1, 3);
    (0..rank).map(|_| dim(rng, 1, 4)).collect()
}

fn conv_dims(rng: &mut StdRng) -> (usize, usize, usize, usize, usize, usize, usize) {
    let (b, ci, co, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
    let pl = dim(rng, 0, k - 1);
    let pr = dim(rng, 0, k - 1);
    let l = dim(rng, k.saturating_sub(pl + pr).max(1), 7);
    (b, ci, co, k, pl, pr, l)
}

fn three_d(rng: &mut StdRng, max_len: usize) -> Vec<usize> {
    vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, max_len)]
}

pub fn entries() -> Vec<Entry> {
    vec![
        Entry { name: "add", primitive: true, draw: |r| {
            let (a, b) = binary(r, false);
            case(vec![a, b], |v| v[0].add(&v[1]))
        }},
        Entry { name: "sub", primitive: true, draw: |r| {
            let (a, b) = binary(r, false);
            case(vec![a, b], |v| v[0].sub(&v[1]))
        }},
        Entry { name: "mul", primitive: true, draw: |r| {
            let (a, b) = binary(r, false);
            case(vec![a, b], |v| v[0].mul(&v[1]))
        }},
        Entry { name: "div", primitive: true, draw: |r| {
            let (n, m) = (dim(r, 1, 5), dim(r, 1, 5));
            let a = normal(r, &[n, m]);
            let shape = broadcast_partner(r, n, m);
            let b = uniform(r, &shape, 0.4, 2.0);
            if r.random::<bool>() {
                case(vec![a, b], |v| v[0].div(&v[1]))
            } else {
                let a = a.mapv(|x| x.abs() + 0.4);
                case(vec![b, a], |v| v[0].div(&v[1]))
            }
        }},
        Entry { name: "neg", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![normal(r, &s)], |v| Ok(v[0].neg()))
        }},
        Entry { name: "scale", primitive: true, draw: |r| {
            let s = small_vec(r);
            let c = r.random_range(-3.0..3.0);
            case(vec![normal(r, &s)], move |v| Ok(v[0].scale(c)))
        }},
        Entry { name: "offset", primitive: true, draw: |r| {
            let s = small_vec(r);
            let c = r.random_range(-3.0..3.0);
            case(vec![normal(r, &s)], move |v| Ok(v[0].offset(c)))
        }},
        Entry { name: "exp", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![normal(r, &s)], |v| Ok(v[0].exp()))
        }},
        Entry { name: "log", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![uniform(r, &s, 0.3, 3.0)], |v| Ok(v[0].log()))
        }},
        Entry { name: "sqrt", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![uniform(r, &s, 0.3, 3.0)], |v| Ok(v[0].sqrt()))
        }},
        Entry { name: "sigmoid", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![uniform(r, &s, -4.0, 4.0)], |v| Ok(v[0].sigmoid()))
        }},
        Entry { name: "tanh", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![normal(r, &s)], |v| Ok(v[0].tanh()))
        }},
        Entry { name: "softplus", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![uniform(r, &s, -4.0, 4.0)], |v| Ok(v[0].softplus()))
        }},
        Entry { name: "relu", primitive: true, draw: |r| {
            let s = small_vec(r);
            case(vec![off_zero(r, &s)], |v| Ok(v[0].relu()))
        }},
        Entry { name: "sum_to", primitive: true, draw: |r| {
            let s = vec![dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
            let keep_lead = r.random::<bool>();
            let target: Vec<usize> = s
                .iter()
                .skip(if keep_lead { 0 } else { 1 })
                .map(|&d| if r.random::<bool>() { d } else { 1 })
                .collect();
            case(vec![normal(r, &s)], move |v| v[0].sum_to(&target))
        }},
        Entry { name: "broadcast_to", primitive: true, draw: |r| {
            let full = vec![dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
            let src: Vec<usize> = full
                .iter()
                .map(|&d| if r.random::<bool>() { d } else { 1 })
                .collect();
            case(vec![normal(r, &src)], move |v| v[0].broadcast_to(&full))
        }},
        Entry { name: "reshape", primitive: true, draw: |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![normal(r, &[a, b, 2])], move |v| v[0].reshape(&[2 * b, a]))
        }},
        Entry { name: "transpose", primitive: true, draw: |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 5)];
            case(vec![normal(r, &s)], |v| v[0].transpose())
        }},
        Entry { name: "matmul", primitive: true, draw: |r| {
            let (n, k, m) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            case(vec![normal(r, &[n, k]), normal(r, &[k, m])], |v| v[0].matmul(&v[1]))
        }},
        Entry { name: "conv1d", primitive: true, draw: |r| {
            let (b, ci, co, k, pl, pr, l) = conv_dims(r);
            case(vec![normal(r, &[b, ci, l]), normal(r, &[co, ci, k])], move |v| {
                v[0].conv1d(&v[1], pl, pr)
            })
        }},
        Entry { name: "conv1d_input_grad", primitive: true, draw: |r| {
            let (b, ci, co, k, pl, pr, l) = conv_dims(r);
            let lo = l + pl + pr + 1 - k;
            case(vec![normal(r, &[b, co, lo]), normal(r, &[co, ci, k])], move |v| {
                v[0].conv1d_input_grad(&v[1], pl, l)
            })
        }},
        Entry { name: "conv1d_weight_grad", primitive: true, draw: |r| {
            let (b, ci, co, k, pl, pr, l) = conv_dims(r);
            let lo = l + pl + pr + 1 - k;
            case(vec![normal(r, &[b, ci, l]), normal(r, &[b, co, lo])], move |v| {
                v[0].conv1d_weight_grad(&v[1], pl, k)
            })
        }},
        Entry { name: "gather", primitive: true, draw: |r| {
            let n = dim(r, 1, 8);
            let m = dim(r, 1, 10);
            let index: Rc<[usize]> = (0..m).map(|_| r.random_range(0..n)).collect();
            case(vec![normal(r, &[n])], move |v| v[0].gather(index.clone(), &[m]))
        }},
        Entry { name: "scatter_add", primitive: true, draw: |r| {
            let n = dim(r, 1, 8);
            let m = dim(r, 1, 10);
            let index: Rc<[usize]> = (0..m).map(|_| r.random_range(0..n)).collect();
            case(vec![normal(r, &[m])], move |v| v[0].scatter_add(index.clone(), &[n]))
        }},
        Entry { name: "elu", primitive: false, draw: |r| {
            let s = small_vec(r);
            case(vec![off_zero(r, &s)], |v| Ok(nn::elu(&v[0], 1.0)))
        }},
        Entry { name: "selu", primitive: false, draw: |r| {
            let s = small_vec(r);
            case(vec![off_zero(r, &s)], |v| Ok(nn::selu(&v[0])))
        }},
        Entry { name: "mish", primitive: false, draw: |r| {
            let s = small_vec(r);
            case(vec![normal(r, &s)], |v| Ok(nn::mish(&v[0])))
        }},
        Entry { name: "linear", primitive: false, draw: |r| {
            let (n, i, o) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            case(vec![normal(r, &[n, i]), normal(r, &[i, o]), normal(r, &[o])], |v| {
                nn::linear(&v[0], &v[1], &v[2])
            })
        }},
        Entry { name: "conv1d_same", primitive: false, draw: |r| {
            let (b, ci, co, k, l) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 5), dim(r, 2, 7));
            case(
                vec![normal(r, &[b, ci, l]), normal(r, &[co, ci, k]), normal(r, &[co])],
                |v| nn::conv1d_same(&v[0], &v[1], &v[2]),
            )
        }},
        Entry { name: "max_pool1d", primitive: false, draw: |r| {
            let s = three_d(r, 9);
            let k = dim(r, 1, s[2].min(4));
            let stride = dim(r, 1, k);
            let pad = dim(r, 0, k - 1);
            case(vec![normal(r, &s)], move |v| nn::max_pool1d(&v[0], k, stride, pad))
        }},
        Entry { name: "avg_pool1d", primitive: false, draw: |r| {
            let s = three_d(r, 9);
            let k = dim(r, 1, s[2].min(4));
            case(vec![normal(r, &s)], move |v| nn::avg_pool1d(&v[0], k))
        }},
        Entry { name: "global_avg_pool1d", primitive: false, draw: |r| {
            let s = three_d(r, 6);
            case(vec![normal(r, &s)], |v| nn::global_avg_pool1d(&v[0]))
        }},
        Entry { name: "batch_norm", primitive: false, draw: |r| {
            let c = dim(r, 1, 3);
            let s = if r.random::<bool>() {
                vec![dim(r, 2, 4), c, dim(r, 2, 4)]
            } else {
                vec![dim(r, 2, 5), c]
            };
            case(vec![normal(r, &s), normal(r, &[c]), normal(r, &[c])], |v| {
                nn::batch_norm(&v[0], &v[1], &v[2], 1e-5)
            })
        }},
        Entry { name: "dropout", primitive: false, draw: |r| {
            let s = small_vec(r);
            let p = r.random_range(0.1..0.6);
            let seed: u64 = r.random();
            case(vec![normal(r, &s)], move |v| {
                Ok(nn::dropout(&v[0], p, &mut StdRng::seed_from_u64(seed)))
            })
        }},
        Entry { name: "flatten", primitive: false, draw: |r| {
            let s = three_d(r, 4);
            case(vec![normal(r, &s)], |v| nn::flatten(&v[0]))
        }},
        Entry { name: "concat_channels", primitive: true, draw: |r| {
            let (b, l) = (dim(r, 1, 3), dim(r, 1, 4));
            let parts = dim(r, 1, 3);
            let inputs = (0..parts).map(|_| {
                let c = dim(r, 1, 3);
                normal(r, &[b, c, l])
            }).collect();
            case(inputs, nn::concat_channels)
        }},
        Entry { name: "log_softmax", primitive: false, draw: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![uniform(r, &s, -3.0, 3.0)], |v| nn::log_softmax(&v[0]))
        }},
        Entry { name: "softmax", primitive: false, draw: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![uniform(r, &s, -3.0, 3.0)], |v| nn::softmax(&v[0]))
        }},
        Entry { name: "cross_entropy", primitive: false, draw: |r| {
            let (n, c) = (dim(r, 1, 5), dim(r, 1, 4));
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            case(vec![uniform(r, &[n, c], -3.0, 3.0)], move |v| {
                nn::cross_entropy_with_logits(&v[0], &targets)
            })
        }},
        Entry { name: "binary_cross_entropy", primitive: false, draw: |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 4)];
            let y = ArrayD::from_shape_simple_fn(IxDyn(&s), || f64::from(r.random::<bool>() as u8));
            case(vec![uniform(r, &s, -3.0, 3.0)], move |v| {
                nn::binary_cross_entropy_with_logits(&v[0], &y)
            })
        }},
        Entry { name: "l2_normalize", primitive: false, draw: |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            case(vec![off_zero(r, &s)], |v| nn::l2_normalize(&v[0], 1e-12))
        }},
        Entry { name: "squared_euclidean", primitive: false, draw: |r| {
            let (n, m, d) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 5));
            case(vec![normal(r, &[n, d]), normal(r, &[m, d])], |v| {
                nn::squared_euclidean(&v[0], &v[1])
            })
        }},
        Entry { name: "cosine_similarity", primitive: false, draw: |r| {
            let (n, m, d) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 5));
            case(vec![off_zero(r, &[n, d]), off_zero(r, &[m, d])], |v| {
                nn::cosine_similarity(&v[0], &v[1], 1e-12)
            })
        }},
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub cases: usize,
    pub worst_first_order: f64,
    pub worst_second_order: Option<f64>,
}

/// Runs `cases` random draws of every entry. Second-order checks are run for
/// the first `second_order_cases` draws only.
pub fn run(seed: u64, cases: usize, second_order_cases: usize) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for (k, entry) in entries().into_iter().enumerate() {
        let mut rng = StdRng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut first: f64 = 0.0;
        let mut second: Option<f64> = None;
        for i in 0..cases {
            let Case { inputs, f } = (entry.draw)(&mut rng);
            first = first.max(super::gradcheck(&f, &inputs, super::STEP)?);
            if i < second_order_cases {
                let e = super::gradcheck_second_order(&f, &inputs, super::STEP)?;
                second = Some(second.map_or(e, |s| s.max(e)));
            }
        }
        out.push(Outcome {
            name: entry.name,
            cases,
            worst_first_order: first,
            worst_second_order: second,
        });
    }
    Ok(out)
}

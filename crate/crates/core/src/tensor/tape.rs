//! Gradient tape: append-only node arena recording every operation whose
//! inputs are tracked, consumed by reverse-mode `backward`.
//!
//! The tape is rebuilt for every training step (define-by-run). Inputs of a
//! node always precede it in the arena, so a single reverse sweep applies the
//! chain rule in topological order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

type NodeId = usize;

/// Link from a tensor back into its tape's node arena.
#[derive(Clone)]
pub(crate) struct TapeRef {
    tape_id: u64,
    arena: Arc<Mutex<TapeData>>,
    node: NodeId,
}

struct TapeData {
    nodes: Vec<Node>,
    watched: Vec<NodeId>,
}

struct Node {
    op: Op,
}

/// One input of a recorded node. `node: None` means the input was a plain
/// value (constant); it still participates in the forward math saved here
/// but receives no gradient.
struct Operand {
    node: Option<NodeId>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Operand {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Square,
}

impl UnaryKind {
    fn eval(self) -> fn(f64) -> f64 {
        match self {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Neg => |x| -x,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryKind::Softplus => softplus,
            UnaryKind::Square => |x| x * x,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn eval(self) -> fn(f64, f64) -> f64 {
        match self {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        }
    }
}

enum Op {
    Leaf {
        shape: Vec<usize>,
    },
    Unary {
        kind: UnaryKind,
        a: Operand,
        out: Arc<Vec<f64>>,
    },
    Binary {
        kind: BinKind,
        a: Operand,
        b: Operand,
        out_shape: Vec<usize>,
    },
    Matmul {
        a: Operand,
        b: Operand,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAll {
        a: Operand,
    },
    MeanAll {
        a: Operand,
    },
    SumAxis {
        a: Operand,
        axis: usize,
    },
    MeanAxis {
        a: Operand,
        axis: usize,
    },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// log1p(exp(-|x|)) + max(x, 0): overflow-safe for large |x|.
fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub struct Tape {
    id: u64,
    arena: Arc<Mutex<TapeData>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            arena: Arc::new(Mutex::new(TapeData {
                nodes: Vec::new(),
                watched: Vec::new(),
            })),
        }
    }

    /// Register a leaf whose gradient `backward` will report. The returned
    /// tensor carries the same values; any existing tape link of `t` is
    /// ignored (the leaf starts a fresh history on this tape).
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut arena = self.arena.lock().unwrap();
        let id = arena.nodes.len();
        arena.nodes.push(Node {
            op: Op::Leaf {
                shape: t.shape.clone(),
            },
        });
        arena.watched.push(id);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(TapeRef {
                tape_id: self.id,
                arena: self.arena.clone(),
                node: id,
            }),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients are reported for every
    /// watched leaf; leaves the loss never touched get zero tensors. Calling
    /// backward again on the same tape starts from scratch (no accumulation).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let tref = loss.node.as_ref().ok_or(Error::DetachedTensor)?;
        if tref.tape_id != self.id {
            return Err(Error::ForeignTape);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape.clone(),
            });
        }
        let arena = self.arena.lock().unwrap();
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; arena.nodes.len()];
        acc[tref.node] = Some(vec![1.0]);
        let mut leaf_grads: HashMap<NodeId, Vec<f64>> = HashMap::new();

        for id in (0..=tref.node).rev() {
            let Some(g) = acc[id].take() else { continue };
            if g.iter().any(|x| x.is_nan()) {
                return Err(Error::NumericFault {
                    context: format!("NaN gradient reached node {id} during backward"),
                });
            }
            match &arena.nodes[id].op {
                Op::Leaf { .. } => {
                    leaf_grads.insert(id, g);
                }
                Op::Unary { kind, a, out } => {
                    if let Some(an) = a.node {
                        let da = match kind {
                            UnaryKind::Exp => zip(&g, out, |gv, ov| gv * ov),
                            UnaryKind::Log => zip(&g, &a.data, |gv, av| gv / av),
                            UnaryKind::Neg => kernels::map(&g, |x| -x),
                            UnaryKind::Tanh => zip(&g, out, |gv, ov| gv * (1.0 - ov * ov)),
                            UnaryKind::Sigmoid => zip(&g, out, |gv, ov| gv * ov * (1.0 - ov)),
                            // relu grad at 0 is 0: out > 0 excludes the kink.
                            UnaryKind::Relu => zip(&g, out, |gv, ov| if ov > 0.0 { gv } else { 0.0 }),
                            UnaryKind::Softplus => zip(&g, &a.data, |gv, av| gv * sigmoid(av)),
                            UnaryKind::Square => zip(&g, &a.data, |gv, av| gv * 2.0 * av),
                        };
                        accumulate(&mut acc[an], da);
                    }
                }
                Op::Binary {
                    kind,
                    a,
                    b,
                    out_shape,
                } => {
                    if let Some(an) = a.node {
                        let partial = match kind {
                            BinKind::Add | BinKind::Sub => g.clone(),
                            BinKind::Mul => kernels::zip_broadcast(
                                &g, out_shape, &b.data, &b.shape, out_shape, |gv, bv| gv * bv,
                            ),
                            BinKind::Div => kernels::zip_broadcast(
                                &g, out_shape, &b.data, &b.shape, out_shape, |gv, bv| gv / bv,
                            ),
                        };
                        accumulate(
                            &mut acc[an],
                            kernels::reduce_to_shape(&partial, out_shape, &a.shape),
                        );
                    }
                    if let Some(bn) = b.node {
                        let partial = match kind {
                            BinKind::Add => g.clone(),
                            BinKind::Sub => kernels::map(&g, |x| -x),
                            BinKind::Mul => kernels::zip_broadcast(
                                &g, out_shape, &a.data, &a.shape, out_shape, |gv, av| gv * av,
                            ),
                            BinKind::Div => {
                                let t = kernels::zip_broadcast(
                                    &a.data,
                                    &a.shape,
                                    &b.data,
                                    &b.shape,
                                    out_shape,
                                    |av, bv| -av / (bv * bv),
                                );
                                zip(&g, &t, |gv, tv| gv * tv)
                            }
                        };
                        accumulate(
                            &mut acc[bn],
                            kernels::reduce_to_shape(&partial, out_shape, &b.shape),
                        );
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    if let Some(an) = a.node {
                        // dA = dC · Bᵀ
                        accumulate(&mut acc[an], kernels::matmul_nt(&g, &b.data, *m, *n, *k));
                    }
                    if let Some(bn) = b.node {
                        // dB = Aᵀ · dC
                        accumulate(&mut acc[bn], kernels::matmul_tn(&a.data, &g, *m, *k, *n));
                    }
                }
                Op::SumAll { a } => {
                    if let Some(an) = a.node {
                        accumulate(&mut acc[an], vec![g[0]; a.numel()]);
                    }
                }
                Op::MeanAll { a } => {
                    if let Some(an) = a.node {
                        let n = a.numel();
                        accumulate(&mut acc[an], vec![g[0] / n as f64; n]);
                    }
                }
                Op::SumAxis { a, axis } => {
                    if let Some(an) = a.node {
                        accumulate(&mut acc[an], kernels::repeat_axis(&g, &a.shape, *axis));
                    }
                }
                Op::MeanAxis { a, axis } => {
                    if let Some(an) = a.node {
                        let extent = a.shape[*axis] as f64;
                        let rep = kernels::repeat_axis(&g, &a.shape, *axis);
                        accumulate(&mut acc[an], kernels::map(&rep, |x| x / extent));
                    }
                }
            }
        }

        let mut grads = HashMap::new();
        for &leaf in &arena.watched {
            let Op::Leaf { shape } = &arena.nodes[leaf].op else {
                unreachable!("watched ids always point at leaves");
            };
            let numel: usize = shape.iter().product();
            let g = leaf_grads.remove(&leaf).unwrap_or_else(|| vec![0.0; numel]);
            grads.insert(
                leaf,
                Tensor {
                    shape: shape.clone(),
                    data: Arc::new(g),
                    node: None,
                },
            );
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Leaf gradients from one backward sweep, keyed by the watched tensors.
#[derive(Debug)]
pub struct Gradients {
    tape_id: u64,
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient for a tensor returned by `Tape::watch`, or `None` if the
    /// tensor is not a watched leaf of the tape this sweep ran on.
    pub fn wrt(&self, leaf: &Tensor) -> Option<&Tensor> {
        let r = leaf.node.as_ref()?;
        if r.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(&r.node)
    }
}

fn zip<F: Fn(f64, f64) -> f64 + Sync>(a: &[f64], b: &[f64], f: F) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let shape = [a.len()];
    kernels::zip_broadcast(a, &shape, b, &shape, &shape, f)
}

fn accumulate(slot: &mut Option<Vec<f64>>, add: Vec<f64>) {
    match slot {
        None => *slot = Some(add),
        Some(v) => {
            debug_assert_eq!(v.len(), add.len());
            for (x, y) in v.iter_mut().zip(add) {
                *x += y;
            }
        }
    }
}

// Operation methods. Each computes its value with the kernels, then records
// a node only when an input is tracked; mixing tensors from two live tapes
// is a foreign-tape error.
impl Tensor {
    fn operand(&self) -> Operand {
        Operand {
            node: self.node.as_ref().map(|r| r.node),
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }

    /// The common tape of the tracked inputs, if any.
    fn joint_tape<'a>(inputs: &[&'a Tensor]) -> Result<Option<&'a TapeRef>> {
        let mut found: Option<&TapeRef> = None;
        for t in inputs {
            if let Some(r) = &t.node {
                match found {
                    None => found = Some(r),
                    Some(f) if f.tape_id == r.tape_id => {}
                    Some(_) => return Err(Error::ForeignTape),
                }
            }
        }
        Ok(found)
    }

    fn record(tape: &TapeRef, shape: Vec<usize>, data: Arc<Vec<f64>>, op: Op) -> Tensor {
        let mut arena = tape.arena.lock().unwrap();
        let id = arena.nodes.len();
        arena.nodes.push(Node { op });
        Tensor {
            shape,
            data,
            node: Some(TapeRef {
                tape_id: tape.tape_id,
                arena: tape.arena.clone(),
                node: id,
            }),
        }
    }

    fn binary(&self, rhs: &Tensor, kind: BinKind, name: &'static str) -> Result<Tensor> {
        let out_shape =
            kernels::broadcast_shape(&self.shape, &rhs.shape).ok_or(Error::ShapeMismatch {
                op: name,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            })?;
        let data = Arc::new(kernels::zip_broadcast(
            &self.data,
            &self.shape,
            &rhs.data,
            &rhs.shape,
            &out_shape,
            kind.eval(),
        ));
        match Tensor::joint_tape(&[self, rhs])? {
            None => Ok(Tensor {
                shape: out_shape,
                data,
                node: None,
            }),
            Some(tape) => Ok(Tensor::record(
                tape,
                out_shape.clone(),
                data,
                Op::Binary {
                    kind,
                    a: self.operand(),
                    b: rhs.operand(),
                    out_shape,
                },
            )),
        }
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let data = Arc::new(kernels::map(&self.data, kind.eval()));
        match &self.node {
            None => Tensor {
                shape: self.shape.clone(),
                data,
                node: None,
            },
            Some(tape) => Tensor::record(
                tape,
                self.shape.clone(),
                data.clone(),
                Op::Unary {
                    kind,
                    a: self.operand(),
                    out: data,
                },
            ),
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Mul, "mul")
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinKind::Div, "div")
    }

    /// Scalar shift; a constant never fails broadcasting.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c)).expect("scalar broadcasts")
    }

    /// Scalar gain; a constant never fails broadcasting.
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c)).expect("scalar broadcasts")
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; nonpositive input follows IEEE (−inf/NaN) without error.
    pub fn log(&self) -> Tensor {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::Relu)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryKind::Softplus)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryKind::Square)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let data = Arc::new(kernels::matmul_nn(&self.data, &rhs.data, m, k, n));
        let out_shape = vec![m, n];
        match Tensor::joint_tape(&[self, rhs])? {
            None => Ok(Tensor {
                shape: out_shape,
                data,
                node: None,
            }),
            Some(tape) => Ok(Tensor::record(
                tape,
                out_shape,
                data,
                Op::Matmul {
                    a: self.operand(),
                    b: rhs.operand(),
                    m,
                    k,
                    n,
                },
            )),
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let data = Arc::new(vec![kernels::sum_all(&self.data)]);
        match &self.node {
            None => Tensor {
                shape: vec![],
                data,
                node: None,
            },
            Some(tape) => {
                Tensor::record(tape, vec![], data, Op::SumAll { a: self.operand() })
            }
        }
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor {
        let data = Arc::new(vec![kernels::sum_all(&self.data) / self.numel() as f64]);
        match &self.node {
            None => Tensor {
                shape: vec![],
                data,
                node: None,
            },
            Some(tape) => {
                Tensor::record(tape, vec![], data, Op::MeanAll { a: self.operand() })
            }
        }
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let extent = self.shape[axis] as f64;
        let mut data = kernels::sum_axis(&self.data, &self.shape, axis);
        if mean {
            for x in &mut data {
                *x /= extent;
            }
        }
        let data = Arc::new(data);
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        match &self.node {
            None => Ok(Tensor {
                shape: out_shape,
                data,
                node: None,
            }),
            Some(tape) => {
                let a = self.operand();
                let op = if mean {
                    Op::MeanAxis { a, axis }
                } else {
                    Op::SumAxis { a, axis }
                };
                Ok(Tensor::record(tape, out_shape, data, op))
            }
        }
    }
}

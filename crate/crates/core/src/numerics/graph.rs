//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every primitive evaluates eagerly and appends a node
//! holding its value and the ids of its inputs. Because nodes are appended in
//! evaluation order, the tape is already topologically sorted and the backward
//! pass is a single reverse sweep. Graphs are rebuilt for every loss
//! evaluation.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::{self, Tensor};
use super::ParamSet;
use crate::error::{Error, Result};

/// The registered primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    Gelu,
    SoftmaxRows,
    Square,
    Sum,
    Softplus,
    Gather,
    Reshape,
    Round,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::Matmul,
        Primitive::Transpose,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddRow,
        Primitive::Gelu,
        Primitive::SoftmaxRows,
        Primitive::Square,
        Primitive::Sum,
        Primitive::Softplus,
        Primitive::Gather,
        Primitive::Reshape,
        Primitive::Round,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddRow => "add_row",
            Primitive::Gelu => "gelu",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Softplus => "softplus",
            Primitive::Gather => "gather",
            Primitive::Reshape => "reshape",
            Primitive::Round => "round",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_differentiable(self) -> bool {
        !matches!(self, Primitive::Round)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static FAULT: Cell<Option<Primitive>> = const { Cell::new(None) };
}

/// Test hook: corrupts the backward rule of `primitive` on the current thread
/// (its input gradients are scaled by 1.5) until cleared with `None`.
pub fn inject_fault(primitive: Option<Primitive>) {
    FAULT.with(|f| f.set(primitive));
}

fn faulty(p: Primitive) -> bool {
    FAULT.with(|f| f.get() == Some(p))
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Gelu(usize),
    SoftmaxRows(usize),
    Square(usize),
    Sum(usize),
    Softplus(usize),
    Gather(usize, Rc<[usize]>),
    Reshape(usize),
    Round,
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::Matmul(..) => Primitive::Matmul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Gelu(_) => Primitive::Gelu,
            Op::SoftmaxRows(_) => Primitive::SoftmaxRows,
            Op::Square(_) => Primitive::Square,
            Op::Sum(_) => Primitive::Sum,
            Op::Softplus(_) => Primitive::Softplus,
            Op::Gather(..) => Primitive::Gather,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Round => Primitive::Round,
        })
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of evaluated nodes.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(&[a, b]);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar output. Returns one optional gradient per
    /// node; `None` for nodes the output does not depend on through
    /// differentiable paths.
    pub fn backward(&self, output: Var<'_>) -> Result<Vec<Option<Tensor>>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let contributions = local_grads(&nodes, node, &dy)?;
            let scale = node.op.primitive().filter(|p| faulty(*p)).map(|_| 1.5);
            for (input, g) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                let g = match scale {
                    Some(s) => g.scale(s),
                    None => g,
                };
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Ok(grads)
    }
}

/// Vector-Jacobian products of one node with respect to each input.
fn local_grads(nodes: &[Node], node: &Node, dy: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let needs = |i: usize| nodes[i].requires_grad;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Matmul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                out.push((*a, tensor::matmul_nt(dy, val(*b))?));
            }
            if needs(*b) {
                out.push((*b, tensor::matmul_tn(val(*a), dy)?));
            }
            out
        }
        Op::Transpose(a) => vec![(*a, tensor::transpose(dy)?)],
        Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
        Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.scale(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, dy.zip_map(val(*b), |g, y| g * y)?),
            (*b, dy.zip_map(val(*a), |g, x| g * x)?),
        ],
        Op::Scale(a, c) => vec![(*a, dy.scale(*c))],
        Op::AddRow(a, bias) => {
            let (m, n) = dy.dims2()?;
            let mut db = vec![0.0; n];
            for i in 0..m {
                for (d, g) in db.iter_mut().zip(&dy.data()[i * n..(i + 1) * n]) {
                    *d += g;
                }
            }
            let bshape = val(*bias).shape().to_vec();
            vec![(*a, dy.clone()), (*bias, Tensor::from_raw(bshape, db))]
        }
        Op::Gelu(a) => vec![(*a, dy.zip_map(val(*a), |g, x| g * tensor::gelu_grad(x))?)],
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let (m, n) = y.dims2()?;
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &dy.data()[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                for j in 0..n {
                    dx[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*a, Tensor::from_raw(vec![m, n], dx))]
        }
        Op::Square(a) => vec![(*a, dy.zip_map(val(*a), |g, x| 2.0 * x * g)?)],
        Op::Sum(a) => {
            let g = dy.data()[0];
            vec![(*a, Tensor::full(val(*a).shape(), g))]
        }
        Op::Softplus(a) => vec![(*a, dy.zip_map(val(*a), |g, x| g * tensor::sigmoid(x))?)],
        Op::Gather(a, index) => {
            let src = val(*a);
            let mut dx = vec![0.0; src.len()];
            for (g, &i) in dy.data().iter().zip(index.iter()) {
                dx[i] += g;
            }
            vec![(*a, Tensor::from_raw(src.shape().to_vec(), dx))]
        }
        Op::Reshape(a) => vec![(*a, dy.reshape(val(*a).shape())?)],
        Op::Round => return Err(Error::UnsupportedOp(Primitive::Round.name())),
    })
}

// Fallible, so the std operator traits don't fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(&[self.id])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.graph.binary(self.id, other.id, v, Op::Matmul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Var<'g>> {
        let v = tensor::transpose(&self.value())?;
        Ok(self.graph.unary(self.id, v, Op::Transpose(self.id)))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().add(&other.value())?;
        Ok(self.graph.binary(self.id, other.id, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.graph.binary(self.id, other.id, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.graph.binary(self.id, other.id, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.graph.unary(self.id, v, Op::Scale(self.id, c))
    }

    /// Adds `bias` (`[n]` or `[1×n]`) to every row of a `[m×n]` matrix.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let (m, n) = x.dims2()?;
        if b.len() != n {
            return Err(Error::shape(format!(
                "row bias of shape {:?} for matrix {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = x.data().to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::from_raw(vec![m, n], out);
        Ok(self.graph.binary(self.id, bias.id, v, Op::AddRow(self.id, bias.id)))
    }

    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(tensor::gelu);
        self.graph.unary(self.id, v, Op::Gelu(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'g>> {
        let v = tensor::softmax_rows(&self.value())?;
        Ok(self.graph.unary(self.id, v, Op::SoftmaxRows(self.id)))
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.graph.unary(self.id, v, Op::Square(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.unary(self.id, v, Op::Sum(self.id))
    }

    pub fn softplus(self) -> Var<'g> {
        let v = self.value().map(tensor::softplus);
        self.graph.unary(self.id, v, Op::Softplus(self.id))
    }

    /// `out[i] = self[index[i]]` over flat indices, reshaped to `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'g>> {
        let src = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather index length does not match output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let v = Tensor::from_raw(shape.to_vec(), data);
        Ok(self.graph.unary(self.id, v, Op::Gather(self.id, index)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.unary(self.id, v, Op::Reshape(self.id)))
    }

    /// Elementwise rounding. Not differentiable: a backward pass that reaches
    /// it through a gradient-carrying input fails with `UnsupportedOp`.
    pub fn round(self) -> Var<'g> {
        let v = self.value().map(f64::round);
        self.graph.unary(self.id, v, Op::Round)
    }
}

/// Parameter leaves of one graph, looked up by name.
pub struct Bindings<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bindings<'g> {
    /// Binds every entry of `params` into `graph`: trainable entries as
    /// gradient-carrying leaves, frozen ones as constants.
    pub fn bind(graph: &'g Graph, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|(name, e)| {
                let v = if e.frozen {
                    graph.constant(e.tensor.clone())
                } else {
                    graph.param(e.tensor.clone())
                };
                (name.to_owned(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }
}

/// Pins the higher-ranked signature on a closure so it can be stored in a
/// variable and passed to [`eval`], [`grad`] or `finite_diff_check` later.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    f
}

/// Gradients keyed by parameter name. Frozen entries never appear.
pub type Gradients = BTreeMap<String, Tensor>;

/// Forward value of a scalar function of `params`.
pub fn eval<F>(f: F, params: &ParamSet) -> Result<f64>
where
    F: for<'g> FnOnce(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let b = Bindings::bind(&g, params);
    f(&g, &b)?.item()
}

/// Value and exact reverse-mode gradient for every non-frozen entry.
pub fn value_and_grad<F>(f: F, params: &ParamSet) -> Result<(f64, Gradients)>
where
    F: for<'g> FnOnce(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let b = Bindings::bind(&g, params);
    let out = f(&g, &b)?;
    let value = out.item()?;
    let mut grads = g.backward(out)?;
    let mut map = Gradients::new();
    for (name, e) in params.iter() {
        if e.frozen {
            continue;
        }
        let var = b.get(name)?;
        let gt = grads[var.id].take().unwrap_or_else(|| Tensor::zeros(e.tensor.shape()));
        map.insert(name.to_owned(), gt);
    }
    Ok((value, map))
}

pub fn grad<F>(f: F, params: &ParamSet) -> Result<Gradients>
where
    F: for<'g> FnOnce(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    value_and_grad(f, params).map(|(_, g)| g)
}

//! Scalar reverse-mode tape.
//!
//! Backs the exact differentiation mode of the proxy loss, where the
//! cosine term is a function of input-gradients and therefore needs
//! second-order derivatives with respect to parameters. Built for toy
//! dense networks (hundreds of parameters), not for throughput.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Ln(usize),
    Exp(usize),
    Sqrt(usize),
    Scale(usize, f64),
}

struct Node {
    val: f64,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, val: f64, op: Op) -> Var {
        self.nodes.push(Node { val, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, val: f64) -> Var {
        self.push(val, Op::Leaf)
    }

    pub fn constant(&mut self, val: f64) -> Var {
        self.push(val, Op::Leaf)
    }

    pub fn val(&self, v: Var) -> f64 {
        self.nodes[v.0].val
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].val + self.nodes[b.0].val, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].val - self.nodes[b.0].val, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].val * self.nodes[b.0].val, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(self.nodes[a.0].val / self.nodes[b.0].val, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(-self.nodes[a.0].val, Op::Neg(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].val.ln(), Op::Ln(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].val.exp(), Op::Exp(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].val.sqrt(), Op::Sqrt(a.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(self.nodes[a.0].val * k, Op::Scale(a.0, k))
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = self.constant(0.0);
        for &v in vars {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = self.constant(0.0);
        for (&x, &y) in a.iter().zip(b) {
            let p = self.mul(x, y);
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse sweep from `out`; returns the adjoint of every node.
    pub fn backward(&self, out: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[out.0] = 1.0;
        for i in (0..=out.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a] += g * self.nodes[b].val;
                    adj[b] += g * self.nodes[a].val;
                }
                Op::Div(a, b) => {
                    let bv = self.nodes[b].val;
                    adj[a] += g / bv;
                    adj[b] -= g * self.nodes[a].val / (bv * bv);
                }
                Op::Neg(a) => adj[a] -= g,
                Op::Ln(a) => adj[a] += g / self.nodes[a].val,
                Op::Exp(a) => adj[a] += g * self.nodes[i].val,
                Op::Sqrt(a) => adj[a] += g * 0.5 / self.nodes[i].val,
                Op::Scale(a, k) => adj[a] += g * k,
            }
        }
        adj
    }
}

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

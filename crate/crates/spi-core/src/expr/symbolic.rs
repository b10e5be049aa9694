//! Symbolic differentiation and substitution, used to build transformed
//! Lagrangians `L(τ, Df(q)·v, f(q))`.

use super::{BinOp, Func, Node};

fn zero() -> Node {
    Node::Num(0.0)
}

fn is_zero(n: &Node) -> bool {
    matches!(n, Node::Num(x) if *x == 0.0)
}

fn is_one(n: &Node) -> bool {
    matches!(n, Node::Num(x) if *x == 1.0)
}

fn add(a: Node, b: Node) -> Node {
    match (is_zero(&a), is_zero(&b)) {
        (true, _) => b,
        (_, true) => a,
        _ => Node::bin(BinOp::Add, a, b),
    }
}

fn sub(a: Node, b: Node) -> Node {
    match (is_zero(&a), is_zero(&b)) {
        (_, true) => a,
        (true, _) => Node::Neg(Box::new(b)),
        _ => Node::bin(BinOp::Sub, a, b),
    }
}

fn mul(a: Node, b: Node) -> Node {
    if is_zero(&a) || is_zero(&b) {
        return zero();
    }
    if is_one(&a) {
        return b;
    }
    if is_one(&b) {
        return a;
    }
    Node::bin(BinOp::Mul, a, b)
}

fn div(a: Node, b: Node) -> Node {
    if is_zero(&a) {
        return zero();
    }
    Node::bin(BinOp::Div, a, b)
}

/// `∂ node / ∂ x_var`.
pub(super) fn diff(node: &Node, var: usize) -> Node {
    match node {
        Node::Num(_) | Node::Param(..) => zero(),
        Node::Var(i) => Node::Num(if *i == var { 1.0 } else { 0.0 }),
        Node::Neg(a) => {
            let da = diff(a, var);
            if is_zero(&da) {
                zero()
            } else {
                Node::Neg(Box::new(da))
            }
        }
        Node::Bin(op, a, b) => {
            let (da, db) = (diff(a, var), diff(b, var));
            let (a, b) = ((**a).clone(), (**b).clone());
            match op {
                BinOp::Add => add(da, db),
                BinOp::Sub => sub(da, db),
                BinOp::Mul => add(mul(da, b.clone()), mul(a, db)),
                BinOp::Div => {
                    // (a'b − ab') / b²
                    let num = sub(mul(da, b.clone()), mul(a, db));
                    div(num, Node::bin(BinOp::Pow, b, Node::Num(2.0)))
                }
                BinOp::Pow => {
                    if b.is_constant() {
                        // b·a^(b−1)·a'
                        let reduced = Node::bin(
                            BinOp::Pow,
                            a,
                            Node::bin(BinOp::Sub, b.clone(), Node::Num(1.0)),
                        );
                        mul(mul(b, reduced), da)
                    } else {
                        // a^b·(b'·log a + b·a'/a)
                        let term = add(
                            mul(db, Node::call(Func::Log, a.clone())),
                            div(mul(b.clone(), da), a.clone()),
                        );
                        mul(Node::bin(BinOp::Pow, a, b), term)
                    }
                }
            }
        }
        Node::Call(f, a) => {
            let da = diff(a, var);
            if is_zero(&da) {
                return zero();
            }
            let a = (**a).clone();
            let outer = match f {
                Func::Sin => Node::call(Func::Cos, a),
                Func::Cos => Node::Neg(Box::new(Node::call(Func::Sin, a))),
                Func::Exp => Node::call(Func::Exp, a),
                Func::Log => div(Node::Num(1.0), a),
                Func::Sqrt => div(Node::Num(0.5), Node::call(Func::Sqrt, a)),
                Func::Tanh => Node::bin(
                    BinOp::Sub,
                    Node::Num(1.0),
                    Node::bin(BinOp::Pow, Node::call(Func::Tanh, a), Node::Num(2.0)),
                ),
            };
            mul(outer, da)
        }
    }
}

pub(super) fn substitute(node: &Node, subs: &[Node]) -> Node {
    match node {
        Node::Num(_) | Node::Param(..) => node.clone(),
        Node::Var(i) => subs[*i].clone(),
        Node::Neg(a) => Node::Neg(Box::new(substitute(a, subs))),
        Node::Bin(op, a, b) => Node::bin(*op, substitute(a, subs), substitute(b, subs)),
        Node::Call(f, a) => Node::call(*f, substitute(a, subs)),
    }
}

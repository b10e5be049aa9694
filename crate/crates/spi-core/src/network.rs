//! Small dense tensor networks.
//!
//! Every tensor has all index ranges equal to `dim`. Indices are named by
//! integer labels; a label shared by two tensors is summed over. A [`Plan`]
//! fixes a pairwise contraction order and precomputes index tables so the
//! same network can be evaluated many times with different data.

#[derive(Debug, Clone)]
struct Step {
    a: usize,
    b: usize,
    out_len: usize,
    /// `(out, a, b)` offsets: `out[o] += A[a] * B[b]`.
    table: Vec<(u32, u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct Plan {
    dim: usize,
    n_inputs: usize,
    input_lens: Vec<usize>,
    steps: Vec<Step>,
    output_labels: Vec<usize>,
}

impl Plan {
    /// `labels[i]` lists the index labels of input tensor `i` in row-major
    /// order. Labels occurring once survive into the output, in order of
    /// first appearance in the final tensor.
    pub fn new(dim: usize, labels: &[Vec<usize>]) -> Plan {
        let mut live: Vec<Option<Vec<usize>>> = labels.iter().cloned().map(Some).collect();
        let input_lens = labels.iter().map(|l| dim.pow(l.len() as u32)).collect();
        let mut steps = Vec::new();
        while live.iter().filter(|t| t.is_some()).count() > 1 {
            let ids: Vec<usize> = (0..live.len()).filter(|&i| live[i].is_some()).collect();
            let mut best: Option<(bool, usize, usize, usize)> = None;
            for (x, &i) in ids.iter().enumerate() {
                for &j in &ids[x + 1..] {
                    let (la, lb) = (live[i].as_ref().unwrap(), live[j].as_ref().unwrap());
                    let shared = la.iter().filter(|l| lb.contains(l)).count();
                    let cost = la.len() + lb.len() - shared;
                    let key = (shared == 0, cost, i, j);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let (_, _, i, j) = best.unwrap();
            let la = live[i].take().unwrap();
            let lb = live[j].take().unwrap();
            let (step, out_labels) = build_step(dim, i, j, &la, &lb);
            steps.push(step);
            live.push(Some(out_labels));
        }
        let output_labels = live.into_iter().flatten().next().unwrap_or_default();
        Plan { dim, n_inputs: labels.len(), input_lens, steps, output_labels }
    }

    pub fn output_labels(&self) -> &[usize] {
        &self.output_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Contract. `inputs` must match the label lists given to [`Plan::new`].
    pub fn execute(&self, inputs: Vec<Vec<f64>>) -> Vec<f64> {
        assert_eq!(inputs.len(), self.n_inputs);
        debug_assert!(inputs.iter().zip(&self.input_lens).all(|(t, &n)| t.len() == n));
        if self.steps.is_empty() {
            return inputs.into_iter().next().unwrap_or_else(|| vec![1.0]);
        }
        let mut slots: Vec<Option<Vec<f64>>> = inputs.into_iter().map(Some).collect();
        for s in &self.steps {
            let a = slots[s.a].take().unwrap();
            let b = slots[s.b].take().unwrap();
            let mut out = vec![0.0; s.out_len];
            for &(o, x, y) in &s.table {
                let av = a[x as usize];
                if av != 0.0 {
                    out[o as usize] += av * b[y as usize];
                }
            }
            slots.push(Some(out));
        }
        slots.pop().unwrap().unwrap()
    }
}

fn build_step(dim: usize, ia: usize, ib: usize, la: &[usize], lb: &[usize]) -> (Step, Vec<usize>) {
    let shared: Vec<usize> = la.iter().copied().filter(|l| lb.contains(l)).collect();
    let mut out_labels: Vec<usize> = la.iter().copied().filter(|l| !shared.contains(l)).collect();
    out_labels.extend(lb.iter().copied().filter(|l| !shared.contains(l)));
    let all: Vec<usize> = out_labels.iter().chain(&shared).copied().collect();
    let pos = |l: usize| all.iter().position(|&x| x == l).unwrap();
    let a_pos: Vec<usize> = la.iter().map(|&l| pos(l)).collect();
    let b_pos: Vec<usize> = lb.iter().map(|&l| pos(l)).collect();
    let total = dim.pow(all.len() as u32);
    let mut table = Vec::with_capacity(total);
    let mut digits = vec![0usize; all.len()];
    let offset = |positions: &[usize], digits: &[usize]| {
        positions.iter().fold(0usize, |acc, &p| acc * dim + digits[p])
    };
    let n_out = out_labels.len();
    for _ in 0..total {
        let o = digits[..n_out].iter().fold(0usize, |acc, &d| acc * dim + d);
        table.push((o as u32, offset(&a_pos, &digits) as u32, offset(&b_pos, &digits) as u32));
        for k in (0..digits.len()).rev() {
            digits[k] += 1;
            if digits[k] < dim {
                break;
            }
            digits[k] = 0;
        }
    }
    let step = Step { a: ia, b: ib, out_len: dim.pow(n_out as u32), table };
    (step, out_labels)
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// SwiGLU feed-forward network: `down(silu(h . gate) * (h . up))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    /// `[d_model, d_ff]`
    pub gate_proj: Tensor,
    /// `[d_model, d_ff]`
    pub up_proj: Tensor,
    /// `[d_ff, d_model]`
    pub down_proj: Tensor,
}

impl ExpertFfn {
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        ExpertFfn {
            gate_proj: Tensor::zeros([d_model, d_ff]),
            up_proj: Tensor::zeros([d_model, d_ff]),
            down_proj: Tensor::zeros([d_ff, d_model]),
        }
    }

    pub fn random(d_model: usize, d_ff: usize, std: f64, rng: &mut impl Rng) -> Self {
        ExpertFfn {
            gate_proj: normal_tensor(&[d_model, d_ff], std, rng),
            up_proj: normal_tensor(&[d_model, d_ff], std, rng),
            down_proj: normal_tensor(&[d_ff, d_model], std, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.gate_proj.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.gate_proj.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> ExpertVars {
        ExpertVars {
            gate: param(tape, &self.gate_proj),
            up: param(tape, &self.up_proj),
            down: param(tape, &self.down_proj),
        }
    }

    /// Evaluates the expert on a `[tokens, d_model]` batch.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(h.clone());
        let y = vars.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    fn check(&self, d_model: usize) -> Result<()> {
        let ff = self.d_ff();
        let ok = self.gate_proj.shape() == [d_model, ff]
            && self.up_proj.shape() == [d_model, ff]
            && self.down_proj.shape() == [ff, d_model];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "expert",
                lhs: vec![d_model],
                rhs: self.gate_proj.shape().to_vec(),
            })
        }
    }
}

/// Expert projections recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

impl ExpertVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.matmul(x, self.gate)?;
        let u = tape.matmul(x, self.up)?;
        let a = tape.silu(g)?;
        let m = tape.mul(a, u)?;
        tape.matmul(m, self.down)
    }
}

/// Linear router `W_g` of shape `[n_experts, d_model]` with Top-K selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub weight: Tensor,
    pub top_k: usize,
}

impl Router {
    pub fn new(weight: Tensor, top_k: usize) -> Result<Self> {
        let (n, _) = weight.dims2()?;
        if top_k == 0 || top_k > n {
            return Err(Error::contract(format!("top_k must be in 1..={n}, got {top_k}")));
        }
        Ok(Router { weight, top_k })
    }

    pub fn n_experts(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-token scalar gate `sigmoid(w . h + b)` on the shared expert.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGate {
    /// `[d_model]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl SharedGate {
    /// Zero weight and bias, so the gate starts at exactly 0.5.
    pub fn neutral(d_model: usize) -> Self {
        SharedGate {
            weight: Tensor::zeros([d_model]),
            bias: Tensor::zeros([1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlock {
    pub experts: Vec<ExpertFfn>,
    pub shared: Option<(ExpertFfn, SharedGate)>,
    pub router: Router,
}

impl MoeBlock {
    pub fn random(
        d_model: usize,
        d_ff: usize,
        n_experts: usize,
        top_k: usize,
        with_shared: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let experts = (0..n_experts).map(|_| ExpertFfn::random(d_model, d_ff, 0.1, rng)).collect();
        let shared = with_shared.then(|| {
            let mut gate = SharedGate::neutral(d_model);
            gate.weight = normal_tensor(&[d_model], 0.1, rng);
            gate.bias = normal_tensor(&[1], 0.1, rng);
            (ExpertFfn::random(d_model, d_ff, 0.1, rng), gate)
        });
        let router = Router::new(normal_tensor(&[n_experts, d_model], 0.5, rng), top_k)?;
        Ok(MoeBlock { experts, shared, router })
    }

    pub fn d_model(&self) -> usize {
        self.router.weight.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.experts.len() != self.router.n_experts() {
            return Err(Error::contract(format!(
                "router scores {} experts but block has {}",
                self.router.n_experts(),
                self.experts.len()
            )));
        }
        for e in &self.experts {
            e.check(d)?;
        }
        if let Some((e, g)) = &self.shared {
            e.check(d)?;
            if g.weight.numel() != d || g.bias.numel() != 1 {
                return Err(Error::Shape { op: "shared_gate", lhs: vec![d], rhs: g.weight.shape().to_vec() });
            }
        }
        Ok(())
    }

    /// Every parameter tensor, in the same order as [`BlockVars::vars`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.router.weight];
        for e in &mut self.experts {
            out.extend([&mut e.gate_proj, &mut e.up_proj, &mut e.down_proj]);
        }
        if let Some((e, g)) = &mut self.shared {
            out.extend([&mut e.gate_proj, &mut e.up_proj, &mut e.down_proj, &mut g.weight, &mut g.bias]);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            experts: self.experts.iter().map(|e| e.bind(tape)).collect(),
            shared: self.shared.as_ref().map(|(e, g)| {
                let vars = e.bind(tape);
                let w = param(tape, &g.weight);
                let b = param(tape, &g.bias);
                (vars, w, b)
            }),
            router: param(tape, &self.router.weight),
            top_k: self.router.top_k,
        }
    }
}

/// How tokens are dispatched to routed experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutingMode {
    /// Learned Top-K routing.
    #[default]
    TopK,
    /// Every token goes to one expert with gate weight exactly 1.
    Forced(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub routing: RoutingMode,
    /// When false the shared expert is skipped and `h' = o_routed`.
    pub include_shared: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { routing: RoutingMode::TopK, include_shared: true }
    }
}

/// Per-token routing decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Selected experts, highest probability first.
    pub selected: Vec<Vec<usize>>,
    /// Raw softmax probabilities at the selected indices (not renormalized).
    pub gates: Vec<Vec<f64>>,
    /// Full router distribution, `[tokens, n_experts]`.
    pub probs: Tensor,
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Router probabilities and Top-K selection for a `[tokens, d_model]` batch.
pub fn route(h: &Tensor, router: &Router) -> Result<Routing> {
    let mut tape = Tape::new();
    let x = tape.leaf(h.clone());
    let w = tape.leaf(router.weight.clone());
    let (probs_var, selected) = route_on_tape(&mut tape, x, w, router.top_k)?;
    let probs = tape.value(probs_var).clone();
    let gates = gather_gates(&probs, &selected);
    Ok(Routing { selected, gates, probs })
}

fn route_on_tape(tape: &mut Tape, h: Var, router: Var, top_k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let wt = tape.transpose(router)?;
    let logits = tape.matmul(h, wt)?;
    let probs = tape.softmax(logits, 1)?;
    let p = tape.value(probs);
    let (n, _) = p.dims2()?;
    let selected = (0..n).map(|t| select_top_k(p.row(t), top_k)).collect();
    Ok((probs, selected))
}

fn gather_gates(probs: &Tensor, selected: &[Vec<usize>]) -> Vec<Vec<f64>> {
    selected
        .iter()
        .enumerate()
        .map(|(t, s)| s.iter().map(|&e| probs.row(t)[e]).collect())
        .collect()
}

/// Block parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub experts: Vec<ExpertVars>,
    /// Shared expert with its gate weight and bias.
    pub shared: Option<(ExpertVars, Var, Var)>,
    pub router: Var,
    pub top_k: usize,
}

/// Tape handles and routing decisions from one block evaluation.
#[derive(Debug, Clone)]
pub struct MoeTrace {
    pub h_prime: Var,
    pub o_routed: Var,
    pub o_shared: Option<Var>,
    pub lambda: Option<Var>,
    pub probs: Var,
    pub selected: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
    /// Number of token rows each routed expert was evaluated on.
    pub expert_rows: Vec<usize>,
}

impl BlockVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.router];
        for e in &self.experts {
            out.extend([e.gate, e.up, e.down]);
        }
        if let Some((e, w, b)) = &self.shared {
            out.extend([e.gate, e.up, e.down, *w, *b]);
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, opts: ForwardOptions) -> Result<MoeTrace> {
        let (n, d) = tape.value(h).dims2()?;
        let n_experts = self.experts.len();
        let (probs, mut selected) = route_on_tape(tape, h, self.router, self.top_k)?;
        if let RoutingMode::Forced(e) = opts.routing {
            if e >= n_experts {
                return Err(Error::Index { what: "experts", index: e, bound: n_experts });
            }
            selected = vec![vec![e]; n];
        }

        // Token rows per expert, in token order.
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
        for (t, sel) in selected.iter().enumerate() {
            for &e in sel {
                rows[e].push(t);
            }
        }

        let mut o_routed = tape.constant(Tensor::zeros([n, d]));
        let mut expert_rows = vec![0; n_experts];
        for (e, rows_e) in rows.iter().enumerate() {
            if rows_e.is_empty() {
                continue;
            }
            expert_rows[e] = rows_e.len();
            let x = tape.gather_rows(h, rows_e)?;
            let y = self.experts[e].forward(tape, x)?;
            let weighted = match opts.routing {
                RoutingMode::Forced(_) => y,
                RoutingMode::TopK => {
                    let idx: Vec<(usize, usize)> = rows_e.iter().map(|&t| (t, e)).collect();
                    let g = tape.gather_elements(probs, &idx)?;
                    tape.mul_rows(y, g)?
                }
            };
            o_routed = tape.index_add(o_routed, weighted, rows_e)?;
        }
        let gates = match opts.routing {
            RoutingMode::Forced(_) => vec![vec![1.0]; n],
            RoutingMode::TopK => gather_gates(tape.value(probs), &selected),
        };

        let (h_prime, o_shared, lambda) = match (&self.shared, opts.include_shared) {
            (Some((expert, w, b)), true) => {
                let o_shared = expert.forward(tape, h)?;
                let wcol = tape.reshape(*w, &[d, 1])?;
                let z = tape.matmul(h, wcol)?;
                let z = tape.add_row(z, *b)?;
                let lambda = tape.sigmoid(z)?;
                let scaled = tape.mul_rows(o_shared, lambda)?;
                let out = tape.add(o_routed, scaled)?;
                (out, Some(o_shared), Some(lambda))
            }
            _ => (o_routed, None, None),
        };
        Ok(MoeTrace { h_prime, o_routed, o_shared, lambda, probs, selected, gates, expert_rows })
    }
}

/// Materialized result of [`moe_ffn_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlockOutput {
    pub h_prime: Tensor,
    pub o_routed: Tensor,
    /// Absent when the block has no shared expert or it was excluded.
    pub o_shared: Option<Tensor>,
    /// One gate value per token; absent exactly when `o_shared` is.
    pub lambda: Option<Tensor>,
    pub selected_indices: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
    pub full_probs: Tensor,
    pub expert_rows: Vec<usize>,
}

/// Evaluates the block on a `[tokens, d_model]` batch without keeping the tape.
pub fn moe_ffn_forward(h: &Tensor, block: &MoeBlock, opts: ForwardOptions) -> Result<MoeBlockOutput> {
    block.validate()?;
    let (_, d) = h.dims2()?;
    if d != block.d_model() {
        return Err(Error::Shape { op: "moe_ffn_forward", lhs: h.shape().to_vec(), rhs: vec![block.d_model()] });
    }
    let mut tape = Tape::new();
    let vars = block.bind(&mut tape);
    let x = tape.leaf(h.clone());
    let tr = vars.forward(&mut tape, x, opts)?;
    let get = |v: Var| tape.value(v).clone();
    Ok(MoeBlockOutput {
        h_prime: get(tr.h_prime),
        o_routed: get(tr.o_routed),
        o_shared: tr.o_shared.map(get),
        lambda: tr.lambda.map(get),
        selected_indices: tr.selected,
        gates: tr.gates,
        full_probs: get(tr.probs),
        expert_rows: tr.expert_rows,
    })
}

fn param(tape: &mut Tape, t: &Tensor) -> Var {
    tape.leaf(t.clone().with_requires_grad(true))
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

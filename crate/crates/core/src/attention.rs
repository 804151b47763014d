use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pre-softmax bias applied to masked-out scores.
pub const MASK_BIAS: f64 = -1e9;

/// Boolean attention mask, `true` where attention is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular mask: position `t` sees positions `0..=t`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|k| k % len <= k / len).collect();
        Self {
            rows: len,
            cols: len,
            allowed,
        }
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    fn bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::matrix(self.rows, self.cols, data).expect("mask dims")
    }
}

/// `softmax(Q·Kᵀ / √d_k + mask) · V`
pub fn scaled_dot_attention(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (m, d_k) = match *graph.shape(q) {
        [m, d] => (m, d),
        _ => return Err(shape(graph, q, k)),
    };
    let n = match *graph.shape(k) {
        [n, d] if d == d_k => n,
        _ => return Err(shape(graph, q, k)),
    };
    if !matches!(*graph.shape(v), [nv, _] if nv == n) {
        return Err(shape(graph, k, v));
    }
    let scores = graph.matmul_nt(q, k)?;
    let mut scores = graph.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != (m, n) {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                lhs: vec![m, n],
                rhs: vec![mask.rows, mask.cols],
            });
        }
        let bias = graph.constant(mask.bias());
        scores = graph.add(scores, bias)?;
    }
    let weights = graph.softmax(scores);
    graph.matmul(weights, v)
}

fn shape(graph: &Graph, a: Var, b: Var) -> Error {
    Error::Shape {
        op: "scaled_dot_attention",
        lhs: graph.shape(a).to_vec(),
        rhs: graph.shape(b).to_vec(),
    }
}

/// Multi-head attention projections.
///
/// The per-head matrices `W_Q_i`, `W_K_i`, `W_V_i` (each `d_model × d_head`)
/// are stored side by side as column blocks of one `d_model × d_model`
/// matrix; head `i` owns columns `i·d_head .. (i+1)·d_head`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `h·d_head × d_model`
    pub w_o: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let bound = (6.0 / (2 * d_model) as f64).sqrt();
        let mut mat = |name: &str| -> Result<ParamId> {
            let data = (0..d_model * d_model)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            store.add(
                format!("{prefix}.{name}"),
                Tensor::matrix(d_model, d_model, data)?,
            )
        };
        Ok(Self {
            w_q: mat("w_q")?,
            w_k: mat("w_k")?,
            w_v: mat("w_v")?,
            w_o: mat("w_o")?,
            n_heads,
            d_model,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `Concat(head_1, …, head_h) · W_O` with `head_i = Attention(Q·W_Q_i, K·W_K_i, V·W_V_i)`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &Bound,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        for x in [q, k, v] {
            if !matches!(*graph.shape(x), [_, d] if d == self.d_model) {
                return Err(Error::Shape {
                    op: "multi_head_attention",
                    lhs: graph.shape(x).to_vec(),
                    rhs: vec![self.d_model, self.d_model],
                });
            }
        }
        let qp = graph.matmul(q, params.var(self.w_q))?;
        let kp = graph.matmul(k, params.var(self.w_k))?;
        let vp = graph.matmul(v, params.var(self.w_v))?;
        let dh = self.d_head();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    graph.slice_cols(qp, h * dh, dh)?,
                    graph.slice_cols(kp, h * dh, dh)?,
                    graph.slice_cols(vp, h * dh, dh)?,
                )
            };
            heads.push(scaled_dot_attention(graph, qh, kh, vh, mask)?);
        }
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            graph.concat_cols(&heads)?
        };
        graph.matmul(concat, params.var(self.w_o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = AttentionMask::causal(3);
        assert!(m.allowed(0, 0) && !m.allowed(0, 1) && !m.allowed(0, 2));
        assert!(m.allowed(2, 0) && m.allowed(2, 1) && m.allowed(2, 2));
        assert!(!m.allowed(1, 2));
    }

    #[test]
    fn hand_evaluated_two_key_case() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::identity(2));
        let v = g.constant(Tensor::identity(2));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        // weights = softmax([1/√2, 0])
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let expected = [a / (a + 1.0), 1.0 / (a + 1.0)];
        for (o, e) in g.value(out).data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(2, 2, vec![3.0, -1.0, 0.2, 7.0]).unwrap());
        let k = g.constant(Tensor::filled(&[3, 2], 0.5));
        let v = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for &o in g.value(out).data() {
            assert!((o - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_forces_single_column() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![5.0, -3.0]).unwrap());
        let k = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let v = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mask = AttentionMask::new(1, 3, vec![false, true, false]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v, Some(&mask)).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        assert!(MultiHeadAttentionParams::init(&mut store, "a", 10, 3, &mut rng).is_err());
    }
}

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block: multi-head self-attention then a tanh MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    pub(crate) fn init<R: Rng + ?Sized>(rng: &mut R, width: usize, hidden: usize) -> Self {
        let sw = (width as f64).powf(-0.5);
        let sh = (hidden as f64).powf(-0.5);
        Self {
            wq: Tensor::randn(rng, &[width, width], sw),
            wk: Tensor::randn(rng, &[width, width], sw),
            wv: Tensor::randn(rng, &[width, width], sw),
            wo: Tensor::randn(rng, &[width, width], sw),
            w1: Tensor::randn(rng, &[width, hidden], sw),
            b1: Tensor::randn(rng, &[hidden], 0.02),
            w2: Tensor::randn(rng, &[hidden, width], sh),
            b2: Tensor::randn(rng, &[width], 0.02),
        }
    }

    pub(crate) fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    pub(crate) fn from_named(
        prefix: &str,
        take: &mut dyn FnMut(&str) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut get = |n: &str| take(&format!("{prefix}.{n}"));
        Ok(Self {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub(crate) fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let width = self.wq.rows();
        if x.value().cols() != width {
            return Err(Error::dim("block", &x.shape(), &[0, width]));
        }
        let head_dim = width / heads;
        let scale = (head_dim as f64).powf(-0.5);
        let c = |t: &Tensor| tape.constant(t.clone());

        let h = x.layer_norm(LN_EPS);
        let q = h.matmul(&c(&self.wq))?;
        let k = h.matmul(&c(&self.wk))?;
        let v = h.matmul(&c(&self.wv))?;
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let start = i * head_dim;
            let qh = q.slice_cols(start, head_dim)?;
            let kh = k.slice_cols(start, head_dim)?;
            let vh = v.slice_cols(start, head_dim)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1.0)?;
            outs.push(attn.matmul(&vh)?);
        }
        let attended = Var::concat(&outs, 1)?.matmul(&c(&self.wo))?;
        let x = x.add(&attended)?;

        let h = x.layer_norm(LN_EPS);
        let m = h
            .matmul(&c(&self.w1))?
            .add_row(&c(&self.b1))?
            .tanh()
            .matmul(&c(&self.w2))?
            .add_row(&c(&self.b2))?;
        x.add(&m)
    }
}

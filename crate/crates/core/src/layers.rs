//! Parameterised building blocks on top of the tape.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvSpec, Init, NdValue, ParamId, ParamStore, Result, Tape, Var};

/// `y = x W + b` for `x[n, d_in]`, `W[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], Init::FanIn { fan_in: d_in, gain: 1.0 }, rng);
        let b = store.add(format!("{name}.b"), &[d_out], Init::Zeros, rng);
        Self { w, b, d_in, d_out }
    }

    /// Weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], Init::Zeros, rng);
        let b = store.add(format!("{name}.b"), &[d_out], Init::Zeros, rng);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w)?;
        t.add_broadcast(y, b)
    }
}

/// 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Self {
        let fan_in = c_in * spec.kernel_volume();
        let [a, b, c] = spec.kernel;
        let w = store.add(format!("{name}.w"), &[c_out, c_in, a, b, c], Init::FanIn { fan_in, gain: 2f64.sqrt() }, rng);
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b, spec }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv3d(x, w, Some(b), self.spec)
    }
}

/// Transposed 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvTranspose {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Self {
        let [a, b, c] = spec.kernel;
        let fan_in = c_in * spec.kernel_volume() / spec.stride.iter().product::<usize>().max(1);
        let w = store.add(format!("{name}.w"), &[c_in, c_out, a, b, c], Init::FanIn { fan_in, gain: 2f64.sqrt() }, rng);
        let b = store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng);
        Self { w, b, spec }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv3d_transpose(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), &[d], Init::Const(1.0), rng);
        let bias = store.add(format!("{name}.bias"), &[d], Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = t.param(store, self.gain);
        let b = t.param(store, self.bias);
        t.layer_norm(x, g, b, 1e-5)
    }
}

/// Scaled dot-product attention with `heads` equal column slices.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// The output projection starts at zero, so a residual block wrapping
    /// this layer begins as the identity.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "{heads} heads do not divide {d}");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::zeros(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    /// `query[n, d]` attends over `key[m, d]` / `value[m, d]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(t, store, query)?;
        let dh = self.q.d_out / self.heads;
        // scaling q is cheaper than scaling the n×m scores
        let q = t.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.k.forward(t, store, key)?;
        let v = self.v.forward(t, store, value)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice(q, 1, h * dh, dh)?;
            let kh = t.slice(k, 1, h * dh, dh)?;
            let vh = t.slice(v, 1, h * dh, dh)?;
            let s = t.matmul_nt(qh, kh)?;
            let a = t.softmax(s, 1)?;
            heads.push(t.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { t.concat(&heads, 1)? };
        self.out.forward(t, store, cat)
    }
}

/// Two-layer ReLU MLP; the last layer starts at zero.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, hidden),
            l2: Linear::zeros(store, rng, &format!("{name}.l2"), hidden, d),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, store, x)?;
        let h = t.relu(h);
        self.l2.forward(t, store, h)
    }
}

/// `[C, X, Y, Z]` → `[X·Y·Z, C]`.
pub fn volume_to_tokens(t: &mut Tape, vol: Var) -> Result<Var> {
    let s = t.shape(vol).to_vec();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let flat = t.reshape(vol, &[c, n])?;
    t.transpose(flat)
}

/// `[N, C]` → `[C, dims...]`.
pub fn tokens_to_volume(t: &mut Tape, tokens: Var, dims: [usize; 3]) -> Result<Var> {
    let c = t.shape(tokens)[1];
    let tr = t.transpose(tokens)?;
    t.reshape(tr, &[c, dims[0], dims[1], dims[2]])
}

/// Random `[n, d]` value, used by tests and initialisers.
pub fn uniform_value(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> NdValue {
    use rand::Rng;
    NdValue::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

use crate::error::{ApexError, Result};
use crate::numerics::{rng, Real, Tape, Tensor, Var};

use super::ModelConfig;

const INIT_STD: f64 = 0.02;

/// The seven projection matrices of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    U,
    G,
    D,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 7] =
        [MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O, MatrixKind::U, MatrixKind::G, MatrixKind::D];

    /// Single-letter tag used in checkpoint names and reports.
    pub fn letter(self) -> &'static str {
        match self {
            MatrixKind::Q => "Q",
            MatrixKind::K => "K",
            MatrixKind::V => "V",
            MatrixKind::O => "O",
            MatrixKind::U => "U",
            MatrixKind::G => "G",
            MatrixKind::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.letter().eq_ignore_ascii_case(s) || k.field().eq_ignore_ascii_case(s))
            .ok_or_else(|| ApexError::Key(format!("unknown matrix {s:?}")))
    }

    fn field(self) -> &'static str {
        match self {
            MatrixKind::Q => "wq",
            MatrixKind::K => "wk",
            MatrixKind::V => "wv",
            MatrixKind::O => "wo",
            MatrixKind::U => "wu",
            MatrixKind::G => "wg",
            MatrixKind::D => "wd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub wu: Tensor<T>,
    pub wg: Tensor<T>,
    pub wd: Tensor<T>,
    pub attn_norm: Tensor<T>,
    pub ffn_norm: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn matrix(&self, kind: MatrixKind) -> &Tensor<T> {
        match kind {
            MatrixKind::Q => &self.wq,
            MatrixKind::K => &self.wk,
            MatrixKind::V => &self.wv,
            MatrixKind::O => &self.wo,
            MatrixKind::U => &self.wu,
            MatrixKind::G => &self.wg,
            MatrixKind::D => &self.wd,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut Tensor<T> {
        match kind {
            MatrixKind::Q => &mut self.wq,
            MatrixKind::K => &mut self.wk,
            MatrixKind::V => &mut self.wv,
            MatrixKind::O => &mut self.wo,
            MatrixKind::U => &mut self.wu,
            MatrixKind::G => &mut self.wg,
            MatrixKind::D => &mut self.wd,
        }
    }

    fn named(&self, i: usize) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = MatrixKind::ALL
            .iter()
            .map(|&k| (format!("layer{i}.{}", k.field()), self.matrix(k)))
            .collect();
        v.push((format!("layer{i}.attn_norm"), &self.attn_norm));
        v.push((format!("layer{i}.ffn_norm"), &self.ffn_norm));
        v
    }
}

/// All weights of the toy transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded Gaussian init (std 0.02) with unit norm gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(cfg.seed);
        let d = cfg.d_model;
        let mut g = |dims: &[usize]| rng::gaussian::<T>(&mut r, dims, INIT_STD);
        let tok_emb = g(&[cfg.vocab_size, d]);
        let pos_emb = g(&[cfg.max_seq_len, d]);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: g(&[d, d]),
                wk: g(&[d, d]),
                wv: g(&[d, d]),
                wo: g(&[d, d]),
                wu: g(&[d, cfg.d_ffn]),
                wg: g(&[d, cfg.d_ffn]),
                wd: g(&[cfg.d_ffn, d]),
                attn_norm: Tensor::full(&[d], T::one()),
                ffn_norm: Tensor::full(&[d], T::one()),
            })
            .collect();
        let head = g(&[d, cfg.vocab_size]);
        Ok(Self {
            config: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(&[d], T::one()),
            head,
        })
    }

    /// Tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.named(i));
        }
        v.push(("final_norm".to_string(), &self.final_norm));
        v.push(("head".to_string(), &self.head));
        v
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "final_norm" => return Some(&mut self.final_norm),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("layer")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "attn_norm" => Some(&mut layer.attn_norm),
            "ffn_norm" => Some(&mut layer.ffn_norm),
            f => MatrixKind::ALL.into_iter().find(|k| k.field() == f).map(|k| layer.matrix_mut(k)),
        }
    }

    pub fn matrix(&self, layer: usize, kind: MatrixKind) -> Result<&Tensor<T>> {
        self.layers
            .get(layer)
            .map(|l| l.matrix(kind))
            .ok_or_else(|| ApexError::Key(format!("no layer {layer}")))
    }

    pub fn matrix_name(layer: usize, kind: MatrixKind) -> String {
        format!("layer{layer}.{}", kind.field())
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                wv: l.wv.cast(),
                wo: l.wo.cast(),
                wu: l.wu.cast(),
                wg: l.wg.cast(),
                wd: l.wd.cast(),
                attn_norm: l.attn_norm.cast(),
                ffn_norm: l.ffn_norm.cast(),
            })
            .collect();
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers,
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }

    /// Bitwise equality of every tensor.
    pub fn bits_eq(&self, other: &Self) -> bool {
        let a = self.named();
        let b = other.named();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }
}

/// Tape handles of one layer's weights.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub wu: Var,
    pub wg: Var,
    pub wd: Var,
    pub attn_norm: Var,
    pub ffn_norm: Var,
}

impl LayerVars {
    pub fn matrix(&self, kind: MatrixKind) -> Var {
        match kind {
            MatrixKind::Q => self.wq,
            MatrixKind::K => self.wk,
            MatrixKind::V => self.wv,
            MatrixKind::O => self.wo,
            MatrixKind::U => self.wu,
            MatrixKind::G => self.wg,
            MatrixKind::D => self.wd,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut Var {
        match kind {
            MatrixKind::Q => &mut self.wq,
            MatrixKind::K => &mut self.wk,
            MatrixKind::V => &mut self.wv,
            MatrixKind::O => &mut self.wo,
            MatrixKind::U => &mut self.wu,
            MatrixKind::G => &mut self.wg,
            MatrixKind::D => &mut self.wd,
        }
    }
}

/// Tape handles of every model tensor, in [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl ParamVars {
    /// Record every tensor as a leaf; `trainable` decides whether they get gradients.
    pub fn register<T: Real>(tape: &mut Tape<T>, p: &ModelParams<T>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone().with_grad(trainable));
        let tok_emb = leaf(&p.tok_emb);
        let pos_emb = leaf(&p.pos_emb);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                wu: leaf(&l.wu),
                wg: leaf(&l.wg),
                wd: leaf(&l.wd),
                attn_norm: leaf(&l.attn_norm),
                ffn_norm: leaf(&l.ffn_norm),
            })
            .collect();
        let final_norm = leaf(&p.final_norm);
        let head = leaf(&p.head);
        Self { tok_emb, pos_emb, layers, final_norm, head }
    }

    /// Vars aligned with [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend(MatrixKind::ALL.iter().map(|&k| l.matrix(k)));
            v.push(l.attn_norm);
            v.push(l.ffn_norm);
        }
        v.push(self.final_norm);
        v.push(self.head);
        v
    }
}

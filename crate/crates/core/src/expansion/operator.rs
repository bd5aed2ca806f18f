use crate::assessment::{AdvantageSets, ModuleKind};
use crate::error::{shape_err, ApexError, Result};
use crate::model::{MatrixKind, ModelConfig, ModelParams, Overlay, ParamVars};
use crate::numerics::{gemm, CustomBackward, MatMut, MatRef, Real, Tape, Tensor, Var};

use super::MonarchMatrix;

/// Which axis of the weight carries the component slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Components are column blocks: `W[:, N] += W[:, P] * M`.
    Column,
    /// Components are row blocks: `W[N, :] += M * W[P, :]`.
    Row,
}

impl Orientation {
    pub fn of(kind: MatrixKind) -> Result<Self> {
        match kind {
            MatrixKind::V | MatrixKind::U | MatrixKind::G => Ok(Orientation::Column),
            MatrixKind::O | MatrixKind::D => Ok(Orientation::Row),
            MatrixKind::Q | MatrixKind::K => {
                Err(ApexError::Config(format!("W_{} does not take an expansion operator", kind.letter())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorTarget {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl OperatorTarget {
    pub fn module(self) -> ModuleKind {
        match self.kind {
            MatrixKind::Q | MatrixKind::K | MatrixKind::V | MatrixKind::O => ModuleKind::Mha,
            _ => ModuleKind::Ffn,
        }
    }
}

/// Weight rows/columns spanned by components: head `h` covers
/// `h*d_head .. (h+1)*d_head`, an FFN channel covers itself.
pub fn component_span(cfg: &ModelConfig, module: ModuleKind, components: &[usize]) -> Vec<usize> {
    let width = match module {
        ModuleKind::Mha => cfg.d_head(),
        ModuleKind::Ffn => 1,
    };
    components.iter().flat_map(|&c| c * width..(c + 1) * width).collect()
}

/// `W` with its `N` slice replaced by the expanded slice.
pub fn expanded_weight<T: Real>(
    w: &Tensor<T>,
    orientation: Orientation,
    p: &[usize],
    n: &[usize],
    m: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, cols) = w.shape2()?;
    let side = p.len();
    if n.len() != side || m.dims() != [side, side] {
        return Err(shape_err!("expansion: |P|={side}, |N|={}, M {:?}", n.len(), m.dims()));
    }
    let extent = match orientation {
        Orientation::Column => cols,
        Orientation::Row => rows,
    };
    if let Some(bad) = p.iter().chain(n).find(|&&i| i >= extent) {
        return Err(ApexError::Index(format!("slice index {bad} out of {extent}")));
    }
    let mut out = w.clone();
    match orientation {
        Orientation::Column => {
            let prod = crate::numerics::matmul(&w.gather_cols(p)?, m)?;
            let od = out.data_mut();
            for r in 0..rows {
                for (j, &c) in n.iter().enumerate() {
                    od[r * cols + c] = prod.data()[r * side + j] + od[r * cols + c];
                }
            }
        }
        Orientation::Row => {
            let prod = crate::numerics::matmul(m, &w.gather_rows(p)?)?;
            let od = out.data_mut();
            for (i, &r) in n.iter().enumerate() {
                for c in 0..cols {
                    od[r * cols + c] = prod.data()[i * cols + c] + od[r * cols + c];
                }
            }
        }
    }
    Ok(out)
}

struct ExpandRule {
    orientation: Orientation,
    p: Vec<usize>,
    n: Vec<usize>,
}

impl<T: Real> CustomBackward<T> for ExpandRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (w, m) = (inputs[0], inputs[1]);
        let (rows, cols) = w.shape2()?;
        let s = self.p.len();
        let mut dw = grad.clone();
        let mut dm = Tensor::zeros(&[s, s]);
        match self.orientation {
            Orientation::Column => {
                let gn = grad.gather_cols(&self.n)?;
                let wp = w.gather_cols(&self.p)?;
                let mut gp = Tensor::zeros(&[rows, s]);
                gemm(T::one(), MatRef::new(gn.data(), rows, s), MatRef::new(m.data(), s, s).t(), T::zero(), &mut MatMut::new(gp.data_mut(), rows, s))?;
                gemm(T::one(), MatRef::new(wp.data(), rows, s).t(), MatRef::new(gn.data(), rows, s), T::zero(), &mut MatMut::new(dm.data_mut(), s, s))?;
                let dd = dw.data_mut();
                for r in 0..rows {
                    for (j, &c) in self.p.iter().enumerate() {
                        dd[r * cols + c] = dd[r * cols + c] + gp.data()[r * s + j];
                    }
                }
            }
            Orientation::Row => {
                let gn = grad.gather_rows(&self.n)?;
                let wp = w.gather_rows(&self.p)?;
                let mut gp = Tensor::zeros(&[s, cols]);
                gemm(T::one(), MatRef::new(m.data(), s, s).t(), MatRef::new(gn.data(), s, cols), T::zero(), &mut MatMut::new(gp.data_mut(), s, cols))?;
                gemm(T::one(), MatRef::new(gn.data(), s, cols), MatRef::new(wp.data(), s, cols).t(), T::zero(), &mut MatMut::new(dm.data_mut(), s, s))?;
                let dd = dw.data_mut();
                for (i, &r) in self.p.iter().enumerate() {
                    for c in 0..cols {
                        dd[r * cols + c] = dd[r * cols + c] + gp.data()[i * cols + c];
                    }
                }
            }
        }
        Ok(vec![Some(dw), Some(dm)])
    }
}

/// Record the effective weight of `op` from vars `w` and `m`.
pub(crate) fn record_expansion<T: Real>(tape: &mut Tape<T>, op: &ExpansionOperator<T>, w: Var, m: Var) -> Result<Var> {
    let value = expanded_weight(tape.value(w), op.orientation, &op.p_idx, &op.n_idx, tape.value(m))?;
    let rule = ExpandRule { orientation: op.orientation, p: op.p_idx.clone(), n: op.n_idx.clone() };
    Ok(tape.custom(&[w, m], value, Box::new(rule)))
}

/// A live (or fused) operator on one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionOperator<T> {
    pub target: OperatorTarget,
    pub orientation: Orientation,
    /// Advantageous components (heads or channels).
    pub pos: Vec<usize>,
    /// Disadvantageous components.
    pub neg: Vec<usize>,
    /// Weight indices spanned by `pos` along the orientation axis.
    pub p_idx: Vec<usize>,
    pub n_idx: Vec<usize>,
    pub monarch: MonarchMatrix<T>,
    pub trainable: bool,
    pub fused: bool,
}

impl<T: Real> ExpansionOperator<T> {
    pub fn new(
        cfg: &ModelConfig,
        target: OperatorTarget,
        pos: Vec<usize>,
        neg: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let orientation = Orientation::of(target.kind)?;
        if pos.len() != neg.len() || pos.is_empty() {
            return Err(ApexError::Invariant(format!("operator sets of sizes {} and {}", pos.len(), neg.len())));
        }
        if pos.iter().any(|c| neg.contains(c)) {
            return Err(ApexError::Invariant(format!(
                "layer {} W_{}: advantageous and disadvantageous sets overlap",
                target.layer,
                target.kind.letter()
            )));
        }
        let p_idx = component_span(cfg, target.module(), &pos);
        let n_idx = component_span(cfg, target.module(), &neg);
        let monarch = MonarchMatrix::init_zero(p_idx.len(), seed);
        Ok(Self { target, orientation, pos, neg, p_idx, n_idx, monarch, trainable: true, fused: false })
    }

    /// Checkpoint prefix, e.g. `layer0.op.V`.
    pub fn prefix(&self) -> String {
        format!("layer{}.op.{}", self.target.layer, self.target.kind.letter())
    }

    /// Names of the transform's parameters, aligned with [`MonarchMatrix::params`].
    pub fn param_names(&self) -> Vec<String> {
        let p = self.prefix();
        if self.monarch.is_fallback() {
            vec![format!("{p}.dense")]
        } else {
            vec![format!("{p}.Dfactor"), format!("{p}.Rfactor")]
        }
    }

    pub fn cast<U: Real>(&self) -> ExpansionOperator<U> {
        ExpansionOperator {
            target: self.target,
            orientation: self.orientation,
            pos: self.pos.clone(),
            neg: self.neg.clone(),
            p_idx: self.p_idx.clone(),
            n_idx: self.n_idx.clone(),
            monarch: self.monarch.cast(),
            trainable: self.trainable,
            fused: self.fused,
        }
    }

    /// The weight this operator currently produces from `params`.
    pub fn effective(&self, params: &ModelParams<T>) -> Result<Tensor<T>> {
        let w = params.matrix(self.target.layer, self.target.kind)?;
        expanded_weight(w, self.orientation, &self.p_idx, &self.n_idx, &self.monarch.materialize())
    }
}

/// Write the operator's effect into the weight and retire it.
pub fn fuse_operator<T: Real>(params: &mut ModelParams<T>, op: &mut ExpansionOperator<T>) -> Result<()> {
    if op.fused {
        return Err(ApexError::State(format!("{} already fused", op.prefix())));
    }
    let w = op.effective(params)?;
    *params.layers[op.target.layer].matrix_mut(op.target.kind) = w;
    op.fused = true;
    Ok(())
}

/// All operators attached for one stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OperatorBundle<T> {
    pub ops: Vec<ExpansionOperator<T>>,
}

const TARGETS: [MatrixKind; 5] = [MatrixKind::V, MatrixKind::O, MatrixKind::U, MatrixKind::G, MatrixKind::D];

/// One operator per `W_V, W_O, W_U, W_G, W_D` of every layer with non-empty sets.
pub fn attach_operators<T: Real>(
    params: &ModelParams<T>,
    sets: &AdvantageSets,
    seed: u64,
) -> Result<OperatorBundle<T>> {
    sets.validate()?;
    let cfg = &params.config;
    if sets.layers.len() != cfg.n_layers {
        return Err(shape_err!("sets for {} layers, model has {}", sets.layers.len(), cfg.n_layers));
    }
    let mut ops = Vec::new();
    for (layer, ls) in sets.layers.iter().enumerate() {
        for (slot, kind) in TARGETS.into_iter().enumerate() {
            let target = OperatorTarget { layer, kind };
            let (p, n) = ls.get(target.module());
            if p.is_empty() {
                continue;
            }
            let op_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((layer * TARGETS.len() + slot) as u64);
            ops.push(ExpansionOperator::new(cfg, target, p.to_vec(), n.to_vec(), op_seed)?);
        }
    }
    Ok(OperatorBundle { ops })
}

impl<T: Real> OperatorBundle<T> {
    pub fn cast<U: Real>(&self) -> OperatorBundle<U> {
        OperatorBundle { ops: self.ops.iter().map(ExpansionOperator::cast).collect() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn live(&self) -> impl Iterator<Item = &ExpansionOperator<T>> {
        self.ops.iter().filter(|o| !o.fused)
    }

    pub fn param_count(&self) -> usize {
        self.live().map(|o| o.monarch.param_count()).sum()
    }

    /// `(name, tensor)` for every live operator parameter, in install order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.live().flat_map(|o| o.param_names().into_iter().zip(o.monarch.params())).collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.ops
            .iter_mut()
            .filter(|o| !o.fused)
            .flat_map(|o| {
                let names = o.param_names();
                names.into_iter().zip(o.monarch.params_mut())
            })
            .collect()
    }

    /// Fuse every live operator into `params`; returns how many were fused.
    pub fn fuse_all(&mut self, params: &mut ModelParams<T>) -> Result<usize> {
        let mut count = 0;
        for op in self.ops.iter_mut().filter(|o| !o.fused) {
            fuse_operator(params, op)?;
            count += 1;
        }
        Ok(count)
    }
}

impl<T: Real> Overlay<T> for OperatorBundle<T> {
    fn install(&self, tape: &mut Tape<T>, vars: &mut ParamVars, trainable: bool) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        for op in self.live() {
            let (m, pv) = op.monarch.record(tape, trainable && op.trainable);
            out.extend(pv);
            let slot = vars
                .layers
                .get_mut(op.target.layer)
                .ok_or_else(|| ApexError::Key(format!("no layer {}", op.target.layer)))?
                .matrix_mut(op.target.kind);
            *slot = record_expansion(tape, op, *slot, m)?;
        }
        Ok(out)
    }
}

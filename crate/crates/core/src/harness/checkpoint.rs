//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `"APEX"`, `u32` version, `u32` header length, header (UTF-8 `key=value`
//! lines), then records until end of file. A record is `u32` name length,
//! name, `u8` dtype (0 = f32, 1 = f64, 2 = i64), `u32` ndim, `u64` dims,
//! raw data. Records are written sorted by name and looked up by name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::assessment::{ActivationLedger, ModuleKind, ModuleStats};
use crate::error::{ApexError, Result};
use crate::expansion::{ExpansionOperator, MonarchMatrix, OperatorBundle, OperatorTarget};
use crate::model::{MatrixKind, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::staging::StagePlan;

use super::config::{model_from_kv, model_to_kv, parse_kv, plan_from_kv, plan_to_kv, render_kv, KvMap};

pub const MAGIC: &[u8; 4] = b"APEX";
pub const VERSION: u32 = 1;

/// Payload of one record.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl RecordData {
    fn code(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::I64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::I64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dims: Vec<u64>,
    pub data: RecordData,
}

/// Header plus named records, as stored on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawCheckpoint {
    pub header: KvMap,
    pub records: BTreeMap<String, Record>,
}

fn fmt_err(record: &str, reason: impl Into<String>) -> ApexError {
    ApexError::Format { record: record.to_string(), reason: reason.into() }
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = render_kv(&self.header);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rec.data.code());
            out.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
            for d in &rec.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &rec.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(fmt_err("header", "bad magic"));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(fmt_err("header", format!("unsupported version {version}")));
        }
        let hlen = r.u32("header")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?).map_err(|_| fmt_err("header", "not UTF-8"))?;
        let header = parse_kv(htext).map_err(|e| fmt_err("header", e.to_string()))?;
        let mut records = BTreeMap::new();
        while r.pos < bytes.len() {
            let nlen = r.u32("record name")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "record name")?)
                .map_err(|_| fmt_err("record name", "not UTF-8"))?
                .to_string();
            let code = r.take(1, &name)?[0];
            let ndim = r.u32(&name)? as usize;
            let dims = (0..ndim).map(|_| r.u64(&name)).collect::<Result<Vec<u64>>>()?;
            let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt_err(&name, "dims overflow"))?
                as usize;
            let width = match code {
                0 => 4,
                1 | 2 => 8,
                other => return Err(fmt_err(&name, format!("unknown dtype code {other}"))),
            };
            let raw = r.take(count.checked_mul(width).ok_or_else(|| fmt_err(&name, "size overflow"))?, &name)?;
            let data = match code {
                0 => RecordData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => RecordData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => RecordData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            if records.insert(name.clone(), Record { dims, data }).is_some() {
                return Err(fmt_err(&name, "duplicate record"));
            }
        }
        Ok(Self { header, records })
    }

    fn put_f32(&mut self, name: String, t: &Tensor<f32>) {
        let dims = t.dims().iter().map(|&d| d as u64).collect();
        self.records.insert(name, Record { dims, data: RecordData::F32(t.data().to_vec()) });
    }

    fn put_i64(&mut self, name: String, v: Vec<i64>) {
        self.records.insert(name, Record { dims: vec![v.len() as u64], data: RecordData::I64(v) });
    }

    fn put_f64(&mut self, name: String, v: Vec<f64>) {
        self.records.insert(name, Record { dims: vec![v.len() as u64], data: RecordData::F64(v) });
    }

    fn get(&self, name: &str) -> Result<&Record> {
        self.records.get(name).ok_or_else(|| fmt_err(name, "missing record"))
    }

    fn tensor_f32(&self, name: &str, dims: Option<&[usize]>) -> Result<Tensor<f32>> {
        let rec = self.get(name)?;
        let RecordData::F32(v) = &rec.data else {
            return Err(fmt_err(name, "dtype mismatch: expected f32"));
        };
        let got: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
        if let Some(want) = dims {
            if want != got.as_slice() {
                return Err(fmt_err(name, format!("dims {got:?}, expected {want:?}")));
            }
        }
        Tensor::new(got, v.clone()).map_err(|e| fmt_err(name, e.to_string()))
    }

    fn i64s(&self, name: &str) -> Result<&[i64]> {
        match &self.get(name)?.data {
            RecordData::I64(v) => Ok(v),
            _ => Err(fmt_err(name, "dtype mismatch: expected i64")),
        }
    }

    fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            RecordData::F64(v) => Ok(v),
            _ => Err(fmt_err(name, "dtype mismatch: expected f64")),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(fmt_err(record, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }

    fn u64(&mut self, record: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, record)?.try_into().unwrap()))
    }
}

/// Training progress counters stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub stage: usize,
    pub global_step: usize,
    pub tokens_seen: usize,
}

/// Everything a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub params: ModelParams<f32>,
    /// Live (unfused) operators.
    pub operators: OperatorBundle<f32>,
    pub ledger: Option<ActivationLedger>,
    pub plan: Option<StagePlan>,
    pub counters: Counters,
}

impl CheckpointState {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self { params, operators: OperatorBundle::default(), ledger: None, plan: None, counters: Counters::default() }
    }
}

fn ledger_prefix(kind: ModuleKind, layer: usize) -> String {
    format!("ledger.{}.{layer}", kind.name())
}

pub fn to_raw(state: &CheckpointState) -> RawCheckpoint {
    let mut raw = RawCheckpoint::default();
    model_to_kv(&state.params.config, &mut raw.header);
    if let Some(plan) = &state.plan {
        plan_to_kv(plan, &mut raw.header);
    }
    let c = state.counters;
    raw.header.insert("state.stage".into(), c.stage.to_string());
    raw.header.insert("state.global_step".into(), c.global_step.to_string());
    raw.header.insert("state.tokens_seen".into(), c.tokens_seen.to_string());
    for (name, t) in state.params.named() {
        raw.put_f32(name, t);
    }
    for op in state.operators.live() {
        let p = op.prefix();
        raw.header.insert(format!("{p}.trainable"), op.trainable.to_string());
        raw.put_i64(format!("{p}.pos"), op.pos.iter().map(|&x| x as i64).collect());
        raw.put_i64(format!("{p}.neg"), op.neg.iter().map(|&x| x as i64).collect());
        for (name, t) in op.param_names().into_iter().zip(op.monarch.params()) {
            raw.put_f32(name, t);
        }
    }
    if let Some(l) = &state.ledger {
        raw.header.insert("ledger.k_mha".into(), format!("{:?}", l.k_mha));
        raw.header.insert("ledger.k_ffn".into(), format!("{:?}", l.k_ffn));
        raw.header.insert("ledger.samples_seen".into(), l.samples_seen.to_string());
        for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
            for layer in 0..l.n_layers() {
                let m = l.module(layer, kind);
                let pre = ledger_prefix(kind, layer);
                raw.put_i64(format!("{pre}.scores"), m.scores.clone());
                raw.put_f64(format!("{pre}.norm_sum"), m.norm_sum.clone());
                raw.put_i64(format!("{pre}.samples"), vec![m.samples as i64]);
            }
        }
    }
    raw
}

fn header_num<T: std::str::FromStr>(h: &mut KvMap, key: &str) -> Result<Option<T>> {
    match h.remove(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| fmt_err("header", format!("bad value for {key}: {v:?}"))),
    }
}

fn indices(raw: &RawCheckpoint, name: &str) -> Result<Vec<usize>> {
    raw.i64s(name)?
        .iter()
        .map(|&x| usize::try_from(x).map_err(|_| fmt_err(name, format!("negative index {x}"))))
        .collect()
}

pub fn from_raw(raw: &RawCheckpoint) -> Result<CheckpointState> {
    let mut h = raw.header.clone();
    let cfg = model_from_kv(&mut h, ModelConfig::default()).map_err(|e| fmt_err("header", e.to_string()))?;
    let plan = if h.keys().any(|k| k.starts_with("plan.")) {
        Some(plan_from_kv(&mut h, StagePlan::default()).map_err(|e| fmt_err("header", e.to_string()))?)
    } else {
        None
    };
    let counters = Counters {
        stage: header_num(&mut h, "state.stage")?.unwrap_or(0),
        global_step: header_num(&mut h, "state.global_step")?.unwrap_or(0),
        tokens_seen: header_num(&mut h, "state.tokens_seen")?.unwrap_or(0),
    };

    let mut params = ModelParams::<f32>::init(&cfg)?;
    for name in params.names() {
        let want = params.get(&name).expect("canonical").dims().to_vec();
        *params.get_mut(&name).expect("canonical") = raw.tensor_f32(&name, Some(&want))?;
    }

    let mut ops = Vec::new();
    for layer in 0..cfg.n_layers {
        for kind in [MatrixKind::V, MatrixKind::O, MatrixKind::U, MatrixKind::G, MatrixKind::D] {
            let prefix = format!("layer{layer}.op.{}", kind.letter());
            if !raw.records.contains_key(&format!("{prefix}.pos")) {
                continue;
            }
            let pos = indices(raw, &format!("{prefix}.pos"))?;
            let neg = indices(raw, &format!("{prefix}.neg"))?;
            let mut op = ExpansionOperator::new(&cfg, OperatorTarget { layer, kind }, pos, neg, 0)
                .map_err(|e| fmt_err(&prefix, e.to_string()))?;
            let dense = format!("{prefix}.dense");
            op.monarch = if raw.records.contains_key(&dense) {
                MonarchMatrix::from_dense(raw.tensor_f32(&dense, None)?)
            } else {
                MonarchMatrix::from_factors(
                    raw.tensor_f32(&format!("{prefix}.Dfactor"), None)?,
                    raw.tensor_f32(&format!("{prefix}.Rfactor"), None)?,
                )
            }
            .map_err(|e| fmt_err(&prefix, e.to_string()))?;
            if op.monarch.n() != op.p_idx.len() {
                return Err(fmt_err(&prefix, "transform size does not match index sets"));
            }
            op.trainable = header_num(&mut h, &format!("{prefix}.trainable"))?.unwrap_or(true);
            ops.push(op);
        }
    }

    let ledger = match header_num::<f64>(&mut h, "ledger.k_mha")? {
        None => None,
        Some(k_mha) => {
            let k_ffn = header_num(&mut h, "ledger.k_ffn")?.ok_or_else(|| fmt_err("header", "missing ledger.k_ffn"))?;
            let mut l = ActivationLedger::new(&cfg, k_mha, k_ffn).map_err(|e| fmt_err("header", e.to_string()))?;
            l.samples_seen = header_num(&mut h, "ledger.samples_seen")?.unwrap_or(0);
            for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
                for layer in 0..cfg.n_layers {
                    let pre = ledger_prefix(kind, layer);
                    let want = l.module(layer, kind).len();
                    let scores = raw.i64s(&format!("{pre}.scores"))?.to_vec();
                    let norm_sum = raw.f64s(&format!("{pre}.norm_sum"))?.to_vec();
                    if scores.len() != want || norm_sum.len() != want {
                        return Err(fmt_err(&pre, format!("expected {want} components")));
                    }
                    let samples = raw.i64s(&format!("{pre}.samples"))?.first().copied().unwrap_or(0) as u64;
                    *l.module_mut(layer, kind) = ModuleStats { scores, norm_sum, samples };
                }
            }
            Some(l)
        }
    };
    if let Some(k) = h.keys().next() {
        return Err(fmt_err("header", format!("unknown key {k:?}")));
    }
    Ok(CheckpointState { params, operators: OperatorBundle { ops }, ledger, plan, counters })
}

pub fn encode(state: &CheckpointState) -> Vec<u8> {
    to_raw(state).to_bytes()
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointState> {
    from_raw(&RawCheckpoint::from_bytes(bytes)?)
}

/// Write atomically: a sibling temp file renamed over `path`.
pub fn save_checkpoint(path: &Path, state: &CheckpointState) -> Result<()> {
    let bytes = encode(state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    decode(&fs::read(path)?)
}

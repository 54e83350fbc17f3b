//! Versioned binary checkpoints with bit-exact round trips.
//!
//! Layout: magic `DHACKPT`, format version (u32 LE), a 32-byte config
//! digest, a table of named tensors (u32 name length, UTF-8 name, u32 rank,
//! u64 dims, row-major f64 LE values), and a trailing CRC-64/XZ over
//! everything before it. The CRC is verified before anything else is
//! interpreted, so truncation or bit rot surfaces as [`DhaError::ChecksumMismatch`].

use std::collections::HashMap;
use std::path::Path;

use crate::error::{DhaError, Result};
use crate::math::{ActivationKind, DenseMatrix, DenseVector};
use crate::rng::RngState;
use crate::sdae::{Affine, ComponentSpec, SdaeParams};
use crate::seq2seq::{LstmCell, LstmParams, SequenceSpec};
use crate::trainer::{ComponentParams, ComponentSpecKind, ModelState};

pub const MAGIC: &[u8; 7] = b"DHACKPT";
pub const FORMAT_VERSION: u32 = 1;

// CRC-64/XZ: reflected polynomial, init and xorout all-ones.
// Check value: crc64(b"123456789") == 0x995DC9BBDF1939FA.
const CRC64_POLY: u64 = 0xC96C_5795_D787_0F42;

const fn crc64_table() -> [u64; 256] {
    let mut table = [0u64; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u64;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ CRC64_POLY
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC64_TABLE: [u64; 256] = crc64_table();

pub(crate) fn crc64(bytes: &[u8]) -> u64 {
    let mut crc = !0u64;
    for &b in bytes {
        let idx = ((crc ^ b as u64) & 0xff) as usize;
        crc = CRC64_TABLE[idx] ^ (crc >> 8);
    }
    !crc
}

/// One named tensor in the table.
struct Tensor {
    name: String,
    dims: Vec<u64>,
    values: Vec<f64>,
}

impl Tensor {
    fn scalar(name: impl Into<String>, v: f64) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![1],
            values: vec![v],
        }
    }

    fn vector(name: impl Into<String>, v: &DenseVector) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![v.dim() as u64],
            values: v.as_slice().to_vec(),
        }
    }

    fn matrix(name: impl Into<String>, m: &DenseMatrix) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            values: m.as_slice().to_vec(),
        }
    }

    fn list(name: impl Into<String>, values: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![values.len() as u64],
            values,
        }
    }
}

fn push_affine(tensors: &mut Vec<Tensor>, prefix: &str, a: &Affine) {
    tensors.push(Tensor::matrix(format!("{prefix}.w"), &a.w));
    tensors.push(Tensor::vector(format!("{prefix}.b"), &a.b));
}

fn push_cell(tensors: &mut Vec<Tensor>, prefix: &str, c: &LstmCell) {
    tensors.push(Tensor::matrix(format!("{prefix}.w_i"), &c.w_i));
    tensors.push(Tensor::vector(format!("{prefix}.b_i"), &c.b_i));
    tensors.push(Tensor::matrix(format!("{prefix}.w_f"), &c.w_f));
    tensors.push(Tensor::vector(format!("{prefix}.b_f"), &c.b_f));
    tensors.push(Tensor::matrix(format!("{prefix}.w_o"), &c.w_o));
    tensors.push(Tensor::vector(format!("{prefix}.b_o"), &c.b_o));
    tensors.push(Tensor::matrix(format!("{prefix}.w_g"), &c.w_g));
    tensors.push(Tensor::vector(format!("{prefix}.b_g"), &c.b_g));
}

fn push_side(
    tensors: &mut Vec<Tensor>,
    side: &str,
    specs: &[ComponentSpecKind],
    params: &[ComponentParams],
    fusion: &crate::fusion::FusionParams,
) {
    tensors.push(Tensor::scalar(format!("{side}.count"), specs.len() as f64));
    for (i, (spec, pars)) in specs.iter().zip(params).enumerate() {
        match (spec, pars) {
            (ComponentSpecKind::Static(s), ComponentParams::Static(p)) => {
                tensors.push(Tensor::scalar(format!("{side}.{i}.kind"), 0.0));
                tensors.push(Tensor::list(
                    format!("{side}.{i}.static.spec"),
                    vec![
                        s.component_id as f64,
                        s.input_dim as f64,
                        s.total_layers as f64,
                        s.mid_dim as f64,
                        s.width_increment as f64,
                        s.activation.id() as f64,
                        s.output_activation.id() as f64,
                        s.corruption,
                    ],
                ));
                for (l, layer) in p.layers.iter().enumerate() {
                    push_affine(tensors, &format!("{side}.{i}.layer.{l}"), layer);
                }
            }
            (ComponentSpecKind::Sequential(s), ComponentParams::Sequential(p)) => {
                tensors.push(Tensor::scalar(format!("{side}.{i}.kind"), 1.0));
                tensors.push(Tensor::list(
                    format!("{side}.{i}.seq.spec"),
                    vec![
                        s.component_id as f64,
                        s.vocab_size as f64,
                        s.embedding_dim as f64,
                        s.hidden_dim as f64,
                        s.time_steps as f64,
                    ],
                ));
                tensors.push(Tensor::matrix(
                    format!("{side}.{i}.embedding"),
                    &p.embedding,
                ));
                push_cell(tensors, &format!("{side}.{i}.enc"), &p.encoder);
                push_cell(tensors, &format!("{side}.{i}.dec"), &p.decoder);
                tensors.push(Tensor::matrix(format!("{side}.{i}.w_ctx"), &p.w_ctx));
                tensors.push(Tensor::vector(format!("{side}.{i}.b_ctx"), &p.b_ctx));
                tensors.push(Tensor::matrix(format!("{side}.{i}.w_proj"), &p.w_proj));
                tensors.push(Tensor::vector(format!("{side}.{i}.b_proj"), &p.b_proj));
            }
            _ => unreachable!("spec/param kinds agree inside a ModelState"),
        }
    }
    tensors.push(Tensor::list(
        format!("{side}.fusion.meta"),
        vec![
            fusion.activation.id() as f64,
            if fusion.extra.is_some() { 1.0 } else { 0.0 },
        ],
    ));
    for (&id, w) in &fusion.projections {
        tensors.push(Tensor::matrix(format!("{side}.fusion.proj.{id}"), w));
    }
    tensors.push(Tensor::vector(format!("{side}.fusion.bias"), &fusion.bias));
    if let Some(extra) = &fusion.extra {
        push_affine(tensors, &format!("{side}.fusion.extra"), extra);
    }
}

fn encode(state: &ModelState, config_digest: &[u8; 32]) -> Vec<u8> {
    let mut tensors = Vec::new();
    tensors.push(Tensor::scalar("alternation", state.alternation as f64));
    let seed = state.rng.seed;
    let pos = state.rng.word_pos;
    tensors.push(Tensor::list(
        "rng",
        vec![
            (seed & 0xffff_ffff) as f64,
            (seed >> 32) as f64,
            (pos & 0xffff_ffff) as f64,
            ((pos >> 32) & 0xffff_ffff) as f64,
            ((pos >> 64) & 0xffff_ffff) as f64,
            ((pos >> 96) & 0xffff_ffff) as f64,
        ],
    ));
    tensors.push(Tensor::matrix("u", &state.u));
    tensors.push(Tensor::matrix("v", &state.v));
    push_side(
        &mut tensors,
        "user",
        &state.user_specs,
        &state.user_params,
        &state.user_fusion,
    );
    push_side(
        &mut tensors,
        "item",
        &state.item_specs,
        &state.item_params,
        &state.item_fusion,
    );

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(config_digest);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Write the state plus the digest of the config that produced it.
pub fn save_checkpoint(state: &ModelState, config_digest: &[u8; 32], path: &Path) -> Result<()> {
    std::fs::write(path, encode(state, config_digest))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DhaError::ConfigInvalid(
                "checkpoint: tensor table overruns the file".into(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct TensorTable {
    tensors: HashMap<String, Tensor>,
}

impl TensorTable {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| DhaError::ConfigInvalid(format!("checkpoint: missing tensor `{name}`")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.values.len() != 1 {
            return Err(DhaError::ShapeMismatch(format!(
                "checkpoint tensor `{name}` is not a scalar"
            )));
        }
        Ok(t.values[0])
    }

    fn list(&self, name: &str, len: usize) -> Result<&[f64]> {
        let t = self.get(name)?;
        if t.values.len() != len {
            return Err(DhaError::ShapeMismatch(format!(
                "checkpoint tensor `{name}` has {} values, expected {len}",
                t.values.len()
            )));
        }
        Ok(&t.values)
    }

    fn vector(&self, name: &str) -> Result<DenseVector> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(DhaError::ShapeMismatch(format!(
                "checkpoint tensor `{name}` has rank {}, expected 1",
                t.dims.len()
            )));
        }
        Ok(DenseVector::from_vec(t.values.clone()))
    }

    fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        let t = self.get(name)?;
        if t.dims.len() != 2 {
            return Err(DhaError::ShapeMismatch(format!(
                "checkpoint tensor `{name}` has rank {}, expected 2",
                t.dims.len()
            )));
        }
        DenseMatrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.values.clone())
    }

    fn affine(&self, prefix: &str) -> Result<Affine> {
        Ok(Affine {
            w: self.matrix(&format!("{prefix}.w"))?,
            b: self.vector(&format!("{prefix}.b"))?,
        })
    }

    fn cell(&self, prefix: &str) -> Result<LstmCell> {
        Ok(LstmCell {
            w_i: self.matrix(&format!("{prefix}.w_i"))?,
            b_i: self.vector(&format!("{prefix}.b_i"))?,
            w_f: self.matrix(&format!("{prefix}.w_f"))?,
            b_f: self.vector(&format!("{prefix}.b_f"))?,
            w_o: self.matrix(&format!("{prefix}.w_o"))?,
            b_o: self.vector(&format!("{prefix}.b_o"))?,
            w_g: self.matrix(&format!("{prefix}.w_g"))?,
            b_g: self.vector(&format!("{prefix}.b_g"))?,
        })
    }
}

fn read_side(
    table: &TensorTable,
    side: &str,
) -> Result<(
    Vec<ComponentSpecKind>,
    Vec<ComponentParams>,
    crate::fusion::FusionParams,
)> {
    let count = table.scalar(&format!("{side}.count"))? as usize;
    let mut specs = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let kind = table.scalar(&format!("{side}.{i}.kind"))?;
        if kind == 0.0 {
            let s = table.list(&format!("{side}.{i}.static.spec"), 8)?;
            let spec = ComponentSpec {
                component_id: s[0] as u32,
                input_dim: s[1] as usize,
                total_layers: s[2] as usize,
                mid_dim: s[3] as usize,
                width_increment: s[4] as usize,
                activation: ActivationKind::from_id(s[5] as u32)?,
                output_activation: ActivationKind::from_id(s[6] as u32)?,
                corruption: s[7],
            };
            spec.validate()?;
            let n_layers = spec.total_layers;
            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                layers.push(table.affine(&format!("{side}.{i}.layer.{l}"))?);
            }
            specs.push(ComponentSpecKind::Static(spec));
            params.push(ComponentParams::Static(SdaeParams { layers }));
        } else {
            let s = table.list(&format!("{side}.{i}.seq.spec"), 5)?;
            let spec = SequenceSpec {
                component_id: s[0] as u32,
                vocab_size: s[1] as usize,
                embedding_dim: s[2] as usize,
                hidden_dim: s[3] as usize,
                time_steps: s[4] as usize,
            };
            spec.validate()?;
            let p = LstmParams {
                embedding: table.matrix(&format!("{side}.{i}.embedding"))?,
                encoder: table.cell(&format!("{side}.{i}.enc"))?,
                decoder: table.cell(&format!("{side}.{i}.dec"))?,
                w_ctx: table.matrix(&format!("{side}.{i}.w_ctx"))?,
                b_ctx: table.vector(&format!("{side}.{i}.b_ctx"))?,
                w_proj: table.matrix(&format!("{side}.{i}.w_proj"))?,
                b_proj: table.vector(&format!("{side}.{i}.b_proj"))?,
            };
            specs.push(ComponentSpecKind::Sequential(spec));
            params.push(ComponentParams::Sequential(p));
        }
    }
    let meta = table.list(&format!("{side}.fusion.meta"), 2)?;
    let mut projections = std::collections::BTreeMap::new();
    for spec in &specs {
        let id = spec.component_id();
        projections.insert(id, table.matrix(&format!("{side}.fusion.proj.{id}"))?);
    }
    let fusion = crate::fusion::FusionParams {
        projections,
        bias: table.vector(&format!("{side}.fusion.bias"))?,
        activation: ActivationKind::from_id(meta[0] as u32)?,
        extra: if meta[1] != 0.0 {
            Some(table.affine(&format!("{side}.fusion.extra"))?)
        } else {
            None
        },
    };
    Ok((specs, params, fusion))
}

/// Read a checkpoint back: CRC first, then magic and version, then the
/// tensor table. Returns the state and the stored config digest.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, [u8; 32])> {
    if !path.exists() {
        return Err(DhaError::MissingFile(path.display().to_string()));
    }
    let buf = std::fs::read(path)?;
    let min_len = MAGIC.len() + 4 + 32 + 8 + 8;
    if buf.len() < min_len {
        return Err(DhaError::ChecksumMismatch);
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored_crc = u64::from_le_bytes(tail.try_into().unwrap());
    if crc64(body) != stored_crc {
        return Err(DhaError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(DhaError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DhaError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);
    let count = r.u64()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DhaError::ConfigInvalid("checkpoint: non-UTF-8 tensor name".into()))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let len = dims.iter().product::<u64>() as usize;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        tensors.insert(name.clone(), Tensor { name, dims, values });
    }
    let table = TensorTable { tensors };

    let alternation = table.scalar("alternation")? as u32;
    let rng_limbs = table.list("rng", 6)?;
    let seed = (rng_limbs[0] as u64) | ((rng_limbs[1] as u64) << 32);
    let word_pos = (rng_limbs[2] as u128)
        | ((rng_limbs[3] as u128) << 32)
        | ((rng_limbs[4] as u128) << 64)
        | ((rng_limbs[5] as u128) << 96);
    let u = table.matrix("u")?;
    let v = table.matrix("v")?;
    let (user_specs, user_params, user_fusion) = read_side(&table, "user")?;
    let (item_specs, item_params, item_fusion) = read_side(&table, "item")?;

    Ok((
        ModelState {
            user_specs,
            item_specs,
            user_params,
            item_params,
            user_fusion,
            item_fusion,
            u,
            v,
            rng: RngState { seed, word_pos },
            alternation,
        },
        digest,
    ))
}

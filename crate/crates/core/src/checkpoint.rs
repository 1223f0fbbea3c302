//! Checkpoint serialization: architecture spec, parameters, optimizer
//! moments, and the step counter in one self-describing binary file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Model};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 5] = b"VSGC1";
const MAX_RANK: usize = 8;

fn dtype_code(dtype: Dtype) -> u8 {
    match dtype {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    }
}

fn code_dtype(code: u8) -> Result<Dtype> {
    match code {
        0 => Ok(Dtype::F32),
        1 => Ok(Dtype::F64),
        other => Err(Error::format(
            "checkpoint",
            format!("unknown dtype code {other}"),
        )),
    }
}

fn err(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(err(format!(
                "file ends inside {what} ({} bytes left, {n} needed)",
                self.buf.len() - self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) -> Result<()> {
    let name_len: u16 = name
        .len()
        .try_into()
        .map_err(|_| err(format!("tensor name '{name}' exceeds 65535 bytes")))?;
    if tensor.shape().len() > MAX_RANK {
        return Err(err(format!(
            "tensor '{name}' rank {} exceeds {MAX_RANK}",
            tensor.shape().len()
        )));
    }
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype_code(T::DTYPE));
    out.push(tensor.shape().len() as u8);
    for &dim in tensor.shape() {
        let dim: u32 = dim
            .try_into()
            .map_err(|_| err(format!("tensor '{name}' extent {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
    Ok(())
}

fn read_tensor<T: Scalar>(r: &mut Reader) -> Result<(String, Tensor<T>)> {
    let name_len = r.u16("a tensor name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "a tensor name")?.to_vec())
        .map_err(|e| err(format!("tensor name is not UTF-8: {e}")))?;
    let dtype = code_dtype(r.u8("a dtype code")?)?;
    if dtype != T::DTYPE {
        return Err(err(format!(
            "tensor '{name}' stores {dtype:?} but {:?} was requested",
            T::DTYPE
        )));
    }
    let rank = r.u8("a tensor rank")? as usize;
    if rank > MAX_RANK {
        return Err(err(format!("tensor '{name}' rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let dim = r.u32("a tensor extent")? as usize;
        numel = numel
            .checked_mul(dim)
            .ok_or_else(|| err(format!("tensor '{name}' extents overflow")))?;
        shape.push(dim);
    }
    let width = std::mem::size_of::<T>();
    let payload = r.take(
        numel
            .checked_mul(width)
            .ok_or_else(|| err(format!("tensor '{name}' payload overflows")))?,
        "a tensor payload",
    )?;
    let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
    Ok((name, Tensor::from_vec(&shape, data)?))
}

/// Writes model, optimizer state, and step counter to `path`.
pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    state: &AdamState<T>,
    path: &Path,
) -> Result<()> {
    let store = model.store();
    let spec_json = serde_json::to_string(model.spec())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let spec_len: u32 = spec_json
        .len()
        .try_into()
        .map_err(|_| err("spec JSON exceeds u32 length"))?;
    out.extend_from_slice(&spec_len.to_le_bytes());
    out.extend_from_slice(spec_json.as_bytes());

    let param_count: u32 = store
        .ids()
        .count()
        .try_into()
        .map_err(|_| err("parameter count exceeds u32"))?;
    out.extend_from_slice(&param_count.to_le_bytes());
    for id in store.ids() {
        write_tensor(&mut out, store.name(id), store.get(id))?;
    }

    out.extend_from_slice(&(2 * param_count).to_le_bytes());
    for id in store.ids() {
        let (m, v) = state.moments(id);
        write_tensor(&mut out, &format!("{}.adam_m", store.name(id)), m)?;
        write_tensor(&mut out, &format!("{}.adam_v", store.name(id)), v)?;
    }

    out.extend_from_slice(&state.step_count().to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Dtype of the tensors a checkpoint stores, read without loading it.
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "the magic")?;
    if magic != MAGIC {
        return Err(err(format!(
            "bad magic {:?}, expected \"VSGC1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let spec_len = r.u32("the spec length")? as usize;
    r.take(spec_len, "the spec JSON")?;
    if r.u32("the tensor count")? == 0 {
        return Err(err("checkpoint holds no tensors"));
    }
    let name_len = r.u16("a tensor name length")? as usize;
    r.take(name_len, "a tensor name")?;
    code_dtype(r.u8("a dtype code")?)
}

/// Reads a checkpoint back into a model and optimizer state. The stored
/// dtype must match `T`; see [`checkpoint_dtype`] to dispatch.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, AdamState<T>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "the magic")?;
    if magic != MAGIC {
        return Err(err(format!(
            "bad magic {:?}, expected \"VSGC1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let spec_len = r.u32("the spec length")? as usize;
    let spec_json = std::str::from_utf8(r.take(spec_len, "the spec JSON")?)
        .map_err(|e| err(format!("spec JSON is not UTF-8: {e}")))?;
    let spec: ArchitectureSpec =
        serde_json::from_str(spec_json).map_err(|e| err(format!("bad spec JSON: {e}")))?;

    let mut model = Model::<T>::build(spec, 0)?;
    let param_count = r.u32("the tensor count")? as usize;
    let expected = model.store().ids().count();
    if param_count != expected {
        return Err(err(format!(
            "checkpoint stores {param_count} parameters, the architecture defines {expected}"
        )));
    }
    let mut seen = vec![false; expected];
    for _ in 0..param_count {
        let (name, tensor) = read_tensor::<T>(&mut r)?;
        let id = model
            .store()
            .find(&name)
            .ok_or_else(|| err(format!("parameter '{name}' is not in the architecture")))?;
        if model.store().get(id).shape() != tensor.shape() {
            return Err(err(format!(
                "parameter '{name}' has shape {:?}, architecture expects {:?}",
                tensor.shape(),
                model.store().get(id).shape()
            )));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(err(format!("parameter '{name}' appears twice")));
        }
        *model.store_mut().get_mut(id) = tensor;
    }

    let moment_count = r.u32("the optimizer tensor count")? as usize;
    if moment_count != 2 * expected {
        return Err(err(format!(
            "checkpoint stores {moment_count} optimizer tensors, expected {}",
            2 * expected
        )));
    }
    let mut m: Vec<Option<Tensor<T>>> = (0..expected).map(|_| None).collect();
    let mut v: Vec<Option<Tensor<T>>> = (0..expected).map(|_| None).collect();
    for _ in 0..moment_count {
        let (name, tensor) = read_tensor::<T>(&mut r)?;
        let (param, slot) = name
            .strip_suffix(".adam_m")
            .map(|p| (p, &mut m))
            .or_else(|| name.strip_suffix(".adam_v").map(|p| (p, &mut v)))
            .ok_or_else(|| err(format!("optimizer tensor '{name}' has no moment suffix")))?;
        let id = model
            .store()
            .find(param)
            .ok_or_else(|| err(format!("optimizer tensor '{name}' matches no parameter")))?;
        if slot[id.index()].replace(tensor).is_some() {
            return Err(err(format!("optimizer tensor '{name}' appears twice")));
        }
    }
    let step = r.u64("the step counter")?;
    if r.pos != buf.len() {
        return Err(err(format!(
            "{} trailing bytes after the step counter",
            buf.len() - r.pos
        )));
    }

    let m: Vec<Tensor<T>> = m
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| err(format!("missing first moment for parameter {i}"))))
        .collect::<Result<_>>()?;
    let v: Vec<Tensor<T>> = v
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| err(format!("missing second moment for parameter {i}"))))
        .collect::<Result<_>>()?;
    let state = AdamState::restore(model.store(), m, v, step)?;
    Ok((model, state))
}

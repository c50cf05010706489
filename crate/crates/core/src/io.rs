//! Binary volume and checkpoint files.
//!
//! Volume: `SMVX`, version u16, dtype u8 (0 = f32, 1 = u8), rank u8, dims
//! u32 each, then row-major little-endian values.
//!
//! Checkpoint: `SMCK`, version u16, record count u32, then per record a
//! u32-length UTF-8 name, rank u32, dims u32 each, and f32 little-endian
//! values. Batch-norm running statistics are stored as records named
//! `<site>.mean` and `<site>.var`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const VOLUME_MAGIC: &[u8; 4] = b"SMVX";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u16 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Volume {
    pub fn shape(&self) -> &[usize] {
        match self {
            Volume::F32(t) => t.shape(),
            Volume::U8 { shape, .. } => shape,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        match self.u16()? {
            VERSION => Ok(()),
            v => Err(Error::Format(format!("unsupported version {v}"))),
        }
    }

    fn dims(&mut self, rank: usize) -> Result<(Vec<usize>, usize)> {
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        Ok((dims, count))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?;
        Ok(self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) -> Result<()> {
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let shape = v.shape();
    if shape.len() > MAX_RANK {
        return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match v {
        Volume::F32(_) => 0,
        Volume::U8 { .. } => 1,
    });
    out.push(shape.len() as u8);
    put_dims(&mut out, shape)?;
    match v {
        Volume::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Volume::U8 { data, .. } => out.extend_from_slice(data),
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(VOLUME_MAGIC)?;
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let (shape, count) = r.dims(rank)?;
    let v = match dtype {
        0 => Volume::F32(Tensor::new(&shape, r.f32s(count)?)?),
        1 => Volume::U8 { data: r.take(count)?.to_vec(), shape },
        d => return Err(Error::Format(format!("unknown dtype code {d}"))),
    };
    r.finish()?;
    Ok(v)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    Ok(fs::write(path, encode_volume(v)?)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// One named checkpoint tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Parameters in store order, followed by every running statistic.
pub fn store_records<T: Real>(store: &ParamStore<T>) -> Vec<Record> {
    let f = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
    let mut out: Vec<Record> = store
        .params()
        .iter()
        .map(|p| Record { name: p.name.clone(), shape: p.value.shape().to_vec(), values: f(p.value.data()) })
        .collect();
    for st in store.stats() {
        out.push(Record { name: format!("{}.mean", st.name), shape: vec![st.mean.len()], values: f(&st.mean) });
        out.push(Record { name: format!("{}.var", st.name), shape: vec![st.var.len()], values: f(&st.var) });
    }
    out
}

pub fn encode_checkpoint(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        put_dims(&mut out, &rec.shape)?;
        rec.values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let (shape, count) = r.dims(rank)?;
        out.push(Record { name, shape, values: r.f32s(count)? });
    }
    r.finish()?;
    Ok(out)
}

/// Overwrites every parameter and statistic of `store` from `records`;
/// names and shapes must match exactly.
pub fn load_records<T: Real>(store: &mut ParamStore<T>, records: &[Record]) -> Result<()> {
    let expected = store_records(store);
    if expected.len() != records.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} records, model expects {}",
            records.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(records) {
        if want.name != got.name || want.shape != got.shape {
            return Err(Error::Format(format!(
                "record `{}` {:?} does not match model `{}` {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }
    let n_params = store.params().len();
    for (p, rec) in store.params_mut().iter_mut().zip(records) {
        for (d, &v) in p.value.data_mut().iter_mut().zip(&rec.values) {
            *d = T::of(v as f64);
        }
    }
    for (st, pair) in store.stats_mut().iter_mut().zip(records[n_params..].chunks(2)) {
        st.mean = pair[0].values.iter().map(|&v| T::of(v as f64)).collect();
        st.var = pair[1].values.iter().map(|&v| T::of(v as f64)).collect();
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(&store_records(store))?)?)
}

pub fn load_checkpoint<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    load_records(store, &decode_checkpoint(&fs::read(path)?)?)
}

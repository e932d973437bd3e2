use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::tensor::Tensor;
use crate::NnError;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

const MAGIC: &[u8; 4] = b"PNNW";
const FORMAT_VERSION: u32 = 1;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
    /// Buffers (running statistics) are stored but never optimized.
    buffer: bool,
}

/// Named collection of model tensors.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<Entry>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.clone(), trainable: e.trainable, buffer: e.buffer })
                .collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: NEXT_UID.fetch_add(1, Ordering::Relaxed), entries: Vec::new() }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry { name: name.into(), value, trainable: true, buffer: false });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry { name: name.into(), value, trainable: false, buffer: true });
        ParamId(self.entries.len() - 1)
    }

    /// Kaiming-uniform initialised tensor for a layer with `fan_in` inputs.
    pub fn add_kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.entries[id.0].buffer
    }

    /// Freezes or unfreezes every non-buffer tensor whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if !e.buffer && e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            if !e.buffer {
                e.trainable = trainable;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Order-sensitive hash over names and exact bit patterns of all tensors.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend_from_slice(e.name.as_bytes());
            for v in e.value.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    /// Overwrites every value with the one from `other`, keeping this store's identity.
    ///
    /// Panics if the two stores do not share a layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.entries.len(), other.entries.len(), "store layouts differ");
        for (e, o) in self.entries.iter_mut().zip(&other.entries) {
            assert!(e.name == o.name && e.value.shape() == o.value.shape(), "store layouts differ at {}", e.name);
            e.value = o.value.clone();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    pub fn save(&self, mut w: impl Write) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name)?;
            w.write_u8(u8::from(e.buffer))?;
            w.write_u32::<LittleEndian>(e.value.ndim() as u32)?;
            for &d in e.value.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in e.value.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Loads values into an already-constructed store with matching layout.
    pub fn load_into(&mut self, mut r: impl Read) -> Result<(), NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported weight format version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != self.entries.len() {
            return Err(NnError::Format(format!("expected {} tensors, file has {count}", self.entries.len())));
        }
        for e in &mut self.entries {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| NnError::Format("non-utf8 tensor name".into()))?;
            if name != e.name {
                return Err(NnError::Format(format!("expected tensor {}, found {name}", e.name)));
            }
            let _buffer = r.read_u8()?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize)).collect::<Result<_, _>>()?;
            if shape != e.value.shape() {
                return Err(NnError::Format(format!("tensor {name}: shape {shape:?} != {:?}", e.value.shape())));
            }
            for v in e.value.data_mut() {
                *v = r.read_f32::<LittleEndian>()?;
            }
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::new();
        a.add_kaiming("w", &[3, 4], 4, &mut rng);
        a.add_buffer("running_mean", Tensor::full(&[4], 0.25));
        let mut buf = Vec::new();
        a.save(&mut buf).unwrap();

        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3, 4]));
        b.add_buffer("running_mean", Tensor::zeros(&[4]));
        b.load_into(buf.as_slice()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn copying_values_keeps_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = ParamStore::new();
        a.add_kaiming("w", &[2, 2], 2, &mut rng);
        let snapshot = a.clone();
        a.get_mut(ParamId(0)).data_mut()[0] += 1.0;
        let uid = a.uid();
        a.copy_values_from(&snapshot);
        assert_eq!((a.uid(), a.fingerprint()), (uid, snapshot.fingerprint()));
    }

    #[test]
    fn load_rejects_layout_mismatch() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]));
        let mut buf = Vec::new();
        a.save(&mut buf).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3]));
        assert!(b.load_into(buf.as_slice()).is_err());
    }

    #[test]
    fn freezing_by_prefix_skips_buffers() {
        let mut s = ParamStore::new();
        let w = s.add("stem.w", Tensor::zeros(&[1]));
        let m = s.add_buffer("stem.mean", Tensor::zeros(&[1]));
        let h = s.add("head.w", Tensor::zeros(&[1]));
        s.set_trainable_prefix("stem", false);
        assert!(!s.is_trainable(w));
        assert!(s.is_trainable(h));
        s.set_all_trainable(true);
        assert!(!s.is_trainable(m));
    }
}

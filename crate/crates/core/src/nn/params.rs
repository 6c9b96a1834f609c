//! Flat parameter storage.
//!
//! Every network keeps its weights in one contiguous vector described by a
//! [`Layout`]. Layers hold [`Slot`]s (offset + length) into that vector, which
//! makes optimizer steps, EMA copies, checkpointing and finite-difference
//! probes plain loops over a slice.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, R>(&self, params: &'a [R]) -> &'a [R] {
        &params[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, R>(&self, params: &'a mut [R]) -> &'a mut [R] {
        &mut params[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self) -> Slot {
        Slot {
            offset: self.offset,
            len: self.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            init,
        };
        let slot = entry.slot();
        self.len += slot.len;
        self.entries.push(entry);
        slot
    }

    /// Appends `other` under `prefix`; returns where it landed.
    pub fn append(&mut self, prefix: &str, other: &Layout) -> Slot {
        let base = self.len;
        for e in &other.entries {
            self.entries.push(ParamEntry {
                name: format!("{prefix}{}", e.name),
                shape: e.shape.clone(),
                offset: base + e.offset,
                init: e.init,
            });
        }
        self.len += other.len;
        Slot {
            offset: base,
            len: other.len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<R> {
        let mut out = vec![R::zero(); self.len];
        for e in &self.entries {
            let dst = e.slot().of_mut(&mut out);
            match e.init {
                Init::Zeros => {}
                Init::Ones => dst.fill(R::one()),
                Init::TruncNormal(std) => {
                    for v in dst {
                        *v = R::cst(trunc_normal(rng) * std);
                    }
                }
            }
        }
        out
    }
}

fn trunc_normal<G: Rng + ?Sized>(rng: &mut G) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

pub fn cast_vec<A: Real, B: Real>(xs: &[A]) -> Vec<B> {
    xs.iter()
        .map(|v| B::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(B::nan()))
        .collect()
}

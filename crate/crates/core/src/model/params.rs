use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Receives decoupled weight decay.
    pub decay: bool,
    pub trainable: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All model parameters in one flat vector, addressed by segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub segments: Vec<Segment>,
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Appends a segment and returns its index.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        decay: bool,
        trainable: bool,
        init: Vec<f64>,
    ) -> usize {
        let seg = Segment { name: name.into(), offset: self.values.len(), shape: shape.to_vec(), decay, trainable };
        assert_eq!(seg.len(), init.len(), "initializer length for {}", seg.name);
        self.values.extend(init);
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, seg: usize) -> &[f64] {
        &self.values[self.segments[seg].range()]
    }

    pub fn get_mut(&mut self, seg: usize) -> &mut [f64] {
        let r = self.segments[seg].range();
        &mut self.values[r]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn trainable_count(&self) -> usize {
        self.segments.iter().filter(|s| s.trainable).map(Segment::len).sum()
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.segments != other.segments {
            return Err(Error::domain("parameter layouts differ"));
        }
        self.values.copy_from_slice(&other.values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_are_contiguous() {
        let mut p = ParamSet::new();
        let a = p.add("a", &[2, 3], true, true, vec![1.0; 6]);
        let b = p.add("b", &[4], false, false, vec![2.0; 4]);
        assert_eq!(p.len(), 10);
        assert_eq!(p.segments[b].offset, 6);
        assert_eq!(p.get(a), &[1.0; 6]);
        p.get_mut(b)[0] = 5.0;
        assert_eq!(p.values[6], 5.0);
        assert_eq!(p.index_of("b"), Some(1));
        assert_eq!(p.trainable_count(), 6);
    }
}

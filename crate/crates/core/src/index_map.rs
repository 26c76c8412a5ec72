//! Slot mapping produced by scene mutations, consumed by every per-Gaussian buffer.

use crate::error::{Error, Result};

/// For each slot of the mutated scene, the index it came from in the old
/// scene, or `None` for a freshly created Gaussian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    old_len: usize,
    sources: Vec<Option<usize>>,
}

impl IndexMap {
    pub fn new(old_len: usize, sources: Vec<Option<usize>>) -> Result<Self> {
        let mut seen = vec![false; old_len];
        for src in sources.iter().flatten() {
            let src = *src;
            if src >= old_len {
                return Err(Error::InvalidIndexMap(format!("source {src} >= old length {old_len}")));
            }
            if std::mem::replace(&mut seen[src], true) {
                return Err(Error::InvalidIndexMap(format!("source {src} used twice")));
            }
        }
        Ok(IndexMap { old_len, sources })
    }

    pub fn identity(len: usize) -> Self {
        IndexMap { old_len: len, sources: (0..len).map(Some).collect() }
    }

    pub fn old_len(&self) -> usize {
        self.old_len
    }

    pub fn new_len(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[Option<usize>] {
        &self.sources
    }

    /// `self` followed by `next`, mapping from the old scene of `self` to the new scene of `next`.
    pub fn then(&self, next: &IndexMap) -> Result<IndexMap> {
        if next.old_len != self.new_len() {
            return Err(Error::InvalidIndexMap(format!(
                "cannot chain map of length {} into map expecting {}",
                self.new_len(),
                next.old_len
            )));
        }
        let sources = next.sources.iter().map(|s| s.and_then(|i| self.sources[i])).collect();
        Ok(IndexMap { old_len: self.old_len, sources })
    }

    /// Rebuilds `values` for the new layout; fresh slots get `fresh`.
    pub fn apply<T: Clone>(&self, values: &[T], fresh: T) -> Result<Vec<T>> {
        if values.len() != self.old_len {
            return Err(Error::InvalidIndexMap(format!(
                "buffer has {} entries, map expects {}",
                values.len(),
                self.old_len
            )));
        }
        Ok(self
            .sources
            .iter()
            .map(|s| match s {
                Some(i) => values[*i].clone(),
                None => fresh.clone(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_sources() {
        assert!(IndexMap::new(3, vec![Some(0), Some(3)]).is_err());
        assert!(IndexMap::new(3, vec![Some(1), Some(1)]).is_err());
        assert!(IndexMap::new(3, vec![Some(2), None, Some(0)]).is_ok());
    }

    #[test]
    fn chaining_composes() {
        // drop slot 1, append one fresh slot; then drop the first survivor
        let a = IndexMap::new(3, vec![Some(0), Some(2), None]).unwrap();
        let b = IndexMap::new(3, vec![Some(1), Some(2)]).unwrap();
        let ab = a.then(&b).unwrap();
        assert_eq!(ab.sources(), &[Some(2), None]);
        assert_eq!(ab.apply(&['a', 'b', 'c'], '_').unwrap(), vec!['c', '_']);
    }
}

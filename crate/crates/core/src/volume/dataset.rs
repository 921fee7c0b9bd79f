use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Volume, XrayImage};
use crate::error::{contract, Result};
use crate::phantom::ClassLabel;

/// A DRR X-ray together with the CT volume it was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub xray: XrayImage,
    pub ct: Volume,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub master_seed: u64,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            master_seed: self.master_seed,
        }
    }
}

/// X-rays without usable CT. The generating volumes and labels are kept
/// sealed: [`UnpairedXraySet::xrays`] is the only training-facing accessor,
/// and every read of the hidden side is counted.
#[derive(Debug)]
pub struct UnpairedXraySet {
    xrays: Vec<XrayImage>,
    hidden_ct: Vec<Volume>,
    hidden_labels: Vec<ClassLabel>,
    master_seed: u64,
    reads: AtomicUsize,
}

impl Clone for UnpairedXraySet {
    fn clone(&self) -> Self {
        Self {
            xrays: self.xrays.clone(),
            hidden_ct: self.hidden_ct.clone(),
            hidden_labels: self.hidden_labels.clone(),
            master_seed: self.master_seed,
            reads: AtomicUsize::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

impl UnpairedXraySet {
    pub fn new(
        xrays: Vec<XrayImage>,
        hidden_ct: Vec<Volume>,
        hidden_labels: Vec<ClassLabel>,
        master_seed: u64,
    ) -> Result<Self> {
        contract!(
            xrays.len() == hidden_ct.len() && xrays.len() == hidden_labels.len(),
            "unpaired set: {} xrays, {} hidden volumes, {} hidden labels",
            xrays.len(),
            hidden_ct.len(),
            hidden_labels.len()
        );
        Ok(Self {
            xrays,
            hidden_ct,
            hidden_labels,
            master_seed,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn xrays(&self) -> &[XrayImage] {
        &self.xrays
    }

    pub fn len(&self) -> usize {
        self.xrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xrays.is_empty()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Ground-truth volumes; reserved for evaluation and persistence.
    pub fn hidden_ct(&self) -> &[Volume] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden_ct
    }

    /// Ground-truth labels; reserved for evaluation and persistence.
    pub fn hidden_labels(&self) -> &[ClassLabel] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden_labels
    }

    /// Number of reads of the sealed side so far.
    pub fn hidden_access_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Reordered or filtered copy (counts as a hidden read).
    pub fn subset(&self, indices: &[usize]) -> Self {
        self.reads.fetch_add(1, Ordering::Relaxed);
        Self {
            xrays: indices.iter().map(|&i| self.xrays[i].clone()).collect(),
            hidden_ct: indices.iter().map(|&i| self.hidden_ct[i].clone()).collect(),
            hidden_labels: indices.iter().map(|&i| self.hidden_labels[i]).collect(),
            master_seed: self.master_seed,
            reads: AtomicUsize::new(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::StyleTag;

    #[test]
    fn hidden_reads_are_counted_and_xrays_are_not() {
        let x = XrayImage::new([2, 2], vec![0.1; 4], StyleTag::Shifted).unwrap();
        let v = Volume::filled([2, 2, 2], 0.1).unwrap();
        let set = UnpairedXraySet::new(vec![x], vec![v], vec![ClassLabel::Healthy], 5).unwrap();
        let _ = set.xrays();
        let _ = set.len();
        assert_eq!(set.hidden_access_count(), 0);
        let _ = set.hidden_ct();
        let _ = set.hidden_labels();
        assert_eq!(set.hidden_access_count(), 2);
    }

    #[test]
    fn misaligned_parts_rejected() {
        let x = XrayImage::new([2, 2], vec![0.1; 4], StyleTag::Shifted).unwrap();
        assert!(UnpairedXraySet::new(vec![x], vec![], vec![], 0).is_err());
    }
}

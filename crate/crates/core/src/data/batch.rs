use crate::data::augment::{augment, AugmentConfig};
use crate::data::{Sample, SplitDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    /// Index of the source sample within its pool (labeled or unlabeled).
    pub sample_index: usize,
    pub sample_id: u64,
    pub view: u8,
    pub input: Vec<f64>,
    /// Ground truth for labeled views, `None` for unlabeled ones.
    pub label: Option<usize>,
}

/// Two augmented views per sample; the views of batch sample `i` sit at
/// positions `2i` and `2i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch {
    pub origin: Origin,
    pub views: Vec<View>,
}

impl MultiViewBatch {
    pub fn build(
        pool: &[Sample],
        indices: &[usize],
        origin: Origin,
        rng: &mut Rng,
        config: &AugmentConfig,
    ) -> Self {
        let mut views = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            let sample = &pool[i];
            let label = match origin {
                Origin::Labeled => sample.true_class,
                Origin::Unlabeled => None,
            };
            for view in 0..2u8 {
                views.push(View {
                    sample_index: i,
                    sample_id: sample.id,
                    view,
                    input: augment(&sample.input, rng, config),
                    label,
                });
            }
        }
        Self { origin, views }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.views.len() / 2
    }

    /// Position of the other view of the same sample.
    pub fn partner(view_index: usize) -> usize {
        view_index ^ 1
    }
}

/// Epoch-based sampler without replacement. The unlabeled pool drives the
/// epoch (one pass, last batch may be short); the labeled pool cycles
/// through fresh permutations as it runs out. With `b_u = 0` or an empty
/// unlabeled pool the labeled pool drives the epoch instead.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSampler {
    labeled_order: Vec<usize>,
    labeled_cursor: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_cursor: usize,
    b_l: usize,
    b_u: usize,
}

impl BatchSampler {
    pub fn new(split: &SplitDataset, b_l: usize, b_u: usize) -> Result<Self> {
        if b_l > split.labeled.len() {
            return Err(Error::BatchTooLarge {
                requested: b_l,
                available: split.labeled.len(),
            });
        }
        if b_u > split.unlabeled.len() {
            return Err(Error::BatchTooLarge {
                requested: b_u,
                available: split.unlabeled.len(),
            });
        }
        if b_l == 0 && b_u == 0 {
            return Err(Error::InvalidConfig("both batch sizes are zero".into()));
        }
        Ok(Self {
            labeled_order: (0..split.labeled.len()).collect(),
            labeled_cursor: split.labeled.len(),
            unlabeled_order: (0..split.unlabeled.len()).collect(),
            unlabeled_cursor: split.unlabeled.len(),
            b_l,
            b_u,
        })
    }

    fn unlabeled_drives(&self) -> bool {
        self.b_u > 0 && !self.unlabeled_order.is_empty()
    }

    pub fn steps_per_epoch(&self) -> usize {
        if self.unlabeled_drives() {
            self.unlabeled_order.len().div_ceil(self.b_u)
        } else {
            self.labeled_order.len().div_ceil(self.b_l)
        }
    }

    /// Permutes the driving pool; call once at the start of every epoch.
    pub fn start_epoch(&mut self, rng: &mut Rng) {
        if self.unlabeled_drives() {
            rng.shuffle(&mut self.unlabeled_order);
            self.unlabeled_cursor = 0;
        } else {
            rng.shuffle(&mut self.labeled_order);
            self.labeled_cursor = 0;
        }
    }

    /// Indices for the next step, or `None` once the epoch is exhausted.
    pub fn next_indices(&mut self, rng: &mut Rng) -> Option<(Vec<usize>, Vec<usize>)> {
        if self.unlabeled_drives() {
            if self.unlabeled_cursor >= self.unlabeled_order.len() {
                return None;
            }
            let end = (self.unlabeled_cursor + self.b_u).min(self.unlabeled_order.len());
            let unlabeled = self.unlabeled_order[self.unlabeled_cursor..end].to_vec();
            self.unlabeled_cursor = end;
            let labeled = self.take_labeled_cycling(rng);
            Some((labeled, unlabeled))
        } else {
            if self.labeled_cursor >= self.labeled_order.len() {
                return None;
            }
            let end = (self.labeled_cursor + self.b_l).min(self.labeled_order.len());
            let labeled = self.labeled_order[self.labeled_cursor..end].to_vec();
            self.labeled_cursor = end;
            Some((labeled, Vec::new()))
        }
    }

    fn take_labeled_cycling(&mut self, rng: &mut Rng) -> Vec<usize> {
        if self.b_l == 0 {
            return Vec::new();
        }
        if self.labeled_cursor + self.b_l > self.labeled_order.len() {
            rng.shuffle(&mut self.labeled_order);
            self.labeled_cursor = 0;
        }
        let out = self.labeled_order[self.labeled_cursor..self.labeled_cursor + self.b_l].to_vec();
        self.labeled_cursor += self.b_l;
        out
    }

    /// Draws the next pair of multi-view batches.
    pub fn sample_batches(
        &mut self,
        split: &SplitDataset,
        data_rng: &mut Rng,
        augment_rng: &mut Rng,
        config: &AugmentConfig,
    ) -> Option<(MultiViewBatch, MultiViewBatch)> {
        let (li, ui) = self.next_indices(data_rng)?;
        let labeled = MultiViewBatch::build(&split.labeled, &li, Origin::Labeled, augment_rng, config);
        let unlabeled =
            MultiViewBatch::build(&split.unlabeled, &ui, Origin::Unlabeled, augment_rng, config);
        Some((labeled, unlabeled))
    }

    pub(crate) fn state(&self) -> (&[usize], usize, &[usize], usize) {
        (
            &self.labeled_order,
            self.labeled_cursor,
            &self.unlabeled_order,
            self.unlabeled_cursor,
        )
    }

    pub(crate) fn restore(
        &mut self,
        labeled_order: Vec<usize>,
        labeled_cursor: usize,
        unlabeled_order: Vec<usize>,
        unlabeled_cursor: usize,
    ) -> Result<()> {
        let ok = |order: &[usize], n: usize, cursor: usize| {
            let mut sorted = order.to_vec();
            sorted.sort_unstable();
            sorted == (0..n).collect::<Vec<_>>() && cursor <= n
        };
        if !ok(&labeled_order, self.labeled_order.len(), labeled_cursor)
            || !ok(&unlabeled_order, self.unlabeled_order.len(), unlabeled_cursor)
        {
            return Err(Error::Corrupt("sampler state does not match dataset".into()));
        }
        self.labeled_order = labeled_order;
        self.labeled_cursor = labeled_cursor;
        self.unlabeled_order = unlabeled_order;
        self.unlabeled_cursor = unlabeled_cursor;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn split(n_l: usize, n_u: usize) -> SplitDataset {
        let sample = |i: usize, labeled: bool| Sample {
            id: i as u64,
            input: vec![i as f64, 1.0],
            true_class: Some(i % 2),
            is_labeled: labeled,
        };
        SplitDataset {
            dim: 2,
            labeled: (0..n_l).map(|i| sample(i, true)).collect(),
            unlabeled: (n_l..n_l + n_u).map(|i| sample(i, false)).collect(),
            known_classes: vec![0, 1],
            novel_classes: vec![],
            class_labels: vec![0, 1],
        }
    }

    #[test]
    fn labeled_batch_has_two_views_per_sample() {
        let s = split(10, 10);
        let mut sampler = BatchSampler::new(&s, 2, 3).unwrap();
        let mut rng = Rng::new(0, Stream::Data);
        let mut aug = Rng::new(0, Stream::Augment);
        sampler.start_epoch(&mut rng);
        let (l, u) = sampler
            .sample_batches(&s, &mut rng, &mut aug, &AugmentConfig::default())
            .unwrap();
        assert_eq!(l.len(), 4);
        assert_eq!(u.len(), 6);
        for (i, v) in l.views.iter().enumerate() {
            let partner = &l.views[MultiViewBatch::partner(i)];
            assert_eq!(v.sample_id, partner.sample_id);
            assert_ne!(v.view, partner.view);
            assert!(v.label.is_some());
        }
        assert!(u.views.iter().all(|v| v.label.is_none()));
    }

    #[test]
    fn epoch_counts_with_remainder() {
        let s = split(40, 100);
        let mut sampler = BatchSampler::new(&s, 8, 32).unwrap();
        let mut rng = Rng::new(1, Stream::Data);
        assert_eq!(sampler.steps_per_epoch(), 4);
        sampler.start_epoch(&mut rng);
        let mut sizes = Vec::new();
        let mut seen = Vec::new();
        while let Some((l, u)) = sampler.next_indices(&mut rng) {
            assert_eq!(l.len(), 8);
            sizes.push(u.len());
            seen.extend(u);
        }
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn supervised_only_mode() {
        let s = split(10, 5);
        let mut sampler = BatchSampler::new(&s, 4, 0).unwrap();
        let mut rng = Rng::new(1, Stream::Data);
        sampler.start_epoch(&mut rng);
        let (l, u) = sampler.next_indices(&mut rng).unwrap();
        assert_eq!(l.len(), 4);
        assert!(u.is_empty());
        assert_eq!(sampler.steps_per_epoch(), 3);
    }

    #[test]
    fn labeled_batches_never_repeat_a_sample() {
        let s = split(10, 100);
        let mut sampler = BatchSampler::new(&s, 4, 10).unwrap();
        let mut rng = Rng::new(2, Stream::Data);
        for _ in 0..3 {
            sampler.start_epoch(&mut rng);
            while let Some((l, _)) = sampler.next_indices(&mut rng) {
                let mut d = l.clone();
                d.sort_unstable();
                d.dedup();
                assert_eq!(d.len(), 4);
            }
        }
    }

    #[test]
    fn oversized_batches_rejected() {
        let s = split(3, 3);
        assert!(matches!(
            BatchSampler::new(&s, 4, 1),
            Err(Error::BatchTooLarge { requested: 4, available: 3 })
        ));
        assert!(matches!(
            BatchSampler::new(&s, 1, 4),
            Err(Error::BatchTooLarge { .. })
        ));
    }
}

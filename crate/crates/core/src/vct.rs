//! Visual cloze tests: an STC with one patch erased.

use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Result, VccError};
use crate::events::VideoEvent;

/// One cloze test of type `type_i` (1-based). `kept_patches` holds the other
/// `D - 1` patches in temporal order; `kept_flows` the matching flow patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Vct {
    pub type_i: usize,
    pub kept_patches: Array4<u8>,
    pub kept_flows: Array4<f32>,
    pub target_patch: Array3<u8>,
    pub target_flow: Array3<f32>,
    pub frame_idx: usize,
}

impl Vct {
    pub fn depth(&self) -> usize {
        self.kept_patches.dim().0 + 1
    }

    /// Puts the target back at position `type_i`, recovering the STC patches.
    pub fn reinsert(&self) -> Array4<u8> {
        let i = self.type_i - 1;
        let (k, h, w, c) = self.kept_patches.dim();
        let mut out = Array4::<u8>::zeros((k + 1, h, w, c));
        out.slice_mut(s![..i, .., .., ..]).assign(&self.kept_patches.slice(s![..i, .., .., ..]));
        out.slice_mut(s![i, .., .., ..]).assign(&self.target_patch);
        out.slice_mut(s![i + 1.., .., .., ..]).assign(&self.kept_patches.slice(s![i.., .., .., ..]));
        out
    }
}

fn drop_index<T: Clone>(a: &Array4<T>, i: usize) -> Array4<T> {
    let keep: Vec<usize> = (0..a.dim().0).filter(|&k| k != i).collect();
    a.select(Axis(0), &keep)
}

/// Erases patch `i` (1-based) of an event.
pub fn make_vct(event: &VideoEvent, i: usize) -> Result<Vct> {
    let d = event.stc.depth();
    if i == 0 || i > d {
        return Err(VccError::InvalidInput(format!("VCT type {i} outside 1..={d}")));
    }
    if event.flow.patches.dim().0 != d {
        return Err(VccError::shape(d, event.flow.patches.dim().0));
    }
    Ok(Vct {
        type_i: i,
        kept_patches: drop_index(&event.stc.patches, i - 1),
        kept_flows: drop_index(&event.flow.patches, i - 1),
        target_patch: event.stc.patches.index_axis(Axis(0), i - 1).to_owned(),
        target_flow: event.flow.patches.index_axis(Axis(0), i - 1).to_owned(),
        frame_idx: event.stc.frame_idx,
    })
}

/// All VCTs of a single (block, type).
#[derive(Debug, Clone, PartialEq)]
pub struct VctDataset {
    pub block: usize,
    pub type_i: usize,
    pub items: Vec<Vct>,
}

impl VctDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One dataset per type `1..=depth`, each holding one VCT per event.
pub fn make_all_types(events: &[VideoEvent], depth: usize, block: usize) -> Result<Vec<VctDataset>> {
    (1..=depth)
        .map(|i| {
            let items = events.iter().map(|e| make_vct(e, i)).collect::<Result<Vec<_>>>()?;
            Ok(VctDataset { block, type_i: i, items })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{FlowStack, Stc};
    use crate::roi::{BoundingBox, RoiSource};
    use proptest::prelude::*;

    fn event(d: usize, seed: u8) -> VideoEvent {
        VideoEvent {
            stc: Stc {
                patches: Array4::from_shape_fn((d, 4, 4, 3), |(k, y, x, c)| {
                    (k as u8 * 50).wrapping_add(seed).wrapping_add((y * 4 + x + c) as u8)
                }),
                source_box: BoundingBox::new(0, 0, 4, 4).unwrap(),
                frame_idx: 10,
                block_idx: 0,
            },
            flow: FlowStack {
                patches: Array4::from_shape_fn((d, 4, 4, 2), |(k, _, _, c)| k as f32 + c as f32 * 0.1),
            },
            source: RoiSource::Motion,
        }
    }

    #[test]
    fn type_three_keeps_the_others() {
        let e = event(5, 0);
        let v = make_vct(&e, 3).unwrap();
        assert_eq!(v.kept_patches.dim().0, 4);
        for (slot, orig) in [0usize, 1, 3, 4].into_iter().enumerate() {
            assert_eq!(v.kept_patches.index_axis(Axis(0), slot), e.stc.patches.index_axis(Axis(0), orig));
            assert_eq!(v.kept_flows.index_axis(Axis(0), slot), e.flow.patches.index_axis(Axis(0), orig));
        }
        assert_eq!(v.target_patch, e.stc.patches.index_axis(Axis(0), 2));
        assert_eq!(v.target_flow, e.flow.patches.index_axis(Axis(0), 2));
    }

    #[test]
    fn last_type_is_frame_prediction() {
        let e = event(5, 7);
        let v = make_vct(&e, 5).unwrap();
        assert_eq!(v.kept_patches, e.stc.patches.slice(s![..4, .., .., ..]));
        assert_eq!(v.target_patch, e.stc.patches.index_axis(Axis(0), 4));
    }

    #[test]
    fn out_of_range_type() {
        let e = event(5, 0);
        assert!(make_vct(&e, 0).is_err());
        assert!(make_vct(&e, 6).is_err());
    }

    #[test]
    fn all_types_shapes() {
        let events: Vec<_> = (0..3).map(|k| event(5, k)).collect();
        let sets = make_all_types(&events, 5, 2).unwrap();
        assert_eq!(sets.len(), 5);
        for (k, s) in sets.iter().enumerate() {
            assert_eq!(s.len(), 3);
            assert_eq!(s.type_i, k + 1);
            assert_eq!(s.block, 2);
        }
        let empty = make_all_types(&[], 5, 0).unwrap();
        assert_eq!(empty.len(), 5);
        assert!(empty.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn targets_tile_the_stc() {
        let e = event(5, 3);
        let sets = make_all_types(std::slice::from_ref(&e), 5, 0).unwrap();
        for (k, s) in sets.iter().enumerate() {
            assert_eq!(s.items[0].target_patch, e.stc.patches.index_axis(Axis(0), k));
        }
    }

    proptest! {
        #[test]
        fn reinsertion_round_trips(d in 2usize..7, seed in any::<u8>(), pick in 0usize..100) {
            let e = event(d, seed);
            let i = pick % d + 1;
            let v = make_vct(&e, i).unwrap();
            prop_assert_eq!(v.depth(), d);
            prop_assert_eq!(v.reinsert(), e.stc.patches.clone());
        }
    }
}

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SliceRecord, View};
use crate::error::{Error, Result};

/// Anchor/positive/negative slice ids drawn from one view plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub view: View,
}

struct Pools<'a> {
    /// Index 0: BHD, 1: non-BHD.
    by_view: BTreeMap<View, [Vec<&'a str>; 2]>,
}

impl<'a> Pools<'a> {
    fn new(records: &'a [SliceRecord]) -> Self {
        let mut by_view: BTreeMap<View, [Vec<&str>; 2]> = BTreeMap::new();
        for r in records {
            by_view.entry(r.view).or_default()[usize::from(!r.class_label.is_bhd())]
                .push(&r.slice_id);
        }
        Self { by_view }
    }

    /// Candidate anchors of class `c`: slices whose view holds another slice of
    /// class `c` and at least one slice of the other class.
    fn anchors(&self, c: usize) -> Vec<(View, usize)> {
        let mut out = Vec::new();
        for (&view, pools) in &self.by_view {
            if pools[c].len() >= 2 && !pools[1 - c].is_empty() {
                out.extend((0..pools[c].len()).map(|i| (view, i)));
            }
        }
        out
    }
}

/// Draws `batch_size` same-view triplets with anchors alternating BHD / non-BHD.
///
/// If only one anchor class is feasible every anchor comes from that class.
pub fn sample_triplets(
    records: &[SliceRecord],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    let pools = Pools::new(records);
    let anchors = [pools.anchors(0), pools.anchors(1)];
    if anchors[0].is_empty() && anchors[1].is_empty() {
        return Err(Error::TripletInfeasible(
            "no view holds two slices of one class and one of the other".into(),
        ));
    }
    let mut out = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let mut class = i % 2;
        if anchors[class].is_empty() {
            class = 1 - class;
        }
        let (view, a) = anchors[class][rng.random_range(0..anchors[class].len())];
        let pools_v = &pools.by_view[&view];
        let same = &pools_v[class];
        // Draw from the other same-class slices, skipping the anchor.
        let mut p = rng.random_range(0..same.len() - 1);
        if p >= a {
            p += 1;
        }
        let other = &pools_v[1 - class];
        let n = rng.random_range(0..other.len());
        out.push(Triplet {
            anchor: same[a].to_string(),
            positive: same[p].to_string(),
            negative: other[n].to_string(),
            view,
        });
    }
    Ok(out)
}

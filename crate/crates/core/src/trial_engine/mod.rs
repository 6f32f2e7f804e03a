//! Two-alternative forced-choice trials: pair sampling, presentation specs,
//! subject sessions and the response journal.

mod journal;
mod render;
mod session;

pub use journal::{Journal, JournalError, Replay};
pub use render::{rasterize, render_trial_spec, ImageFrame, RenderError, RenderSpec, Side, WindowSpec};
pub use session::{
    record_response, session_id_for, subject_trial_order, Session, SessionError, SessionStatus,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_model::{BoundarySegment, SegmentCollection, SetTag, Source};

/// Default number of trials, one per image.
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum TrialError {
    #[error("requested {requested} trials but only {achievable} images have segments on both sides")]
    Shortfall { requested: usize, achievable: usize },
    #[error("collection {0:?} holds segments from the wrong side")]
    WrongSide(SetTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    LeftStronger,
    RightStronger,
}

/// One forced-choice comparison between a human and an algorithm segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub image_id: String,
    /// Human set the human segment was drawn from.
    pub human_set: SetTag,
    pub human_segment: BoundarySegment,
    pub algo_segment: BoundarySegment,
    /// Which segment is shown on the left.
    pub left: Source,
    pub window: u32,
    pub seed: u64,
}

impl TrialRecord {
    pub fn segment(&self, source: Source) -> &BoundarySegment {
        match source {
            Source::Human => &self.human_segment,
            Source::Algorithm => &self.algo_segment,
        }
    }
}

/// One subject's answer to one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub trial_id: String,
    pub subject_id: String,
    pub choice: Choice,
    pub rt_ms: u64,
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
}

/// Draws at most one human/algorithm pair per image.
///
/// Images eligible for a trial have at least one segment in both
/// collections. When more images are eligible than requested, `n` of them
/// are chosen uniformly; trials keep image order. Segment picks and the
/// left/right coin all come from one ChaCha stream seeded by `seed`.
pub fn sample_trial_pairs(
    human_side: &SegmentCollection,
    algo_side: &SegmentCollection,
    n: usize,
    seed: u64,
) -> Result<Vec<TrialRecord>, TrialError> {
    if human_side.source() != Source::Human {
        return Err(TrialError::WrongSide(human_side.name));
    }
    if algo_side.source() != Source::Algorithm {
        return Err(TrialError::WrongSide(algo_side.name));
    }
    let human = human_side.by_image();
    let algo = algo_side.by_image();
    let eligible: Vec<&str> = human.keys().copied().filter(|id| algo.contains_key(id)).collect();
    if eligible.len() < n {
        return Err(TrialError::Shortfall {
            requested: n,
            achievable: eligible.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if n == eligible.len() {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, eligible.len(), n).into_vec()
    };
    picked.sort_unstable();

    Ok(picked
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let image = eligible[e];
            let hs = &human[image];
            let al = &algo[image];
            let h = hs[rng.random_range(0..hs.len())];
            let a = al[rng.random_range(0..al.len())];
            let left = if rng.random_bool(0.5) { Source::Human } else { Source::Algorithm };
            TrialRecord {
                trial_id: format!("trial-{i:04}"),
                image_id: image.to_string(),
                human_set: human_side.name,
                human_segment: h.clone(),
                algo_segment: a.clone(),
                left,
                window: h.window_size.max(a.window_size),
                seed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(image: &str, id: &str, source: Source) -> BoundarySegment {
        BoundarySegment {
            segment_id: id.into(),
            image_id: image.into(),
            member_pixel_ids: vec![0],
            pixels: vec![(10, 10)],
            window_center: (10, 10),
            window_size: 16,
            source,
            strength: None,
        }
    }

    fn collections(images: usize, per_image: usize) -> (SegmentCollection, SegmentCollection) {
        let mut h = Vec::new();
        let mut a = Vec::new();
        for i in 0..images {
            for j in 0..per_image {
                h.push(seg(&format!("img{i:03}"), &format!("h{i}-{j}"), Source::Human));
                a.push(seg(&format!("img{i:03}"), &format!("a{i}-{j}"), Source::Algorithm));
            }
        }
        (
            SegmentCollection::new(SetTag::S1, None, h).unwrap(),
            SegmentCollection::new(SetTag::AMinusS, None, a).unwrap(),
        )
    }

    #[test]
    fn one_trial_per_image() {
        let (h, a) = collections(100, 3);
        let trials = sample_trial_pairs(&h, &a, 100, 7).unwrap();
        assert_eq!(trials.len(), 100);
        let images: std::collections::BTreeSet<_> = trials.iter().map(|t| t.image_id.clone()).collect();
        assert_eq!(images.len(), 100);
        for t in &trials {
            assert_eq!(t.human_segment.image_id, t.image_id);
            assert_eq!(t.algo_segment.image_id, t.image_id);
            assert_eq!(t.human_segment.source, Source::Human);
            assert_eq!(t.algo_segment.source, Source::Algorithm);
        }
    }

    #[test]
    fn unique_pair_is_returned() {
        let (h, a) = collections(1, 1);
        let trials = sample_trial_pairs(&h, &a, 1, 0).unwrap();
        assert_eq!(trials[0].human_segment.segment_id, "h0-0");
        assert_eq!(trials[0].algo_segment.segment_id, "a0-0");
    }

    #[test]
    fn seeded_and_balanced() {
        let (h, a) = collections(100, 2);
        let one = sample_trial_pairs(&h, &a, 100, 11).unwrap();
        assert_eq!(one, sample_trial_pairs(&h, &a, 100, 11).unwrap());
        let other = sample_trial_pairs(&h, &a, 100, 12).unwrap();
        let sides = |ts: &[TrialRecord]| ts.iter().map(|t| t.left).collect::<Vec<_>>();
        assert_ne!(sides(&one), sides(&other));
        for ts in [&one, &other] {
            assert!(ts.iter().any(|t| t.left == Source::Human));
            assert!(ts.iter().any(|t| t.left == Source::Algorithm));
        }
    }

    #[test]
    fn shortfall_reports_achievable() {
        let (h, a) = collections(3, 1);
        assert_eq!(
            sample_trial_pairs(&h, &a, 5, 0),
            Err(TrialError::Shortfall { requested: 5, achievable: 3 })
        );
        assert_eq!(sample_trial_pairs(&h, &a, 2, 0).unwrap().len(), 2);
        assert_eq!(sample_trial_pairs(&a, &h, 1, 0), Err(TrialError::WrongSide(SetTag::AMinusS)));
    }

    #[test]
    fn choice_wire_names() {
        assert_eq!(serde_json::to_string(&Choice::LeftStronger).unwrap(), "\"left_stronger\"");
        assert!(serde_json::from_str::<Choice>("\"skip\"").is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use super::{Result, TrainError};
use crate::imaging::{random_crop, DistortionSpec, Image, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TripletKind {
    /// anchor = crop(Y), positive = crop(Y), negative = crop(X̃).
    InstanceSelf,
    /// anchor = crop(f_d(Y)), positive = crop(X̃), negative = crop(Y).
    TaskOriented,
    /// anchor = crop(X), positive = crop(X), negative = crop(X̃).
    SourceAnchored,
}

impl TripletKind {
    pub fn name(self) -> &'static str {
        match self {
            TripletKind::InstanceSelf => "instance_self",
            TripletKind::TaskOriented => "task_oriented",
            TripletKind::SourceAnchored => "source_anchored",
        }
    }
}

impl fmt::Display for TripletKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TripletKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "instance_self" => Ok(TripletKind::InstanceSelf),
            "task_oriented" => Ok(TripletKind::TaskOriented),
            "source_anchored" => Ok(TripletKind::SourceAnchored),
            other => Err(format!(
                "unknown triplet strategy '{other}' (expected instance_self, task_oriented or source_anchored)"
            )),
        }
    }
}

/// Where a triplet member was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Source,
    Target,
    DistortedTarget,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletStrategy {
    pub kind: TripletKind,
    /// Present exactly for [`TripletKind::TaskOriented`].
    pub distortion: Option<DistortionSpec>,
    /// Side of the square crops; a multiple of 4.
    pub crop: usize,
}

impl TripletStrategy {
    pub fn instance_self(crop: usize) -> Self {
        TripletStrategy {
            kind: TripletKind::InstanceSelf,
            distortion: None,
            crop,
        }
    }

    pub fn task_oriented(distortion: DistortionSpec, crop: usize) -> Self {
        TripletStrategy {
            kind: TripletKind::TaskOriented,
            distortion: Some(distortion),
            crop,
        }
    }

    pub fn source_anchored(crop: usize) -> Self {
        TripletStrategy {
            kind: TripletKind::SourceAnchored,
            distortion: None,
            crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.distortion) {
            (TripletKind::TaskOriented, None) => {
                return Err(TrainError::InvalidConfig(
                    "task_oriented triplets need a distortion".into(),
                ))
            }
            (TripletKind::TaskOriented, Some(d)) => d.validate()?,
            (kind, Some(_)) => {
                return Err(TrainError::InvalidConfig(format!(
                    "{kind} triplets must not carry a distortion"
                )))
            }
            (_, None) => {}
        }
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "triplet crop size {} must be a positive multiple of 4",
                self.crop
            )));
        }
        Ok(())
    }

    pub fn provenance(&self) -> [Provenance; 3] {
        match self.kind {
            TripletKind::InstanceSelf => [Provenance::Target, Provenance::Target, Provenance::Generated],
            TripletKind::TaskOriented => {
                [Provenance::DistortedTarget, Provenance::Generated, Provenance::Target]
            }
            TripletKind::SourceAnchored => [Provenance::Source, Provenance::Source, Provenance::Generated],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: Image,
    pub positive: Image,
    pub negative: Image,
    /// Origins of anchor, positive and negative.
    pub provenance: [Provenance; 3],
}

/// Cuts one triplet. The distortion (task-oriented only) is drawn first,
/// then the anchor, positive and negative crops in that order.
pub fn build_triplet(
    strategy: &TripletStrategy,
    x: &Image,
    y: &Image,
    generated: &Image,
    rng: &mut Rng,
) -> Result<Triplet> {
    if !x.same_extent(y) || !x.same_extent(generated) {
        return Err(TrainError::InvalidConfig(format!(
            "triplet images differ in extent: {}x{}, {}x{}, {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width(),
            generated.height(),
            generated.width()
        )));
    }
    let size = strategy.crop;
    let mut cut = |img: &Image| random_crop(img, size, rng);
    let (anchor, positive, negative) = match strategy.kind {
        TripletKind::InstanceSelf => (cut(y)?, cut(y)?, cut(generated)?),
        TripletKind::SourceAnchored => (cut(x)?, cut(x)?, cut(generated)?),
        TripletKind::TaskOriented => {
            let spec = strategy.distortion.as_ref().ok_or_else(|| {
                TrainError::InvalidConfig("task_oriented triplets need a distortion".into())
            })?;
            let distorted = spec.apply(y, rng)?;
            let mut cut = |img: &Image| random_crop(img, size, rng);
            (cut(&distorted)?, cut(generated)?, cut(y)?)
        }
    };
    Ok(Triplet {
        anchor,
        positive,
        negative,
        provenance: strategy.provenance(),
    })
}

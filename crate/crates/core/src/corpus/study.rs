use super::image::{load_png, resize_square};
use super::{StudyRecord, View};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// A manifest record with both views decoded at full resolution.
#[derive(Clone, Debug)]
pub struct LoadedStudy {
    pub record: StudyRecord,
    pub frontal: Tensor,
    pub lateral: Tensor,
}

impl LoadedStudy {
    pub fn image(&self, view: View) -> &Tensor {
        match view {
            View::Frontal => &self.frontal,
            View::Lateral => &self.lateral,
        }
    }

    /// The view resized to `side x side`.
    pub fn at(&self, view: View, side: usize) -> Result<Tensor> {
        resize_square(self.image(view), side)
    }
}

pub fn load_studies(records: &[StudyRecord]) -> Result<Vec<LoadedStudy>> {
    records
        .iter()
        .map(|r| {
            let frontal = load_png(&r.frontal_path)?;
            let lateral = load_png(&r.lateral_path)?;
            if frontal.shape() != lateral.shape() {
                return Err(Error::Dataset(format!(
                    "study {}: frontal {:?} and lateral {:?} differ in size",
                    r.study_id,
                    frontal.shape(),
                    lateral.shape()
                )));
            }
            Ok(LoadedStudy {
                record: r.clone(),
                frontal,
                lateral,
            })
        })
        .collect()
}

/// Keeps the studies whose ids are listed, in list order.
pub fn select<'a>(studies: &'a [LoadedStudy], ids: &[String]) -> Result<Vec<&'a LoadedStudy>> {
    ids.iter()
        .map(|id| {
            studies
                .iter()
                .find(|s| &s.record.study_id == id)
                .ok_or_else(|| Error::Dataset(format!("study {id} not in manifest")))
        })
        .collect()
}

//! Two-stage coarse/fine score fusion, the shared-trunk multi-task loss,
//! and ensemble averaging.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

/// Fine classes partitioned into coarse groups; every fine class has
/// exactly one parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHierarchy {
    fine: Vec<String>,
    coarse: Vec<String>,
    parent: Vec<usize>,
}

impl ClassHierarchy {
    pub fn new(fine: Vec<String>, coarse: Vec<String>, parent: Vec<usize>) -> Result<Self> {
        if fine.len() != parent.len() {
            return Err(Error::Input(format!(
                "hierarchy: {} fine classes but {} parent entries",
                fine.len(),
                parent.len()
            )));
        }
        if let Some(&bad) = parent.iter().find(|&&p| p >= coarse.len()) {
            return Err(Error::Input(format!(
                "hierarchy: parent index {bad} out of range for {} coarse classes",
                coarse.len()
            )));
        }
        for (c, name) in coarse.iter().enumerate() {
            if !parent.contains(&c) {
                return Err(Error::Input(format!("hierarchy: coarse class '{name}' has no children")));
            }
        }
        Ok(ClassHierarchy { fine, coarse, parent })
    }

    /// Build from `fine -> coarse-name` entries (the config representation).
    pub fn from_map(fine: Vec<String>, map: &BTreeMap<String, String>) -> Result<Self> {
        let mut coarse: Vec<String> = Vec::new();
        let mut parent = Vec::with_capacity(fine.len());
        for f in &fine {
            let c = map
                .get(f)
                .ok_or_else(|| Error::Input(format!("hierarchy: fine class '{f}' has no parent entry")))?;
            let idx = match coarse.iter().position(|x| x == c) {
                Some(i) => i,
                None => {
                    coarse.push(c.clone());
                    coarse.len() - 1
                }
            };
            parent.push(idx);
        }
        Self::new(fine, coarse, parent)
    }

    /// The ten DCASE scene labels over indoor/outdoor/transportation.
    pub fn dcase_preset() -> Self {
        let assign = [
            ("airport", "indoor"),
            ("bus", "transportation"),
            ("metro", "transportation"),
            ("metro_station", "indoor"),
            ("park", "outdoor"),
            ("public_square", "outdoor"),
            ("shopping_mall", "indoor"),
            ("street_pedestrian", "outdoor"),
            ("street_traffic", "outdoor"),
            ("tram", "transportation"),
        ];
        let fine: Vec<String> = assign.iter().map(|(f, _)| f.to_string()).collect();
        let map: BTreeMap<String, String> = assign
            .iter()
            .map(|(f, c)| (f.to_string(), c.to_string()))
            .collect();
        Self::from_map(fine, &map).expect("preset is well-formed")
    }

    pub fn num_fine(&self) -> usize {
        self.fine.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse.len()
    }

    pub fn fine_classes(&self) -> &[String] {
        &self.fine
    }

    pub fn coarse_classes(&self) -> &[String] {
        &self.coarse
    }

    pub fn parent_of(&self, fine_idx: usize) -> Result<usize> {
        self.parent
            .get(fine_idx)
            .copied()
            .ok_or_else(|| Error::Input(format!("fine class index {fine_idx} out of range")))
    }

    /// Aggregate a fine distribution into the coarse groups.
    pub fn coarse_dist(&self, fine_dist: &[f32]) -> Result<Vec<f32>> {
        if fine_dist.len() != self.fine.len() {
            return Err(Error::shape(
                "coarse_dist",
                format!("{} values vs {} fine classes", fine_dist.len(), self.fine.len()),
            ));
        }
        let mut out = vec![0.0f32; self.coarse.len()];
        for (i, &p) in fine_dist.iter().enumerate() {
            out[self.parent[i]] += p;
        }
        Ok(out)
    }
}

/// Fused score per fine class q is `f1[parent(q)] * f2[q]`; the predicted
/// class is the argmax (lowest index on ties). Scores return unnormalized.
pub fn fuse_predict(f1: &[f32], f2: &[f32], h: &ClassHierarchy) -> Result<(usize, Vec<f32>)> {
    if f1.len() != h.num_coarse() {
        return Err(Error::shape(
            "fuse_predict",
            format!("coarse scores {} vs {} coarse classes", f1.len(), h.num_coarse()),
        ));
    }
    if f2.len() != h.num_fine() {
        return Err(Error::shape(
            "fuse_predict",
            format!("fine scores {} vs {} fine classes", f2.len(), h.num_fine()),
        ));
    }
    let mut fused = vec![0.0f32; f2.len()];
    for (q, score) in fused.iter_mut().enumerate() {
        *score = f1[h.parent_of(q)?] * f2[q];
    }
    let mut best = 0usize;
    for q in 1..fused.len() {
        if fused[q] > fused[best] {
            best = q;
        }
    }
    Ok((best, fused))
}

/// Check that a coarse label distribution is the hierarchy aggregation of
/// the fine one (exact for one-hot pairs, 1e-4 slack for soft labels).
pub fn check_label_consistency(h: &ClassHierarchy, fine: &[f32], coarse: &[f32]) -> Result<()> {
    let agg = h.coarse_dist(fine)?;
    if coarse.len() != agg.len() {
        return Err(Error::shape(
            "mtl_labels",
            format!("coarse labels {} vs {} coarse classes", coarse.len(), agg.len()),
        ));
    }
    for (i, (&got, &want)) in coarse.iter().zip(&agg).enumerate() {
        if (got - want).abs() > 1e-4 {
            return Err(Error::Input(format!(
                "inconsistent label pair: coarse[{i}] = {got} but fine labels aggregate to {want}"
            )));
        }
    }
    Ok(())
}

/// Multi-task loss: `w * CE(fine) + (1-w) * CE(coarse)` on a shared trunk.
pub fn mtl_loss_on_tape(
    tape: &mut Tape,
    fine_logits: ValueId,
    coarse_logits: ValueId,
    fine_labels: &Tensor,
    coarse_labels: &Tensor,
    h: &ClassHierarchy,
    weight: f32,
) -> Result<ValueId> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::param("mtl_weight", format!("must be in [0,1], got {weight}")));
    }
    let k = h.num_fine();
    for (f_row, c_row) in fine_labels
        .data()
        .chunks(k)
        .zip(coarse_labels.data().chunks(h.num_coarse()))
    {
        check_label_consistency(h, f_row, c_row)?;
    }
    let fl = tape.constant(fine_labels);
    let cl = tape.constant(coarse_labels);
    let ce_fine = tape.cross_entropy(fine_logits, fl)?;
    let ce_coarse = tape.cross_entropy(coarse_logits, cl)?;
    tape.add_scaled(ce_fine, ce_coarse, weight, 1.0 - weight)
}

/// Arithmetic mean of probability vectors.
pub fn ensemble_average(members: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Input("ensemble_average needs at least one member".to_string()))?;
    let k = first.len();
    let mut out = vec![0.0f64; k];
    for m in members {
        if m.len() != k {
            return Err(Error::shape(
                "ensemble_average",
                format!("member length {} vs {}", m.len(), k),
            ));
        }
        for (o, &v) in out.iter_mut().zip(m) {
            *o += v as f64;
        }
    }
    Ok(out.iter().map(|&v| (v / members.len() as f64) as f32).collect())
}

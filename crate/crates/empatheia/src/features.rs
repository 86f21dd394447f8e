//! The universal feature carrier: a length-L sequence of d-dim vectors with a
//! modality tag, plus the splice plan used to replace placeholder positions.

use ndarray::{concatenate, Array2, Axis};

use crate::error::EmpatheiaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Speech,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
            Modality::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.trim().to_lowercase().as_str() {
            "text" => Some(Modality::Text),
            "speech" | "audio" => Some(Modality::Speech),
            "video" => Some(Modality::Video),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub modality: Modality,
    pub data: Array2<f64>,
}

impl FeatureSeq {
    pub fn new(modality: Modality, data: Array2<f64>) -> Result<Self, EmpatheiaError> {
        if data.nrows() == 0 {
            return Err(EmpatheiaError::domain(format!(
                "{} feature sequence has zero frames",
                modality.as_str()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(EmpatheiaError::Numerical(format!(
                "{} feature sequence holds non-finite entries",
                modality.as_str()
            )));
        }
        Ok(Self { modality, data })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// How a sequence is reassembled when placeholder rows are replaced.
#[derive(Debug, Clone)]
pub enum Segment {
    /// Keep input rows `start..end`.
    Keep(usize, usize),
    /// Insert replacement block `i` (its full length).
    Insert(usize),
}

#[derive(Debug, Clone)]
pub struct SplicePlan {
    pub segments: Vec<Segment>,
    pub input_len: usize,
    pub new_len: usize,
    /// (placeholder position, replacement length) in input order.
    pub placements: Vec<(usize, usize)>,
}

impl SplicePlan {
    /// Plan replacement of single placeholder rows by blocks of given lengths.
    /// Positions must be strictly increasing and in range.
    pub fn new(input_len: usize, placements: &[(usize, usize)]) -> Result<Self, EmpatheiaError> {
        let mut segments = Vec::new();
        let mut cursor = 0usize;
        let mut new_len = 0usize;
        for (i, &(pos, rep_len)) in placements.iter().enumerate() {
            if pos >= input_len {
                return Err(EmpatheiaError::dimension(format!(
                    "placeholder position {pos} out of range for length {input_len}"
                )));
            }
            if pos < cursor {
                return Err(EmpatheiaError::dimension(format!(
                    "placeholder positions must be strictly increasing (saw {pos} after {cursor})"
                )));
            }
            if rep_len == 0 {
                return Err(EmpatheiaError::dimension(format!(
                    "replacement at position {pos} has zero frames"
                )));
            }
            if pos > cursor {
                segments.push(Segment::Keep(cursor, pos));
                new_len += pos - cursor;
            }
            segments.push(Segment::Insert(i));
            new_len += rep_len;
            cursor = pos + 1;
        }
        if cursor < input_len {
            segments.push(Segment::Keep(cursor, input_len));
            new_len += input_len - cursor;
        }
        Ok(Self {
            segments,
            input_len,
            new_len,
            placements: placements.to_vec(),
        })
    }

    /// New position of an input row that was kept, or None if it was replaced.
    pub fn map_pos(&self, old: usize) -> Option<usize> {
        let mut shift: isize = 0;
        for &(pos, rep_len) in &self.placements {
            if old == pos {
                return None;
            }
            if pos < old {
                shift += rep_len as isize - 1;
            }
        }
        Some((old as isize + shift) as usize)
    }

    /// New positions covered by replacement block `i`, in order.
    pub fn insert_span(&self, i: usize) -> std::ops::Range<usize> {
        let mut offset = 0usize;
        for seg in &self.segments {
            match seg {
                Segment::Keep(s, e) => offset += e - s,
                Segment::Insert(j) => {
                    let len = self.placements[*j].1;
                    if *j == i {
                        return offset..offset + len;
                    }
                    offset += len;
                }
            }
        }
        unreachable!("insert_span: block {i} not in plan")
    }
}

/// Indices that resample a length-`len` sequence to exactly `target` rows:
/// index k maps to row `k * len / target`. Downsamples long inputs by strides,
/// repeats rows of short ones.
pub fn strided_indices(len: usize, target: usize) -> Vec<usize> {
    assert!(len > 0 && target > 0, "strided_indices needs nonzero lengths");
    (0..target).map(|k| k * len / target).collect()
}

/// Replace placeholder rows of `input` with the given feature blocks.
pub fn splice(
    input: &FeatureSeq,
    placements: &[(usize, &FeatureSeq)],
) -> Result<FeatureSeq, EmpatheiaError> {
    for (pos, f) in placements {
        if f.width() != input.width() {
            return Err(EmpatheiaError::dimension(format!(
                "replacement at position {pos} has width {} but embeddings have width {}",
                f.width(),
                input.width()
            )));
        }
    }
    let plan = SplicePlan::new(
        input.len(),
        &placements
            .iter()
            .map(|(p, f)| (*p, f.len()))
            .collect::<Vec<_>>(),
    )?;
    let mut parts: Vec<ndarray::ArrayView2<f64>> = Vec::new();
    for seg in &plan.segments {
        match seg {
            Segment::Keep(s, e) => parts.push(input.data.slice(ndarray::s![*s..*e, ..])),
            Segment::Insert(i) => parts.push(placements[*i].1.data.view()),
        }
    }
    let data = concatenate(Axis(0), &parts).expect("widths checked above");
    Ok(FeatureSeq {
        modality: input.modality,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(rows: usize, width: usize, base: f64) -> FeatureSeq {
        FeatureSeq::new(
            Modality::Text,
            Array2::from_shape_fn((rows, width), |(i, j)| base + (i * width + j) as f64),
        )
        .unwrap()
    }

    #[test]
    fn no_placements_is_identity() {
        let input = seq(5, 3, 0.0);
        let out = splice(&input, &[]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn single_replacement_length_arithmetic() {
        let input = seq(5, 3, 0.0);
        let rep = seq(3, 3, 100.0);
        let out = splice(&input, &[(2, &rep)]).unwrap();
        assert_eq!(out.len(), 5 - 1 + 3);
    }

    #[test]
    fn surrounding_rows_preserved_with_two_placeholders() {
        let input = seq(6, 2, 0.0);
        let rep_a = seq(2, 2, 100.0);
        let rep_b = seq(4, 2, 200.0);
        let out = splice(&input, &[(1, &rep_a), (4, &rep_b)]).unwrap();
        assert_eq!(out.len(), 6 - 2 + 2 + 4);

        let plan = SplicePlan::new(6, &[(1, 2), (4, 4)]).unwrap();
        for old in [0usize, 2, 3, 5] {
            let new = plan.map_pos(old).unwrap();
            assert_eq!(out.data.row(new), input.data.row(old), "row {old}");
        }
        assert_eq!(plan.map_pos(1), None);
        assert_eq!(plan.map_pos(4), None);
        assert_eq!(plan.insert_span(0), 1..3);
        assert_eq!(plan.insert_span(1), 5..9);
        for (k, new) in plan.insert_span(1).enumerate() {
            assert_eq!(out.data.row(new), rep_b.data.row(k));
        }
    }

    #[test]
    fn strided_indices_cover_both_directions() {
        // downsample: monotone, first row kept, all in range
        let idx = strided_indices(100, 64);
        assert_eq!(idx.len(), 64);
        assert_eq!(idx[0], 0);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert!(idx.iter().all(|&i| i < 100));
        // upsample by repetition: 3 rows stretched over 16 slots
        let brute: Vec<usize> = (0..16).map(|k| k * 3 / 16).collect();
        assert_eq!(strided_indices(3, 16), brute);
        assert_eq!(strided_indices(3, 16).last(), Some(&2));
        // identity when lengths match
        assert_eq!(strided_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let input = seq(4, 3, 0.0);
        let rep = seq(2, 2, 0.0);
        let err = splice(&input, &[(1, &rep)]).unwrap_err();
        assert!(matches!(err, EmpatheiaError::Dimension(_)));
    }

    #[test]
    fn out_of_order_positions_rejected() {
        assert!(SplicePlan::new(5, &[(3, 1), (1, 1)]).is_err());
        assert!(SplicePlan::new(5, &[(5, 1)]).is_err());
    }

    #[test]
    fn non_finite_features_rejected() {
        let bad = Array2::from_elem((2, 2), f64::NAN);
        assert!(FeatureSeq::new(Modality::Speech, bad).is_err());
        assert!(FeatureSeq::new(Modality::Speech, array![[1.0], [2.0]]).is_ok());
    }
}

//! Slice aggregation: sections, k-max pooling and the noisy-OR patient probability.
//!
//! A volume of `n` slices is split into `max(1, ⌊n / l_s⌋)` contiguous sections
//! whose sizes differ by at most one. For each class the section probability
//! is the sigmoid of the mean of the `k` largest slice scores in the section
//! (`k` is clamped to the section size), and the patient probability is
//! `1 − Π_i (1 − P(c|S_i))`.

use std::ops::Range;

use crate::model::SliceClassScores;
use crate::{sigmoid, Error, Result, NUM_CLASSES};

/// Probability clamp applied before taking logarithms of explicit probabilities.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionPartition {
    ranges: Vec<Range<usize>>,
}

impl SectionPartition {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Section containing slice `index`.
    pub fn section_of(&self, index: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&index))
    }
}

/// Contiguous balanced split of `0..n` into `max(1, n / section_len)` sections.
/// The first `n % count` sections receive one extra slice.
pub fn partition_sections(n: usize, section_len: usize) -> Result<SectionPartition> {
    if n == 0 {
        return Err(Error::EmptyVolume);
    }
    if section_len == 0 {
        return Err(Error::invalid("section length must be ≥ 1"));
    }
    let count = (n / section_len).max(1);
    let base = n / count;
    let extra = n % count;
    let mut ranges = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        ranges.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, n);
    Ok(SectionPartition { ranges })
}

/// Indices of the `min(k, len)` largest values, ties broken by lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Mean of the `min(k, len)` largest values.
pub fn k_max_mean(values: &[f64], k: usize) -> f64 {
    let top = top_k_indices(values, k);
    top.iter().map(|&i| values[i]).sum::<f64>() / top.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionProbability(pub [f64; NUM_CLASSES]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientProbability(pub [f64; NUM_CLASSES]);

pub fn section_probability(scores: &[SliceClassScores], k: usize) -> Result<SectionProbability> {
    if scores.is_empty() {
        return Err(Error::EmptyVolume);
    }
    if k == 0 {
        return Err(Error::invalid("k must be ≥ 1"));
    }
    let mut out = [0.0; NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        let column: Vec<f64> = scores.iter().map(|s| s.get(c)).collect();
        *o = sigmoid(k_max_mean(&column, k));
    }
    Ok(SectionProbability(out))
}

/// Noisy-OR over sections, per class.
pub fn patient_probability(sections: &[SectionProbability]) -> Result<PatientProbability> {
    if sections.is_empty() {
        return Err(Error::invalid("at least one section is required"));
    }
    let mut out = [0.0; NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        let survive: f64 = sections.iter().map(|s| 1.0 - s.0[c]).product();
        *o = 1.0 - survive;
    }
    Ok(PatientProbability(out))
}

pub(crate) fn validate_one_hot(y: &[f64]) -> Result<()> {
    if y.len() != NUM_CLASSES || y.iter().any(|&v| v != 0.0 && v != 1.0) || y.iter().sum::<f64>() != 1.0 {
        return Err(Error::invalid(format!("label {y:?} is not a binary one-hot vector")));
    }
    Ok(())
}

/// Patient-level binary cross-entropy, summed over both classes and negated so
/// that it is minimised. Probabilities are clamped to `[ε, 1 − ε]`.
pub fn classification_loss(p: &PatientProbability, y: &[f64]) -> Result<f64> {
    validate_one_hot(y)?;
    let mut loss = 0.0;
    for c in 0..NUM_CLASSES {
        let pc = p.0[c].clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y[c] * pc.ln() + (1.0 - y[c]) * (1.0 - pc).ln();
    }
    Ok(loss)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Forward state of the aggregation for one patient, kept for the backward pass.
///
/// The loss is evaluated in log space: `log(1 − P) = −Σ_i softplus(a_i)` and
/// `log P = log(−expm1(log(1 − P)))`, where `a_i` is the k-max mean of section
/// `i`. This agrees with [`classification_loss`] wherever `P ∈ [ε, 1 − ε]` and
/// keeps a useful gradient when the noisy-OR saturates.
#[derive(Debug, Clone)]
pub struct SamPass {
    pub partition: SectionPartition,
    /// `selected[section][class]`: absolute slice indices in the top-k set.
    pub selected: Vec<[Vec<usize>; NUM_CLASSES]>,
    /// Pre-sigmoid section logits `a_i` per class.
    pub logits: Vec<[f64; NUM_CLASSES]>,
}

impl SamPass {
    pub fn forward(scores: &[[f64; NUM_CLASSES]], section_len: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be ≥ 1"));
        }
        let partition = partition_sections(scores.len(), section_len)?;
        let mut selected = Vec::with_capacity(partition.len());
        let mut logits = Vec::with_capacity(partition.len());
        for range in partition.ranges() {
            let mut sel: [Vec<usize>; NUM_CLASSES] = Default::default();
            let mut logit = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                let column: Vec<f64> = scores[range.clone()].iter().map(|s| s[c]).collect();
                let top = top_k_indices(&column, k);
                logit[c] = top.iter().map(|&i| column[i]).sum::<f64>() / top.len() as f64;
                sel[c] = top.into_iter().map(|i| i + range.start).collect();
            }
            selected.push(sel);
            logits.push(logit);
        }
        Ok(Self {
            partition,
            selected,
            logits,
        })
    }

    pub fn section_probabilities(&self) -> Vec<SectionProbability> {
        self.logits
            .iter()
            .map(|l| SectionProbability([sigmoid(l[0]), sigmoid(l[1])]))
            .collect()
    }

    pub fn patient_probability(&self) -> PatientProbability {
        patient_probability(&self.section_probabilities()).expect("partition is never empty")
    }

    fn survival(&self, c: usize) -> f64 {
        self.logits.iter().map(|l| softplus(l[c])).sum()
    }

    pub fn loss(&self, y: &[f64]) -> Result<f64> {
        validate_one_hot(y)?;
        let mut loss = 0.0;
        for c in 0..NUM_CLASSES {
            let u = self.survival(c);
            let log_neg = -u;
            let log_pos = (-(-u).exp_m1()).ln().max(f64::MIN_POSITIVE.ln());
            loss -= y[c] * log_pos + (1.0 - y[c]) * log_neg;
        }
        Ok(loss)
    }

    /// dL/ds for every slice and class. Slices outside every top-k set get
    /// exactly zero.
    pub fn backward(&self, y: &[f64], num_slices: usize) -> Result<Vec<[f64; NUM_CLASSES]>> {
        validate_one_hot(y)?;
        let mut grads = vec![[0.0; NUM_CLASSES]; num_slices];
        for c in 0..NUM_CLASSES {
            let u = self.survival(c);
            let pos_scale = 1.0 / u.exp_m1().max(f64::MIN_POSITIVE);
            for (logit, sel) in self.logits.iter().zip(&self.selected) {
                let s = sigmoid(logit[c]);
                let d_logit = -y[c] * s * pos_scale + (1.0 - y[c]) * s;
                let share = d_logit / sel[c].len() as f64;
                for &i in &sel[c] {
                    grads[i][c] += share;
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(col: &[f64]) -> Vec<SliceClassScores> {
        col.iter().map(|&v| SliceClassScores(vec![0.0, v])).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_sections(40, 16).unwrap().sizes(), vec![20, 20]);
        assert_eq!(partition_sections(10, 16).unwrap().sizes(), vec![10]);
        assert_eq!(partition_sections(35, 16).unwrap().sizes(), vec![18, 17]);
        assert!(matches!(partition_sections(0, 16), Err(Error::EmptyVolume)));
        assert!(partition_sections(5, 0).is_err());
        let p = partition_sections(35, 16).unwrap();
        assert_eq!(p.section_of(17), Some(0));
        assert_eq!(p.section_of(18), Some(1));
        assert_eq!(p.section_of(35), None);
    }

    #[test]
    fn section_probability_examples() {
        let s = scores(&[3.0, 1.0, 2.0, 5.0, 4.0]);
        let p = section_probability(&s, 2).unwrap();
        assert!((p.0[1] - 0.989_013_057_369_406_6).abs() < 1e-12);
        let p1 = section_probability(&s, 1).unwrap();
        assert!((p1.0[1] - 0.993_307_149_075_715_2).abs() < 1e-12);
        let z = section_probability(&scores(&[0.0; 4]), 3).unwrap();
        assert_eq!(z.0, [0.5, 0.5]);
        // k larger than the section is clamped to the whole section
        let all = section_probability(&s, 99).unwrap();
        assert!((all.0[1] - sigmoid(3.0)).abs() < 1e-15);
        assert!(section_probability(&s, 0).is_err());
        assert!(section_probability(&[], 2).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn noisy_or_examples() {
        let sp = |v: f64| SectionProbability([v, v]);
        assert_eq!(patient_probability(&[sp(0.5), sp(0.5)]).unwrap().0[1], 0.75);
        assert_eq!(patient_probability(&[sp(0.0); 3]).unwrap().0[0], 0.0);
        assert!((patient_probability(&[sp(0.2), sp(0.3)]).unwrap().0[1] - 0.44).abs() < 1e-15);
        assert!(patient_probability(&[]).is_err());
    }

    #[test]
    fn classification_loss_examples() {
        let perfect = classification_loss(&PatientProbability([0.0, 1.0]), &[0.0, 1.0]).unwrap();
        assert!(perfect < 1e-6);
        let half = classification_loss(&PatientProbability([0.5, 0.5]), &[1.0, 0.0]).unwrap();
        assert!((half - 2.0 * 2f64.ln()).abs() < 1e-12);
        let bad = classification_loss(&PatientProbability([0.9, 0.1]), &[0.0, 1.0]).unwrap();
        assert!((bad - 4.605_170_185_988_091).abs() < 1e-9);
        assert!(classification_loss(&PatientProbability([0.5, 0.5]), &[0.0, 2.0]).is_err());
        assert!(classification_loss(&PatientProbability([0.5, 0.5]), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn log_space_loss_matches_clamped_loss_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let s: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
            let pass = SamPass::forward(&s, 16, 8).unwrap();
            for y in [[1.0, 0.0], [0.0, 1.0]] {
                let direct = classification_loss(&pass.patient_probability(), &y).unwrap();
                assert!((pass.loss(&y).unwrap() - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_is_zero_outside_top_k() {
        let s: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 0.1, -(i as f64) * 0.05]).collect();
        let pass = SamPass::forward(&s, 10, 3).unwrap();
        let g = pass.backward(&[0.0, 1.0], s.len()).unwrap();
        for c in 0..2 {
            for (i, gi) in g.iter().enumerate() {
                let chosen = pass.selected.iter().any(|sel| sel[c].contains(&i));
                if !chosen {
                    assert_eq!(gi[c], 0.0);
                } else {
                    assert_ne!(gi[c], 0.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_balanced(n in 1usize..300, ls in 1usize..80) {
            let p = partition_sections(n, ls).unwrap();
            prop_assert_eq!(p.len(), (n / ls).max(1));
            let sizes = p.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut next = 0;
            for r in p.ranges() {
                prop_assert_eq!(r.start, next);
                next = r.end;
            }
            prop_assert_eq!(next, n);
        }

        #[test]
        fn noisy_or_is_permutation_invariant(mut ps in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let a = patient_probability(&ps.iter().map(|&p| SectionProbability([p, p])).collect::<Vec<_>>()).unwrap();
            ps.reverse();
            let b = patient_probability(&ps.iter().map(|&p| SectionProbability([p, p])).collect::<Vec<_>>()).unwrap();
            prop_assert!((a.0[0] - b.0[0]).abs() < 1e-12);
            let max = ps.iter().cloned().fold(0.0, f64::max);
            prop_assert!(a.0[0] >= max - 1e-12);
        }
    }
}

//! Turning raw head outputs into a predicted set: pick the cardinality and
//! the highest-scoring slots that minimize the joint objective, or fall back
//! to plain score thresholding for curve sweeps.

use crate::assignment::factorial;
use crate::model::{NetworkOutput, SetElement};
use crate::nn::{clamp_prob, softmax};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InferenceMode {
    /// Joint cardinality + score objective.
    Map,
    /// Keep every slot whose score exceeds the threshold; ignores the
    /// cardinality head entirely.
    Threshold(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct InferenceConfig {
    /// Unit of hyper-volume balancing densities across cardinalities; must
    /// be positive. Task-dependent (0.1 for the detection experiments, 2 for
    /// the digit puzzle).
    pub unit_volume: f64,
    pub max_elements: usize,
    pub mode: InferenceMode,
}

impl InferenceConfig {
    pub fn map(unit_volume: f64, max_elements: usize) -> Self {
        InferenceConfig { unit_volume, max_elements, mode: InferenceMode::Map }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.unit_volume > 0.0) {
            return Err(format!("unit_volume must be positive, got {}", self.unit_volume));
        }
        if let InferenceMode::Threshold(tau) = self.mode {
            if !(0.0 < tau && tau < 1.0) {
                return Err(format!("threshold must lie in (0, 1), got {tau}"));
            }
        }
        Ok(())
    }
}

/// The selected set: chosen elements with their originating slot indices.
#[derive(Clone, Debug)]
pub struct PredictedSet {
    pub elements: Vec<SetElement>,
    /// Slot index each element came from, parallel to `elements`.
    pub slots: Vec<usize>,
    pub cardinality: usize,
    /// Rank of the most likely slot ordering, when the caller extracted it.
    pub ordering: Option<u64>,
}

/// Objective value for keeping the `m` highest-scoring slots:
/// `-ln p(m) - m ln U - sum of ln score` over those slots.
fn cardinality_objective(
    log_card: &[f64],
    sorted_log_scores: &[f64],
    unit_volume: f64,
    m: usize,
) -> f64 {
    let prefix: f64 = sorted_log_scores[..m].iter().sum();
    -log_card[m] - m as f64 * unit_volume.ln() - prefix
}

fn slots_by_score(output: &NetworkOutput) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..output.max_elements()).collect();
    let scores = output.scores();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let sorted_log_scores = order.iter().map(|&i| clamp_prob(scores[i]).ln()).collect();
    (order, sorted_log_scores)
}

/// Minimizes the joint objective over the cardinality and every choice of
/// slots. Separability makes the greedy choice exact: for a fixed m the
/// objective is minimized by the m largest scores. Ties between
/// cardinalities (within 1e-12) resolve to the smaller set.
pub fn map_inference(output: &NetworkOutput, config: &InferenceConfig) -> PredictedSet {
    let m_max = output.max_elements().min(config.max_elements);
    let card_probs = softmax(&output.cardinality_logits);
    let log_card: Vec<f64> = card_probs.iter().map(|&p| clamp_prob(p).ln()).collect();
    let (order, sorted_log_scores) = slots_by_score(output);

    let mut best_m = 0;
    let mut best_obj = cardinality_objective(&log_card, &sorted_log_scores, config.unit_volume, 0);
    for m in 1..=m_max {
        let obj = cardinality_objective(&log_card, &sorted_log_scores, config.unit_volume, m);
        if obj < best_obj - 1e-12 {
            best_obj = obj;
            best_m = m;
        }
    }

    let slots: Vec<usize> = order[..best_m].to_vec();
    PredictedSet {
        elements: slots.iter().map(|&i| output.slots[i].to_element()).collect(),
        slots,
        cardinality: best_m,
        ordering: None,
    }
}

/// Value of the joint objective for each cardinality 0..=max, mostly for
/// inspection and plotting.
pub fn map_objectives(output: &NetworkOutput, config: &InferenceConfig) -> Vec<f64> {
    let m_max = output.max_elements().min(config.max_elements);
    let card_probs = softmax(&output.cardinality_logits);
    let log_card: Vec<f64> = card_probs.iter().map(|&p| clamp_prob(p).ln()).collect();
    let (_, sorted_log_scores) = slots_by_score(output);
    (0..=m_max)
        .map(|m| cardinality_objective(&log_card, &sorted_log_scores, config.unit_volume, m))
        .collect()
}

/// Keeps every slot with score strictly above `tau`, in slot order.
pub fn threshold_inference(output: &NetworkOutput, tau: f64) -> PredictedSet {
    let mut elements = Vec::new();
    let mut slots = Vec::new();
    for (i, slot) in output.slots.iter().enumerate() {
        if slot.score() > tau {
            elements.push(slot.to_element());
            slots.push(i);
        }
    }
    let cardinality = elements.len();
    PredictedSet { elements, slots, cardinality, ordering: None }
}

/// Most likely slot ordering: argmax over the permutation logits, lowest
/// rank on ties.
pub fn best_permutation(output: &NetworkOutput) -> u64 {
    debug_assert_eq!(output.permutation_logits.len() as u64, factorial(output.max_elements()));
    let mut best = 0usize;
    for (i, &logit) in output.permutation_logits.iter().enumerate() {
        if logit > output.permutation_logits[best] {
            best = i;
        }
    }
    best as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SlotState;

    fn output_from(card_logits: Vec<f64>, score_logits: Vec<f64>) -> NetworkOutput {
        let m = score_logits.len();
        NetworkOutput {
            cardinality_logits: card_logits,
            slots: score_logits
                .iter()
                .enumerate()
                .map(|(i, &s)| SlotState {
                    cx: 0.1 * i as f64,
                    cy: 0.0,
                    w: 0.1,
                    h: 0.1,
                    score_logit: s,
                })
                .collect(),
            permutation_logits: vec![0.0; factorial(m) as usize],
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn worked_example_selects_two_elements() {
        // cardinality probabilities (0.1, 0.2, 0.6, 0.1), scores (0.9, 0.8, 0.2), U = 2
        let card = vec![0.1f64.ln(), 0.2f64.ln(), 0.6f64.ln(), 0.1f64.ln()];
        let out = output_from(card, vec![logit(0.9), logit(0.8), logit(0.2)]);
        let cfg = InferenceConfig::map(2.0, 3);

        let objectives = map_objectives(&out, &cfg);
        let expected = [2.302585, 1.021651, -0.546964, 2.161086];
        for (o, e) in objectives.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-4, "{o} vs {e}");
        }

        let set = map_inference(&out, &cfg);
        assert_eq!(set.cardinality, 2);
        let mut scores: Vec<f64> = set.elements.iter().map(|e| e.score).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((scores[0] - 0.9).abs() < 1e-9);
        assert!((scores[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn dominant_empty_cardinality_wins_regardless_of_scores() {
        let out = output_from(vec![30.0, 0.0, 0.0, 0.0], vec![9.0, 9.0, 9.0]);
        for unit_volume in [0.1, 1.0, 2.0] {
            let set = map_inference(&out, &InferenceConfig::map(unit_volume, 3));
            assert_eq!(set.cardinality, 0, "U = {unit_volume}");
            assert!(set.elements.is_empty());
        }
    }

    #[test]
    fn slot_order_does_not_matter() {
        let card = vec![0.0, 1.0, 2.0, 0.5];
        let scores = vec![logit(0.7), logit(0.4), logit(0.95)];
        let out_a = output_from(card.clone(), scores.clone());
        let mut shuffled = scores.clone();
        shuffled.swap(0, 2);
        shuffled.swap(1, 2);
        let out_b = output_from(card, shuffled);
        let cfg = InferenceConfig::map(0.5, 3);
        let a = map_inference(&out_a, &cfg);
        let b = map_inference(&out_b, &cfg);
        assert_eq!(a.cardinality, b.cardinality);
        let key = |s: &PredictedSet| {
            let mut v: Vec<u64> = s.elements.iter().map(|e| e.score.to_bits()).collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn unit_volume_one_drops_the_volume_term() {
        let out = output_from(vec![0.0, 3.0, 0.0], vec![logit(0.9), logit(0.1)]);
        let cfg = InferenceConfig::map(1.0, 2);
        let objs = map_objectives(&out, &cfg);
        let probs = crate::nn::softmax(&out.cardinality_logits);
        // with ln U = 0 the objective is exactly -ln p(m) - sum of top-m log scores
        assert!((objs[0] + probs[0].ln()).abs() < 1e-12);
        assert!((objs[1] + probs[1].ln() + 0.9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn map_matches_exhaustive_subset_enumeration() {
        let mut rng = crate::rng::Rng::new(77);
        for _ in 0..300 {
            let m = 1 + rng.below(6);
            let card: Vec<f64> = (0..=m).map(|_| rng.range_f64(-3.0, 3.0)).collect();
            let slots: Vec<f64> = (0..m).map(|_| rng.range_f64(-4.0, 4.0)).collect();
            let unit_volume = [0.1, 0.5, 1.0, 2.0][rng.below(4)];
            let out = output_from(card, slots);
            let cfg = InferenceConfig::map(unit_volume, m);

            let set = map_inference(&out, &cfg);
            let objs = map_objectives(&out, &cfg);
            let chosen_obj = objs[set.cardinality];

            // exhaustive: every (cardinality, subset) pair
            let probs = crate::nn::softmax(&out.cardinality_logits);
            let scores = out.scores();
            let mut best = f64::INFINITY;
            let mut best_m = usize::MAX;
            for subset in 0u32..(1 << m) {
                let count = subset.count_ones() as usize;
                let mut obj = -clamp_prob(probs[count]).ln() - count as f64 * unit_volume.ln();
                for i in 0..m {
                    if subset & (1 << i) != 0 {
                        obj -= clamp_prob(scores[i]).ln();
                    }
                }
                if obj < best - 1e-12 || (obj < best + 1e-12 && count < best_m) {
                    best = obj.min(best);
                    best_m = count;
                }
            }
            assert!(
                (chosen_obj - best).abs() < 1e-9,
                "m={m} U={unit_volume}: greedy {chosen_obj} vs exhaustive {best}"
            );
            assert_eq!(set.cardinality, best_m);
        }
    }

    #[test]
    fn threshold_filters_and_is_monotone() {
        let out = output_from(vec![0.0; 4], vec![logit(0.9), logit(0.5), logit(0.2)]);
        assert!(threshold_inference(&out, 0.99).elements.is_empty());
        assert_eq!(threshold_inference(&out, 1e-9).elements.len(), 3);
        let mut prev = usize::MAX;
        for tau in [0.1, 0.3, 0.45, 0.6, 0.85, 0.95] {
            let n = threshold_inference(&out, tau).elements.len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn best_permutation_argmax_and_tie_break() {
        let mut out = output_from(vec![0.0; 4], vec![0.0, 0.0, 0.0]);
        assert_eq!(best_permutation(&out), 0); // uniform: lowest rank wins
        out.permutation_logits[4] = 10.0;
        assert_eq!(best_permutation(&out), 4);
        // shifting all logits never moves the argmax
        for l in out.permutation_logits.iter_mut() {
            *l += 123.5;
        }
        assert_eq!(best_permutation(&out), 4);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::map(0.1, 4).validate().is_ok());
        assert!(InferenceConfig::map(0.0, 4).validate().is_err());
        let bad = InferenceConfig {
            unit_volume: 1.0,
            max_elements: 4,
            mode: InferenceMode::Threshold(1.5),
        };
        assert!(bad.validate().is_err());
    }
}

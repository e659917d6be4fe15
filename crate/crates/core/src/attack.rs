//! Black-box membership inference by confidence thresholding.
//!
//! The attacker only sees [`BlackBox`]: inputs go in, class probabilities
//! come out. A threshold is fitted on a calibration half of the attack set
//! and scored on the other half.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::{softmax_rows, Matrix, ModelSpec, ParamVector};

/// Everything an attacker may do with a target.
pub trait BlackBox {
    fn input_width(&self) -> usize;
    /// One probability row per input row.
    fn probabilities(&self, inputs: &Matrix) -> Result<Matrix>;
}

/// A trained network wrapped so only its outputs are reachable.
pub struct ModelOracle {
    spec: ModelSpec,
    params: ParamVector,
}

impl ModelOracle {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::invalid("parameters do not fit the model"));
        }
        Ok(Self { spec, params })
    }
}

impl BlackBox for ModelOracle {
    fn input_width(&self) -> usize {
        self.spec.input.width()
    }

    fn probabilities(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.spec.predict(&self.params, inputs)?))
    }
}

/// Highest class probability per input.
pub fn query(target: &dyn BlackBox, inputs: &Matrix) -> Result<Vec<f64>> {
    if inputs.cols != target.input_width() {
        return Err(Error::invalid(format!(
            "inputs have width {}, target expects {}",
            inputs.cols,
            target.input_width()
        )));
    }
    if inputs.rows == 0 {
        return Ok(Vec::new());
    }
    let p = target.probabilities(inputs)?;
    Ok((0..p.rows).map(|i| p.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
}

/// Members from the target's training data, non-members from held-out data.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSet {
    pub members: Matrix,
    pub nonmembers: Matrix,
}

pub const MIN_ATTACK_SET: usize = 50;

impl AttackSet {
    /// Draw `n` rows of each without replacement.
    pub fn sample<R: Rng + ?Sized>(train: &Matrix, held_out: &Matrix, n: usize, rng: &mut R) -> Result<Self> {
        if n < MIN_ATTACK_SET {
            return Err(Error::config(format!("attack sets need at least {MIN_ATTACK_SET} samples per side, got {n}")));
        }
        if train.rows < n || held_out.rows < n {
            return Err(Error::invalid(format!(
                "need {n} members and non-members, have {} and {}",
                train.rows, held_out.rows
            )));
        }
        let pick = |m: &Matrix, rng: &mut R| {
            let mut idx: Vec<usize> = (0..m.rows).collect();
            idx.partial_shuffle(rng, n);
            idx.truncate(n);
            idx.sort_unstable();
            m.gather(&idx)
        };
        let members = pick(train, rng);
        let nonmembers = pick(held_out, rng);
        Ok(Self { members, nonmembers })
    }

    /// Same rows with membership labels reassigned at random, sizes kept.
    pub fn shuffled<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let n = self.members.rows;
        let all = Matrix {
            rows: n + self.nonmembers.rows,
            cols: self.members.cols,
            data: [self.members.data.as_slice(), self.nonmembers.data.as_slice()].concat(),
        };
        let mut idx: Vec<usize> = (0..all.rows).collect();
        idx.shuffle(rng);
        Self { members: all.gather(&idx[..n]), nonmembers: all.gather(&idx[n..]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub theta: f64,
    /// Balanced accuracy of the threshold on the calibration data.
    pub accuracy: f64,
    /// All calibration confidences were equal.
    pub degenerate: bool,
}

fn balanced(members: &[f64], nonmembers: &[f64], theta: f64) -> f64 {
    let tp = members.iter().filter(|&&c| c > theta).count() as f64 / members.len() as f64;
    let tn = nonmembers.iter().filter(|&&c| c <= theta).count() as f64 / nonmembers.len() as f64;
    (tp + tn) / 2.0
}

/// Threshold maximizing balanced accuracy of `confidence > theta`; ties
/// go to the smallest threshold.
pub fn calibrate(members: &[f64], nonmembers: &[f64]) -> Result<Calibration> {
    if members.len() + nonmembers.len() < 20 || members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("calibration needs at least 20 confidences of both kinds"));
    }
    let mut cands: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    if cands.len() == 1 {
        return Ok(Calibration { theta: cands[0], accuracy: 0.5, degenerate: true });
    }
    // thresholds just below the minimum call everything a member
    let below = cands[0] - 1.0;
    let mut best = Calibration { theta: below, accuracy: balanced(members, nonmembers, below), degenerate: false };
    for &t in &cands {
        let acc = balanced(members, nonmembers, t);
        if acc > best.accuracy {
            best = Calibration { theta: t, accuracy: acc, degenerate: false };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub theta: f64,
    pub success_rate: f64,
    pub member_decisions: Vec<bool>,
    pub nonmember_decisions: Vec<bool>,
}

/// Call a sample a member when its confidence exceeds `theta`.
pub fn run_attack(target: &dyn BlackBox, set: &AttackSet, theta: f64) -> Result<AttackResult> {
    let m = query(target, &set.members)?;
    let n = query(target, &set.nonmembers)?;
    let member_decisions: Vec<bool> = m.iter().map(|&c| c > theta).collect();
    let nonmember_decisions: Vec<bool> = n.iter().map(|&c| c > theta).collect();
    let correct = member_decisions.iter().filter(|&&d| d).count() + nonmember_decisions.iter().filter(|&&d| !d).count();
    let total = member_decisions.len() + nonmember_decisions.len();
    if total == 0 {
        return Err(Error::invalid("empty attack set"));
    }
    Ok(AttackResult { theta, success_rate: correct as f64 / total as f64, member_decisions, nonmember_decisions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub target_id: String,
    pub theta: f64,
    pub success_rate: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub seed: u64,
}

fn halves(m: &Matrix) -> (Matrix, Matrix) {
    let k = m.rows / 2;
    let a: Vec<usize> = (0..k).collect();
    let b: Vec<usize> = (k..m.rows).collect();
    (m.gather(&a), m.gather(&b))
}

/// Calibrate on the first half of each side, attack the second half.
pub fn evaluate(target: &dyn BlackBox, set: &AttackSet, target_id: &str, seed: u64) -> Result<AttackReport> {
    let (cm, em) = halves(&set.members);
    let (cn, en) = halves(&set.nonmembers);
    let cal = calibrate(&query(target, &cm)?, &query(target, &cn)?)?;
    let eval = AttackSet { members: em, nonmembers: en };
    let res = run_attack(target, &eval, cal.theta)?;
    Ok(AttackReport {
        target_id: target_id.to_string(),
        theta: cal.theta,
        success_rate: res.success_rate,
        n_members: eval.members.rows,
        n_nonmembers: eval.nonmembers.rows,
        seed,
    })
}

/// Mean success over `repeats` random relabelings of the attack set.
pub fn shuffled_success<R: Rng + ?Sized>(
    target: &dyn BlackBox,
    set: &AttackSet,
    repeats: usize,
    rng: &mut R,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::config("repeats must be positive"));
    }
    let mut s = 0.0;
    for _ in 0..repeats {
        s += evaluate(target, &set.shuffled(rng), "shuffled", 0)?.success_rate;
    }
    Ok(s / repeats as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal series of length >= 2"));
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensornet::presets;

    /// Returns a fixed probability row for every input.
    struct Constant(Vec<f64>, usize);

    impl BlackBox for Constant {
        fn input_width(&self) -> usize {
            self.1
        }
        fn probabilities(&self, inputs: &Matrix) -> Result<Matrix> {
            Ok(Matrix { rows: inputs.rows, cols: 3, data: self.0.repeat(inputs.rows) })
        }
    }

    /// Confidence read straight from the first input column.
    struct Echo;

    impl BlackBox for Echo {
        fn input_width(&self) -> usize {
            1
        }
        fn probabilities(&self, inputs: &Matrix) -> Result<Matrix> {
            let mut m = Matrix::zeros(inputs.rows, 3);
            for i in 0..inputs.rows {
                let c = inputs.get(i, 0);
                m.row_mut(i).copy_from_slice(&[c, (1.0 - c) / 2.0, (1.0 - c) / 2.0]);
            }
            Ok(m)
        }
    }

    fn column(v: &[f64]) -> Matrix {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    #[test]
    fn query_on_fixed_outputs() {
        let x = Matrix::zeros(5, 4);
        let u = query(&Constant(vec![1.0 / 3.0; 3], 4), &x).unwrap();
        assert!(u.iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
        let o = query(&Constant(vec![0.0, 1.0, 0.0], 4), &x).unwrap();
        assert!(o.iter().all(|&c| c == 1.0));
        assert!(matches!(query(&Constant(vec![1.0 / 3.0; 3], 4), &Matrix::zeros(2, 3)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn query_matches_forward_pass() {
        let spec = presets::mlp_encoder(4, 6, 5).unwrap().then(&presets::classifier(5, 4).unwrap()).unwrap();
        let params = spec.init(7);
        let mut x = Matrix::zeros(6, spec.input.width());
        let mut rng = stream(1, "q", 0);
        x.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let c = query(&ModelOracle::new(spec.clone(), params.clone()).unwrap(), &x).unwrap();
        let logits = spec.predict(&params, &x).unwrap();
        for i in 0..6 {
            let r = logits.row(i);
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            assert!((c[i] - 1.0 / z).abs() < 1e-12);
            assert!(c[i] > 0.0 && c[i] <= 1.0);
        }
    }

    #[test]
    fn calibration_cases() {
        let m: Vec<f64> = (0..15).map(|i| 0.8 + i as f64 * 0.01).collect();
        let n: Vec<f64> = (0..15).map(|i| 0.4 + i as f64 * 0.01).collect();
        let c = calibrate(&m, &n).unwrap();
        assert_eq!(c.accuracy, 1.0);
        let dm: Vec<f64> = m.iter().chain(&m).copied().collect();
        let dn: Vec<f64> = n.iter().chain(&n).copied().collect();
        assert_eq!(calibrate(&dm, &dn).unwrap().theta, c.theta);
        let flat = calibrate(&[0.5; 10], &[0.5; 10]).unwrap();
        assert!(flat.degenerate && flat.theta == 0.5);
        assert!(calibrate(&[0.5; 5], &[0.5; 5]).is_err());
    }

    #[test]
    fn identical_distributions_give_chance() {
        let mut rng = stream(11, "cal", 0);
        let mut acc = 0.0;
        let reps = 40;
        for _ in 0..reps {
            let m: Vec<f64> = (0..400).map(|_| rng.random()).collect();
            let n: Vec<f64> = (0..400).map(|_| rng.random()).collect();
            let set = AttackSet { members: column(&m), nonmembers: column(&n) };
            acc += evaluate(&Echo, &set, "x", 0).unwrap().success_rate;
        }
        assert!((acc / reps as f64 - 0.5).abs() < 0.05);
    }

    #[test]
    fn constant_model_is_chance() {
        let set = AttackSet { members: Matrix::zeros(60, 2), nonmembers: Matrix::zeros(60, 2) };
        let r = evaluate(&Constant(vec![0.2, 0.5, 0.3], 2), &set, "c", 0).unwrap();
        assert_eq!(r.success_rate, 0.5);
    }

    #[test]
    fn separable_confidences_are_found() {
        let m: Vec<f64> = (0..100).map(|i| 0.9 + ((i * 37) % 100) as f64 * 1e-4).collect();
        let n: Vec<f64> = (0..100).map(|i| 0.5 + ((i * 37) % 100) as f64 * 1e-3).collect();
        let set = AttackSet { members: column(&m), nonmembers: column(&n) };
        let r = evaluate(&Echo, &set, "e", 3).unwrap();
        assert_eq!(r.success_rate, 1.0);
        assert_eq!((r.n_members, r.n_nonmembers), (50, 50));
        let mut rng = stream(0, "s", 0);
        let s = shuffled_success(&Echo, &set, 20, &mut rng).unwrap();
        assert!((s - 0.5).abs() < 0.05, "{s}");
    }

    #[test]
    fn sampling_contract() {
        let train = column(&(0..200).map(|i| i as f64).collect::<Vec<_>>());
        let held = column(&(1000..1100).map(|i| i as f64).collect::<Vec<_>>());
        let set = AttackSet::sample(&train, &held, 60, &mut stream(0, "a", 0)).unwrap();
        assert_eq!((set.members.rows, set.nonmembers.rows), (60, 60));
        assert!(set.members.data.iter().all(|v| *v < 200.0));
        assert!(AttackSet::sample(&train, &held, 10, &mut stream(0, "a", 0)).is_err());
        assert!(AttackSet::sample(&train, &held, 150, &mut stream(0, "a", 0)).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn report_json_fields() {
        let r = AttackReport {
            target_id: "c0".into(),
            theta: 0.7,
            success_rate: 0.6,
            n_members: 50,
            n_nonmembers: 50,
            seed: 1,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["target_id", "theta", "success_rate", "n_members", "n_nonmembers", "seed"] {
            assert!(v.get(k).is_some());
        }
    }
}

//! Pass/fail checks on the outcomes of full experiments, with the reference
//! numbers they are judged against. Accuracies are fractions; margins are in
//! percentage points.

use crate::eval::{CurveKey, SweepResult};
use crate::error::{Error, Result};
use crate::net::Variant;
use crate::selftest::Check;
use crate::trainer::EpochMetrics;

/// Reference SNR-averaged accuracies (%) of DeepBroadcast in case 5, per user.
pub const CASE5_REFERENCE_PCT: [f64; 3] = [94.67, 86.44, 72.43];
pub const CASE5_ABS_TOLERANCE_PTS: f64 = 4.0;
pub const CASE5_MIN_LAST_TASK_GAP_PTS: f64 = 3.0;

pub const CASE3_SNR_DB: f64 = -5.0;
/// The Rician user.
pub const CASE3_USER: usize = 2;
pub const CASE3_MIN_GAP_MTOC_PTS: f64 = 2.0;
pub const CASE3_MIN_GAP_UNICAST_PTS: f64 = 8.0;

pub const CASE1_SNR_DB: f64 = 7.0;
pub const CASE1_RECOVERY_USER: usize = 0;
pub const CASE1_CLASSIFY_USER: usize = 1;
pub const CASE1_MIN_PSNR_GAP_DB: f64 = 1.0;
pub const CASE1_MAX_ACCURACY_DEFICIT_PTS: f64 = 0.5;

pub const CASE4_MIN_STRICT_GAP_PTS: f64 = 1.0;

fn curve_key(results: &SweepResult, variant: Variant, user: usize) -> Result<CurveKey> {
    results
        .curves()
        .keys()
        .find(|k| k.variant == variant && k.user == user)
        .copied()
        .ok_or_else(|| Error::Other(format!("no {} curve for user {user}", variant.label())))
}

/// SNR-averaged value of a curve.
pub fn average(results: &SweepResult, variant: Variant, user: usize) -> Result<f64> {
    let key = curve_key(results, variant, user)?;
    results
        .average(&key)
        .ok_or_else(|| Error::Other(format!("empty {} curve", variant.label())))
}

/// Value of a curve at one grid point.
pub fn value_at(results: &SweepResult, variant: Variant, user: usize, snr_db: f64) -> Result<f64> {
    results
        .records
        .iter()
        .find(|r| r.variant == variant && r.user == user && r.snr_db == snr_db)
        .map(|r| r.value)
        .ok_or_else(|| Error::Other(format!("no {} point for user {user} at {snr_db} dB", variant.label())))
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

/// DeepBroadcast beats the E2E ablation on every task, by at least 3 points
/// on the last one, and lands near the reference averages.
pub fn case5(results: &SweepResult) -> Result<Check> {
    let mut ok = true;
    let mut detail = Vec::new();
    for (user, &reference) in CASE5_REFERENCE_PCT.iter().enumerate() {
        let db = pts(average(results, Variant::Deepbroadcast, user)?);
        let e2e = pts(average(results, Variant::DeepbroadcastE2e, user)?);
        let beats = if user + 1 == CASE5_REFERENCE_PCT.len() {
            db - e2e >= CASE5_MIN_LAST_TASK_GAP_PTS
        } else {
            db > e2e
        };
        let near = (db - reference).abs() <= CASE5_ABS_TOLERANCE_PTS;
        ok &= beats && near;
        detail.push(format!("user {user}: {db:.2} vs E2E {e2e:.2} (ref {reference:.2})"));
    }
    Ok(Check::new("case 5 DeepBroadcast vs E2E", ok, detail.join("; ")))
}

/// At -5 dB on the Rician user DeepBroadcast leads MTOC by 2 and Unicast by 8 points.
pub fn case3(results: &SweepResult) -> Result<Check> {
    let at = |v| value_at(results, v, CASE3_USER, CASE3_SNR_DB).map(pts);
    let (db, mtoc, uni) = (at(Variant::Deepbroadcast)?, at(Variant::Mtoc)?, at(Variant::Unicast)?);
    let ok = db - mtoc >= CASE3_MIN_GAP_MTOC_PTS && db - uni >= CASE3_MIN_GAP_UNICAST_PTS;
    Ok(Check::new(
        "case 3 low-SNR ordering",
        ok,
        format!("{db:.2} vs MTOC {mtoc:.2} (+{:.2}), Unicast {uni:.2} (+{:.2})", db - mtoc, db - uni),
    ))
}

/// At 7 dB DeepBroadcast recovers at least 1 dB better than DeepRC and
/// classifies no more than half a point worse.
pub fn case1(results: &SweepResult) -> Result<Check> {
    let psnr = |v| value_at(results, v, CASE1_RECOVERY_USER, CASE1_SNR_DB);
    let acc = |v| value_at(results, v, CASE1_CLASSIFY_USER, CASE1_SNR_DB).map(pts);
    let (p_db, p_rc) = (psnr(Variant::Deepbroadcast)?, psnr(Variant::Deeprc)?);
    let (a_db, a_rc) = (acc(Variant::Deepbroadcast)?, acc(Variant::Deeprc)?);
    let ok = p_db - p_rc >= CASE1_MIN_PSNR_GAP_DB && a_db >= a_rc - CASE1_MAX_ACCURACY_DEFICIT_PTS;
    Ok(Check::new(
        "case 1 recovery vs DeepRC",
        ok,
        format!("PSNR {p_db:.2} vs {p_rc:.2} dB, accuracy {a_db:.2} vs {a_rc:.2}"),
    ))
}

/// `MTOC <= {MTOC-wLCA, MTOC-wGCF} <= DeepBroadcast` on every user, with at
/// least one of each user's four inequalities holding by a full point.
pub fn case4(results: &SweepResult, n_users: usize) -> Result<Check> {
    let mut ok = true;
    let mut detail = Vec::new();
    for user in 0..n_users {
        let avg = |v| average(results, v, user).map(pts);
        let (m, l, g, d) = (
            avg(Variant::Mtoc)?,
            avg(Variant::MtocWlca)?,
            avg(Variant::MtocWgcf)?,
            avg(Variant::Deepbroadcast)?,
        );
        let margins = [l - m, g - m, d - l, d - g];
        ok &= margins.iter().all(|&x| x >= 0.0) && margins.iter().any(|&x| x >= CASE4_MIN_STRICT_GAP_PTS);
        detail.push(format!("user {user}: MTOC {m:.2}, wLCA {l:.2}, wGCF {g:.2}, DeepBroadcast {d:.2}"));
    }
    Ok(Check::new("case 4 ablation ordering", ok, detail.join("; ")))
}

/// Epoch metrics of two runs agree on everything but wall time.
pub fn determinism(a: &[EpochMetrics], b: &[EpochMetrics]) -> Check {
    let same = a.len() == b.len() && !a.is_empty() && a.iter().zip(b).all(|(x, y)| x.same_outcome(y));
    let detail = match (a.first(), same) {
        (Some(m), true) => format!("{} epoch record(s) identical, epoch-1 loss {:.6}", a.len(), m.loss),
        _ => "epoch metrics differ".to_string(),
    };
    Check::new("determinism", same, detail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Metric, MetricsRecord};

    fn curve(variant: Variant, user: usize, metric: Metric, points: &[(f64, f64)]) -> Vec<MetricsRecord> {
        points
            .iter()
            .map(|&(snr_db, value)| MetricsRecord {
                variant,
                user,
                task: user as u32,
                snr_db,
                metric,
                value,
                n: 100,
                seed: 1,
                std: 0.0,
            })
            .collect()
    }

    fn flat(variant: Variant, values: &[f64]) -> Vec<MetricsRecord> {
        values
            .iter()
            .enumerate()
            .flat_map(|(u, &v)| curve(variant, u, Metric::Accuracy, &[(-5.0, v), (7.0, v)]))
            .collect()
    }

    #[test]
    fn case5_reference_numbers_pass_and_a_small_gap_fails() {
        let r = SweepResult::new([flat(Variant::Deepbroadcast, &[0.9467, 0.8644, 0.7243]), flat(Variant::DeepbroadcastE2e, &[0.9329, 0.8364, 0.6527])].concat());
        assert!(case5(&r).unwrap().passed);
        let r = SweepResult::new([flat(Variant::Deepbroadcast, &[0.9467, 0.8644, 0.7243]), flat(Variant::DeepbroadcastE2e, &[0.9329, 0.8364, 0.70])].concat());
        assert!(!case5(&r).unwrap().passed);
        let r = SweepResult::new([flat(Variant::Deepbroadcast, &[0.80, 0.8644, 0.7243]), flat(Variant::DeepbroadcastE2e, &[0.79, 0.8364, 0.6527])].concat());
        assert!(!case5(&r).unwrap().passed, "outside the absolute tolerance");
    }

    #[test]
    fn case3_gaps() {
        let make = |mtoc: f64, uni: f64| {
            SweepResult::new(
                [
                    flat(Variant::Deepbroadcast, &[0.9, 0.9, 0.6]),
                    flat(Variant::Mtoc, &[0.9, 0.9, mtoc]),
                    flat(Variant::Unicast, &[0.9, 0.9, uni]),
                ]
                .concat(),
            )
        };
        assert!(case3(&make(0.5688, 0.4779)).unwrap().passed);
        assert!(!case3(&make(0.59, 0.40)).unwrap().passed);
        assert!(!case3(&make(0.55, 0.53)).unwrap().passed);
    }

    #[test]
    fn case1_psnr_and_accuracy() {
        let make = |p_rc: f64, a_rc: f64| {
            SweepResult::new(
                [
                    curve(Variant::Deepbroadcast, 0, Metric::Psnr, &[(7.0, 26.11)]),
                    curve(Variant::Deepbroadcast, 1, Metric::Accuracy, &[(7.0, 0.80)]),
                    curve(Variant::Deeprc, 0, Metric::Psnr, &[(7.0, p_rc)]),
                    curve(Variant::Deeprc, 1, Metric::Accuracy, &[(7.0, a_rc)]),
                ]
                .concat(),
            )
        };
        assert!(case1(&make(24.18, 0.7905)).unwrap().passed);
        assert!(case1(&make(24.18, 0.804)).unwrap().passed, "within half a point");
        assert!(!case1(&make(25.5, 0.79)).unwrap().passed);
        assert!(!case1(&make(24.18, 0.81)).unwrap().passed);
    }

    #[test]
    fn case4_needs_order_and_one_strict_gap_per_user() {
        let make = |m: [f64; 2], l: [f64; 2], g: [f64; 2], d: [f64; 2]| {
            SweepResult::new(
                [
                    flat(Variant::Mtoc, &m),
                    flat(Variant::MtocWlca, &l),
                    flat(Variant::MtocWgcf, &g),
                    flat(Variant::Deepbroadcast, &d),
                ]
                .concat(),
            )
        };
        assert!(case4(&make([0.80, 0.70], [0.81, 0.71], [0.805, 0.72], [0.83, 0.73]), 2).unwrap().passed);
        assert!(!case4(&make([0.80, 0.70], [0.79, 0.71], [0.805, 0.72], [0.83, 0.73]), 2).unwrap().passed);
        assert!(!case4(&make([0.80, 0.70], [0.80, 0.70], [0.80, 0.70], [0.80, 0.70]), 2).unwrap().passed);
    }

    #[test]
    fn missing_curves_are_errors() {
        let r = SweepResult::new(flat(Variant::Deepbroadcast, &[0.9, 0.9, 0.9]));
        assert!(case5(&r).is_err());
        assert!(case3(&r).is_err());
    }
}

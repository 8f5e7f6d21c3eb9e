//! Separation metrics: SI-SDR, SDR, their improvements over the mixture, and
//! the permutation-invariant negative SI-SDR training objective.

use crate::error::{Error, Result};

/// Stabilizer added to every energy ratio.
pub const DELTA: f64 = 1e-8;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.is_empty() || reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "metric needs equal non-empty lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("reference signal is identically zero"));
    }
    Ok(())
}

/// Scale-invariant SDR in dB. Both signals are made zero-mean first.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    Ok(si_sdr_terms(&zero_mean(reference), &zero_mean(estimate)).value)
}

/// Plain (not scale-invariant) SDR in dB.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let signal = dot(reference, reference);
    let noise: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (s - e) * (s - e))
        .sum();
    Ok(DB * ((signal + DELTA) / (noise + DELTA)).ln())
}

struct SiSdrTerms {
    value: f64,
    scale: f64,
    ref_energy: f64,
    target_energy: f64,
    error_energy: f64,
}

/// Expects zero-mean inputs.
fn si_sdr_terms(s: &[f64], e: &[f64]) -> SiSdrTerms {
    let ref_energy = dot(s, s);
    let scale = dot(e, s) / (ref_energy + DELTA);
    let target_energy = scale * scale * ref_energy;
    let error_energy: f64 = s
        .iter()
        .zip(e)
        .map(|(sv, ev)| {
            let d = scale * sv - ev;
            d * d
        })
        .sum();
    SiSdrTerms {
        value: DB * ((target_energy + DELTA) / (error_energy + DELTA)).ln(),
        scale,
        ref_energy,
        target_energy,
        error_energy,
    }
}

/// Gradient of SI-SDR (dB) with respect to the raw estimate, including the
/// mean-removal projection.
fn si_sdr_grad(s: &[f64], e: &[f64], t: &SiSdrTerms) -> Vec<f64> {
    let denom_s = t.ref_energy + DELTA;
    let err: Vec<f64> = s.iter().zip(e).map(|(sv, ev)| t.scale * sv - ev).collect();
    let err_dot_s = dot(&err, s);
    let k_target = 2.0 * t.scale * t.ref_energy / (denom_s * (t.target_energy + DELTA));
    let k_err = 2.0 / (t.error_energy + DELTA);
    let mut g: Vec<f64> = (0..s.len())
        .map(|i| DB * (k_target * s[i] - k_err * (err_dot_s * s[i] / denom_s - err[i])))
        .collect();
    let m = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= m);
    g
}

/// All orderings of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

pub const MAX_PIT_SPEAKERS: usize = 4;

/// Batch-mean of `-max_perm mean_c SI-SDR(ref[perm[c]], est[c])` and its
/// gradient with respect to the estimates. Inputs are flat `[B, C, T]`.
pub(crate) fn pit_neg_sisdr_with_grad(
    est: &[f64],
    refs: &[f64],
    batch: usize,
    speakers: usize,
    len: usize,
) -> Result<(f64, Vec<f64>)> {
    if speakers == 0 || speakers > MAX_PIT_SPEAKERS {
        return Err(Error::invalid(format!(
            "PIT supports 1..={MAX_PIT_SPEAKERS} speakers, got {speakers}"
        )));
    }
    if batch == 0 || len == 0 {
        return Err(Error::invalid("PIT loss needs a non-empty batch"));
    }
    let perms = permutations(speakers);
    let mut loss = 0.0;
    let mut grad = vec![0.0; est.len()];
    for b in 0..batch {
        let row = |buf: &[f64], c: usize| buf[(b * speakers + c) * len..][..len].to_vec();
        let refs_b: Vec<Vec<f64>> = (0..speakers)
            .map(|c| {
                let r = row(refs, c);
                check_pair(&r, &r)?;
                Ok(zero_mean(&r))
            })
            .collect::<Result<_>>()?;
        let est_b: Vec<Vec<f64>> = (0..speakers).map(|c| zero_mean(&row(est, c))).collect();
        // pairwise terms, reused across permutations
        let terms: Vec<Vec<SiSdrTerms>> = (0..speakers)
            .map(|c| {
                (0..speakers)
                    .map(|r| si_sdr_terms(&refs_b[r], &est_b[c]))
                    .collect()
            })
            .collect();
        let (best, best_val) = perms
            .iter()
            .map(|p| {
                let v = (0..speakers).map(|c| terms[c][p[c]].value).sum::<f64>() / speakers as f64;
                (p, v)
            })
            .fold((&perms[0], f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        loss -= best_val / batch as f64;
        let w = -1.0 / (batch * speakers) as f64;
        for c in 0..speakers {
            let g = si_sdr_grad(&refs_b[best[c]], &est_b[c], &terms[c][best[c]]);
            let dst = &mut grad[(b * speakers + c) * len..][..len];
            dst.iter_mut().zip(&g).for_each(|(d, v)| *d += w * v);
        }
    }
    Ok((loss, grad))
}

/// Plain-value PIT negative SI-SDR, for callers that do not need gradients.
pub fn pit_neg_sisdr(
    references: &[f64],
    estimates: &[f64],
    batch: usize,
    speakers: usize,
    len: usize,
) -> Result<f64> {
    if references.len() != batch * speakers * len || estimates.len() != references.len() {
        return Err(Error::invalid("PIT inputs must both be [B, C, T]"));
    }
    pit_neg_sisdr_with_grad(estimates, references, batch, speakers, len).map(|(l, _)| l)
}

/// Improvements of one utterance, aligned by the permutation that maximizes
/// mean SI-SDR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Improvement {
    pub sdri: f64,
    pub si_sdri: f64,
}

/// SDRi and SI-SDRi of `estimates` (`C` rows of length `T`) against
/// `references`, relative to feeding the raw `mixture` as every estimate.
pub fn improvements(
    mixture: &[f64],
    references: &[Vec<f64>],
    estimates: &[Vec<f64>],
) -> Result<Improvement> {
    let c = references.len();
    if c == 0 || estimates.len() != c || c > MAX_PIT_SPEAKERS {
        return Err(Error::invalid("improvements need matching 1..=4 speaker rows"));
    }
    let mut si = vec![vec![0.0; c]; c];
    for (e, row) in si.iter_mut().enumerate() {
        for (r, cell) in row.iter_mut().enumerate() {
            *cell = si_sdr(&references[r], &estimates[e])?;
        }
    }
    let best = permutations(c)
        .into_iter()
        .map(|p| {
            let v: f64 = (0..c).map(|e| si[e][p[e]]).sum();
            (p, v)
        })
        .fold((Vec::new(), f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
        .0;
    let mut sdri = 0.0;
    let mut si_sdri = 0.0;
    for e in 0..c {
        let r = &references[best[e]];
        sdri += sdr(r, &estimates[e])? - sdr(r, mixture)?;
        si_sdri += si[e][best[e]] - si_sdr(r, mixture)?;
    }
    Ok(Improvement {
        sdri: sdri / c as f64,
        si_sdri: si_sdri / c as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_copy_hits_the_stabilizer_cap() {
        let s = [1.0, -1.0];
        let v = si_sdr(&s, &[2.0, -2.0]).unwrap();
        // target energy 8, error energy ~0 → 10 log10(8 / 1e-8)
        assert!((v - 10.0 * (8.0f64 / 1e-8).log10()).abs() < 1e-6, "{v}");
        assert!(v > 80.0);
    }

    #[test]
    fn hand_value_after_mean_removal() {
        // ŝ = [1, 0] becomes [0.5, -0.5] after mean removal, which is exactly
        // the scaled target 0.5·s, so only the stabilizer bounds the ratio:
        // 10 log10((0.5 + 1e-8) / 1e-8).
        let v = si_sdr(&[1.0, -1.0], &[1.0, 0.0]).unwrap();
        let hand = 10.0 * ((0.5f64 + 1e-8) / 1e-8).log10();
        assert!((v - hand).abs() < 1e-7, "{v} vs {hand}");
        assert!((v - 76.98970024).abs() < 1e-6);
    }

    #[test]
    fn scale_invariance() {
        let s: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let e: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin() + 0.3 * (i as f64 * 1.9).cos()).collect();
        let base = si_sdr(&s, &e).unwrap();
        for beta in [0.1, 10.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * beta).collect();
            // only the stabilizer breaks exact invariance
            assert!((si_sdr(&s, &scaled).unwrap() - base).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_reference_is_rejected() {
        assert!(matches!(si_sdr(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::InvalidArgument(_))));
        assert!(si_sdr(&[], &[]).is_err());
        assert!(sdr(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn permutations_enumerate_all() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(2), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(4).len(), 24);
    }

    #[test]
    fn pit_is_permutation_invariant() {
        let t = 50;
        let a: Vec<f64> = (0..t).map(|i| (i as f64 * 0.21).sin()).collect();
        let b: Vec<f64> = (0..t).map(|i| (i as f64 * 0.83).cos() * 0.5).collect();
        let refs = [a.clone(), b.clone()].concat();
        let est = [
            a.iter().map(|v| v * 0.9 + 0.01).collect::<Vec<_>>(),
            b.iter().map(|v| v * 1.1 - 0.02).collect::<Vec<_>>(),
        ];
        let straight = [est[0].clone(), est[1].clone()].concat();
        let swapped = [est[1].clone(), est[0].clone()].concat();
        let l1 = pit_neg_sisdr(&refs, &straight, 1, 2, t).unwrap();
        let l2 = pit_neg_sisdr(&refs, &swapped, 1, 2, t).unwrap();
        assert_eq!(l1, l2);
        let perfect = pit_neg_sisdr(&refs, &refs, 1, 2, t).unwrap();
        assert!(perfect < -70.0, "{perfect}");
    }

    #[test]
    fn mixture_as_estimate_gives_zero_improvement() {
        let t = 40;
        let a: Vec<f64> = (0..t).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..t).map(|i| (i as f64 * 1.1).cos()).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let imp = improvements(&mix, &[a.clone(), b.clone()], &[mix.clone(), mix.clone()]).unwrap();
        assert_eq!(imp.sdri, 0.0);
        assert_eq!(imp.si_sdri, 0.0);
        let oracle = improvements(&mix, &[a.clone(), b.clone()], &[b.clone(), a.clone()]).unwrap();
        assert!(oracle.si_sdri > 60.0 && oracle.sdri > 60.0, "{oracle:?}");
    }
}

//! Non-maximum suppression over a detection heatmap.

/// One NMS survivor (or padding sentinel) on the heatmap grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub confidence: f64,
    /// False for zero-confidence padding sentinels at (0, 0).
    pub valid: bool,
}

/// Keep pixels that are the maximum of their `kernel`×`kernel` window, then
/// return the `n` most confident as peaks, padding with invalid sentinels
/// when fewer survive.
///
/// Equal maxima inside one window keep only the lexicographically smallest
/// coordinate; equal confidences order by coordinate as well, so the result
/// is fully deterministic.
pub fn nms_topk(heatmap: &[f64], h: usize, w: usize, n: usize, kernel: usize) -> Vec<Peak> {
    assert_eq!(heatmap.len(), h * w, "contract violation: heatmap size");
    assert!(kernel % 2 == 1, "contract violation: NMS kernel must be odd");
    assert!(n <= h * w, "contract violation: n exceeds pixel count");
    let half = kernel / 2;
    let mut survivors: Vec<Peak> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = heatmap[r * w + c];
            let r_lo = r.saturating_sub(half);
            let r_hi = (r + half).min(h - 1);
            let c_lo = c.saturating_sub(half);
            let c_hi = (c + half).min(w - 1);
            let mut keep = true;
            'win: for rr in r_lo..=r_hi {
                for cc in c_lo..=c_hi {
                    let q = heatmap[rr * w + cc];
                    if q > v || (q == v && (rr, cc) < (r, c)) {
                        keep = false;
                        break 'win;
                    }
                }
            }
            if keep {
                survivors.push(Peak {
                    row: r,
                    col: c,
                    confidence: v,
                    valid: true,
                });
            }
        }
    }
    survivors.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| (a.row, a.col).cmp(&(b.row, b.col)))
    });
    survivors.truncate(n);
    while survivors.len() < n {
        survivors.push(Peak {
            row: 0,
            col: 0,
            confidence: 0.0,
            valid: false,
        });
    }
    survivors
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_spike_then_sentinels() {
        let mut hm = vec![0.0; 25];
        hm[2 * 5 + 3] = 0.9;
        let peaks = nms_topk(&hm, 5, 5, 3, 3);
        assert_eq!(peaks[0], Peak { row: 2, col: 3, confidence: 0.9, valid: true });
        // The flat-zero background keeps only zero-confidence survivors
        // after the spike.
        assert!(peaks[1].confidence == 0.0);
    }

    #[test]
    fn sentinel_fill_when_few_survivors() {
        // On a flat field every pixel except (0,0) sees a lex-smaller equal
        // value inside its window, so exactly one survivor remains.
        let hm = vec![1.0; 16];
        let peaks = nms_topk(&hm, 4, 4, 8, 3);
        let valid: Vec<&Peak> = peaks.iter().filter(|p| p.valid).collect();
        assert_eq!(valid.len(), 1);
        assert_eq!((valid[0].row, valid[0].col), (0, 0));
        assert!(peaks[1..].iter().all(|p| !p.valid && p.confidence == 0.0));
        assert_eq!((peaks[5].row, peaks[5].col), (0, 0));
    }

    #[test]
    fn adjacent_equal_maxima_keep_lex_smallest() {
        let mut hm = vec![0.0; 25];
        hm[1 * 5 + 2] = 0.7;
        hm[1 * 5 + 3] = 0.7;
        let peaks = nms_topk(&hm, 5, 5, 2, 3);
        let valid: Vec<&Peak> = peaks.iter().filter(|p| p.valid && p.confidence > 0.0).collect();
        assert_eq!(valid.len(), 1);
        assert_eq!((valid[0].row, valid[0].col), (1, 2));
    }

    #[test]
    fn matches_brute_force_on_random_heatmaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let (h, w) = (12, 10);
            let hm: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            let peaks = nms_topk(&hm, h, w, h * w, 3);
            let got: std::collections::BTreeSet<(usize, usize)> = peaks
                .iter()
                .filter(|p| p.valid)
                .map(|p| (p.row, p.col))
                .collect();
            // Independent sliding-window check.
            let mut expect = std::collections::BTreeSet::new();
            for r in 0..h {
                for c in 0..w {
                    let v = hm[r * w + c];
                    let mut is_max = true;
                    let mut lex_first = true;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = r as i64 + dr;
                            let cc = c as i64 + dc;
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                continue;
                            }
                            let q = hm[rr as usize * w + cc as usize];
                            if q > v {
                                is_max = false;
                            }
                            if q == v && (rr as usize, cc as usize) < (r, c) {
                                lex_first = false;
                            }
                        }
                    }
                    if is_max && lex_first {
                        expect.insert((r, c));
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn survivors_sorted_by_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (16, 16);
        let hm: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let peaks = nms_topk(&hm, h, w, 10, 3);
        for pair in peaks.windows(2) {
            assert!(pair[0].confidence >= pair[1].confidence);
        }
    }
}

//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use wmbench_core::qa::{QaItem, Task};
use wmbench_core::scenegraph::diff;

/// All permutations of `1..=n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, left: &mut BTreeSet<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for x in left.clone() {
            left.remove(&x);
            prefix.push(x);
            go(prefix, left, out);
            prefix.pop();
            left.insert(x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (1..=n).collect(), &mut out);
    out
}

/// Subset rule checked directly on the item's graphs.
pub fn subset_rule_accepts(item: &QaItem, labels: &[usize]) -> bool {
    let t = item.steps - 1;
    match item.task {
        Task::Forward => {
            let mut prev = &item.frame_graphs[0];
            for i in 0..t {
                let next = &item.frame_graphs[item.candidate_order[labels[i] - 1]];
                let happened = diff(prev, next);
                if !item.step_signatures[i].visible.iter().all(|c| happened.contains(c)) {
                    return false;
                }
                prev = next;
            }
            true
        }
        Task::Inverse => (0..t).all(|i| {
            let claimed = &item.step_signatures[item.candidate_order[labels[i] - 1] - 1].visible;
            let happened = diff(&item.frame_graphs[i], &item.frame_graphs[i + 1]);
            claimed.iter().all(|c| happened.contains(c))
        }),
    }
}

/// Ordinal Krippendorff's alpha via pairwise differences, in floating point.
pub fn ordinal_alpha(units: &[Vec<u64>]) -> f64 {
    let units: Vec<&Vec<u64>> = units.iter().filter(|u| u.len() >= 2).collect();
    let pooled: Vec<u64> = units.iter().flat_map(|u| u.iter().copied()).collect();
    let n = pooled.len() as f64;
    let count = |g: u64| pooled.iter().filter(|&&x| x == g).count() as f64;
    let levels: BTreeSet<u64> = pooled.iter().copied().collect();
    let delta2 = |a: u64, b: u64| {
        let (lo, hi) = (a.min(b), a.max(b));
        let s: f64 = levels.iter().filter(|&&g| g >= lo && g <= hi).map(|&g| count(g)).sum();
        (s - (count(a) + count(b)) / 2.0).powi(2)
    };
    let mut d_o = 0.0;
    for u in &units {
        let m = u.len() as f64;
        for (i, &x) in u.iter().enumerate() {
            for (j, &y) in u.iter().enumerate() {
                if i != j {
                    d_o += delta2(x, y) / (m - 1.0);
                }
            }
        }
    }
    d_o /= n;
    let mut d_e = 0.0;
    for (i, &x) in pooled.iter().enumerate() {
        for (j, &y) in pooled.iter().enumerate() {
            if i != j {
                d_e += delta2(x, y);
            }
        }
    }
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        1.0
    } else {
        1.0 - d_o / d_e
    }
}

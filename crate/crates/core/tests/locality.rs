mod common;

use common::locality::{reach, sensitivity, OFF_WINDOW_TOL};
use decop::dcl::LearnerKind;

const N: usize = 11;
const D: usize = 3;

#[test]
fn single_block_only_mixes_within_its_window() {
    for w in [1, 2, 5, N] {
        for learner in [LearnerKind::Linear, LearnerKind::Mlp] {
            let s = sensitivity(&[w], learner, N, D, 3 + w as u64);
            for i in 0..N {
                for j in 0..N {
                    let same = i / w == j / w;
                    if same {
                        assert!(s[i][j] > 1e-6, "W={w} {learner:?}: {i} should see {j}");
                    } else {
                        assert!(s[i][j] < OFF_WINDOW_TOL, "W={w} {learner:?}: {i} leaks from {j} ({})", s[i][j]);
                    }
                }
            }
        }
    }
}

#[test]
fn stacked_windows_widen_the_receptive_field() {
    let first = sensitivity(&[2], LearnerKind::Linear, N, D, 5);
    let second = sensitivity(&[5], LearnerKind::Linear, N, D, 5);
    let both = sensitivity(&[2, 5], LearnerKind::Linear, N, D, 5);
    assert_eq!(reach(&first, 0), vec![0, 1]);
    assert_eq!(reach(&second, 0), vec![0, 1, 2, 3, 4]);
    assert_eq!(reach(&both, 0), vec![0, 1, 2, 3, 4, 5]);
    for i in 0..N {
        assert!(reach(&both, i).len() >= reach(&first, i).len().max(reach(&second, i).len()));
    }
}

#[test]
fn full_window_mlp_sees_every_patch() {
    let s = sensitivity(&[N], LearnerKind::Mlp, N, D, 9);
    for i in 0..N {
        assert_eq!(reach(&s, i).len(), N);
    }
}

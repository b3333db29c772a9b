mod common;

use common::{differing, sigmoid};
use dimerge_core::baselines::{
    breadcrumbs_transform, dare_transform, task_arithmetic, ties_merge, ties_trim,
};
use dimerge_core::merge::{merge_checkpoint, merge_tensor, MergeConfig, MergeMethod};
use dimerge_core::scope::{GlobPattern, ScopeFilter, ScopePreset};
use dimerge_core::store::{align_triple, AlignPolicy, Checkpoint, Role};
use dimerge_core::synthetic::{fixture, FixtureSpec};
use proptest::prelude::*;

const METHODS: [MergeMethod; 5] = [
    MergeMethod::Dim3,
    MergeMethod::TaskArithmetic,
    MergeMethod::Dare,
    MergeMethod::Ties,
    MergeMethod::Breadcrumbs,
];

fn spec(seed: u64) -> FixtureSpec {
    FixtureSpec {
        layers: 3,
        seed,
        ..FixtureSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_range_matches_full_merge(seed in any::<u64>(), lo in 0u32..3, span in 0u32..3, m in 0usize..5) {
        let t = fixture(&spec(seed)).unwrap();
        let hi = (lo + span).min(2);
        let mut cfg = MergeConfig::with_method(METHODS[m]);
        let (full, _) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &cfg).unwrap();
        cfg.scope = ScopeFilter::preset(ScopePreset::Layers(lo, hi));
        let (ranged, _) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &cfg).unwrap();
        for r in ranged.iter() {
            let expect = if t.base.contains(r.name()) && cfg.scope.admits(r.name()) {
                full.get(r.name()).unwrap()
            } else {
                t.anchor.get(r.name()).unwrap()
            };
            prop_assert!(r == expect, "{} differs", r.name());
        }
    }

    #[test]
    fn weights_stay_in_rank_bounds(seed in any::<u64>()) {
        let t = fixture(&spec(seed)).unwrap();
        let cfg = MergeConfig::default();
        let (triples, _) = align_triple(&t.base, &t.ml, &t.anchor, &ScopeFilter::full(), AlignPolicy::default()).unwrap();
        for tr in &triples {
            let d = *tr.shape().last().unwrap() as f64;
            let g = (d - 1.0) / d;
            let w = merge_tensor(tr, &cfg).unwrap().weights.unwrap();
            for (a, b) in w.omega_ml.iter().zip(&w.omega_mm) {
                prop_assert!(sigmoid(-1.0) <= *a && *a <= sigmoid(1.0));
                prop_assert!(sigmoid(-g) <= *a && *a <= 1.0 - sigmoid(-g));
                prop_assert!((a + b - 1.0).abs() <= f64::EPSILON);
            }
        }
    }

    #[test]
    fn insertion_order_is_irrelevant(seed in any::<u64>(), m in 0usize..5) {
        let t = fixture(&spec(seed)).unwrap();
        let reversed = |c: &Checkpoint| {
            let mut out = Checkpoint::new(c.role());
            for r in c.iter().collect::<Vec<_>>().into_iter().rev() {
                out.insert(r.clone()).unwrap();
            }
            out
        };
        let cfg = MergeConfig::with_method(METHODS[m]);
        let (a, ra) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &cfg).unwrap();
        let (b, rb) = merge_checkpoint(&reversed(&t.base), &reversed(&t.ml), &reversed(&t.anchor), &cfg).unwrap();
        prop_assert!(differing(&a, &b).is_empty());
        prop_assert_eq!(ra.output_digest, rb.output_digest);
    }

    #[test]
    fn transforms_are_identities_at_their_limits(v in prop::collection::vec(-5.0f32..5.0, 1..200), seed in any::<u64>()) {
        prop_assert_eq!(&dare_transform(&v, 0.0, seed, "w").unwrap(), &v);
        prop_assert_eq!(&ties_trim(&v, 1.0).unwrap(), &v);
        prop_assert_eq!(&breadcrumbs_transform(&v, 0.0, 0.0).unwrap(), &v);
    }

    #[test]
    fn ties_without_conflict_is_scaled_task_arithmetic(
        pairs in prop::collection::vec((0.01f32..5.0, 0.01f32..5.0, any::<bool>(), -1.0f32..1.0), 1..100),
        lambda in 0.1f64..2.0,
    ) {
        let sign = |neg: bool| if neg { -1.0f32 } else { 1.0 };
        let a: Vec<f32> = pairs.iter().map(|(x, _, n, _)| sign(*n) * x).collect();
        let b: Vec<f32> = pairs.iter().map(|(_, y, n, _)| sign(*n) * y).collect();
        let base: Vec<f32> = pairs.iter().map(|p| p.3).collect();
        let ties = ties_merge(&base, &a, &b, 1.0, lambda).unwrap();
        let ta = task_arithmetic(&base, &a, &b, lambda / 2.0).unwrap();
        for (x, y) in ties.iter().zip(&ta) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn every_method_preserves_out_of_scope_tensors() {
    let t = fixture(&FixtureSpec::default()).unwrap();
    let scope = ScopeFilter {
        exclude: vec![GlobPattern::new("*mlp*").unwrap()],
        ..ScopeFilter::preset(ScopePreset::LlmOnly)
    };
    for method in METHODS {
        let cfg = MergeConfig {
            scope: scope.clone(),
            ..MergeConfig::with_method(method)
        };
        let (out, report) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &cfg).unwrap();
        let changed = differing(&out, &t.anchor);
        assert!(!changed.is_empty(), "{method} merged nothing");
        for name in changed {
            assert!(scope.admits(&name) && t.base.contains(&name), "{method} touched {name}");
        }
        assert_eq!(report.merged_count + report.passthrough_count, t.anchor.len());
    }
}

#[test]
fn empty_include_returns_anchor() {
    let t = fixture(&FixtureSpec::default()).unwrap();
    for method in METHODS {
        let cfg = MergeConfig {
            scope: ScopeFilter::empty(),
            ..MergeConfig::with_method(method)
        };
        let (out, report) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &cfg).unwrap();
        assert_eq!(out.digest(), t.anchor.digest());
        assert_eq!(report.merged_count, 0);
        assert_eq!(out.role(), Role::Merged);
    }
}

#[test]
fn report_describes_every_tensor() {
    let t = fixture(&FixtureSpec::default()).unwrap();
    let (out, report) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &MergeConfig::default()).unwrap();
    assert_eq!(report.tensors.len(), t.anchor.len());
    assert_eq!(report.output_digest, out.digest());
    let mean = report.mean_omega_ml.unwrap();
    assert!(sigmoid(-1.0) < mean && mean < sigmoid(1.0));
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"anchor_only\""));
}

#[test]
fn output_dtype_follows_anchor_or_f32() {
    use dimerge_core::merge::OutputDtype;
    use dimerge_core::store::DType;
    let t = fixture(&FixtureSpec {
        dtype: DType::BF16,
        ..FixtureSpec::default()
    })
    .unwrap();
    let (out, _) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &MergeConfig::default()).unwrap();
    assert!(out.iter().all(|r| r.dtype() == DType::BF16));
    let cfg = MergeConfig {
        output_dtype: OutputDtype::F32,
        ..MergeConfig::default()
    };
    let (out, _) = merge_checkpoint(&t.base, &t.ml, &t.anchor, &cfg).unwrap();
    for r in out.iter() {
        let expect = if t.base.contains(r.name()) { DType::F32 } else { DType::BF16 };
        assert_eq!(r.dtype(), expect, "{}", r.name());
    }
}

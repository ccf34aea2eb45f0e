// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::model::ModelConfig;

fn model(enc: bool) -> ModelBundle {
    let cfg = if enc {
        ModelConfig::encoder_decoder(16)
    } else {
        ModelConfig::decoder_only(16)
    };
    ModelBundle::init(ModelConfig { seed: 11, ..cfg }).unwrap()
}

fn request(inputs: &[&str], max_new: usize) -> AttributionRequest {
    AttributionRequest {
        max_new_tokens: max_new,
        ..AttributionRequest::new(inputs.iter().map(|s| s.to_string()).collect())
    }
}

fn forced(inputs: &[&str], targets: &[&str]) -> AttributionRequest {
    AttributionRequest {
        forced_targets: Some(targets.iter().map(|s| s.to_string()).collect()),
        ..request(inputs, 8)
    }
}

#[test]
fn target_cells_form_a_strict_lower_triangle() {
    let m = model(true);
    let reg = StepRegistry::new();
    let method = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::Occlusion)
    };
    let req = forced(&["w5 w6 w7"], &["w8 w9 w10 w11 w12 w13"]);
    let out = attribute(&m, &req, &method, &reg).unwrap();
    let s = &out.sequences[0];
    assert_eq!(s.n_columns(), 6);
    assert_eq!(s.populated_target_cells(), 15);
    let t = s.target_attr.as_ref().unwrap();
    assert_eq!(t.shape(), &[6, 6]);
    for r in 0..6 {
        for c in 0..6 {
            if !s.target_cell_populated(r, c) {
                assert_eq!(t.at(&[r, c]), 0.0);
            }
        }
    }
    assert_eq!(s.source_attr.shape(), &[4, 6]);
}

#[test]
fn no_target_attribution_unless_requested() {
    let m = model(false);
    let out = attribute(&m, &request(&["w5 w6"], 3), &MethodSpec::new(MethodId::Gradient), &StepRegistry::new()).unwrap();
    let s = &out.sequences[0];
    assert!(s.target_attr.is_none());
    assert_eq!(s.populated_target_cells(), 0);
    assert_eq!(s.source_attr.shape(), &[3, s.n_columns(), 16]);
}

#[test]
fn identical_rows_in_a_batch_give_identical_attributions() {
    let m = model(true);
    let method = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::InputXGradient)
    };
    let out = attribute(&m, &request(&["w5 w6 w7", "w4", "w5 w6 w7"], 4), &method, &StepRegistry::new()).unwrap();
    assert_eq!(out.sequences[0], out.sequences[2]);
    assert_eq!(out.metadata.batch_size, 3);
}

#[test]
fn occlusion_matches_a_direct_perturbation_oracle() {
    let m = model(false);
    let reg = StepRegistry::new();
    let req = forced(&["w5 w6 w7"], &["w9 w4"]);
    let out = attribute(&m, &req, &MethodSpec::new(MethodId::Occlusion), &reg).unwrap();
    let s = &out.sequences[0];
    let decoded = decode_request(&m, &req.generation(0..1)).unwrap();
    let spec = StepScoreSpec::new("probability");
    for (col, ctx) in decoded[0].step_contexts(None).unwrap().iter().enumerate() {
        let p = StepProblem::from_context(&m, &reg, &spec, ctx, None, false);
        let full = p.score_ids(&ctx.source, &ctx.prefix).unwrap();
        for i in 0..ctx.source.len() {
            let mut src = ctx.source.clone();
            src[i] = PAD_ID;
            let want = full - p.score_ids(&src, &ctx.prefix).unwrap();
            assert_eq!(s.source_attr.at(&[i, col]), want);
        }
    }
}

#[test]
fn contrastive_ig_is_the_difference_of_two_runs() {
    let m = model(true);
    let reg = StepRegistry::new();
    let base = MethodSpec {
        n_steps: 16,
        ig_max_steps: 16,
        ..MethodSpec::new(MethodId::IntegratedGradients)
    };
    let contrast = MethodSpec {
        attributed_fn: StepScoreSpec::new("contrast_prob_diff"),
        ..base.clone()
    };
    let mut req = forced(&["w5 w6"], &["w7 w8"]);
    let plain = attribute(&m, &req, &base, &reg).unwrap();
    let other = attribute(&m, &forced(&["w5 w6"], &["w9 w10"]), &base, &reg).unwrap();
    req.contrast_targets = Some(vec!["w9 w10".into()]);
    let diff = attribute(&m, &req, &contrast, &reg).unwrap();
    // Both runs share step 0, so compare column 0 only; later steps have
    // different prefixes.
    let (a, b, d) = (
        &plain.sequences[0].source_attr,
        &other.sequences[0].source_attr,
        &diff.sequences[0].source_attr,
    );
    let cols = a.shape()[1];
    for i in 0..a.shape()[0] {
        for k in 0..16 {
            let want = a.data()[(i * cols) * 16 + k] - b.data()[(i * cols) * 16 + k];
            let got = d.data()[(i * cols) * 16 + k];
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn contrast_length_mismatch_is_an_alignment_error() {
    let m = model(true);
    let mut req = forced(&["w5"], &["w7 w8"]);
    req.contrast_targets = Some(vec!["w9".into()]);
    let method = MethodSpec {
        attributed_fn: StepScoreSpec::new("contrast_prob_diff"),
        ..MethodSpec::new(MethodId::Gradient)
    };
    let err = attribute(&m, &req, &method, &StepRegistry::new()).unwrap_err();
    assert!(matches!(err, Error::Alignment(_)), "{err}");
}

#[test]
fn layer_zero_embedding_equals_input_x_gradient_row_sums() {
    let m = model(false);
    let reg = StepRegistry::new();
    let req = forced(&["w5 w6 w7"], &["w8"]);
    let ixg = attribute(&m, &req, &MethodSpec::new(MethodId::InputXGradient), &reg).unwrap();
    let gxa = MethodSpec {
        target_layer: Some(TargetLayer::Embedding),
        ..MethodSpec::new(MethodId::LayerGradientXActivation)
    };
    let layer = attribute(&m, &req, &gxa, &reg).unwrap();
    let (a, b) = (&ixg.sequences[0].source_attr, &layer.sequences[0].source_attr);
    for i in 0..a.shape()[0] {
        for c in 0..a.shape()[1] {
            let sum: f64 = (0..16).map(|k| a.at(&[i, c, k])).sum();
            assert!((sum - b.at(&[i, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_gradient_x_activation_costs_one_pass_per_step() {
    let m = model(false);
    let reg = StepRegistry::new();
    let ctx = &decode_request(&m, &forced(&["w5 w6"], &["w7 w8"]).generation(0..1)).unwrap()[0]
        .step_contexts(None)
        .unwrap()[1];
    let spec = StepScoreSpec::new("probability");
    let p = StepProblem::from_context(&m, &reg, &spec, ctx, None, true);
    m.reset_pass_counts();
    let (src, pre) = layer_gradient_x_activation(&p, TargetLayer::Block(1)).unwrap();
    let counts = m.pass_counts();
    assert_eq!((counts.forward, counts.backward), (1, 1));
    assert_eq!(src.len(), 3);
    assert_eq!(pre.unwrap().len(), 1);
}

#[test]
fn attention_rows_sum_to_one_over_all_keys() {
    let m = model(false);
    let method = MethodSpec {
        attribute_target: true,
        ..MethodSpec::new(MethodId::Attention)
    };
    let out = attribute(&m, &request(&["w5 w6 w7"], 3), &method, &StepRegistry::new()).unwrap();
    let s = &out.sequences[0];
    let t = s.target_attr.as_ref().unwrap();
    for c in 0..s.n_columns() {
        let mut total: f64 = (0..s.source_attr.shape()[0]).map(|i| s.source_attr.at(&[i, c])).sum();
        total += (0..t.shape()[0]).map(|r| t.at(&[r, c])).sum::<f64>();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
}

#[test]
fn target_layer_is_rejected_where_unsupported() {
    let m = model(false);
    let reg = StepRegistry::new();
    for id in [MethodId::Occlusion, MethodId::Lime, MethodId::GradientShap] {
        let spec = MethodSpec {
            target_layer: Some(TargetLayer::Block(0)),
            ..MethodSpec::new(id)
        };
        assert!(matches!(spec.validate(&m, &reg), Err(Error::Method(_))));
    }
    let out_of_range = MethodSpec {
        target_layer: Some(TargetLayer::Block(2)),
        ..MethodSpec::new(MethodId::Gradient)
    };
    assert!(out_of_range.validate(&m, &reg).is_err());
    assert!(MethodSpec::new(MethodId::LayerGradientXActivation).validate(&m, &reg).is_err());
    assert_eq!(MethodId::parse("lime").unwrap(), MethodId::Lime);
    assert!(MethodId::parse("saliency").is_err());
}

#[test]
fn ig_reports_convergence_per_step() {
    let m = model(false);
    let out = attribute(
        &m,
        &forced(&["w5 w6"], &["w7"]),
        &MethodSpec::new(MethodId::IntegratedGradients),
        &StepRegistry::new(),
    )
    .unwrap();
    let s = &out.sequences[0];
    let deltas = s.ig_convergence_delta.as_ref().unwrap();
    assert_eq!(deltas.len(), s.n_columns());
    assert!(out.metadata.ig_max_delta.is_some());
}

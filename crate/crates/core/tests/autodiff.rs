mod common;

use asymprune::model::FeedForward;
use common::{model_gradcheck, primitive_gradchecks};

#[test]
fn every_primitive_passes_gradcheck() {
    for (name, err) in primitive_gradchecks() {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn one_plus_one_layer_model_passes_gradcheck() {
    for (ff, tied) in [(FeedForward::Relu, true), (FeedForward::GatedGelu, false)] {
        let err = model_gradcheck(ff, tied);
        assert!(err < 1e-4, "{ff:?}: {err}");
    }
}

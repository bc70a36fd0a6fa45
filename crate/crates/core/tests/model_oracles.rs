//! Model outputs and losses against plain-loop reference computations.

mod support;

use c2mf::fusion::{compute_csic, fuse_weighted_mean};
use c2mf::model::Activation;
use c2mf::training::loss_total;
use c2mf::{Batch, FusionMethod, FusionModel, ModelConfig, ParamStore, PredictiveDistribution, Tape};
use support::{max_abs_diff, random_features, rng};

/// `x W + b` layer by layer with ReLU between layers, reading the weights
/// by name.
fn naive_mlp(store: &ParamStore, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..layers {
        let w = store.value(store.find(&format!("{prefix}.layer{l}.weight")).unwrap());
        let b = store.value(store.find(&format!("{prefix}.layer{l}.bias")).unwrap());
        let mut out = vec![0.0; w.cols()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = b.get(0, j);
            for (i, hi) in h.iter().enumerate() {
                s += hi * w.get(i, j);
            }
            *o = if l + 1 < layers { s.max(0.0) } else { s };
        }
        h = out;
    }
    h
}

fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn model(method: FusionMethod, seed: u64) -> FusionModel {
    let cfg = ModelConfig::new(vec![5, 3, 4], 4, method, seed);
    assert_eq!(cfg.activation, Activation::Relu);
    FusionModel::new(cfg).unwrap()
}

#[test]
fn unimodal_and_fused_outputs_match_references() {
    for method in FusionMethod::ALL {
        let model = model(method, 3);
        let store = model.store();
        let mut r = rng(9);
        let n = 40;
        let features = random_features(&mut r, &model.config().input_dims, n, 3.0);
        let out = model.predict(&features).unwrap();
        let circuit = model.circuit();
        for (i, inst) in out.iter().enumerate() {
            let mut embeddings = Vec::new();
            let mut preds = Vec::new();
            for (m, f) in features.iter().enumerate() {
                let h = naive_mlp(store, &format!("encoder.{m}"), 2, f.row(i));
                let p = naive_softmax(&naive_mlp(store, &format!("predictor.{m}"), 1, &h));
                assert!(max_abs_diff(&p, inst.unimodal[m].probs()) < 1e-12, "{method}");
                embeddings.extend(h);
                preds.push(PredictiveDistribution::new(p).unwrap());
            }
            let weights = match method {
                FusionMethod::Dpc | FusionMethod::Cwm => model.static_weights().unwrap().weights(store),
                FusionMethod::C2dpc | FusionMethod::C2wm => {
                    let z = naive_mlp(store, "aggregator", 2, &embeddings);
                    model.hypernet().unwrap().weights(store, &z).unwrap()
                }
            };
            let report = compute_csic(&circuit, &weights, &preds).unwrap();
            let fused = if method.is_weighted_mean() {
                fuse_weighted_mean(&report, &preds).unwrap()
            } else {
                report.full_posterior.clone()
            };
            // Relative CSIC divides by the CSIC total, so an absolute error of
            // 1e-12 in each KL becomes roughly 2e-12 / total after the division.
            // Weighted-mean fusion inherits that through its weights.
            let total: f64 = report.csic.iter().sum();
            let divided = 1e-12 + 4e-12 / total;
            let fused_tol = if method.is_weighted_mean() { divided } else { 1e-12 };
            let diff = max_abs_diff(fused.probs(), inst.fused.probs());
            assert!(diff < fused_tol, "{method}: {diff} with total {total}");
            assert!(max_abs_diff(&report.csic, &inst.credibility.csic) < 1e-12, "{method}");
            let rel = max_abs_diff(&report.relative_csic, &inst.credibility.relative_csic);
            assert!(rel < divided, "{method}: {rel} with total {total}");
        }
    }
}

#[test]
fn total_loss_matches_a_loop_oracle() {
    for method in FusionMethod::ALL {
        let model = model(method, 4);
        let mut r = rng(5);
        let n = 7;
        let features = random_features(&mut r, &model.config().input_dims, n, 3.0);
        let labels: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % 4).collect();
        let out = model.predict(&features).unwrap();
        let mu = 0.7;
        let mut lf = 0.0;
        let mut lu = 0.0;
        for (inst, &y) in out.iter().zip(&labels) {
            lf -= inst.fused.probs()[y].max(1e-12).ln();
            for p in &inst.unimodal {
                lu -= p.probs()[y].ln();
            }
        }
        let want = (lf + mu * lu) / n as f64;
        let mut tape = Tape::new();
        let batch = Batch { features, labels };
        let (_, vars) = loss_total(&mut tape, &model, &batch, mu).unwrap();
        let got = tape.value(vars.objective).item();
        assert!((got - want).abs() < 1e-10, "{method}: {got} vs {want}");
    }
}

//! Cross-module integration: synthetic model -> sampling -> decomposition
//! -> container roundtrip -> fold -> forward/FLOPs consistency.

use dwdecomp::decompose::{
    decompose_network, CompensationMode, MethodTag, NetworkDecomposeOptions,
};
use dwdecomp::harness::{gen_synthetic_network, SyntheticLayerSpec, SyntheticNetSpec};
use dwdecomp::netmodel::{
    deserialize_model, flops_and_speedup, serialize_model, Activation, Layer,
};
use dwdecomp::sampler::SamplingConfig;

fn spec(seed: u64, ground_truth: bool) -> SyntheticNetSpec {
    SyntheticNetSpec {
        name: format!("pipe{seed}"),
        input: (5, 12, 12),
        layers: vec![
            SyntheticLayerSpec::conv3x3(8, Activation::Relu),
            SyntheticLayerSpec {
                out_channels: 6,
                kh: 1,
                kw: 1,
                stride: (1, 1),
                padding: (0, 0),
                activation: Activation::Relu,
            },
            SyntheticLayerSpec::conv3x3(7, Activation::Identity),
        ],
        seed,
        separable_ground_truth: ground_truth,
    }
}

#[test]
fn decompose_roundtrip_fold_and_flops_agree() {
    let (model, images) = gen_synthetic_network(&spec(21, false)).unwrap();
    let cfg = SamplingConfig::new(8, 20, 77).unwrap();

    for method in [MethodTag::Dw, MethodTag::DwComp, MethodTag::Channel] {
        let opts = NetworkDecomposeOptions {
            method,
            speedup: 4.0,
            mode: CompensationMode::default(),
            compensate_layers: true,
            layers: None,
        };
        let (decomposed, outcomes) = decompose_network(&model, &images, &cfg, &opts).unwrap();

        // The 1x1 layer is skipped with a notice; the two 3x3 layers decompose.
        assert_eq!(outcomes.len(), 3);
        assert!(outcomes.iter().any(|o| o.note.is_some()));
        assert_eq!(outcomes.iter().filter(|o| o.report.is_some()).count(), 2);

        // Emitted separable layers cost exactly c·kh·kw + n·c per position
        // according to the model's own accounting.
        for o in &outcomes {
            if let Some(rep) = &o.report {
                if method != MethodTag::Channel {
                    let layer = &decomposed.layers()[o.layer_id].0;
                    assert_eq!(rep.flops_after, layer.flops_per_position());
                }
            }
        }

        // Container roundtrip preserves forward outputs bit-for-bit.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dwnet");
        serialize_model(&decomposed, &path).unwrap();
        let loaded = deserialize_model(&path).unwrap();
        let img = images.image(0, model.input_signature).unwrap();
        let a = decomposed.forward(&img).unwrap();
        let b = loaded.forward(&img).unwrap();
        let bits = |t: &dwdecomp::convcore::Tensor4| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));

        // Folding the separable pairs back gives a regular-only model whose
        // outputs match the separable one.
        if method != MethodTag::Channel {
            let (folded, count) = decomposed.fold_all();
            assert_eq!(count, 2);
            assert!(folded.layers().iter().all(|(l, _)| !l.is_separable()));
            let c = folded.forward(&img).unwrap();
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (x, y) in c.data().iter().zip(a.data()) {
                num += (f64::from(*x) - f64::from(*y)).powi(2);
                den += f64::from(*y).powi(2);
            }
            assert!((num / den.max(1e-300)).sqrt() <= 1e-5);

            // Folding undoes the speed-up.
            let report =
                flops_and_speedup(&folded, Some(&decomposed), model.input_signature).unwrap();
            assert!(report.speedup.unwrap() > 1.0);
        }
    }
}

#[test]
fn ground_truth_chain_survives_whole_pipeline_with_tiny_error() {
    let (model, images) = gen_synthetic_network(&spec(22, true)).unwrap();
    let cfg = SamplingConfig::new(10, 25, 78).unwrap();
    let opts = NetworkDecomposeOptions::default();
    let (decomposed, outcomes) = decompose_network(&model, &images, &cfg, &opts).unwrap();
    for o in &outcomes {
        if let Some(err) = o.ground_truth_error {
            assert!(err <= 1e-5, "layer {} error {err}", o.layer_id);
        }
    }
    // End-to-end forward parity on fresh inputs.
    for idx in 30..34 {
        let img = images.image(idx, model.input_signature).unwrap();
        let a = model.forward(&img).unwrap();
        let b = decomposed.forward(&img).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in b.data().iter().zip(a.data()) {
            num += (f64::from(*x) - f64::from(*y)).powi(2);
            den += f64::from(*y).powi(2);
        }
        assert!((num / den.max(1e-300)).sqrt() <= 1e-5);
    }

    // Regular layers replaced in place, 1x1 untouched.
    assert!(matches!(decomposed.layers()[0].0, Layer::Separable(_)));
    assert!(matches!(decomposed.layers()[1].0, Layer::Regular(_)));
    assert!(matches!(decomposed.layers()[2].0, Layer::Separable(_)));
}

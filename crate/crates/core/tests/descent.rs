use dkt_core::fit::{penalized_objective, NOISE_FLOOR};
use dkt_core::synth::{default_spec, generate};
use dkt_core::{fit_from, initialize, BlockUpdate, FittedModel, PriorSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn every_block_update_descends(
        seed in any::<u64>(),
        ad in 6usize..14,
        pca in 3usize..8,
        noise in 0.0f64..0.1,
        flat in any::<bool>(),
        joint in any::<bool>(),
    ) {
        let mut spec = default_spec();
        spec.seed = seed;
        spec.diseases[0].subjects = ad;
        spec.diseases[1].subjects = pca;
        spec.noise_std = vec![noise; 6];
        let (data, _) = generate(&spec).unwrap();
        let mut config = spec.model_config().unwrap();
        config.optimizer.max_sweeps = 4;
        config.optimizer.seed = seed;
        config.optimizer.joint_refinement = joint;
        if flat {
            config.priors = PriorSpec::flat();
        }
        let init = initialize(&data, &config).unwrap();
        let mut last = penalized_objective(&data, &init, &config).unwrap();
        let mut rises = Vec::new();
        let mut noise_errors = Vec::new();
        let mut observer = |u: BlockUpdate, m: &FittedModel| {
            let f = penalized_objective(&data, m, &config).unwrap();
            if f > last + 1e-8 {
                rises.push((u, f - last));
            }
            last = f;
            if let BlockUpdate::Noise(k) = u {
                let r: Vec<f64> = data
                    .measurements
                    .iter()
                    .filter(|x| x.biomarker == k)
                    .map(|x| {
                        let i = x.subject;
                        x.value - m.predict(&config, data.subjects[i].disease, m.beta[i], data.months(x), k)
                    })
                    .collect();
                let msr = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).max(NOISE_FLOOR);
                if (m.epsilon[k] - msr).abs() > 1e-12 * msr {
                    noise_errors.push((k, m.epsilon[k], msr));
                }
            }
        };
        let (model, diag) = fit_from(&data, &config, init, Some(&mut observer)).unwrap();
        prop_assert!(rises.is_empty(), "{rises:?}");
        prop_assert!(noise_errors.is_empty(), "{noise_errors:?}");
        prop_assert!(diag.trace.windows(2).all(|w| w[1] <= w[0] + 1e-8));
        prop_assert_eq!(model.trace, diag.trace);
    }
}

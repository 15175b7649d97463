//! Learning per-layer drop rates with the ARM gradient estimator.

use tempered_cp::gdc::arm_estimate;
use tempered_cp::graph::resample_split;
use tempered_cp::numerics::sigmoid;
use tempered_cp::{
    arm_drop_rate_gradient, generate_sbm, train_bayesian, BayesianConfig, DropRateParams, GcnConfig, NeighborIndex,
    RngState, SbmSpec, SplitSizes,
};

fn main() -> tempered_cp::Result<()> {
    // a two-variable toy where the exact gradient is easy to enumerate
    let phi = [0.5, -1.0];
    let loss = |d: &[bool]| if d[0] && !d[1] { 1.0 } else { 0.0 };
    let mut rng = RngState::new(3);
    let n = 200_000;
    let mut mean = [0.0; 2];
    for _ in 0..n {
        let g = arm_estimate(&phi, &[rng.uniform(), rng.uniform()], loss);
        mean[0] += g[0] / n as f64;
        mean[1] += g[1] / n as f64;
    }
    let (p0, p1) = (sigmoid(phi[0]), sigmoid(phi[1]));
    let exact = [p0 * (1.0 - p0) * (1.0 - p1), -p0 * p1 * (1.0 - p1)];
    println!("toy: ARM mean {mean:.4?} exact {exact:.4?}");

    let spec = SbmSpec {
        communities: 3,
        nodes_per_community: 150,
        p_in: 0.05,
        p_out: 0.005,
        feature_noise: 1.0,
        label_noise: 0.0,
    };
    let bundle = generate_sbm(&mut rng, &spec)?;
    let sizes = SplitSizes {
        train: 60,
        calibration: 150,
        test: 200,
    };
    let split = resample_split(&mut rng, bundle.num_items(), sizes)?;
    let gcn = GcnConfig::node_classifier(bundle.feature_dim(), &[16], bundle.num_classes);
    let drop = DropRateParams::learnable_from_rate(gcn.num_layers(), 0.5);
    println!("initial drop rates {:.3?}", drop.rates());

    let config = BayesianConfig::new(gcn, drop, 1.0);
    let model = train_bayesian(&bundle, &split, &config, &mut rng, 150, 0.01)?;
    println!("learned drop rates {:.3?}", model.drop_rates());

    let index = NeighborIndex::from_bundle(&bundle);
    let g = arm_drop_rate_gradient(&model, &bundle, &index, &split.train, &mut rng)?;
    println!("one more ARM gradient sample at the end: {g:.4?}");
    Ok(())
}

//! Reliability diagram, ECE and MCE for an MC-averaged Bayesian GCN.

use tempered_cp::conformal::PredictiveTable;
use tempered_cp::graph::resample_split;
use tempered_cp::metrics::{combined_measure, DEFAULT_BINS};
use tempered_cp::{
    ece, generate_sbm, mc_predict, mce, reliability, train_bayesian, BayesianConfig, DropRateParams, GcnConfig,
    NeighborIndex, RngState, SbmSpec, SplitSizes,
};

fn main() -> tempered_cp::Result<()> {
    let mut rng = RngState::new(11);
    let spec = SbmSpec {
        communities: 3,
        nodes_per_community: 300,
        p_in: 0.03,
        p_out: 0.004,
        feature_noise: 1.2,
        label_noise: 0.1,
    };
    let bundle = generate_sbm(&mut rng, &spec)?;
    let sizes = SplitSizes {
        train: 90,
        calibration: 300,
        test: 500,
    };
    let split = resample_split(&mut rng, bundle.num_items(), sizes)?;
    let gcn = GcnConfig::node_classifier(bundle.feature_dim(), &[32], bundle.num_classes);
    let index = NeighborIndex::from_bundle(&bundle);

    for beta in [0.0, 10.0] {
        let config = BayesianConfig::new(gcn.clone(), DropRateParams::uniform_fixed(gcn.num_layers(), 0.3), beta);
        let model = train_bayesian(&bundle, &split, &config, &mut rng.substream(&[1]), 100, 0.01)?;
        let masks = model.sample_masks(&mut rng.substream(&[2]), &index, 20)?;
        let table: PredictiveTable = mc_predict(&model, &bundle, &index, &masks)?;
        let diagram = reliability(&table.probs, &table.labels, &split.test, DEFAULT_BINS)?;
        let accuracy = tempered_cp::gcn::accuracy(&table.probs, &table.labels, &split.test);
        let worst = mce(&diagram)?;
        println!(
            "beta {beta}: accuracy {accuracy:.3} ECE {:.4} MCE {worst:.4} MCE/acc {:?}",
            ece(&diagram)?,
            combined_measure(worst, accuracy)
        );
        for (i, bin) in diagram.bins().iter().enumerate().filter(|(_, b)| b.count > 0) {
            println!(
                "  ({:.2}, {:.2}]  n={:<4} acc {:.3} conf {:.3}",
                i as f64 / DEFAULT_BINS as f64,
                (i + 1) as f64 / DEFAULT_BINS as f64,
                bin.count,
                bin.accuracy,
                bin.confidence
            );
        }
    }
    Ok(())
}

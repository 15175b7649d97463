//! Train a plain GCN on a stochastic block model and calibrate it.

use tempered_cp::conformal::{run_scp, ConformalConfig, PredictiveTable};
use tempered_cp::graph::resample_split;
use tempered_cp::metrics::{evaluate, DEFAULT_BINS};
use tempered_cp::{generate_sbm, train_frequentist, GcnConfig, NeighborIndex, RngState, SbmSpec, SplitSizes};

fn main() -> tempered_cp::Result<()> {
    let mut rng = RngState::new(7);
    let spec = SbmSpec {
        communities: 4,
        nodes_per_community: 250,
        p_in: 0.03,
        p_out: 0.003,
        feature_noise: 1.0,
        label_noise: 0.0,
    };
    let bundle = generate_sbm(&mut rng, &spec)?;
    let sizes = SplitSizes {
        train: 120,
        calibration: 400,
        test: 480,
    };
    let split = resample_split(&mut rng, bundle.num_items(), sizes)?;

    let mut config = GcnConfig::node_classifier(bundle.feature_dim(), &[16], bundle.num_classes);
    config.weight_decay = 5e-3;
    config.dropout_rate = 0.5;
    let model = train_frequentist(&bundle, &split, &config, &mut rng, 100, 0.01)?;
    println!("final training loss {:.4}", model.log.final_loss().unwrap_or(f64::NAN));

    let index = NeighborIndex::from_bundle(&bundle);
    let table = PredictiveTable::new(model.predict(&bundle, &index)?, bundle.labels.clone())?;
    let result = run_scp(&table, &split, &ConformalConfig::default())?;
    let (report, _) = evaluate(&table.probs, &table.labels, &split.test, &result, DEFAULT_BINS)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

//! Split conformal prediction on a hand-made predictive table.

use tempered_cp::conformal::{build_prediction_set, conformal_quantile, nll_score, run_scp, ConformalConfig, PredictiveTable};
use tempered_cp::{Matrix, SplitSpec};

fn main() -> tempered_cp::Result<()> {
    let p = [0.7, 0.2, 0.1];
    for y in 0..3 {
        println!("score(y={y}) = {:.4}", nll_score(&p, y)?);
    }
    println!("set at threshold 1.7: {:?}", build_prediction_set(0, &p, 1.7).labels);

    let scores = [0.1, 0.4, 0.4, 0.9, 1.3];
    for alpha in [0.1, 0.3, 0.5] {
        println!("alpha {alpha}: threshold {}", conformal_quantile(&scores, alpha)?);
    }

    let probs = Matrix::from_rows(&[
        vec![0.8, 0.1, 0.1],
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.7, 0.1],
        vec![0.1, 0.2, 0.7],
        vec![0.3, 0.4, 0.3],
        vec![0.5, 0.4, 0.1],
        vec![0.1, 0.8, 0.1],
        vec![0.2, 0.2, 0.6],
    ])?;
    let table = PredictiveTable::new(probs, vec![0, 1, 1, 2, 0, 0, 1, 2])?;
    let split = SplitSpec {
        train: vec![],
        calibration: vec![0, 1, 2, 3, 4],
        test: vec![5, 6, 7],
        seed: 0,
    };
    let result = run_scp(&table, &split, &ConformalConfig { alpha: 0.2, force_nonempty: false })?;
    println!("threshold {}", result.threshold);
    for (set, covered) in result.sets.iter().zip(&result.covered) {
        println!("item {}: {:?} covered={covered}", set.item, set.labels);
    }
    Ok(())
}

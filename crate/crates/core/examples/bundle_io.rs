//! Writing, reading and validating a graph bundle directory.
//!
//! Usage: `cargo run --example bundle_io [dir]`

use tempered_cp::{generate_sbm, load_bundle, save_bundle, RngState, SbmSpec};

fn main() -> tempered_cp::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "sbm_bundle".into());
    let spec = SbmSpec {
        communities: 3,
        nodes_per_community: 40,
        p_in: 0.2,
        p_out: 0.02,
        feature_noise: 0.5,
        label_noise: 0.0,
    };
    let mut bundle = generate_sbm(&mut RngState::new(5), &spec)?;
    bundle.name = "toy-sbm".into();
    // a fixed public training split, honoured instead of resampling
    bundle.train_index = Some((0..bundle.num_nodes).step_by(6).collect());
    save_bundle(&bundle, &dir)?;

    let loaded = load_bundle(&dir)?;
    assert_eq!(loaded, bundle);
    println!(
        "{}: {} nodes, {} edges, {} features, {} classes, {} fixed training nodes",
        loaded.name,
        loaded.num_nodes,
        loaded.undirected_edge_count(),
        loaded.feature_dim(),
        loaded.num_classes,
        loaded.train_index.as_ref().map_or(0, Vec::len)
    );
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    println!("  files: {}", files.join(", "));
    Ok(())
}

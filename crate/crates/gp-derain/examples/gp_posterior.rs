//! Conditions a query latent on a small hand-built store and prints the
//! nearest/farthest neighbor sets, the posterior, and the pseudo-GT pair
//! an unlabeled training step would consume.
//!
//!     cargo run --example gp_posterior

use gp_derain::gp::{
    pseudo_gt, select_neighbors, GpConfig, LatentStore, LatentVector, NeighborKind,
};
use gp_derain::Result;

fn main() -> Result<()> {
    // Two clusters in a 4-d latent space: rows 0-2 lean toward e0, rows
    // 3-5 toward e1. A query near the first cluster should draw its
    // pseudo ground truth from rows 0-2 and its far variance from 3-5.
    let rows = [
        (vec![1.0, 0.1, 0.0, 0.0], "labeled/0000"),
        (vec![0.9, 0.2, 0.1, 0.0], "labeled/0001"),
        (vec![1.1, 0.0, 0.0, 0.1], "labeled/0002"),
        (vec![0.1, 1.0, 0.0, 0.0], "labeled/0003"),
        (vec![0.0, 0.9, 0.2, 0.0], "labeled/0004"),
        (vec![0.2, 1.1, 0.0, 0.1], "labeled/0005"),
    ];
    let mut store = LatentStore::new(0);
    for (values, id) in rows {
        store.push(LatentVector::new(values, id)?)?;
    }
    let query = LatentVector::new(vec![1.0, 0.15, 0.05, 0.0], "query")?;

    let cfg = GpConfig {
        n_nearest: 3,
        n_farthest: 3,
        ..GpConfig::default()
    };

    for kind in [NeighborKind::Nearest, NeighborKind::Farthest] {
        let set = select_neighbors(&query, &store, 3, kind)?;
        println!("{kind:?} neighbors:");
        for (&i, &s) in set.indices.iter().zip(&set.similarities) {
            println!("  {}  similarity {s:.6}", store.rows()[i].source_id());
        }
    }

    let (posterior, far_variance) = pseudo_gt(&query, &store, &cfg)?;
    println!("\nposterior mean      {:?}", round4(&posterior.mean));
    println!("solve weights       {:?}", round4(&posterior.weights));
    println!("near-side variance  {:.6}", posterior.variance);
    println!("far-side variance   {:.6}", far_variance.unwrap());
    println!(
        "\nthe unsupervised loss pulls the query latent toward the mean and\n\
         penalizes ln(near variance) and ln(1 - far variance), so a tight\n\
         near cluster and a distant far cluster are both rewarded"
    );
    Ok(())
}

fn round4(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

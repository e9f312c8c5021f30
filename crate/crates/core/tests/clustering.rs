//! Compares the clustering stage against frozen reference partitions in
//! tests/fixtures/hdbscan/. Each fixture stores points, parameters, and
//! the labels an independent reference implementation produced for them;
//! agreement is measured with the adjusted Rand index so label numbering
//! is free to differ.

use std::path::PathBuf;

use serde::Deserialize;
use splatground::eval::adjusted_rand_index;
use splatground::ground::{cluster, ClusterParams};

#[derive(Deserialize)]
struct Fixture {
    name: String,
    dim: usize,
    params: FixtureParams,
    points: Vec<Vec<f64>>,
    labels: Vec<i32>,
}

#[derive(Deserialize)]
struct FixtureParams {
    min_cluster_size: usize,
    min_samples: usize,
    cluster_selection_epsilon: f64,
    allow_single_cluster: bool,
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hdbscan")
}

fn load_fixture(name: &str) -> Fixture {
    let path = fixture_dir().join(format!("{name}.json"));
    let data = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("fixture {} unreadable: {e}", path.display()));
    serde_json::from_str(&data).expect("fixture parses")
}

fn check_fixture(name: &str) -> f64 {
    let fx = load_fixture(name);
    assert_eq!(fx.name, name);
    let flat: Vec<f64> = fx.points.iter().flatten().copied().collect();
    let params = ClusterParams {
        min_cluster_size: fx.params.min_cluster_size,
        min_samples: fx.params.min_samples,
        cluster_selection_epsilon: fx.params.cluster_selection_epsilon,
        allow_single_cluster: fx.params.allow_single_cluster,
    };
    let labels = cluster(&flat, fx.dim, &params).expect("clustering succeeds");
    let ari = adjusted_rand_index(&labels, &fx.labels).expect("comparable labelings");
    let ours = labels.iter().filter(|&&l| l >= 0).collect::<std::collections::BTreeSet<_>>();
    let theirs = fx.labels.iter().filter(|&&l| l >= 0).collect::<std::collections::BTreeSet<_>>();
    println!(
        "{name}: ari {ari:.4}, clusters {} vs reference {}",
        ours.len(),
        theirs.len()
    );
    assert!(ari >= 0.95, "{name}: adjusted Rand index {ari} below 0.95");
    ari
}

#[test]
fn three_blobs_matches_reference() {
    check_fixture("three_blobs");
}

#[test]
fn blobs_with_noise_matches_reference() {
    check_fixture("blobs_with_noise");
}

#[test]
fn mixed_density_matches_reference() {
    check_fixture("mixed_density");
}

#[test]
fn near_pair_matches_reference() {
    check_fixture("near_pair");
}

#[test]
fn near_pair_epsilon_matches_reference() {
    check_fixture("near_pair_epsilon");
}

#[test]
fn epsilon_floor_changes_the_near_pair_partition() {
    // The two fixtures share points; the distance floor must merge the
    // adjacent pair of blobs.
    let plain = load_fixture("near_pair");
    let eps = load_fixture("near_pair_epsilon");
    let count = |labels: &[i32]| {
        labels.iter().filter(|&&l| l >= 0).collect::<std::collections::BTreeSet<_>>().len()
    };
    assert_eq!(count(&plain.labels), 3);
    assert_eq!(count(&eps.labels), 2);
}

#[test]
fn duplicate_points_matches_reference() {
    check_fixture("duplicate_points");
}

#[test]
fn single_cluster_matches_reference() {
    check_fixture("single_cluster");
}

#[test]
fn single_cluster_epsilon_matches_reference() {
    check_fixture("single_cluster_epsilon");
}

#[test]
fn planted_blobs_match_reference() {
    check_fixture("planted_blobs");
}

#[test]
fn duplicating_a_whole_blob_keeps_the_cluster_count() {
    check_fixture("planted_blobs_duplicated");
    let a = load_fixture("planted_blobs");
    let b = load_fixture("planted_blobs_duplicated");
    let count = |labels: &[i32]| {
        labels.iter().filter(|&&l| l >= 0).collect::<std::collections::BTreeSet<_>>().len()
    };
    assert_eq!(count(&a.labels), count(&b.labels));
}

#[test]
fn sphere_points_come_out_as_noise() {
    let fx = load_fixture("sphere_noise");
    let flat: Vec<f64> = fx.points.iter().flatten().copied().collect();
    let params = ClusterParams {
        min_cluster_size: fx.params.min_cluster_size,
        min_samples: fx.params.min_samples,
        cluster_selection_epsilon: fx.params.cluster_selection_epsilon,
        allow_single_cluster: fx.params.allow_single_cluster,
    };
    let labels = cluster(&flat, fx.dim, &params).expect("clustering succeeds");
    assert_eq!(labels, fx.labels, "reference labels everything noise");
    assert!(labels.iter().all(|&l| l == -1));
}

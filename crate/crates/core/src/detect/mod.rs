//! Gradient-based detection and clustering.

mod cluster;
mod sgbd;

pub use cluster::{
    dbscan_cluster, extract_point_detections, sort_clusters, write_clusters_csv, Cluster, DbscanConfig,
};
pub use sgbd::{calibrate_scale, sgbd_raw, sgbd_score, threshold_detect, ScoreMap, SgbdConfig};

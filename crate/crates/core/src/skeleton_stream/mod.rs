//! The skeleton stream: ST-GCN or stacked Bi-LSTM feature extraction.

pub mod gcn;
pub mod graph;
pub mod lstm;

pub use gcn::{graph_conv, skeleton_to_ctv, stgcn_forward, GraphConv, Stgcn, StgcnConfig};
pub use graph::{build_graph, normalize_partition, PartitionStrategy, SkeletonGraph, DEGREE_EPS};
pub use lstm::{bilstm_forward, lstm_cell, skeleton_steps, BiLstm, LstmCellWeights, LstmConfig};

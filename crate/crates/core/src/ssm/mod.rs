//! Linear-time selective scan and the bidirectional scan block built on it.

pub mod block;
pub mod probe;
pub mod scan;

pub use block::{mamba_block_forward, BlockVars, DirectionParams, ScanConfig, SsmBlockParams};
pub use probe::{complexity_probe, scan_flops, ProbeConfig, ProbeReport, ProbeRow};
pub use scan::{discretize, scan_sequence, selective_scan, Discretized, ScanDims, ScanFootprint, ScanState};

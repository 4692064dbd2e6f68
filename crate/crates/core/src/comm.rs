//! Closed-form collective and point-to-point transfer times.

use serde::{Deserialize, Serialize};

use crate::arch::{ClusterSpec, NetworkLink, Topology};
use crate::error::{Error, Result};
use crate::parallelism::{CommKind, CommOp, CommScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveAlgo {
    Ring,
    Tree,
}

impl From<Topology> for CollectiveAlgo {
    fn from(t: Topology) -> Self {
        match t {
            Topology::Ring => CollectiveAlgo::Ring,
            Topology::DoubleBinaryTree => CollectiveAlgo::Tree,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveRequest {
    /// Bytes reduced.
    pub volume: f64,
    pub participants: u32,
    pub link: NetworkLink,
}

fn bandwidth_term(req: &CollectiveRequest) -> f64 {
    let n = req.participants as f64;
    2.0 * req.volume * (n - 1.0) / (n * req.link.effective_bandwidth())
}

/// Bandwidth-optimal ring: latency grows linearly with participants.
pub fn ring_allreduce(req: &CollectiveRequest) -> f64 {
    if req.participants <= 1 {
        return 0.0;
    }
    let n = req.participants as f64;
    bandwidth_term(req) + 2.0 * req.link.latency * (n - 1.0)
}

/// Double binary tree: same bandwidth term, logarithmic latency.
pub fn tree_allreduce(req: &CollectiveRequest) -> f64 {
    if req.participants <= 1 {
        return 0.0;
    }
    let n = req.participants as f64;
    bandwidth_term(req) + 2.0 * req.link.latency * n.log2()
}

pub fn allreduce(req: &CollectiveRequest, algo: CollectiveAlgo) -> f64 {
    match algo {
        CollectiveAlgo::Ring => ring_allreduce(req),
        CollectiveAlgo::Tree => tree_allreduce(req),
    }
}

/// Link an op travels on; inter-node bandwidth is shared by every device on
/// the node since each drives its own group concurrently.
pub fn link_for(scope: CommScope, cluster: &ClusterSpec) -> NetworkLink {
    match scope {
        CommScope::IntraNode => cluster.intra_link.clone(),
        CommScope::InterNode => {
            let mut link = cluster.inter_link.clone();
            link.bandwidth /= cluster.devices_per_node as f64;
            link
        }
    }
}

pub fn price_comm_op(op: &CommOp, cluster: &ClusterSpec, algo: CollectiveAlgo) -> Result<f64> {
    price_comm_op_on(op, &link_for(op.scope, cluster), cluster, algo)
}

/// Price on an explicit link (used when callers override utilization).
pub fn price_comm_op_on(op: &CommOp, link: &NetworkLink, cluster: &ClusterSpec, algo: CollectiveAlgo) -> Result<f64> {
    if op.scope == CommScope::IntraNode && op.group_size > cluster.devices_per_node {
        return Err(Error::MixedScope(format!(
            "{:?} group of {} exceeds {} devices per node",
            op.kind, op.group_size, cluster.devices_per_node
        )));
    }
    let req = CollectiveRequest {
        volume: op.volume,
        participants: op.group_size,
        link: link.clone(),
    };
    Ok(match op.kind {
        CommKind::AllReduce => allreduce(&req, algo),
        CommKind::AllGather | CommKind::ReduceScatter => 0.5 * allreduce(&req, algo),
        CommKind::P2p => {
            if op.group_size <= 1 && op.volume == 0.0 {
                0.0
            } else {
                op.volume / link.effective_bandwidth() + link.latency
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallelism::CommPhase;

    fn link(bw: f64, lat: f64) -> NetworkLink {
        NetworkLink {
            name: "test".into(),
            bandwidth: bw,
            latency: lat,
            utilization: 1.0,
            topology: Topology::Ring,
        }
    }

    fn req(k: f64, n: u32, bw: f64, lat: f64) -> CollectiveRequest {
        CollectiveRequest { volume: k, participants: n, link: link(bw, lat) }
    }

    #[test]
    fn ring_examples() {
        assert!((ring_allreduce(&req(2e9, 4, 1e11, 1e-6)) - 0.030006).abs() < 1e-12);
        assert_eq!(ring_allreduce(&req(2e9, 1, 1e11, 1e-6)), 0.0);
        assert!((ring_allreduce(&req(1e9, 1024, 1e11, 0.0)) - 0.019980469).abs() < 1e-9);
    }

    #[test]
    fn tree_examples() {
        assert!((tree_allreduce(&req(2e9, 4, 1e11, 1e-6)) - 0.030004).abs() < 1e-12);
        assert_eq!(tree_allreduce(&req(2e9, 1, 1e11, 1e-6)), 0.0);
        assert!((tree_allreduce(&req(0.0, 8, 1e11, 5e-6)) - 3e-5).abs() < 1e-18);
    }

    #[test]
    fn utilization_derates_bandwidth() {
        let mut r = req(1e9, 2, 1e11, 0.0);
        let full = ring_allreduce(&r);
        r.link.utilization = 0.5;
        assert!((ring_allreduce(&r) / full - 2.0).abs() < 1e-12);
    }

    #[test]
    fn halves_for_single_stage_collectives() {
        use crate::arch::{DeviceDescription, LevelDescription};
        use std::collections::BTreeMap;
        let device = crate::arch::resolve_device(&DeviceDescription {
            name: "d".into(),
            throughput: BTreeMap::from([("fp16".into(), 1e14)]),
            levels: BTreeMap::from([
                ("L2".into(), LevelDescription { capacity: 1e7, bandwidth: 1e12 }),
                ("DRAM".into(), LevelDescription { capacity: 1e10, bandwidth: 1e12 }),
            ]),
        })
        .unwrap();
        let cluster = ClusterSpec {
            name: "c".into(),
            device,
            devices_per_node: 8,
            intra_link: link(3e11, 2e-6),
            inter_link: link(2e11, 5e-6),
            total_devices: 16,
        };
        let ar = CommOp {
            kind: CommKind::AllReduce,
            volume: 16_777_216.0,
            group_size: 8,
            scope: CommScope::IntraNode,
            phase: CommPhase::Fwd,
        };
        let t = price_comm_op(&ar, &cluster, CollectiveAlgo::Ring).unwrap();
        let expected = 2.0 * 16_777_216.0 * 7.0 / (8.0 * 3e11) + 2.0 * 2e-6 * 7.0;
        assert!((t - expected).abs() < 1e-15);
        assert!((t - 1.259e-4).abs() < 1e-7);
        let ag = CommOp { kind: CommKind::AllGather, ..ar.clone() };
        assert!((price_comm_op(&ag, &cluster, CollectiveAlgo::Ring).unwrap() - t / 2.0).abs() < 1e-18);
        let one = CommOp { group_size: 1, ..ar.clone() };
        assert_eq!(price_comm_op(&one, &cluster, CollectiveAlgo::Tree).unwrap(), 0.0);
        let wide = CommOp { group_size: 16, ..ar };
        assert!(matches!(
            price_comm_op(&wide, &cluster, CollectiveAlgo::Ring),
            Err(Error::MixedScope(_))
        ));
    }
}

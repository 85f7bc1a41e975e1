//! Named, runtime-selectable routing strategies and attention kernels.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::{
    build_varlen_pack, dense_attention, varlen_attention, AttentionInputs, AttentionOutput,
    AttentionPlan,
};
use crate::error::{MocError, Result};
use crate::lattice::{ChunkPartition, TokenStream};
use crate::router::{build_routing_table, build_shared_routing_table, RoutingConfig, RoutingTable};

pub trait RouteStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn route(
        &self,
        inputs: &AttentionInputs,
        partition: &ChunkPartition,
        stream: &TokenStream,
        config: &RoutingConfig,
    ) -> Result<RoutingTable>;
}

pub trait AttentionKernel: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &AttentionInputs, plan: AttentionPlan<'_>) -> Result<AttentionOutput>;
}

/// Independent top-k per (head, query token).
pub struct PerTokenRouting;

impl RouteStrategy for PerTokenRouting {
    fn name(&self) -> &'static str {
        "per-token"
    }

    fn route(
        &self,
        inputs: &AttentionInputs,
        partition: &ChunkPartition,
        stream: &TokenStream,
        config: &RoutingConfig,
    ) -> Result<RoutingTable> {
        build_routing_table(inputs, partition, stream, config)
    }
}

/// One top-k per (head, chunk) from the chunk's mean query.
pub struct SharedChunkRouting;

impl RouteStrategy for SharedChunkRouting {
    fn name(&self) -> &'static str {
        "shared-chunk"
    }

    fn route(
        &self,
        inputs: &AttentionInputs,
        partition: &ChunkPartition,
        stream: &TokenStream,
        config: &RoutingConfig,
    ) -> Result<RoutingTable> {
        build_shared_routing_table(inputs, partition, stream, config)
    }
}

/// Ignores the plan and attends every key.
pub struct DenseKernel;

impl AttentionKernel for DenseKernel {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, inputs: &AttentionInputs, _plan: AttentionPlan<'_>) -> Result<AttentionOutput> {
        dense_attention(inputs)
    }
}

/// Per-query gather of the selected token set.
pub struct GatherKernel;

impl AttentionKernel for GatherKernel {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn forward(&self, inputs: &AttentionInputs, plan: AttentionPlan<'_>) -> Result<AttentionOutput> {
        match plan {
            AttentionPlan::Dense => dense_attention(inputs),
            AttentionPlan::Routed { table, partition } => {
                crate::attention::moc_attention(inputs, table, partition)
            }
        }
    }
}

/// Packs queries with identical selections, then evaluates group by group.
pub struct VarLenKernel;

impl AttentionKernel for VarLenKernel {
    fn name(&self) -> &'static str {
        "varlen"
    }

    fn forward(&self, inputs: &AttentionInputs, plan: AttentionPlan<'_>) -> Result<AttentionOutput> {
        match plan {
            AttentionPlan::Dense => dense_attention(inputs),
            AttentionPlan::Routed { table, partition } => {
                let pack = build_varlen_pack(table, partition)?;
                varlen_attention(inputs, &pack)
            }
        }
    }
}

/// Name -> implementation map for one strategy family.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, item: Arc<T>) {
        self.entries.insert(name.to_string(), item);
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| MocError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

pub struct Strategies {
    pub routers: Registry<dyn RouteStrategy>,
    pub kernels: Registry<dyn AttentionKernel>,
}

impl Strategies {
    pub fn empty() -> Self {
        Self {
            routers: Registry::new("routing strategy"),
            kernels: Registry::new("attention kernel"),
        }
    }

    pub fn register_router(&mut self, r: Arc<dyn RouteStrategy>) {
        let name = r.name();
        self.routers.register(name, r);
    }

    pub fn register_kernel(&mut self, k: Arc<dyn AttentionKernel>) {
        let name = k.name();
        self.kernels.register(name, k);
    }
}

impl Default for Strategies {
    fn default() -> Self {
        let mut s = Self::empty();
        s.register_router(Arc::new(PerTokenRouting));
        s.register_router(Arc::new(SharedChunkRouting));
        s.register_kernel(Arc::new(DenseKernel));
        s.register_kernel(Arc::new(GatherKernel));
        s.register_kernel(Arc::new(VarLenKernel));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_registered() {
        let s = Strategies::default();
        assert_eq!(s.routers.names(), vec!["per-token", "shared-chunk"]);
        assert_eq!(s.kernels.names(), vec!["dense", "gather", "varlen"]);
        assert_eq!(s.kernels.get("varlen").unwrap().name(), "varlen");
    }

    #[test]
    fn unknown_name_errors() {
        let s = Strategies::default();
        assert!(matches!(
            s.routers.get("learned"),
            Err(MocError::UnknownStrategy { .. })
        ));
    }
}

//! Mixture-of-contexts sparse attention.
//!
//! A long multi-modal token stream is cut into content-aligned chunks
//! ([`lattice`]); every query picks the `k` chunks whose mean key best matches
//! it, on top of forced caption and same-shot links ([`router`]); attention is
//! then evaluated only over the selected tokens ([`attention`]). [`outer`]
//! adds a coarse shot-level pre-selection, [`cost`] the FLOPs model, and
//! [`registry`] exposes the interchangeable routing and attention variants by
//! name.

pub mod attention;
pub mod cost;
pub mod error;
pub mod lattice;
pub mod outer;
pub mod reference;
pub mod registry;
pub mod rng;
pub mod router;
pub mod scene;
pub mod schedule;
pub mod tensor;

pub use attention::{
    attention_vjp, build_varlen_pack, dense_attention, moc_attention, varlen_attention,
    AttentionInputs, AttentionOutput, AttentionPlan, Gradients, VarLenPack,
};
pub use cost::{flops_dense, flops_moc, flops_ratio, measured_sparsity, CostParams, CostReport};
pub use error::{MocError, Result};
pub use lattice::{
    build_chunks, chunk_lookup, tag_boundaries, CaptionScope, Chunk, ChunkPartition, Modality,
    ShotLayout, TokenMeta, TokenStream,
};
pub use outer::{curate_context, outer_route, CuratedContext, OuterPartition, OuterSelection};
pub use registry::{AttentionKernel, RouteStrategy, Strategies};
pub use router::{
    apply_drop, build_routing_table, build_shared_routing_table, candidate_mask,
    detect_loop_closures, pool_descriptors, route_scores, routing_counts, topk_select,
    DropConfig, Provenance, RoutingConfig, RoutingTable, Selection,
};
pub use scene::{gen_scene, Scene, SceneSpec};
pub use schedule::{Schedule, ScheduleStep};
pub use tensor::HeadTensor;

//! Architectures compared in the fusion study.
//!
//! Every variant is a five-level encoder–decoder. They differ in how the
//! master and assistant modalities meet:
//!
//! | variant        | streams | fusion                                   | attention            |
//! |----------------|---------|------------------------------------------|----------------------|
//! | `unet`         | 1       | master only                              | none                 |
//! | `unet_sa`      | 1       | master only                              | per block            |
//! | `early_fuse`   | 1       | input channels concatenated              | none                 |
//! | `late_fuse`    | 2       | bottleneck outputs concatenated          | none                 |
//! | `fuse_origin`  | 2       | concat at every block, full width        | none                 |
//! | `fuse_add`     | 2       | summation at every block, full width     | none                 |
//! | `fuse_unet`    | 2       | concat at every block, half width        | none                 |
//! | `fuse_unet_sa` | 2       | concat, half width                       | each stream its own  |
//! | `proposed`     | 2       | concat, half width                       | master map gates both|

mod attention;
mod count;
mod net;
mod spec;

pub use attention::{sa_param_count, SaConfig, SpatialAttention};
pub use count::{analytic_param_count, conv_param_count};
pub use net::{AttentionMap, ForwardOptions, ForwardOutput, Model, Parameters, StreamKind};
pub use spec::{ModelSpec, SaSettings, Variant, DEPTH};

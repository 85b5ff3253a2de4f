//! Context-aggregation blocks: condensed category projection, bi-directional
//! cross-resolution interaction, and multi-scale contextual fusion.

mod bcib;
mod ccpb;
mod mcfb;

pub use bcib::{BcibBlock, PATH_COUNT};
pub use ccpb::{default_condensed_width, CcpbBlock};
pub use mcfb::McfbBlock;

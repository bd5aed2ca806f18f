//! Activation-based advantage assessment.
//!
//! Each probed sample votes +1 for the components (heads or FFN channels)
//! whose activation norm is in its Top-k and -1 for those in its Min-k.
//! Accumulated votes pick the advantageous (`P`) and disadvantageous (`N`)
//! sets for the next expansion stage.

mod ledger;
mod masking;
mod select;

pub use ledger::{
    activation_std_report, component_count, update_scores, ActivationLedger, ComponentRow,
    ModuleKind, ModuleStats, ModuleStd,
};
pub use masking::{mask_components, mask_selection, MaskWhich};
pub use select::{rank_split, select_sets, AdvantageSets, LayerSets, Strategy};

#[cfg(test)]
mod tests;

//! Contact inference from point-cloud motion: a shortcut flow generator, a
//! keypoint search head, layouts and binarization.

mod layout;
mod model;

pub use layout::{
    binarize_forces, binarize_readings, build_layout, palm_count, shadow_chain, toy_layout, LayoutKind,
    SHADOW_ALONG, SHADOW_AROUND, SHADOW_PALM_COLS, SHADOW_PALM_ROWS,
};
pub use model::{
    flow_train_losses, predict_flow, search_tactile, tactile_train_loss, write_tactile_csv, Flow2Tactile, FlowInputs,
    FlowModel, FlowSpec, FlowTargets, HeadSpec, SearchHead, SearchInput, SearchMode, SearchOutput, FLOW_ROW_FEATURES,
};

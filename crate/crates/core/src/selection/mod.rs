//! First-stage selection rules and the information they condition on.

mod elastic_net;
mod screening;

pub use elastic_net::{
    elastic_net_fit, elastic_net_objective, kkt_randomization, randomized_elastic_net_fit,
    ElasticNetFit,
};
pub use screening::{
    apply_rule, screen_bh, screen_threshold, screen_top_d, ScreeningRule, Selection,
    SelectionOutcome, ThresholdInfo,
};

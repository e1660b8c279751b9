//! Synthetic shape domain, preference oracle, win-rate evaluation and MOS tables.

pub mod mos;
pub mod oracle;
pub mod shapes;

pub use mos::{mos_aggregate, read_ratings_csv, MosReport, MosTable, RatingRecord};
pub use oracle::{
    hole_distance, oracle_prefer, oracle_rate_group, oracle_rated_samples, random_scenario, random_scenario_for,
    win_rate, InpaintScenario, Preference, RatedSamples, ScenarioSpec, WinRate,
};
pub use shapes::{classify, export_dataset, gen_dataset, templates, ShapeTemplate};

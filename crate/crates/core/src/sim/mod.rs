//! Headless section simulator and fixture replay.

pub mod replay;
pub mod report;
pub mod run;
pub mod scenario;

pub use replay::{replay_fixture, Fixture, ReplayOutcome};
pub use report::SimReport;
pub use run::{run_scenario, SimOptions, Simulation};
pub use scenario::Scenario;

use crate::model::Worksheet;

pub const DEMO_WORKSHEET: &str = include_str!("../../assets/demo.md");

/// The bundled echo-script worksheet.
pub fn demo_worksheet() -> Worksheet {
    crate::cms::import_worksheet(DEMO_WORKSHEET).expect("bundled worksheet parses")
}

#[cfg(test)]
mod tests {
    #[test]
    fn demo_worksheet_is_published_with_problems() {
        let w = super::demo_worksheet();
        assert!(w.published);
        assert_eq!(w.problems.len(), 2);
        assert!(w.validate().is_empty());
    }
}

//! Real-time small-group tutoring: shared scaffolded worksheets, an AI tutor
//! that answers one group at a time, an autograder and a TA console.

pub mod cms;
pub mod grader;
pub mod model;
pub mod sync;
pub mod tutor;
pub mod console;
pub mod clock;
pub mod server;
pub mod sim;

//! The attacks: surrogate-guided extraction, a query-only genetic search and
//! trigger-based backdoor extraction.

mod backdoor;
mod ga;
mod io;
mod side;

pub use backdoor::{backdoor_extract, poison_dataset, BackdoorResult, PoisonPair, Poisoned, DEFAULT_VAR_THRESHOLD};
pub use ga::{ga_attack, BlackBox, ClassifierFitness, Fitness, GaConfig, GaResult, Genome};
pub use io::{read_samples_csv, write_samples_csv};
pub use side::{side_extract, unconditional_extract, ExtractionConfig, ExtractionRecord, ExtractionRun, GuidanceMode, GuidanceSource};

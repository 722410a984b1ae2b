pub mod config;
pub mod eval;
pub mod history;
pub mod trainer;

pub use config::{TrainConfig, TrainConfigFile};
pub use eval::{evaluate, evaluate_records, Evaluation};
pub use history::{BestPointer, HistoryRow, TrainHistory, ValSummary};
pub use trainer::{TrainOutcome, Trainer, TrainerState, BEST_CHECKPOINT, LAST_CHECKPOINT};

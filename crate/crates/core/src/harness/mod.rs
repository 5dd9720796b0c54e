//! Configuration, training loop and the operator commands.

mod commands;
mod config;
mod optim;
mod train;

pub use commands::{
    check_compatible, cmd_ablate, cmd_eval, cmd_gendata, cmd_generalize, cmd_train, evaluate, generalize,
    prepare_out, run_arm, train_into, write_report, AblationReport, Arm, ArmResult, GeneralizationReport,
    CHECKPOINT_FILE, CONFIG_FILE, PREDICTIONS_FILE, REPORT_JSON, REPORT_TXT, TELEMETRY_FILE,
};
pub use config::{Profile, RefreshCadence, RunConfig};
pub use optim::Adam;
pub use train::{
    parse_telemetry, predict_records, train, StepLog, TelemetryRow, TrainOutcome, TrainPlan, TELEMETRY_HEADER,
};

use serde_json::json;

/// Exit codes, also listed in `--help`.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MISSING_PREREQUISITE: i32 = 3;
    pub const PROVENANCE: i32 = 4;
    pub const ESCROW: i32 = 5;
    pub const DESIGN_STATE: i32 = 6;
    pub const DATA: i32 = 7;
    pub const IO: i32 = 8;
}

#[derive(Debug)]
pub enum CliError {
    Lib(clonematch::Error),
    Missing { step: String, missing: String },
    Frozen(String),
    Usage(String),
}

impl From<clonematch::Error> for CliError {
    fn from(e: clonematch::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(clonematch::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(clonematch::Error::Json(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use clonematch::Error as E;
        match self {
            CliError::Missing { .. } => exit::MISSING_PREREQUISITE,
            CliError::Frozen(_) => exit::DESIGN_STATE,
            CliError::Usage(_) => exit::USAGE,
            CliError::Lib(e) => match e {
                E::Provenance(_) => exit::PROVENANCE,
                E::Escrow(_) => exit::ESCROW,
                E::DesignNotReady(_) => exit::DESIGN_STATE,
                E::Config(_) => exit::USAGE,
                E::Io(_) => exit::IO,
                E::Schema(_)
                | E::Validation { .. }
                | E::InvalidData(_)
                | E::Binning(_)
                | E::Support(_)
                | E::Singular(_)
                | E::EmptySelection(_)
                | E::Csv(_) => exit::DATA,
                E::Evaluation(_) | E::Json(_) => exit::OTHER,
            },
        }
    }

    pub fn record(&self) -> serde_json::Value {
        let code = self.exit_code();
        match self {
            CliError::Missing { step, missing } => json!({
                "error": "missing-prerequisite",
                "exit_code": code,
                "step": step,
                "missing_prerequisite": missing,
                "message": format!("{step} needs {missing} to have run first (or {missing} is stale after an upstream rerun)"),
            }),
            CliError::Frozen(m) => json!({ "error": "design-frozen", "exit_code": code, "message": m }),
            CliError::Usage(m) => json!({ "error": "usage", "exit_code": code, "message": m }),
            CliError::Lib(e) => {
                let mut v = json!({ "error": e.kind(), "exit_code": code, "message": e.to_string() });
                if let clonematch::Error::Validation { row, .. } = e {
                    v["row"] = json!(row);
                }
                v
            }
        }
    }
}

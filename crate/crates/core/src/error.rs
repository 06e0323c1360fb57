use std::str::FromStr;

use thiserror::Error;

/// Refusal codes of the data-store operations. The `Display` form is the
/// code name used by scenario scripts (`EXPECT-ERROR NotFound`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Error)]
pub enum OpError {
    #[error("DuplicateRegistration")]
    DuplicateRegistration,
    #[error("UnknownDevice")]
    UnknownDevice,
    #[error("AuthMismatch")]
    AuthMismatch,
    #[error("NotAPatient")]
    NotAPatient,
    #[error("UnregisteredReader")]
    UnregisteredReader,
    #[error("WrongDeviceKind")]
    WrongDeviceKind,
    #[error("NotFound")]
    NotFound,
    #[error("StrictPreconditionFailed")]
    StrictPreconditionFailed,
    #[error("UnknownHospital")]
    UnknownHospital,
    #[error("NotStaff")]
    NotStaff,
    #[error("HospitalNotRegistered")]
    HospitalNotRegistered,
    #[error("NoAccessibleData")]
    NoAccessibleData,
}

impl OpError {
    pub const ALL: [OpError; 12] = [
        Self::DuplicateRegistration,
        Self::UnknownDevice,
        Self::AuthMismatch,
        Self::NotAPatient,
        Self::UnregisteredReader,
        Self::WrongDeviceKind,
        Self::NotFound,
        Self::StrictPreconditionFailed,
        Self::UnknownHospital,
        Self::NotStaff,
        Self::HospitalNotRegistered,
        Self::NoAccessibleData,
    ];
}

impl FromStr for OpError {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.to_string() == s)
            .ok_or_else(|| format!("unknown error code {s:?}"))
    }
}

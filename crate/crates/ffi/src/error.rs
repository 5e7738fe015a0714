use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use bcl_core::invariant::InvariantError;
use bcl_core::scenario::ScenarioError;
use bcl_core::sim::SimError;

/// Result code of every fallible call. Details go to `bcl_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Infeasible = 5,
    Precondition = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

pub(crate) fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

pub(crate) struct Failure {
    pub status: BclStatus,
    pub message: String,
}

impl Failure {
    pub fn new(status: BclStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    pub fn null(what: &str) -> Self {
        Self::new(BclStatus::NullPointer, format!("{what} is NULL"))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(BclStatus::InvalidArgument, message)
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let status = match &e {
            ScenarioError::Io { .. } => BclStatus::Io,
            ScenarioError::Parse(_) => BclStatus::Parse,
            _ => BclStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<InvariantError> for Failure {
    fn from(e: InvariantError) -> Self {
        let status = match &e {
            InvariantError::Parse(_) => BclStatus::Parse,
            InvariantError::CertificateInfeasible => BclStatus::Infeasible,
            InvariantError::Precondition(_) => BclStatus::Precondition,
            _ => BclStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let status = match &e {
            SimError::PreconditionViolated(_) => BclStatus::Precondition,
            SimError::CertificateInfeasible => BclStatus::Infeasible,
            SimError::NonFinite { .. } => BclStatus::NonFinite,
            _ => BclStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

/// Runs `f`, records any failure and turns panics into `BclStatus::Panic`.
pub(crate) fn guard<F>(f: F) -> BclStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            BclStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(fail.message);
            fail.status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BclStatus::Panic
        }
    }
}

//! Attribution of group-exponentiation counts to protocol roles.
//!
//! The core library keeps a thread-local counter of scalar
//! multiplications. This wrapper slices that counter at role boundaries:
//! wrap client work in a client guard, let endpoints wrap the server's
//! handler, and the totals say who computed what. Only meaningful when
//! the whole flow runs on one thread (the in-process transport); remote
//! work never touches the local counter.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use dhp_core::group::exp_count;

use crate::transcript::Role;

#[derive(Default)]
struct MeterState {
    /// Roles currently on the attribution stack, innermost last.
    stack: Vec<Role>,
    /// Counter value when the current innermost role took over.
    last_mark: u64,
    totals: BTreeMap<Role, u64>,
}

impl MeterState {
    fn flush(&mut self) {
        let now = exp_count::read();
        if let Some(role) = self.stack.last().copied() {
            *self.totals.entry(role).or_insert(0) += now - self.last_mark;
        }
        self.last_mark = now;
    }
}

/// Shared meter handle; clones view the same totals.
#[derive(Clone, Default)]
pub struct RoleMeter {
    state: Arc<Mutex<MeterState>>,
}

impl RoleMeter {
    pub fn new() -> RoleMeter {
        RoleMeter::default()
    }

    pub fn enter(&self, role: Role) {
        let mut st = self.state.lock().expect("meter lock");
        st.flush();
        st.stack.push(role);
    }

    pub fn exit(&self) {
        let mut st = self.state.lock().expect("meter lock");
        st.flush();
        st.stack.pop();
    }

    /// RAII wrapper around enter/exit. Owns a handle, so the guard can
    /// outlive the borrow it was created from.
    pub fn guard(&self, role: Role) -> MeterGuard {
        self.enter(role);
        MeterGuard { meter: self.clone() }
    }

    pub fn totals(&self) -> BTreeMap<Role, u64> {
        self.state.lock().expect("meter lock").totals.clone()
    }

    pub fn total_for(&self, role: Role) -> u64 {
        self.totals().get(&role).copied().unwrap_or(0)
    }

    pub fn reset(&self) {
        let mut st = self.state.lock().expect("meter lock");
        st.totals.clear();
        st.last_mark = exp_count::read();
    }
}

pub struct MeterGuard {
    meter: RoleMeter,
}

impl Drop for MeterGuard {
    fn drop(&mut self) {
        self.meter.exit();
    }
}

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

/// Lifecycle of a background job: `pending → running → done | failed | cancelled`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Cancelled)
    }

    /// Whether `self → next` is a legal transition.
    pub fn can_become(self, next: JobState) -> bool {
        match (self, next) {
            (Self::Pending, Self::Running) => true,
            (Self::Pending, Self::Cancelled | Self::Failed) => true,
            (Self::Running, n) => n.is_terminal(),
            _ => false,
        }
    }
}

/// Shared completion counter and cancellation flag for a long-running job.
///
/// `completed` only ever grows and never exceeds `total`, so the reported
/// fraction is non-decreasing once `total` is fixed.
#[derive(Debug, Default)]
pub struct Progress {
    total: AtomicUsize,
    completed: AtomicUsize,
    cancelled: AtomicBool,
}

impl Progress {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixes the number of work units. Only the first non-zero call has effect.
    pub fn set_total(&self, total: usize) {
        let _ = self
            .total
            .compare_exchange(0, total, Ordering::SeqCst, Ordering::SeqCst);
    }

    /// Marks one unit complete and returns the new completed count.
    pub fn advance(&self) -> usize {
        let total = self.total.load(Ordering::SeqCst);
        let mut current = self.completed.load(Ordering::SeqCst);
        loop {
            if current >= total {
                return current;
            }
            match self.completed.compare_exchange(
                current,
                current + 1,
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(_) => return current + 1,
                Err(actual) => current = actual,
            }
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        (
            self.completed.load(Ordering::SeqCst),
            self.total.load(Ordering::SeqCst),
        )
    }

    pub fn fraction(&self) -> f64 {
        let (completed, total) = self.counts();
        if total == 0 {
            0.0
        } else {
            completed as f64 / total as f64
        }
    }

    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::SeqCst)
    }
}

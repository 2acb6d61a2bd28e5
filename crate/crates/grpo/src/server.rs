use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use minitune_core::model::NamedTensor;

use crate::GrpoError;

/// Complete set of weights as of one publish.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    /// Publish counter: 0 for the initial weights, +1 per publish.
    pub version: u64,
    /// Trainer updates applied to these weights. Equals `version` when the
    /// trainer publishes after every step.
    pub policy_version: u64,
    pub tensors: Vec<NamedTensor>,
}

struct Inner {
    latest: Arc<WeightSnapshot>,
    cursors: BTreeMap<String, u64>,
}

/// Versioned weight store. Readers get an `Arc` to a finished snapshot, so a
/// publish in progress is never visible.
pub struct ParameterServer {
    inner: Mutex<Inner>,
    published: Condvar,
}

impl ParameterServer {
    pub fn new(initial: Vec<NamedTensor>) -> Self {
        let latest = Arc::new(WeightSnapshot { version: 0, policy_version: 0, tensors: initial });
        ParameterServer { inner: Mutex::new(Inner { latest, cursors: BTreeMap::new() }), published: Condvar::new() }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn version(&self) -> u64 {
        self.lock().latest.version
    }

    pub fn policy_version(&self) -> u64 {
        self.lock().latest.policy_version
    }

    pub fn fetch(&self) -> Arc<WeightSnapshot> {
        Arc::clone(&self.lock().latest)
    }

    /// Latest snapshot, recording that `subscriber` now holds it.
    pub fn fetch_for(&self, subscriber: &str) -> Arc<WeightSnapshot> {
        let mut inner = self.lock();
        let snap = Arc::clone(&inner.latest);
        inner.cursors.insert(subscriber.to_string(), snap.version);
        snap
    }

    /// Latest snapshot if it is newer than `have`.
    pub fn fetch_newer(&self, subscriber: &str, have: u64) -> Option<Arc<WeightSnapshot>> {
        let snap = self.fetch_for(subscriber);
        (snap.version > have).then_some(snap)
    }

    /// Last version each subscriber fetched.
    pub fn cursors(&self) -> BTreeMap<String, u64> {
        self.lock().cursors.clone()
    }

    /// Blocks until the policy version reaches `target` or the timeout runs
    /// out; returns the latest snapshot either way.
    pub fn wait_for_policy(&self, target: u64, timeout: Duration) -> Arc<WeightSnapshot> {
        let inner = self.lock();
        let (inner, _) = self
            .published
            .wait_timeout_while(inner, timeout, |s| s.latest.policy_version < target)
            .unwrap_or_else(|e| e.into_inner());
        Arc::clone(&inner.latest)
    }

    /// Publishes a full snapshot in one step; returns the new version.
    pub fn publish(&self, policy_version: u64, tensors: Vec<NamedTensor>) -> Result<u64, GrpoError> {
        let mut txn = self.begin_publish(policy_version);
        for t in tensors {
            txn.write(t);
        }
        txn.commit()
    }

    /// Stages a publish tensor by tensor. Nothing is visible to readers
    /// until [`PublishTxn::commit`].
    pub fn begin_publish(&self, policy_version: u64) -> PublishTxn<'_> {
        PublishTxn { server: self, policy_version, staged: Vec::new() }
    }

    pub fn notify_all(&self) {
        self.published.notify_all();
    }
}

pub struct PublishTxn<'a> {
    server: &'a ParameterServer,
    policy_version: u64,
    staged: Vec<NamedTensor>,
}

impl PublishTxn<'_> {
    pub fn write(&mut self, tensor: NamedTensor) {
        self.staged.push(tensor);
    }

    pub fn staged(&self) -> usize {
        self.staged.len()
    }

    /// Swaps the staged tensors in as the new latest snapshot. The layout
    /// (names, order and shapes) must match the current one.
    pub fn commit(self) -> Result<u64, GrpoError> {
        let mut inner = self.server.lock();
        let current = &inner.latest;
        if current.tensors.len() != self.staged.len() {
            return Err(GrpoError::Snapshot(format!(
                "{} tensors staged, {} expected",
                self.staged.len(),
                current.tensors.len()
            )));
        }
        if let Some((old, new)) =
            current.tensors.iter().zip(&self.staged).find(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(GrpoError::Snapshot(format!(
                "{} {:?} staged where {} {:?} belongs",
                new.name, new.shape, old.name, old.shape
            )));
        }
        let version = current.version + 1;
        inner.latest = Arc::new(WeightSnapshot { version, policy_version: self.policy_version, tensors: self.staged });
        drop(inner);
        self.server.published.notify_all();
        Ok(version)
    }
}

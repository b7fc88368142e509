//! Sources of per-step next-token distributions.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::Result;
use crate::fusion::AbsoluteDistribution;
use crate::vocab::Vocabulary;

mod embed;
mod ngram;
pub mod remote;
mod table;

pub use embed::{build_embeddings, ppmi_matrix, truncated_svd, EmbeddingBuild, TruncatedSvd};
pub use ngram::{train_ngram, NGramModel};
pub use remote::{remote_backend, serve, Endpoint, RemoteBackend};
pub use table::TableModel;

/// A language model seen as a function from context to next-token distribution.
///
/// Implementations must be deterministic: the same context always yields
/// the same distribution. The decoder never issues overlapping requests to
/// one backend.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn vocabulary(&self) -> &Arc<Vocabulary>;

    fn next_distribution(&self, context: &[u32]) -> Result<AbsoluteDistribution>;
}

/// Records every distribution a backend hands out, keyed by context.
///
/// The recording can be replayed through a [`TableModel`].
pub struct RecordingBackend {
    inner: Arc<dyn ModelBackend>,
    seen: Mutex<HashMap<Vec<u32>, Vec<f64>>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ModelBackend>) -> Self {
        RecordingBackend {
            inner,
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn to_table(&self) -> Result<TableModel> {
        let seen = self.seen.lock().unwrap();
        let size = self.inner.vocabulary().len();
        let mut table = TableModel::new(
            self.inner.name(),
            self.inner.vocabulary().clone(),
            AbsoluteDistribution::uniform(size, 0).into_values(),
        )?;
        for (ctx, dist) in seen.iter() {
            table.insert(ctx.clone(), dist.clone())?;
        }
        Ok(table)
    }
}

impl ModelBackend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn vocabulary(&self) -> &Arc<Vocabulary> {
        self.inner.vocabulary()
    }

    fn next_distribution(&self, context: &[u32]) -> Result<AbsoluteDistribution> {
        let dist = self.inner.next_distribution(context)?;
        self.seen
            .lock()
            .unwrap()
            .insert(context.to_vec(), dist.values().to_vec());
        Ok(dist)
    }
}

use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use featspeak::backbone::SpatialFeatureMap;
use featspeak::explain::Explainer;
use featspeak::image::ImageInput;
use once_cell::sync::OnceCell;
use uuid::Uuid;

/// An uploaded image bound to one model. Features are extracted on first use
/// and kept for the session's lifetime.
pub struct Session {
    pub id: Uuid,
    pub model: String,
    pub image: ImageInput,
    pub created: Instant,
    features: OnceCell<Vec<SpatialFeatureMap>>,
}

impl Session {
    pub fn new(model: String, image: ImageInput) -> Self {
        Self {
            id: Uuid::new_v4(),
            model,
            image,
            created: Instant::now(),
            features: OnceCell::new(),
        }
    }

    /// Concurrent first calls block on a single extraction.
    pub fn features(&self, explainer: &Explainer) -> featspeak::Result<&[SpatialFeatureMap]> {
        self.features
            .get_or_try_init(|| explainer.features(&self.image))
            .map(Vec::as_slice)
    }

    pub fn features_cached(&self) -> bool {
        self.features.get().is_some()
    }
}

/// Session table. Handlers hold an `Arc<Session>`, so eviction only drops the
/// table's reference and never a session that a request is still using.
pub struct SessionStore {
    ttl: Duration,
    inner: RwLock<HashMap<Uuid, Arc<Session>>>,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self {
            ttl,
            inner: RwLock::new(HashMap::new()),
        }
    }

    pub fn insert(&self, session: Session) -> Arc<Session> {
        self.evict_expired();
        let s = Arc::new(session);
        self.inner
            .write()
            .expect("session table lock")
            .insert(s.id, s.clone());
        s
    }

    pub fn get(&self, id: &Uuid) -> Option<Arc<Session>> {
        let s = self
            .inner
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()?;
        if s.created.elapsed() > self.ttl {
            self.evict_expired();
            return None;
        }
        Some(s)
    }

    pub fn evict_expired(&self) -> usize {
        let mut t = self.inner.write().expect("session table lock");
        let before = t.len();
        t.retain(|_, s| s.created.elapsed() <= self.ttl);
        before - t.len()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("session table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

//! In-process chat sessions over a trained model.
//!
//! The HTTP server and the terminal chat both drive [`SessionStore`].
//! Sessions live in memory and expire after an idle period.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, tokenize, Episode, KnowledgePool, TokenId, Vocab};
use crate::error::{invalid, Error, Result};
use crate::model::{respond, Conversation, SktModel};

pub const DEFAULT_IDLE: Duration = Duration::from_secs(30 * 60);
pub const DEFAULT_MAX_LEN: usize = 40;

/// Read-only model, vocabulary and the knowledge pools known per topic.
#[derive(Debug)]
pub struct ChatEngine {
    pub model: SktModel<f32>,
    pub vocab: Vocab,
    pub topics: BTreeMap<String, KnowledgePool>,
    pub max_len: usize,
}

impl ChatEngine {
    pub fn new(model: SktModel<f32>, vocab: Vocab) -> Self {
        ChatEngine {
            model,
            vocab,
            topics: BTreeMap::new(),
            max_len: DEFAULT_MAX_LEN,
        }
    }

    /// Register the first-turn pool of the first dialogue seen for each topic.
    pub fn with_corpus(mut self, episodes: &[Episode]) -> Self {
        for ep in episodes {
            if let Some(t) = ep.turns.first() {
                self.topics.entry(ep.topic.clone()).or_insert_with(|| t.pool.clone());
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageResult {
    pub response: String,
    pub knowledge_index: usize,
    pub knowledge_sentence: String,
    /// Prior over the pool, sentinel first.
    pub prior: Vec<f64>,
    /// 1-based exchange index.
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub apprentice: String,
    #[serde(flatten)]
    pub result: MessageResult,
}

/// Returned when a session is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub topic: String,
    /// Pool sentences, sentinel at index 0.
    pub pool: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub topic: String,
    pub pool: Vec<String>,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub turns: Vec<TranscriptEntry>,
}

#[derive(Debug)]
struct Session {
    id: String,
    topic: String,
    pool_text: Vec<String>,
    pool_ids: Vec<Vec<TokenId>>,
    conversation: Conversation<f32>,
    transcript: Vec<TranscriptEntry>,
    created: u64,
    last_used: Instant,
}

/// Concurrent sessions. Requests for one session are serialized by its own
/// lock; different sessions proceed independently.
#[derive(Debug)]
pub struct SessionStore {
    engine: Arc<ChatEngine>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    idle: Duration,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionStore {
    pub fn new(engine: Arc<ChatEngine>) -> Self {
        Self::with_idle(engine, DEFAULT_IDLE)
    }

    pub fn with_idle(engine: Arc<ChatEngine>, idle: Duration) -> Self {
        SessionStore {
            engine,
            sessions: Mutex::new(HashMap::new()),
            idle,
        }
    }

    pub fn engine(&self) -> &ChatEngine {
        &self.engine
    }

    pub fn len(&self) -> usize {
        lock(&self.sessions).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop sessions idle for longer than the expiry period.
    pub fn purge_expired(&self) -> usize {
        let now = Instant::now();
        let mut map = lock(&self.sessions);
        let before = map.len();
        map.retain(|_, s| now.duration_since(lock(s).last_used) <= self.idle);
        before - map.len()
    }

    /// Start a dialogue. An inline pool (listed without the sentinel) takes
    /// precedence over the pool registered for `topic`.
    pub fn create_session(&self, topic: Option<&str>, pool: Option<&[String]>) -> Result<SessionInfo> {
        self.purge_expired();
        let (topic, pool) = match (topic, pool) {
            (t, Some(p)) => (
                t.unwrap_or("custom").to_string(),
                KnowledgePool::new(p.iter().map(|s| tokenize(s)).collect()),
            ),
            (Some(t), None) => match self.engine.topics.get(t) {
                Some(p) => (t.to_string(), p.clone()),
                None => return Err(Error::NotFound(format!("topic `{t}` has no knowledge pool"))),
            },
            (None, None) => return Err(Error::NotFound("no topic or pool given".into())),
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let pool_text: Vec<String> = pool.sentences().iter().map(|s| detokenize(s)).collect();
        let session = Session {
            id: id.clone(),
            topic: topic.clone(),
            pool_ids: pool.sentences().iter().map(|s| self.engine.vocab.encode(s)).collect(),
            pool_text: pool_text.clone(),
            conversation: Conversation::new(self.engine.model.d_model()),
            transcript: Vec::new(),
            created: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            last_used: Instant::now(),
        };
        lock(&self.sessions).insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(SessionInfo {
            id,
            topic,
            pool: pool_text,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        let map = lock(&self.sessions);
        let s = map
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))?;
        if lock(s).last_used.elapsed() > self.idle {
            return Err(Error::NotFound(format!("session `{id}` expired")));
        }
        Ok(Arc::clone(s))
    }

    /// Select knowledge with the prior, generate the wizard reply and
    /// advance the session state.
    pub fn post_message(&self, id: &str, text: &str) -> Result<MessageResult> {
        let tokens = tokenize(text);
        let handle = self.session(id)?;
        if tokens.is_empty() {
            return Err(invalid!("empty message"));
        }
        let mut guard = lock(&handle);
        let s = &mut *guard;
        let engine = &self.engine;
        let x = engine.vocab.encode(&tokens);
        let reply = respond(&engine.model, &mut s.conversation, &x, &s.pool_ids, engine.max_len)?;
        let result = MessageResult {
            response: detokenize(&engine.vocab.decode(&reply.response.tokens)),
            knowledge_index: reply.selected,
            knowledge_sentence: s.pool_text[reply.selected].clone(),
            prior: reply.prior,
            turn: reply.turn,
        };
        s.transcript.push(TranscriptEntry {
            apprentice: text.to_string(),
            result: result.clone(),
        });
        s.last_used = Instant::now();
        Ok(result)
    }

    pub fn get_transcript(&self, id: &str) -> Result<Transcript> {
        let handle = self.session(id)?;
        let s = lock(&handle);
        Ok(Transcript {
            id: s.id.clone(),
            topic: s.topic.clone(),
            pool: s.pool_text.clone(),
            created: s.created,
            turns: s.transcript.clone(),
        })
    }

    pub fn delete_session(&self, id: &str) -> Result<()> {
        lock(&self.sessions)
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    fn store() -> SessionStore {
        let eps = generate_synthetic(&SynthConfig {
            episodes: 4,
            test_episodes: 0,
            vocab_size: 120,
            topics: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let vocab = build_vocab(&eps, 1000, 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            ..ModelConfig::default()
        };
        let mut engine = ChatEngine::new(SktModel::new(cfg, 1).unwrap(), vocab).with_corpus(&eps);
        engine.max_len = 8;
        SessionStore::new(Arc::new(engine))
    }

    #[test]
    fn new_session_is_empty_and_echoes_sentinel() {
        let st = store();
        let info = st.create_session(Some("topic0"), None).unwrap();
        assert_eq!(info.pool[0], "no passages used");
        let t = st.get_transcript(&info.id).unwrap();
        assert!(t.turns.is_empty());
        let other = st.create_session(Some("topic0"), None).unwrap();
        assert_ne!(info.id, other.id);
    }

    #[test]
    fn message_results_are_consistent() {
        let st = store();
        let info = st
            .create_session(None, Some(&["cats purr".to_string(), "dogs bark".to_string()]))
            .unwrap();
        assert_eq!(info.pool.len(), 3);
        for turn in 1..=3 {
            let r = st.post_message(&info.id, "tell me about cats").unwrap();
            assert_eq!(r.turn, turn);
            assert!((r.prior.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let best = (0..r.prior.len())
                .fold(0, |b, i| if r.prior[i] > r.prior[b] { i } else { b });
            assert_eq!(r.knowledge_index, best);
            assert_eq!(r.knowledge_sentence, info.pool[best]);
        }
        let t = st.get_transcript(&info.id).unwrap();
        assert_eq!(t.turns.iter().map(|e| e.result.turn).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn errors() {
        let st = store();
        assert!(matches!(st.create_session(Some("nope"), None), Err(Error::NotFound(_))));
        assert!(matches!(st.create_session(None, None), Err(Error::NotFound(_))));
        assert!(matches!(st.post_message("missing", "hi"), Err(Error::NotFound(_))));
        let id = st.create_session(Some("topic1"), None).unwrap().id;
        assert!(matches!(st.post_message(&id, "  "), Err(Error::InvalidInput(_))));
        st.delete_session(&id).unwrap();
        assert!(matches!(st.get_transcript(&id), Err(Error::NotFound(_))));
    }

    #[test]
    fn idle_sessions_expire() {
        let base = store();
        let st = SessionStore::with_idle(Arc::clone(&base.engine), Duration::ZERO);
        let id = st.create_session(Some("topic0"), None).unwrap().id;
        std::thread::sleep(Duration::from_millis(5));
        assert!(matches!(st.post_message(&id, "hi"), Err(Error::NotFound(_))));
        assert_eq!(st.purge_expired(), 1);
        assert!(st.is_empty());
    }
}

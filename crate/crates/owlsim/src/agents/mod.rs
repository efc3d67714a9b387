//! Multi-agent orchestration: role backends, the execution loop, the
//! end-to-end policy mode, and the local knowledge lookup.

pub mod backend;
pub mod episode;
pub mod remote;

pub use backend::{
    intent_phrase, oracle_notes, oracle_reflect, oracle_subgoals, parse_summary, render_summary,
    AgentBackend, BackendError, LearnedWorker, ManagerUpdate, NoisyOracle, OracleBackend,
    RoleBackends, SubgoalKind, WorkerDecision, N_INSPECT,
};
pub use episode::{
    compress_history, retrieve_knowledge, run_episode, run_episode_e2e, EpisodeConfig,
    HistoryEntry, KnowledgeTable, LearnedDriver, PolicyDriver, PolicyEmission,
};
pub use remote::RemoteBackend;

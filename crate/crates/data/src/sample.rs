use serde::{Deserialize, Serialize};

/// Output shape of a task: typed spans, typed pairs, trigger plus arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Entity,
    Relation,
    Event,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Entity, Family::Relation, Family::Event];

    pub fn task_id(self) -> usize {
        self as usize
    }

    pub fn from_task_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Entity => "entity",
            Family::Relation => "relation",
            Family::Event => "event",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One instruction instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub task: usize,
    pub dataset: String,
    pub instruction: Vec<String>,
    pub text: Vec<String>,
    /// `[T_vis × d]`
    pub visual: Vec<Vec<f64>>,
    pub answer: Vec<String>,
    pub id: String,
}

impl TaskSample {
    pub fn gold_records(&self) -> Vec<crate::grammar::ExtractionRecord> {
        crate::grammar::parse_answer(&self.answer).records
    }
}

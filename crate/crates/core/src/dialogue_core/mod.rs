//! Hybrid dialogue cascade: context assembly, belief tracking, database
//! lookup, act decision with an open-domain `chat` act, and the aggregated
//! dialogue sequence that conditions the response.

mod belief;
mod db;
mod pipeline;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use belief::{BeliefState, ParsedBelief};
pub use db::{db_query, Db, DbBucket, DbResult, Entity};
pub use pipeline::{
    evaluate_dialogues, run_turn, DialogueModel, PipelineOptions, ScriptedModel, TurnOutput,
    TurnRecord,
};

pub const CTX: &str = "<ctx>";
pub const BS: &str = "<bs>";
pub const DB: &str = "<db>";
pub const ACT: &str = "<act>";
pub const RESP: &str = "<resp>";
pub const USER: &str = "<user>";
pub const SYS: &str = "<sys>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Style {
    #[serde(rename = "tod")]
    Tod,
    #[serde(rename = "odd")]
    Odd,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Tod => "tod",
            Style::Odd => "odd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Inform,
    Request,
    Recommend,
    Chat,
}

impl Act {
    pub const ALL: [Act; 4] = [Act::Inform, Act::Request, Act::Recommend, Act::Chat];

    pub fn token(self) -> &'static str {
        match self {
            Act::Inform => "[inform]",
            Act::Request => "[request]",
            Act::Recommend => "[recommend]",
            Act::Chat => "[chat]",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.token() == tok)
    }

    /// Reads the first generated token; anything unknown falls back to
    /// `inform` and reports a warning.
    pub fn parse_generated<S: AsRef<str>>(tokens: &[S]) -> (Act, bool) {
        match tokens.first().and_then(|t| Act::from_token(t.as_ref())) {
            Some(a) => (a, false),
            None => (Act::Inform, true),
        }
    }
}

/// One exchange with gold annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub user: String,
    pub system: String,
    pub style: Style,
    pub belief: BeliefState,
    pub act: Act,
}

/// The user's task: constraints on one domain and slots asked about.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub domain: String,
    pub constraints: BTreeMap<String, String>,
    pub requested: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub goal: Option<Goal>,
    pub turns: Vec<DialogueTurn>,
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_string)
}

/// Role-marked history `<user> U_0 <sys> R_0 ... <user> U_t`, oldest first.
/// Whole oldest turns are dropped until the result fits in `max_tokens`;
/// if the current utterance alone is too long its oldest tokens go.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Context {
    pub tokens: Vec<String>,
    pub dropped_turns: usize,
    pub dropped_tokens: usize,
}

pub fn build_context(history: &[DialogueTurn], current_user: &str, max_tokens: usize) -> Context {
    let turn_tokens: Vec<Vec<String>> = history
        .iter()
        .map(|t| {
            let mut v = alloc::vec![USER.to_string()];
            v.extend(words(&t.user));
            v.push(SYS.to_string());
            v.extend(words(&t.system));
            v
        })
        .collect();
    let mut current = alloc::vec![USER.to_string()];
    current.extend(words(current_user));
    let mut dropped_tokens = 0;
    if current.len() > max_tokens {
        dropped_tokens = current.len() - max_tokens;
        current.drain(..dropped_tokens);
    }
    let mut budget = max_tokens - current.len();
    let mut keep = 0;
    for t in turn_tokens.iter().rev() {
        if t.len() > budget {
            break;
        }
        budget -= t.len();
        keep += 1;
    }
    let dropped_turns = history.len() - keep;
    let mut tokens: Vec<String> = turn_tokens[dropped_turns..].concat();
    tokens.extend(current);
    Context {
        tokens,
        dropped_turns,
        dropped_tokens,
    }
}

/// The cascade stages, each decoded from its own start token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Belief,
    Act,
    Response,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Belief, Stage::Act, Stage::Response];

    pub fn bos(self) -> &'static str {
        match self {
            Stage::Belief => BS,
            Stage::Act => ACT,
            Stage::Response => RESP,
        }
    }
}

/// Aggregated dialogue information `[C_t, B_t, D_t, A_t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialInfo {
    pub context: Context,
    pub belief: BeliefState,
    pub db: DbResult,
    pub act: Act,
}

impl DialInfo {
    /// Encoder input for the belief stage: `<ctx> C`.
    pub fn belief_input(context: &Context) -> Vec<String> {
        let mut v = alloc::vec![CTX.to_string()];
        v.extend(context.tokens.iter().cloned());
        v
    }

    /// Encoder input for the act stage: `<ctx> C <bs> B <db> D`.
    pub fn act_input(context: &Context, belief: &BeliefState, db_result: &DbResult, db: &Db) -> Vec<String> {
        let mut v = Self::belief_input(context);
        v.push(BS.to_string());
        v.extend(belief.tokens());
        v.push(DB.to_string());
        v.extend(db_result.tokens(db));
        v
    }

    /// Encoder input for the response stage: `<ctx> C <bs> B <db> D <act> A`.
    pub fn response_input(&self, db: &Db) -> Vec<String> {
        let mut v = Self::act_input(&self.context, &self.belief, &self.db, db);
        v.push(ACT.to_string());
        v.push(self.act.token().to_string());
        v
    }
}

/// Encoder and decoder token sequences for one stage of a gold turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSequences {
    pub stage: Stage,
    pub input: Vec<String>,
    /// The target tokens without start or end markers.
    pub target: Vec<String>,
}

/// Gold Dial-INFO and per-stage sequences for turn `index` of a dialogue.
pub fn gold_stages(
    dialogue: &Dialogue,
    index: usize,
    db: &Db,
    context_budget: usize,
) -> (DialInfo, [StageSequences; 3]) {
    let turn = &dialogue.turns[index];
    let context = build_context(&dialogue.turns[..index], &turn.user, context_budget);
    let db_result = if turn.act == Act::Chat {
        DbResult::sentinel()
    } else {
        db_query(&turn.belief, db)
    };
    let info = DialInfo {
        context,
        belief: turn.belief.clone(),
        db: db_result,
        act: turn.act,
    };
    let stages = [
        StageSequences {
            stage: Stage::Belief,
            input: DialInfo::belief_input(&info.context),
            target: info.belief.tokens(),
        },
        StageSequences {
            stage: Stage::Act,
            input: DialInfo::act_input(&info.context, &info.belief, &info.db, db),
            target: alloc::vec![info.act.token().to_string()],
        },
        StageSequences {
            stage: Stage::Response,
            input: info.response_input(db),
            target: words(&turn.system).collect(),
        },
    ];
    (info, stages)
}

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    build_context, db_query, gold_stages, Act, BeliefState, Db, DbResult, DialInfo, Dialogue,
    DialogueTurn, Stage, Style,
};
use crate::error::{Error, Result};

/// Anything that can produce a stage's output tokens from its input tokens.
pub trait DialogueModel {
    fn generate(&mut self, stage: Stage, input: &[String]) -> Result<Vec<String>>;
}

impl<M: DialogueModel + ?Sized> DialogueModel for &mut M {
    fn generate(&mut self, stage: Stage, input: &[String]) -> Result<Vec<String>> {
        (**self).generate(stage, input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Token budget for the role-marked history.
    pub context_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnOutput {
    pub info: DialInfo,
    pub response: Vec<String>,
    pub belief_warnings: usize,
    pub act_warning: bool,
}

/// Belief → database → act → response, each stage seeing everything
/// produced before it.
pub fn run_turn<M: DialogueModel + ?Sized>(
    model: &mut M,
    history: &[DialogueTurn],
    user: &str,
    db: &Db,
    opts: PipelineOptions,
) -> Result<TurnOutput> {
    let context = build_context(history, user, opts.context_budget);
    let b_tokens = model.generate(Stage::Belief, &DialInfo::belief_input(&context))?;
    let parsed = BeliefState::parse_tokens(&b_tokens);
    let mut belief = parsed.belief;
    let belief_warnings = parsed.warnings + belief.restrict_to(&db.domains());
    let found = db_query(&belief, db);
    let a_tokens = model.generate(Stage::Act, &DialInfo::act_input(&context, &belief, &found, db))?;
    let (act, act_warning) = Act::parse_generated(&a_tokens);
    let db_result = if act == Act::Chat {
        DbResult::sentinel()
    } else {
        found
    };
    let info = DialInfo {
        context,
        belief,
        db: db_result,
        act,
    };
    let response = model.generate(Stage::Response, &info.response_input(db))?;
    Ok(TurnOutput {
        info,
        response,
        belief_warnings,
        act_warning,
    })
}

/// One evaluated turn, flattened for metrics and line-delimited output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub style: Style,
    pub gold_response: String,
    pub gold_act: Act,
    pub belief: String,
    pub db_count: usize,
    pub act: Option<Act>,
    pub response: String,
    pub warnings: usize,
    pub error: Option<String>,
}

/// Runs every turn of every dialogue with gold history. A failing turn is
/// recorded with its error and evaluation continues.
pub fn evaluate_dialogues<M: DialogueModel + ?Sized>(
    model: &mut M,
    dialogues: &[Dialogue],
    db: &Db,
    opts: PipelineOptions,
) -> Vec<TurnRecord> {
    let mut out = Vec::new();
    for d in dialogues {
        for (i, turn) in d.turns.iter().enumerate() {
            let mut rec = TurnRecord {
                dialogue_id: d.id.clone(),
                turn: i,
                style: turn.style,
                gold_response: turn.system.clone(),
                gold_act: turn.act,
                belief: String::new(),
                db_count: 0,
                act: None,
                response: String::new(),
                warnings: 0,
                error: None,
            };
            match run_turn(model, &d.turns[..i], &turn.user, db, opts) {
                Ok(o) => {
                    rec.belief = o.info.belief.serialize();
                    rec.db_count = o.info.db.match_count;
                    rec.act = Some(o.info.act);
                    rec.response = o.response.join(" ");
                    rec.warnings = o.belief_warnings + usize::from(o.act_warning);
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            out.push(rec);
        }
    }
    out
}

/// Replays gold outputs for gold inputs.
#[derive(Clone, Debug, Default)]
pub struct ScriptedModel {
    script: BTreeMap<(Stage, Vec<String>), Vec<String>>,
}

impl ScriptedModel {
    pub fn from_dialogues(dialogues: &[Dialogue], db: &Db, context_budget: usize) -> Self {
        let mut script = BTreeMap::new();
        for d in dialogues {
            for i in 0..d.turns.len() {
                let (_, stages) = gold_stages(d, i, db, context_budget);
                for s in stages {
                    script.insert((s.stage, s.input), s.target);
                }
            }
        }
        Self { script }
    }
}

impl DialogueModel for ScriptedModel {
    fn generate(&mut self, stage: Stage, input: &[String]) -> Result<Vec<String>> {
        self.script
            .get(&(stage, input.to_vec()))
            .cloned()
            .ok_or_else(|| Error::Contract("no scripted output for this input".into()))
    }
}

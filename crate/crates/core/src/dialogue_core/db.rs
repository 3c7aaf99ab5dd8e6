use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::BeliefState;

/// One database row.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub domain: String,
    /// Slot values, informable and requestable alike.
    pub slots: BTreeMap<String, String>,
}

impl Entity {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.slots.get(slot).map(String::as_str)
    }

    /// True when every constraint matches exactly, ignoring ASCII case.
    pub fn satisfies(&self, constraints: &BTreeMap<String, String>) -> bool {
        constraints.iter().all(|(slot, want)| {
            self.get(slot)
                .is_some_and(|have| have.eq_ignore_ascii_case(want))
        })
    }
}

/// Entity table plus the column order used when serializing rows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Db {
    pub entities: Vec<Entity>,
    /// Per domain, the slot order used in dialogue sequences.
    pub columns: BTreeMap<String, Vec<String>>,
}

impl Db {
    pub fn domains(&self) -> Vec<String> {
        self.columns.keys().cloned().collect()
    }

    pub fn in_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a Entity> + 'a {
        self.entities.iter().filter(move |e| e.domain == domain)
    }

    pub fn find(&self, name: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DbBucket {
    None,
    One,
    Two,
    Many,
}

impl DbBucket {
    pub const ALL: [DbBucket; 4] = [DbBucket::None, DbBucket::One, DbBucket::Two, DbBucket::Many];

    pub fn from_count(n: usize) -> Self {
        match n {
            0 => DbBucket::None,
            1 => DbBucket::One,
            2 => DbBucket::Two,
            _ => DbBucket::Many,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            DbBucket::None => "[db_0]",
            DbBucket::One => "[db_1]",
            DbBucket::Two => "[db_2]",
            DbBucket::Many => "[db_3plus]",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbResult {
    pub match_count: usize,
    pub bucket: DbBucket,
    /// Lexicographically smallest matching name, when any match.
    pub top: Option<Entity>,
}

impl DbResult {
    /// The empty result used for open-domain turns.
    pub fn sentinel() -> Self {
        Self {
            match_count: 0,
            bucket: DbBucket::None,
            top: None,
        }
    }

    /// Bucket token followed by the top entity's name and slot values.
    pub fn tokens(&self, db: &Db) -> Vec<String> {
        let mut out = alloc::vec![String::from(self.bucket.token())];
        if let Some(e) = &self.top {
            out.push(e.name.clone());
            if let Some(cols) = db.columns.get(&e.domain) {
                for c in cols {
                    if let Some(v) = e.get(c) {
                        out.push(v.into());
                    }
                }
            }
        }
        out
    }
}

/// Entities of the belief's active domain matching all of its constraints.
pub fn db_query(belief: &BeliefState, db: &Db) -> DbResult {
    let Some((domain, constraints)) = belief.active_domain() else {
        return DbResult::sentinel();
    };
    let mut count = 0;
    let mut top: Option<&Entity> = None;
    for e in db.in_domain(domain).filter(|e| e.satisfies(constraints)) {
        count += 1;
        if top.is_none_or(|t| e.name < t.name) {
            top = Some(e);
        }
    }
    DbResult {
        match_count: count,
        bucket: DbBucket::from_count(count),
        top: top.cloned(),
    }
}

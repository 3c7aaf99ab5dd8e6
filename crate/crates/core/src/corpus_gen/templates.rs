//! Surface templates. Task-oriented text is nearly fixed; open-domain text
//! is drawn from families with many interchangeable fillers.

pub(crate) const USER_OPENERS: [&str; 3] = ["i am looking for a", "i want a", "i need a"];

pub(crate) const NAME_PREFIXES: [&str; 12] = [
    "golden", "royal", "little", "old", "blue", "red", "green", "silver", "happy", "lucky",
    "grand", "jade",
];
pub(crate) const RESTAURANT_SUFFIXES: [&str; 6] = ["wok", "kitchen", "table", "garden", "bistro", "oven"];
pub(crate) const HOTEL_SUFFIXES: [&str; 6] = ["lodge", "inn", "manor", "suites", "court", "rooms"];
pub(crate) const STREETS: [&str; 8] = [
    "mill_road", "king_street", "regent_street", "hills_road", "station_road", "bridge_street",
    "park_lane", "church_street",
];

/// One open-domain family: user prompts and response patterns.
///
/// Patterns hold literal words and `{slot}` fillers; `{t}` is the topic
/// noun. Responses listed in `without_topic` never mention it.
pub(crate) struct Family {
    pub user: &'static [&'static str],
    pub response: &'static [&'static str],
    pub without_topic: &'static [&'static str],
}

pub(crate) const FAMILIES: [Family; 6] = [
    Family {
        user: &["do you like {t} ?", "do you enjoy {t} ?"],
        response: &["{yes} , i {love} {t} , {esp} {when}", "{yes} ! {t} is {adj} {when}"],
        without_topic: &["{yes} , i {love} it , {esp} {when}"],
    },
    Family {
        user: &["what is your favourite kind of {t} ?", "which {t} do you like best ?"],
        response: &["{honestly} i {prefer} {t} that is {adj} and {adj2}", "{honestly} {adj} {t} {wins} for me"],
        without_topic: &["{honestly} i {prefer} anything {adj} and {adj2}"],
    },
    Family {
        user: &["i had some {uadj} {t} last {time}", "my {t} last {time} was {uadj}"],
        response: &["{wow} , that {sounds} {adj} ! {ilike} {t} {when}", "{wow} , {adj} {t} {when} is the best"],
        without_topic: &["{wow} , that {sounds} {adj} ! tell me more"],
    },
    Family {
        user: &["tell me something fun about {t}", "say something about {t}"],
        response: &["{fact} {t} can be {adj} {when}", "{fact} people find {t} {adj} {when}"],
        without_topic: &["{fact} everything is {adj} {when}"],
    },
    Family {
        user: &["i am bored , let us chat about {t}", "can we talk about {t} ?"],
        response: &["{sure} ! {t} is {adj} , {ask}", "{sure} , i find {t} {adj} {when} , {ask}"],
        without_topic: &["{sure} ! i am all ears , {ask}"],
    },
    Family {
        user: &["what do you dream about ?", "what makes you happy ?"],
        response: &["{dream} {adj} {t} {when}", "{dream} sharing {adj} {t} {when}"],
        without_topic: &["{dream} {adj} days {when}"],
    },
];

pub(crate) fn filler(slot: &str) -> &'static [&'static str] {
    match slot {
        "yes" => &["yes", "absolutely", "definitely", "totally", "of course", "indeed", "oh yes"],
        "love" => &["love", "adore", "enjoy", "like", "cherish", "savour", "relish"],
        "esp" => &["especially", "particularly", "mostly", "above all", "mainly"],
        "when" => &[
            "when it is sunny",
            "on lazy weekends",
            "with good friends",
            "after a long day",
            "during the holidays",
            "in the evening",
            "with my family",
            "on a rainy day",
            "at midnight",
            "in spring",
        ],
        "honestly" => &["honestly", "personally", "frankly", "truthfully", "actually", "secretly"],
        "prefer" => &["prefer", "like", "enjoy", "favour", "go for", "pick", "choose"],
        "wins" => &["wins", "works", "is perfect", "is ideal", "does it"],
        "adj" => &[
            "fresh", "simple", "bold", "cozy", "exciting", "relaxing", "colourful", "surprising",
            "delightful", "charming", "lively", "quiet", "gentle", "wild",
        ],
        "adj2" => &["warm", "bright", "light", "rich", "sweet", "calm", "spicy", "crisp"],
        "uadj" => &["great", "nice", "tasty", "strange", "amazing", "weird", "boring"],
        "time" => &["week", "weekend", "month", "summer", "night", "winter"],
        "wow" => &["wow", "oh nice", "how lovely", "amazing", "cool", "brilliant", "oh my"],
        "sounds" => &["sounds", "seems", "must be", "feels", "looks"],
        "ilike" => &[
            "i also like",
            "i really enjoy",
            "i often dream about",
            "i can not resist",
            "i always talk about",
            "i miss",
        ],
        "fact" => &["did you know", "fun fact :", "i read that", "apparently", "they say", "rumour has it"],
        "sure" => &["sure", "okay", "alright", "happily", "gladly", "why not"],
        "ask" => &[
            "what do you think ?",
            "do you agree ?",
            "how about you ?",
            "what about you ?",
            "any favourites ?",
            "and you ?",
        ],
        "dream" => &["i dream about", "i think about", "i imagine", "i picture", "i long for"],
        _ => &[],
    }
}

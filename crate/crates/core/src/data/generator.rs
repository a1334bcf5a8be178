//! Seeded synthetic session corpus.
//!
//! Every skill owns a small template grammar: intents with request
//! templates, fulfilment templates and slot entities. A session is a chain
//! of *episodes*; each episode follows one interaction [`Pattern`] and spans
//! one to three turns. Satisfying patterns pair a request with a coherent
//! fulfilment of the same entity; dissatisfying ones embed the failure
//! shapes seen in real assistant traffic: a failed request followed by a
//! reworded repeat, a wrong entity interrupted by "stop", an empty response,
//! an answer from the wrong skill, or a wrong entity the user silently
//! abandons.
//!
//! Because fulfilments always name the requested entity (and minor skills
//! name themselves), the targeted response depends on the targeted
//! utterance and skill; swapping either between sessions is detectable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::session::{score_to_label, Session, Turn};
use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// High-traffic skills with hand-written grammars (synthetic ones beyond twelve).
    pub num_skills_major: usize,
    /// Long-tail skills with procedurally generated names and entities.
    pub num_skills_minor: usize,
    /// Fraction of traffic going to the minor skills.
    pub minor_traffic_share: f64,
    /// Ratio of SAT to DSAT labels in the labeled corpus.
    pub sat_ratio: f64,
    /// Probability an annotator scores the opposite band.
    pub label_noise: f64,
    /// Upper bound on the grammar's vocabulary.
    pub vocab_size: usize,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    /// Context episodes drawn before the targeted episode: uniform in `0..=max`.
    pub max_episodes_before: usize,
    /// Context episodes drawn after the targeted episode: uniform in `0..=max`.
    pub max_episodes_after: usize,
    /// Probability a context episode stays in the session's skill.
    pub skill_coherence: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_skills_major: 10,
            num_skills_minor: 60,
            minor_traffic_share: 0.25,
            sat_ratio: 3.0,
            label_noise: 0.03,
            vocab_size: 1024,
            num_labeled: 3000,
            num_unlabeled: 20000,
            max_episodes_before: 2,
            max_episodes_after: 2,
            skill_coherence: 0.85,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_skills_major == 0 {
            return err("num_skills_major must be positive");
        }
        if !(self.sat_ratio > 0.0 && self.sat_ratio.is_finite()) {
            return err("sat_ratio must be positive");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return err("label_noise must be in [0, 0.5)");
        }
        if !(0.0..1.0).contains(&self.minor_traffic_share) {
            return err("minor_traffic_share must be in [0, 1)");
        }
        if self.num_skills_minor == 0 && self.minor_traffic_share > 0.0 {
            return err("minor_traffic_share needs at least one minor skill");
        }
        if !(0.0..=1.0).contains(&self.skill_coherence) {
            return err("skill_coherence must be in [0, 1]");
        }
        if self.num_labeled == 0 && self.num_unlabeled == 0 {
            return err("corpus must contain at least one session");
        }
        Ok(())
    }

    fn sat_share(&self) -> f64 {
        self.sat_ratio / (1.0 + self.sat_ratio)
    }
}

/// Interaction shapes an episode can take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    /// Request answered with the requested entity.
    Fulfilled,
    /// Agent asks "did you mean ...", user confirms.
    Confirmed,
    /// Agent cannot help; user moves on without repeating.
    AcceptedLimitation,
    /// Agent fails; user rewords and repeats the same request.
    RepeatedRequest,
    /// Wrong entity, user barges in with "stop" and corrects.
    BargeIn,
    /// Agent stays silent; user repeats.
    EmptyResponse,
    /// Answer comes from an unrelated skill.
    WrongSkill,
    /// Wrong entity, user gives up.
    WrongEntity,
}

impl Pattern {
    pub fn is_satisfying(self) -> bool {
        matches!(
            self,
            Pattern::Fulfilled | Pattern::Confirmed | Pattern::AcceptedLimitation
        )
    }
}

const SAT_PATTERNS: [(Pattern, f64); 3] = [
    (Pattern::Fulfilled, 0.7),
    (Pattern::Confirmed, 0.15),
    (Pattern::AcceptedLimitation, 0.15),
];

const DSAT_PATTERNS: [(Pattern, f64); 5] = [
    (Pattern::RepeatedRequest, 0.3),
    (Pattern::BargeIn, 0.25),
    (Pattern::EmptyResponse, 0.15),
    (Pattern::WrongSkill, 0.15),
    (Pattern::WrongEntity, 0.15),
];

/// Failure responses; `{e}` echoes the requested entity.
const FAILURES: [&str; 3] = [
    "sorry i can not find {e}",
    "sorry i do not know {e}",
    "i am not sure how to help with {e}",
];

const MOVE_ON: [&str; 3] = ["ok", "never mind", "ok thanks"];

#[derive(Clone, Debug)]
struct Intent {
    requests: Vec<String>,
    fulfils: Vec<String>,
    entities: Vec<String>,
}

#[derive(Clone, Debug)]
struct SkillDef {
    name: String,
    intents: Vec<Intent>,
}

fn intent(requests: &[&str], fulfils: &[&str], entities: &[&str]) -> Intent {
    let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    Intent {
        requests: own(requests),
        fulfils: own(fulfils),
        entities: own(entities),
    }
}

fn major_catalogue() -> Vec<SkillDef> {
    let skill = |name: &str, intents: Vec<Intent>| SkillDef {
        name: name.to_string(),
        intents,
    };
    vec![
        skill(
            "music",
            vec![
                intent(
                    &["play {e}", "play the song {e}", "put on {e}"],
                    &["playing {e}", "now playing {e} by the artist"],
                    &[
                        "clocks", "yellow", "halo", "thriller", "imagine", "believer", "roar",
                        "hello",
                    ],
                ),
                intent(
                    &["set the volume to {e}", "volume {e}"],
                    &["volume set to {e}", "ok volume {e}"],
                    &["two", "four", "five", "seven", "nine"],
                ),
            ],
        ),
        skill(
            "weather",
            vec![
                intent(
                    &[
                        "what is the weather in {e}",
                        "how is the weather in {e}",
                        "weather for {e}",
                    ],
                    &[
                        "it is sunny in {e} right now",
                        "{e} is cloudy with light wind",
                    ],
                    &[
                        "new york", "boston", "seattle", "denver", "chicago", "miami", "austin",
                    ],
                ),
                intent(
                    &["will it rain {e}", "is it going to rain {e}"],
                    &["no rain is expected {e}", "expect showers {e}"],
                    &["tomorrow", "tonight", "this weekend", "on monday"],
                ),
            ],
        ),
        skill(
            "timer",
            vec![
                intent(
                    &["set a timer for {e}", "timer for {e}", "start a {e} timer"],
                    &["timer set for {e}", "ok {e} starting now"],
                    &[
                        "five minutes",
                        "ten minutes",
                        "one hour",
                        "thirty seconds",
                        "twenty minutes",
                    ],
                ),
                intent(
                    &["cancel the {e} timer", "stop the {e} timer"],
                    &["the {e} timer is cancelled"],
                    &["pasta", "laundry", "oven", "tea"],
                ),
            ],
        ),
        skill(
            "alarm",
            vec![intent(
                &["wake me up at {e}", "set an alarm for {e}", "alarm at {e}"],
                &["alarm set for {e}", "your alarm is set for {e}"],
                &["six am", "seven am", "eight thirty", "noon", "five fifteen"],
            )],
        ),
        skill(
            "calling",
            vec![intent(
                &["call {e}", "phone {e}", "dial {e}"],
                &["calling {e}", "ok calling {e} now"],
                &[
                    "chris",
                    "christina",
                    "liam",
                    "mom",
                    "anna",
                    "david",
                    "sarah",
                ],
            )],
        ),
        skill(
            "smart_home",
            vec![
                intent(
                    &["turn on the {e}", "switch on the {e}"],
                    &["ok turning on the {e}", "the {e} is on"],
                    &[
                        "tv",
                        "living room light",
                        "kitchen light",
                        "fan",
                        "heater",
                        "bedroom lamp",
                    ],
                ),
                intent(
                    &["turn off the {e}", "switch off the {e}"],
                    &["ok turning off the {e}", "the {e} is off"],
                    &[
                        "porch light",
                        "garage door",
                        "air purifier",
                        "hallway light",
                    ],
                ),
            ],
        ),
        skill(
            "shopping",
            vec![intent(
                &["add {e} to my cart", "order {e}", "buy {e}"],
                &["i added {e} to your cart", "ordering {e} for you"],
                &[
                    "milk",
                    "eggs",
                    "batteries",
                    "paper towels",
                    "coffee",
                    "bread",
                ],
            )],
        ),
        skill(
            "news",
            vec![intent(
                &["play the news from {e}", "what is the news on {e}"],
                &["here is the latest from {e}", "top stories from {e}"],
                &["bbc", "npr", "reuters", "local radio"],
            )],
        ),
        skill(
            "knowledge",
            vec![intent(
                &["tell me about {e}", "what are {e}", "facts about {e}"],
                &["here is what i found about {e}", "{e} are well known"],
                &[
                    "jupiter",
                    "dolphins",
                    "volcanoes",
                    "glaciers",
                    "pyramids",
                    "comets",
                ],
            )],
        ),
        skill(
            "recipes",
            vec![intent(
                &["how do i make {e}", "recipe for {e}", "find a {e} recipe"],
                &["here is a recipe for {e}", "i found a quick {e} recipe"],
                &["pancakes", "lasagna", "guacamole", "pizza", "tomato soup"],
            )],
        ),
        skill(
            "sports",
            vec![intent(
                &["what was the score of the {e} game", "did the {e} win"],
                &["the {e} won last night", "the {e} lost by three points"],
                &["lakers", "yankees", "patriots", "celtics", "dodgers"],
            )],
        ),
        skill(
            "reminders",
            vec![intent(
                &["remind me to {e}", "set a reminder to {e}"],
                &["ok i will remind you to {e}", "reminder saved to {e}"],
                &[
                    "water the plants",
                    "pay rent",
                    "feed the cat",
                    "call the dentist",
                ],
            )],
        ),
    ]
}

const SYLLABLES: [&str; 12] = [
    "ba", "ko", "ri", "mu", "te", "lo", "shi", "na", "vu", "de", "fa", "zo",
];

/// Deterministic pseudo-word for counter value `i`; injective for
/// `i < 12^3`.
fn pseudo_word(i: usize) -> String {
    // 1001 is coprime to 1728, so this permutes the counter range.
    let j = (i * 1001 + 17) % 1728;
    let (a, b, c) = (j / 144, (j / 12) % 12, j % 12);
    format!("{}{}{}", SYLLABLES[a], SYLLABLES[b], SYLLABLES[c])
}

const PSEUDO_CAPACITY: usize = 1728;

fn procedural_skill(name: String, next_word: &mut impl FnMut() -> String) -> SkillDef {
    let mut ents = |k: usize| (0..k).map(|_| next_word()).collect::<Vec<_>>();
    let fill = |v: &[&str]| {
        v.iter()
            .map(|s| s.replace("{n}", &name))
            .collect::<Vec<_>>()
    };
    let get = Intent {
        requests: fill(&["ask {n} for {e}", "open {n} and find {e}", "{n} {e} please"]),
        fulfils: fill(&["here is {e} from {n}", "{n} found {e} for you"]),
        entities: ents(4),
    };
    let start = Intent {
        requests: fill(&["tell {n} to start {e}", "start {e} on {n}"]),
        fulfils: fill(&["{n} is starting {e}", "starting {e} with {n}"]),
        entities: ents(4),
    };
    SkillDef {
        name,
        intents: vec![get, start],
    }
}

/// Labeled and unlabeled sessions plus the vocabulary that tokenizes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub labeled: Vec<Session>,
    pub unlabeled: Vec<Session>,
}

/// The skill grammars and traffic model behind [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    skills: Vec<SkillDef>,
    major: usize,
    weights: Vec<f64>,
    vocab: Vocab,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let catalogue = major_catalogue();
        let extra_major = cfg.num_skills_major.saturating_sub(catalogue.len());
        let pseudo_needed = (extra_major + cfg.num_skills_minor) * 9;
        if pseudo_needed > PSEUDO_CAPACITY {
            return Err(Error::Config(format!(
                "{} procedural skills exceed the generator's word budget",
                extra_major + cfg.num_skills_minor
            )));
        }
        let mut counter = 0usize;
        let mut next_word = || {
            counter += 1;
            pseudo_word(counter - 1)
        };
        let mut skills: Vec<SkillDef> = catalogue.into_iter().take(cfg.num_skills_major).collect();
        for _ in 0..extra_major {
            let name = next_word();
            skills.push(procedural_skill(name, &mut next_word));
        }
        for _ in 0..cfg.num_skills_minor {
            let name = next_word();
            skills.push(procedural_skill(name, &mut next_word));
        }

        let zipf = |n: usize| -> Vec<f64> {
            let w: Vec<f64> = (0..n).map(|k| 1.0 / ((k + 1) as f64).powf(0.7)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };
        let major_share = 1.0
            - if cfg.num_skills_minor > 0 {
                cfg.minor_traffic_share
            } else {
                0.0
            };
        let mut weights: Vec<f64> = zipf(cfg.num_skills_major)
            .into_iter()
            .map(|w| w * major_share)
            .collect();
        weights.extend(
            zipf(cfg.num_skills_minor)
                .into_iter()
                .map(|w| w * cfg.minor_traffic_share),
        );

        let mut vocab = Vocab::new();
        for text in FAILURES
            .iter()
            .chain(&MOVE_ON)
            .chain(&["yes", "stop", "did you mean"])
        {
            vocab.extend_from(&text.replace("{e}", " "));
        }
        for s in &skills {
            for i in &s.intents {
                for t in i.requests.iter().chain(&i.fulfils).chain(&i.entities) {
                    vocab.extend_from(&t.replace("{e}", " "));
                }
            }
        }
        if vocab.len() > cfg.vocab_size {
            return Err(Error::Config(format!(
                "grammar needs {} words but vocab_size is {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            skills,
            major: cfg.num_skills_major,
            weights,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn skill_names(&self) -> impl Iterator<Item = &str> {
        self.skills.iter().map(|s| s.name.as_str())
    }

    pub fn is_major(&self, skill: &str) -> bool {
        self.skills[..self.major].iter().any(|s| s.name == skill)
    }

    fn pick_skill(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    fn pick_pattern(rng: &mut ChaCha8Rng, satisfying: bool) -> Pattern {
        let table: &[(Pattern, f64)] = if satisfying {
            &SAT_PATTERNS
        } else {
            &DSAT_PATTERNS
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(p, w) in table {
            acc += w;
            if u < acc {
                return p;
            }
        }
        table[table.len() - 1].0
    }

    fn turn(&self, utterance: &str, response: &str) -> Turn {
        Turn {
            utterance: self
                .vocab
                .encode(utterance)
                .expect("grammar word in vocabulary"),
            response: self
                .vocab
                .encode(response)
                .expect("grammar word in vocabulary"),
            raw_utterance: utterance.to_string(),
            raw_response: response.to_string(),
        }
    }

    /// The turns of one episode for `skill`.
    fn episode(&self, rng: &mut ChaCha8Rng, skill: usize, pattern: Pattern) -> Vec<Turn> {
        let def = &self.skills[skill];
        let intent = def.intents.choose(rng).expect("skills have intents");
        let entity = intent.entities.choose(rng).expect("intents have entities");
        let other_entity = loop {
            let e = intent.entities.choose(rng).expect("intents have entities");
            if e != entity || intent.entities.len() == 1 {
                break e;
            }
        };
        let req_idx = rng.gen_range(0..intent.requests.len());
        let request = |i: usize, e: &str| intent.requests[i].replace("{e}", e);
        let reworded = (req_idx + 1 + rng.gen_range(0..intent.requests.len().max(2) - 1))
            % intent.requests.len();
        let fulfil = |rng: &mut ChaCha8Rng, e: &str| {
            intent
                .fulfils
                .choose(rng)
                .expect("fulfilments")
                .replace("{e}", e)
        };
        let failure = FAILURES
            .choose(rng)
            .expect("failures")
            .replace("{e}", entity);
        let req = request(req_idx, entity);

        match pattern {
            Pattern::Fulfilled => vec![self.turn(&req, &fulfil(rng, entity))],
            Pattern::Confirmed => {
                let clarify = format!("did you mean {entity}");
                vec![
                    self.turn(&req, &clarify),
                    self.turn(&format!("yes {entity}"), &fulfil(rng, entity)),
                ]
            }
            Pattern::AcceptedLimitation => {
                let ack = MOVE_ON.choose(rng).expect("move-on phrases");
                vec![self.turn(&req, &failure), self.turn(ack, "")]
            }
            Pattern::RepeatedRequest => vec![
                self.turn(&req, &failure),
                self.turn(&request(reworded, entity), &fulfil(rng, entity)),
            ],
            Pattern::BargeIn => vec![
                self.turn(&req, &fulfil(rng, other_entity)),
                self.turn("stop", ""),
                self.turn(&request(reworded, entity), &fulfil(rng, entity)),
            ],
            Pattern::EmptyResponse => vec![
                self.turn(&req, ""),
                self.turn(&request(reworded, entity), &fulfil(rng, entity)),
            ],
            Pattern::WrongSkill => {
                let mut other = self.pick_skill(rng);
                while other == skill && self.skills.len() > 1 {
                    other = self.pick_skill(rng);
                }
                let odef = &self.skills[other];
                let oi = odef.intents.choose(rng).expect("intents");
                let oe = oi.entities.choose(rng).expect("entities");
                let wrong = oi
                    .fulfils
                    .choose(rng)
                    .expect("fulfilments")
                    .replace("{e}", oe);
                vec![
                    self.turn(&req, &wrong),
                    self.turn(&request(reworded, entity), &fulfil(rng, entity)),
                ]
            }
            Pattern::WrongEntity => vec![self.turn(&req, &fulfil(rng, other_entity))],
        }
    }

    fn context_episode(&self, rng: &mut ChaCha8Rng, skill: usize) -> Vec<Turn> {
        let s = if rng.gen_bool(self.cfg.skill_coherence) {
            skill
        } else {
            self.pick_skill(rng)
        };
        let satisfying = rng.gen_bool(self.cfg.sat_share());
        let p = Self::pick_pattern(rng, satisfying);
        self.episode(rng, s, p)
    }

    /// A session whose targeted episode follows `pattern` (or one drawn from
    /// the traffic model). Returns the session and the pattern used.
    pub fn session(
        &self,
        rng: &mut ChaCha8Rng,
        pattern: Option<Pattern>,
        labeled: bool,
    ) -> (Session, Pattern) {
        let skill = self.pick_skill(rng);
        let pattern = pattern.unwrap_or_else(|| {
            let satisfying = rng.gen_bool(self.base_sat_share());
            Self::pick_pattern(rng, satisfying)
        });
        let before = rng.gen_range(0..=self.cfg.max_episodes_before);
        let after = rng.gen_range(0..=self.cfg.max_episodes_after);
        let mut turns = Vec::new();
        for _ in 0..before {
            turns.extend(self.context_episode(rng, skill));
        }
        let mut targeted_index = turns.len();
        turns.extend(self.episode(rng, skill, pattern));
        for _ in 0..after {
            turns.extend(self.context_episode(rng, skill));
        }
        let (score, label) = if labeled {
            let mut satisfying = pattern.is_satisfying();
            if rng.gen_bool(self.cfg.label_noise) {
                satisfying = !satisfying;
            }
            let score = if satisfying {
                rng.gen_range(3..=5)
            } else {
                rng.gen_range(1..=2)
            };
            (
                Some(score),
                Some(score_to_label(score).expect("score in range")),
            )
        } else {
            targeted_index = rng.gen_range(0..turns.len());
            (None, None)
        };
        let session = Session::new(
            turns,
            targeted_index,
            self.skills[skill].name.clone(),
            score,
            label,
        )
        .expect("generated sessions are valid");
        (session, pattern)
    }

    /// Share of satisfying episodes before annotation noise so that the
    /// labeled prevalence lands on `sat_ratio`.
    fn base_sat_share(&self) -> f64 {
        let q = self.cfg.sat_share();
        let p = self.cfg.label_noise;
        ((q - p) / (1.0 - 2.0 * p)).clamp(0.0, 1.0)
    }
}

/// Generates the labeled and unlabeled corpora for `cfg`. The same config
/// always yields the same corpus.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    let gen = Generator::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labeled = (0..cfg.num_labeled)
        .map(|_| gen.session(&mut rng, None, true).0)
        .collect();
    let mut urng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_u64.rotate_left(32));
    let unlabeled = (0..cfg.num_unlabeled)
        .map(|_| gen.session(&mut urng, None, false).0)
        .collect();
    Ok(Corpus {
        vocab: gen.vocab,
        labeled,
        unlabeled,
    })
}

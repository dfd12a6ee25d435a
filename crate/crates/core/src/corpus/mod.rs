//! Synthetic emotion-labeled corpus with planted ground-truth cues, external
//! dataset ingestion, and the zero-shot prompt.
//!
//! Every synthetic instance carries at least one emotion-category cue of its
//! label, one label-specific concept cue followed by topic words the
//! language model can learn to predict, and clause punctuation drawn from a
//! shared syntax-cue pool. Joy and surprise share a small ambiguous cue set
//! so the surprise/joy co-activation failure mode is reproducible.

pub mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use vocab::{detokenize, render_prompt, tokenize, Vocab};

// ── emotions ────────────────────────────────────────────────────────

/// The six basic emotions in the fixed order used for restricted logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Joy,
    Sadness,
    Fear,
    Surprise,
    Disgust,
}

pub const EMOTIONS: [Emotion; 6] = [
    Emotion::Anger,
    Emotion::Joy,
    Emotion::Sadness,
    Emotion::Fear,
    Emotion::Surprise,
    Emotion::Disgust,
];

impl Emotion {
    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Joy => "joy",
            Emotion::Sadness => "sadness",
            Emotion::Fear => "fear",
            Emotion::Surprise => "surprise",
            Emotion::Disgust => "disgust",
        }
    }

    pub fn index(self) -> usize {
        EMOTIONS.iter().position(|&e| e == self).unwrap()
    }

    pub fn from_name(name: &str) -> Option<Emotion> {
        EMOTIONS.iter().copied().find(|e| e.name() == name)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ── cue lexicon ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueCategory {
    Syntax,
    Concept,
    Emotion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmbiguousCues {
    pub cues: Vec<String>,
    /// Emotions this cue set legitimately co-occurs with.
    pub emotions: Vec<Emotion>,
}

/// Off-label cue planting: instances labeled `label` additionally carry a
/// cue drawn from `cue_source`'s affect cues with probability `p`, so the
/// source emotion's cues become statistically ambiguous evidence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfusionRule {
    pub label: Emotion,
    pub cue_source: Emotion,
    pub p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CueLexicon {
    /// Direct affect words, per emotion.
    pub emotion_cues: Vec<Vec<String>>,
    /// Label-specific situational concepts, per emotion.
    pub concept_cues: Vec<Vec<String>>,
    /// Label-independent punctuation patterns and template markers.
    pub syntax_cues: Vec<String>,
    /// Shared neutral filler vocabulary (used for probe sentences too).
    pub fillers: Vec<String>,
    /// Cues shared between joy and surprise.
    pub ambiguous: AmbiguousCues,
    /// Off-label cue planting rules (confusion pressure).
    #[serde(default)]
    pub confusions: Vec<ConfusionRule>,
    /// Topic words that tend to follow each concept cue.
    pub topics: BTreeMap<String, Vec<String>>,
}

impl CueLexicon {
    /// All cue tokens with their category, in a deterministic order.
    pub fn tagged_cues(&self) -> Vec<(String, CueCategory)> {
        let mut out = Vec::new();
        for c in &self.syntax_cues {
            out.push((c.clone(), CueCategory::Syntax));
        }
        for cues in &self.concept_cues {
            for c in cues {
                out.push((c.clone(), CueCategory::Concept));
            }
        }
        for cues in &self.emotion_cues {
            for c in cues {
                out.push((c.clone(), CueCategory::Emotion));
            }
        }
        out
    }

    pub fn category_of(&self, cue: &str) -> Option<CueCategory> {
        self.tagged_cues().into_iter().find(|(c, _)| c == cue).map(|(_, cat)| cat)
    }

    /// The emotion whose cue list (emotion or concept category) contains
    /// `cue`, if exactly one does.
    pub fn emotion_of_cue(&self, cue: &str) -> Option<Emotion> {
        for (i, e) in EMOTIONS.iter().enumerate() {
            if self.emotion_cues[i].iter().any(|c| c == cue)
                || self.concept_cues[i].iter().any(|c| c == cue)
            {
                return Some(*e);
            }
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.emotion_cues.len() != 6 || self.concept_cues.len() != 6 {
            return Err(Error::config("lexicon must list cues for all six emotions"));
        }
        for (i, e) in EMOTIONS.iter().enumerate() {
            if self.emotion_cues[i].is_empty() {
                return Err(Error::config(format!("empty emotion-cue list for {}", e)));
            }
            if self.concept_cues[i].is_empty() {
                return Err(Error::config(format!("empty concept-cue list for {}", e)));
            }
        }
        // emotion-specific cue lists must be pairwise disjoint; the only
        // sanctioned overlap is the declared ambiguous set
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for i in 0..6 {
            for c in self.emotion_cues[i].iter().chain(self.concept_cues[i].iter()) {
                if let Some(prev) = seen.insert(c.as_str(), i) {
                    if prev != i {
                        return Err(Error::config(format!(
                            "cue `{}` appears for two emotions and is not declared ambiguous",
                            c
                        )));
                    }
                }
            }
        }
        for c in &self.ambiguous.cues {
            if seen.contains_key(c.as_str()) {
                return Err(Error::config(format!(
                    "ambiguous cue `{}` duplicates an emotion-specific cue",
                    c
                )));
            }
        }
        // each cue must carry exactly one category tag
        let tagged = self.tagged_cues();
        let mut uniq = BTreeSet::new();
        for (c, _) in &tagged {
            if !uniq.insert(c.clone()) {
                return Err(Error::config(format!("cue `{}` tagged with two categories", c)));
            }
        }
        Ok(())
    }

    /// Every distinct token the lexicon can produce, for vocabulary
    /// construction.
    pub fn all_tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for part in vocab::PROMPT_PREFIX.iter().chain(vocab::PROMPT_SUFFIX.iter()) {
            out.push(part.to_string());
        }
        for e in EMOTIONS {
            out.push(e.name().to_string());
        }
        out.extend(self.syntax_cues.iter().cloned());
        out.push(",".to_string());
        out.extend(self.ambiguous.cues.iter().cloned());
        for cues in self.emotion_cues.iter().chain(self.concept_cues.iter()) {
            out.extend(cues.iter().cloned());
        }
        for words in self.topics.values() {
            out.extend(words.iter().cloned());
        }
        out.extend(self.fillers.iter().cloned());
        out
    }
}

const NEUTRAL_FILLERS: &[&str] = &[
    "the", "a", "my", "our", "his", "her", "their", "this", "that", "some", "each", "every",
    "today", "yesterday", "morning", "evening", "afternoon", "night", "week", "month", "season",
    "walked", "looked", "found", "noticed", "watched", "carried", "placed", "opened", "closed",
    "waited", "turned", "passed", "stood", "sat", "moved", "stayed", "arrived", "returned",
    "small", "old", "young", "tall", "short", "wide", "narrow", "plain", "quiet", "slow",
    "gray", "round", "flat", "smooth", "rough", "heavy", "light", "early", "late", "near",
    "river", "house", "garden", "letter", "window", "meal", "road", "city", "town", "village",
    "train", "book", "music", "yard", "door", "voice", "story", "neighbor", "kitchen", "coat",
    "market", "bridge", "winter", "summer", "autumn", "spring", "paper", "glass", "table",
    "chair", "clock", "shoe", "field", "cloud", "stone", "grass", "branch", "lamp", "wall",
    "floor", "corner", "street", "shop", "coffee", "bread", "water", "rain", "wind", "hill",
    "path", "fence", "gate", "bird", "horse", "cat", "dog", "tree", "leaf", "flower", "box",
    "bag", "key", "coin", "map", "photo", "frame", "bell", "rope", "wheel", "boat", "dock",
    "shore", "sand", "wave", "snow", "ice", "smoke", "shadow", "mirror", "stairs", "roof",
    "brick", "nail", "tool", "bench", "park", "lane", "sign", "card", "note", "pen", "desk",
    "shelf", "jar", "cup", "plate", "spoon", "fork", "knife", "pot", "pan", "oven", "sink",
    "towel", "soap", "brush", "comb", "thread", "button", "cloth", "wool", "silk", "ribbon",
    "was", "is", "were", "been", "felt", "seemed", "under", "over", "with", "and", "then",
    "while", "after", "before", "into", "from", "about", "around", "between", "beside",
    "along", "through", "behind", "beyond", "upon", "during", "across", "toward", "within",
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "twenty", "thirty", "forty", "fifty", "hundred", "first", "second", "third",
    "white", "black", "red", "blue", "green", "yellow", "brown", "pale", "dark", "bright",
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "january",
    "march", "april", "june", "july", "august", "september", "october", "november", "december",
    "kept", "held", "took", "gave", "brought", "left", "set", "put", "laid", "hung", "drew",
    "room", "hall", "attic", "cellar", "porch", "hearth", "stove", "candle", "curtain", "rug",
    "barn", "meadow", "orchard", "valley", "ridge", "creek", "pond", "trail", "grove", "hedge",
];

/// Builds the default planted-cue lexicon. Surprise and disgust carry many
/// rare affect cues while the other emotions carry a few frequent ones, so
/// a briefly trained model under-learns exactly the emotions the downstream
/// steering stage is expected to repair.
pub fn default_lexicon() -> CueLexicon {
    let s = |v: &[&str]| -> Vec<String> { v.iter().map(|t| t.to_string()).collect() };

    let emotion_cues = vec![
        s(&["furious", "enraged", "livid"]),
        s(&["delighted", "gleeful", "overjoyed"]),
        s(&["mournful", "sorrowful", "dejected"]),
        s(&["terrified", "panicked", "petrified"]),
        s(&[
            "astonished",
            "startled",
            "stunned",
            "amazed",
            "dumbfounded",
            "flabbergasted",
            "astounded",
            "bewildered",
        ]),
        s(&[
            "disgusted",
            "revolted",
            "nauseated",
            "repulsed",
            "sickened",
            "queasy",
            "appalled",
            "grossed",
        ]),
    ];
    let concept_cues = vec![
        s(&["argument", "insult", "dispute"]),
        s(&["party", "holiday", "victory"]),
        s(&["funeral", "farewell", "mourning"]),
        s(&["darkness", "intruder", "ambush"]),
        s(&["lottery", "twist", "riddle"]),
        s(&["garbage", "mold", "sewage"]),
    ];

    let mut topics = BTreeMap::new();
    let mut add = |cue: &str, words: &[&str]| {
        topics.insert(cue.to_string(), s(words));
    };
    add("argument", &["shouting", "slammed", "heated"]);
    add("insult", &["harsh", "spat", "sneer"]);
    add("dispute", &["bitter", "endless", "sides"]);
    add("party", &["cake", "balloons", "guests"]);
    add("holiday", &["beach", "sunshine", "plans"]);
    add("victory", &["trophy", "cheers", "parade"]);
    add("funeral", &["flowers", "silence", "mourners"]);
    add("farewell", &["goodbye", "platform", "waving"]);
    add("mourning", &["veil", "grief", "stillness"]);
    add("darkness", &["creaking", "footsteps", "unknown"]);
    add("intruder", &["locks", "alarm", "stranger"]);
    add("ambush", &["sudden", "cornered", "trap"]);
    add("lottery", &["ticket", "numbers", "jackpot"]);
    add("twist", &["ending", "reveal", "plot"]);
    add("riddle", &["clue", "hidden", "answer"]);
    add("garbage", &["stench", "flies", "rotting"]);
    add("mold", &["damp", "spores", "crust"]);
    add("sewage", &["drain", "leak", "foul"]);

    CueLexicon {
        emotion_cues,
        concept_cues,
        syntax_cues: s(&["!", "?", ";", "--", ">>"]),
        fillers: s(NEUTRAL_FILLERS),
        ambiguous: AmbiguousCues {
            cues: s(&["unexpected", "gasped", "whirlwind"]),
            emotions: vec![Emotion::Joy, Emotion::Surprise],
        },
        confusions: vec![
            ConfusionRule { label: Emotion::Joy, cue_source: Emotion::Surprise, p: 0.40 },
            ConfusionRule { label: Emotion::Surprise, cue_source: Emotion::Joy, p: 0.15 },
            ConfusionRule { label: Emotion::Anger, cue_source: Emotion::Disgust, p: 0.40 },
            ConfusionRule { label: Emotion::Disgust, cue_source: Emotion::Anger, p: 0.15 },
        ],
        topics,
    }
}

/// Builds the closed vocabulary for a lexicon.
pub fn build_vocab(lexicon: &CueLexicon) -> Vocab {
    Vocab::build(lexicon.all_tokens())
}

// ── instances ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    External,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Instance {
    /// Body tokens (the prompt template is added by `render_prompt`).
    pub text: Vec<String>,
    pub label: Emotion,
    pub provenance: Provenance,
    /// Cue tokens present in `text` (empty for external data).
    pub planted_cues: Vec<String>,
}

impl Instance {
    pub fn prompt_tokens(&self) -> Vec<String> {
        render_prompt(&self.text).expect("instance text is non-empty")
    }

    /// Prompt plus the label token: the next-token training sequence.
    pub fn training_sequence(&self) -> Vec<String> {
        let mut t = self.prompt_tokens();
        t.push(self.label.name().to_string());
        t
    }
}

// ── generation ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_per_emotion: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an eligible instance carries one ambiguous cue.
    pub ambiguity_p: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { n_per_emotion: 500, min_len: 9, max_len: 15, ambiguity_p: 0.3, seed: 11 }
    }
}

pub fn generate_corpus(lexicon: &CueLexicon, cfg: &GeneratorConfig) -> Result<Vec<Instance>> {
    lexicon.validate()?;
    if cfg.n_per_emotion == 0 {
        return Err(Error::config("n_per_emotion must be >= 1"));
    }
    if cfg.min_len < 8 || cfg.max_len < cfg.min_len {
        return Err(Error::config("length range must satisfy 8 <= min <= max"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_per_emotion * 6);
    for &label in &EMOTIONS {
        for _ in 0..cfg.n_per_emotion {
            out.push(generate_instance(lexicon, cfg, label, &mut rng));
        }
    }
    Ok(out)
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [String]) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

/// Head-heavy cue sampling: with pools beyond three cues, the first two
/// carry half the mass and the tail shares the rest, so tail cues stay
/// rare in training.
fn pick_skewed<'a>(rng: &mut ChaCha8Rng, pool: &'a [String]) -> &'a str {
    if pool.len() <= 3 {
        return pick(rng, pool);
    }
    if rng.gen_bool(0.5) {
        &pool[rng.gen_range(0..2)]
    } else {
        &pool[rng.gen_range(2..pool.len())]
    }
}

fn clause_punct(lexicon: &CueLexicon, rng: &mut ChaCha8Rng, cues: &mut Vec<String>) -> String {
    if rng.gen_bool(0.55) {
        let p = pick(rng, &lexicon.syntax_cues).to_string();
        cues.push(p.clone());
        p
    } else {
        ",".to_string()
    }
}

fn generate_instance(
    lexicon: &CueLexicon,
    cfg: &GeneratorConfig,
    label: Emotion,
    rng: &mut ChaCha8Rng,
) -> Instance {
    let e = label.index();
    let mut cues = Vec::new();

    // concept clause: fillers, concept cue, topic words, punctuation
    let concept = pick(rng, &lexicon.concept_cues[e]).to_string();
    let mut clause_a: Vec<String> = Vec::new();
    for _ in 0..rng.gen_range(1..=2) {
        clause_a.push(pick(rng, &lexicon.fillers).to_string());
    }
    clause_a.push(concept.clone());
    if let Some(topic) = lexicon.topics.get(&concept) {
        for _ in 0..rng.gen_range(1..=2) {
            clause_a.push(pick(rng, topic).to_string());
        }
    }
    clause_a.push(clause_punct(lexicon, rng, &mut cues));
    cues.push(concept);

    // emotion clause: fillers, affect cue, optional punctuation
    let affect = pick_skewed(rng, &lexicon.emotion_cues[e]).to_string();
    let mut clause_b: Vec<String> = Vec::new();
    for _ in 0..rng.gen_range(1..=2) {
        clause_b.push(pick(rng, &lexicon.fillers).to_string());
    }
    clause_b.push(affect.clone());
    if rng.gen_bool(0.6) {
        clause_b.push(clause_punct(lexicon, rng, &mut cues));
    }
    cues.push(affect);

    let mut text: Vec<String> = if rng.gen_bool(0.5) {
        clause_a.into_iter().chain(clause_b).collect()
    } else {
        clause_b.into_iter().chain(clause_a).collect()
    };

    if lexicon.ambiguous.emotions.contains(&label) && rng.gen_bool(cfg.ambiguity_p) {
        let amb = pick(rng, &lexicon.ambiguous.cues).to_string();
        let pos = rng.gen_range(0..=text.len());
        text.insert(pos, amb.clone());
        cues.push(amb);
    }

    for rule in &lexicon.confusions {
        if rule.label == label && rng.gen_bool(rule.p) {
            let off = pick(rng, &lexicon.emotion_cues[rule.cue_source.index()]).to_string();
            let pos = rng.gen_range(0..=text.len());
            text.insert(pos, off.clone());
            cues.push(off);
        }
    }

    let target = rng.gen_range(cfg.min_len..=cfg.max_len);
    while text.len() < target {
        text.push(pick(rng, &lexicon.fillers).to_string());
    }

    Instance { text, label, provenance: Provenance::Synthetic, planted_cues: cues }
}

// ── persistence (json-lines) ────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    text: String,
    label: Emotion,
    cues: Vec<String>,
    provenance: Provenance,
}

pub fn save_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let rec = InstanceRecord {
            text: inst.text.join(" "),
            label: inst.label,
            cues: inst.planted_cues.clone(),
            provenance: inst.provenance,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(e.to_string()))?;
        writeln!(f, "{}", line)?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(e.to_string()))?;
        out.push(Instance {
            text: rec.text.split_whitespace().map(|s| s.to_string()).collect(),
            label: rec.label,
            provenance: rec.provenance,
            planted_cues: rec.cues,
        });
    }
    Ok(out)
}

// ── external ingestion ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExternalFormat {
    DelimitedText,
    JsonLines,
}

/// Maps dataset-specific label strings onto the six-emotion taxonomy.
#[derive(Clone, Debug, Default)]
pub struct LabelMap {
    map: HashMap<String, Emotion>,
}

impl LabelMap {
    /// Identity mapping over the canonical six labels.
    pub fn canonical() -> Self {
        let mut map = HashMap::new();
        for e in EMOTIONS {
            map.insert(e.name().to_string(), e);
        }
        LabelMap { map }
    }

    pub fn insert(&mut self, from: impl Into<String>, to: Emotion) {
        self.map.insert(from.into(), to);
    }

    pub fn resolve(&self, label: &str) -> Option<Emotion> {
        self.map.get(label.trim()).copied()
    }

    /// Loads a two-column delimited file (`source<ws>target`) on top of the
    /// canonical mapping.
    pub fn load(path: &Path) -> Result<Self> {
        let mut lm = LabelMap::canonical();
        let f = BufReader::new(std::fs::File::open(path)?);
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (src, dst) = match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::format(format!(
                        "label map line {}: expected two columns",
                        n + 1
                    )))
                }
            };
            let e = Emotion::from_name(dst).ok_or_else(|| {
                Error::format(format!("label map line {}: unknown target `{}`", n + 1, dst))
            })?;
            lm.insert(src, e);
        }
        Ok(lm)
    }
}

pub struct IngestReport {
    pub instances: Vec<Instance>,
    pub skipped: usize,
}

pub fn ingest_external(
    path: &Path,
    format: ExternalFormat,
    label_map: &LabelMap,
) -> Result<IngestReport> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut instances = Vec::new();
    let mut skipped = 0usize;
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Option<(String, String)> = match format {
            ExternalFormat::DelimitedText => {
                let mut parts = line.splitn(2, '\t');
                match (parts.next(), parts.next()) {
                    (Some(text), Some(label)) => Some((text.to_string(), label.to_string())),
                    _ => None,
                }
            }
            ExternalFormat::JsonLines => {
                #[derive(Deserialize)]
                struct Row {
                    text: String,
                    label: String,
                }
                serde_json::from_str::<Row>(&line).ok().map(|r| (r.text, r.label))
            }
        };
        let Some((text, label)) = parsed else {
            skipped += 1;
            continue;
        };
        let Some(emotion) = label_map.resolve(&label) else {
            skipped += 1;
            continue;
        };
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            skipped += 1;
            continue;
        }
        instances.push(Instance {
            text: tokens,
            label: emotion,
            provenance: Provenance::External,
            planted_cues: Vec::new(),
        });
    }
    if instances.is_empty() {
        return Err(Error::config(format!(
            "no mappable rows in {} ({} skipped)",
            path.display(),
            skipped
        )));
    }
    Ok(IngestReport { instances, skipped })
}

// ── splits ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, validation: 0.1, test: 0.1, seed: 17 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.train + self.validation + self.test;
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {}, expected 1", s)));
        }
        if self.train < 0.0 || self.validation < 0.0 || self.test < 0.0 {
            return Err(Error::config("split fractions must be non-negative"));
        }
        Ok(())
    }
}

/// Index-based stratified partition of a corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(instances: &[Instance], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n_parts = [spec.train, spec.validation, spec.test]
        .iter()
        .filter(|&&f| f > 0.0)
        .count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Splits { train: vec![], validation: vec![], test: vec![] };
    for &e in &EMOTIONS {
        let mut idx: Vec<usize> = instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label == e)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < n_parts {
            return Err(Error::config(format!(
                "stratum {} has {} instances, fewer than {} splits",
                e,
                idx.len(),
                n_parts
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * spec.train).round() as usize;
        let n_val = (n as f64 * spec.validation).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        out.train.extend(&idx[..n_train]);
        out.validation.extend(&idx[n_train..n_train + n_val]);
        out.test.extend(&idx[n_train + n_val..]);
    }
    Ok(out)
}

/// Exactly `k` training instances per emotion, deterministic per seed.
pub fn sample_k_per_emotion(
    instances: &[Instance],
    train: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * 6);
    for &e in &EMOTIONS {
        let mut idx: Vec<usize> =
            train.iter().copied().filter(|&i| instances[i].label == e).collect();
        if idx.len() < k {
            return Err(Error::config(format!(
                "emotion {} has only {} training instances, need {}",
                e,
                idx.len(),
                k
            )));
        }
        idx.shuffle(&mut rng);
        out.extend(&idx[..k]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig { n_per_emotion: n, seed, ..GeneratorConfig::default() }
    }

    #[test]
    fn default_lexicon_is_valid() {
        default_lexicon().validate().unwrap();
        assert!(build_vocab(&default_lexicon()).len() > 250);
    }

    #[test]
    fn balanced_corpus_with_label_cues() {
        let lex = default_lexicon();
        let corpus = generate_corpus(&lex, &small_cfg(100, 3)).unwrap();
        assert_eq!(corpus.len(), 600);
        for e in EMOTIONS {
            assert_eq!(corpus.iter().filter(|i| i.label == e).count(), 100);
        }
        for inst in &corpus {
            let has_affect = inst
                .text
                .iter()
                .any(|t| lex.emotion_cues[inst.label.index()].contains(t));
            assert!(has_affect, "instance lacks an emotion cue of its label");
            // planted cues are a subset of the token list
            for c in &inst.planted_cues {
                assert!(inst.text.contains(c), "planted cue `{}` missing from text", c);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_corpora() {
        let lex = default_lexicon();
        let a = generate_corpus(&lex, &small_cfg(40, 9)).unwrap();
        let b = generate_corpus(&lex, &small_cfg(40, 9)).unwrap();
        let sa = serde_json::to_string(&a).unwrap();
        let sb = serde_json::to_string(&b).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn ambiguous_rate_close_to_configured() {
        let lex = default_lexicon();
        let cfg = small_cfg(1000, 5);
        let corpus = generate_corpus(&lex, &cfg).unwrap();
        assert_eq!(corpus.len(), 6000);
        let eligible: Vec<&Instance> = corpus
            .iter()
            .filter(|i| lex.ambiguous.emotions.contains(&i.label))
            .collect();
        let with_amb = eligible
            .iter()
            .filter(|i| i.text.iter().any(|t| lex.ambiguous.cues.contains(t)))
            .count();
        let rate = with_amb as f64 / eligible.len() as f64;
        assert!((rate - 0.3).abs() < 0.05, "ambiguous rate {}", rate);
    }

    #[test]
    fn empty_cue_list_is_config_error() {
        let mut lex = default_lexicon();
        lex.emotion_cues[2].clear();
        assert!(generate_corpus(&lex, &small_cfg(5, 1)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = generate_corpus(&default_lexicon(), &small_cfg(10, 2)).unwrap();
        save_jsonl(&path, &corpus).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(serde_json::to_string(&corpus).unwrap(), serde_json::to_string(&loaded).unwrap());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let corpus = generate_corpus(&default_lexicon(), &small_cfg(100, 7)).unwrap();
        let spec = SplitSpec { train: 0.8, validation: 0.1, test: 0.1, seed: 13 };
        let s1 = split(&corpus, &spec).unwrap();
        let s2 = split(&corpus, &spec).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.validation, s2.validation);
        assert_eq!(s1.test, s2.test);
        assert_eq!(s1.train.len(), 480);
        assert_eq!(s1.validation.len(), 60);
        assert_eq!(s1.test.len(), 60);
        for e in EMOTIONS {
            let per = s1.train.iter().filter(|&&i| corpus[i].label == e).count();
            assert_eq!(per, 80);
        }
        // union is a partition of the corpus
        let mut all: Vec<usize> =
            s1.train.iter().chain(&s1.validation).chain(&s1.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
    }

    #[test]
    fn stratum_smaller_than_split_count_errors() {
        let corpus = generate_corpus(&default_lexicon(), &small_cfg(2, 7)).unwrap();
        let spec = SplitSpec { train: 0.5, validation: 0.25, test: 0.25, seed: 1 };
        assert!(split(&corpus, &spec).is_err());
    }

    #[test]
    fn sample_k_counts_and_distinct_seeds() {
        let corpus = generate_corpus(&default_lexicon(), &small_cfg(50, 7)).unwrap();
        let splits = split(&corpus, &SplitSpec::default()).unwrap();
        let s5 = sample_k_per_emotion(&corpus, &splits.train, 5, 0).unwrap();
        assert_eq!(s5.len(), 30);
        let s1 = sample_k_per_emotion(&corpus, &splits.train, 1, 0).unwrap();
        assert_eq!(s1.len(), 6);
        let subsets: Vec<Vec<usize>> = (0..5)
            .map(|seed| {
                let mut s = sample_k_per_emotion(&corpus, &splits.train, 5, seed).unwrap();
                s.sort_unstable();
                s
            })
            .collect();
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(subsets[i], subsets[j], "seeds {} and {} drew one subset", i, j);
            }
        }
        // no duplicate identities
        let mut s5s = s5.clone();
        s5s.sort_unstable();
        s5s.dedup();
        assert_eq!(s5s.len(), 30);
    }

    #[test]
    fn sample_k_insufficient_names_emotion() {
        let corpus = generate_corpus(&default_lexicon(), &small_cfg(4, 7)).unwrap();
        let splits = split(&corpus, &SplitSpec::default()).unwrap();
        let err = sample_k_per_emotion(&corpus, &splits.train, 50, 0).unwrap_err();
        assert!(err.to_string().contains("anger"));
    }

    #[test]
    fn ingest_jsonl_and_alias_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"text\": \"won a prize\", \"label\": \"joy\"}\n",
                "{\"text\": \"heard a noise\", \"label\": \"fear\"}\n",
                "{\"text\": \"lost my keys\", \"label\": \"anger\"}\n",
            ),
        )
        .unwrap();
        let rep = ingest_external(&path, ExternalFormat::JsonLines, &LabelMap::canonical()).unwrap();
        assert_eq!(rep.instances.len(), 3);
        assert_eq!(rep.skipped, 0);

        let path2 = dir.path().join("alias.jsonl");
        std::fs::write(&path2, "{\"text\": \"sunny day\", \"label\": \"happiness\"}\n").unwrap();
        let mut lm = LabelMap::canonical();
        lm.insert("happiness", Emotion::Joy);
        let rep2 = ingest_external(&path2, ExternalFormat::JsonLines, &lm).unwrap();
        assert_eq!(rep2.instances[0].label, Emotion::Joy);
        assert_eq!(rep2.instances[0].provenance, Provenance::External);
        assert!(rep2.instances[0].planted_cues.is_empty());
    }

    #[test]
    fn ingest_skips_unmappable_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.tsv");
        let mut body = String::new();
        for i in 0..8 {
            body.push_str(&format!("text number {}\tjoy\n", i));
        }
        body.push_str("weird one\tunknowable\n");
        body.push_str("no label column\n");
        std::fs::write(&path, body).unwrap();
        let rep =
            ingest_external(&path, ExternalFormat::DelimitedText, &LabelMap::canonical()).unwrap();
        assert_eq!(rep.instances.len(), 8);
        assert_eq!(rep.skipped, 2);
    }

    #[test]
    fn ingest_zero_mappable_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "something\tnotalabel\n").unwrap();
        assert!(ingest_external(&path, ExternalFormat::DelimitedText, &LabelMap::canonical())
            .is_err());
    }
}

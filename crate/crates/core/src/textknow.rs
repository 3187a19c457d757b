//! The language path: an 8-part chain-of-thought prompt suite per category,
//! an LLM client that records to and replays from a JSON-lines fixture, a
//! small masked language model trained on the responses, attention pooling
//! of token embeddings into one vector per category, and bilinear matching
//! of those vectors against an image embedding.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, cross_entropy, encoder_block, init_encoder, linear, xavier, Adam, EncoderVars};

pub const PROMPT_COUNT: usize = 8;

/// `{category}` marks where the category name is substituted.
const TEMPLATES: [&str; PROMPT_COUNT] = [
    "Introduction: Provide an overview of the {category} nanomaterial category and its significance in various fields.",
    "Definition and Structure: Define the {category} nanomaterial category and describe its typical structure at the nanoscale.",
    "Synthesis Methods: Explore different methods used to synthesize or fabricate nanomaterials in the {category} category. Discuss their advantages and limitations.",
    "Properties: Highlight the unique physical, chemical, and electronic properties exhibited by nanomaterials in the {category} category. Discuss how these properties differ from their bulk counterparts.",
    "Applications: Explore the wide range of applications where nanomaterials in the {category} category are utilized. Discuss their potential impact in fields such as electronics, energy, medicine, environmental remediation, etc.",
    "Surface Modification: Describe the strategies used to modify the surface properties of nanomaterials in the {category} category, such as functionalization, coating, or doping. Explain how these modifications enhance their performance or enable specific applications.",
    "Toxicity and Safety: Address the potential health and environmental concerns associated with nanomaterials in the {category} category. Discuss studies on their toxicity, risk assessment, and safety measures to mitigate any potential hazards.",
    "Future Directions: Discuss current research trends and future prospects for nanomaterials in the {category} category. Highlight emerging technologies, challenges, and areas of active exploration.",
];

/// The ten SEM micrograph categories, in the order the synthetic generator
/// assigns them to class indices.
pub const SEM_CATEGORIES: [&str; 10] = [
    "biological",
    "fibres",
    "films",
    "MEMS",
    "nanowires",
    "particles",
    "patterned_surface",
    "porous_sponge",
    "powder",
    "tips",
];

/// Recorded responses for every SEM category and prompt.
pub const BUNDLED_FIXTURE: &str = include_str!("../fixtures/sem_descriptions.jsonl");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSuite {
    pub category: String,
    /// Exactly [`PROMPT_COUNT`], Introduction first, Future Directions last.
    pub prompts: Vec<String>,
}

pub fn render_cot_prompts(category: &str) -> Result<PromptSuite> {
    if category.trim().is_empty() {
        return Err(Error::EmptyCategoryName);
    }
    Ok(PromptSuite {
        category: category.to_string(),
        prompts: TEMPLATES
            .iter()
            .map(|t| t.replace("{category}", category))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Fixture and clients

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub category: String,
    /// 1-based.
    pub prompt_id: u8,
    pub prompt: String,
    pub response: String,
}

/// Responses keyed by `(category, prompt_id)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fixture {
    records: BTreeMap<(String, u8), FixtureRecord>,
}

impl Fixture {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fixture::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            f.insert(serde_json::from_str(line)?)?;
        }
        Ok(f)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_FIXTURE).expect("bundled fixture parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes records sorted by key, one JSON object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in self.records.values() {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn insert(&mut self, r: FixtureRecord) -> Result<()> {
        if r.prompt_id == 0 || r.prompt_id as usize > PROMPT_COUNT {
            return Err(Error::InvalidArgument(format!(
                "prompt_id {} outside 1..={PROMPT_COUNT}",
                r.prompt_id
            )));
        }
        self.records.insert((r.category.clone(), r.prompt_id), r);
        Ok(())
    }

    pub fn get(&self, category: &str, prompt_id: u8) -> Result<&FixtureRecord> {
        self.records
            .get(&(category.to_string(), prompt_id))
            .ok_or_else(|| Error::FixtureMiss {
                category: category.to_string(),
                prompt_id,
            })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &FixtureRecord> {
        self.records.values()
    }

    /// Distinct categories, sorted.
    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.records.keys().map(|k| k.0.clone()).collect();
        c.dedup();
        c
    }

    /// True when every prompt of `category` has a response.
    pub fn covers(&self, category: &str) -> bool {
        (1..=PROMPT_COUNT as u8).all(|i| self.get(category, i).is_ok())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Live,
    Replay,
}

impl FromStr for ClientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(ClientMode::Live),
            "replay" => Ok(ClientMode::Replay),
            _ => Err(Error::InvalidArgument(format!("client mode `{s}` is not live|replay"))),
        }
    }
}

/// Chat-completions client with fixed deterministic decoding.
#[derive(Clone, Debug)]
pub struct LiveClient {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl LiveClient {
    /// Reads `LLM_ENDPOINT`, `LLM_MODEL` and the optional `LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Ok(LiveClient {
            endpoint: var("LLM_ENDPOINT")
                .ok_or_else(|| Error::TransportError("LLM_ENDPOINT is not set".into()))?,
            model: var("LLM_MODEL")
                .ok_or_else(|| Error::TransportError("LLM_MODEL is not set".into()))?,
            api_key: var("LLM_API_KEY"),
            timeout: Duration::from_secs(120),
        })
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "top_p": 1,
        })
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let transport = |e: ureq::Error| Error::TransportError(e.to_string());
        let mut resp = req.send_json(self.request_body(prompt)).map_err(transport)?;
        let v: serde_json::Value = resp.body_mut().read_json().map_err(transport)?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::TransportError(format!("response lacks choices[0].message.content: {v}")))
    }
}

/// Documents for `suite` from a fixture; never touches the network.
pub fn replay_documents(suite: &PromptSuite, fixture: &Fixture) -> Result<Vec<String>> {
    (1..=suite.prompts.len() as u8)
        .map(|i| Ok(fixture.get(&suite.category, i)?.response.clone()))
        .collect()
}

/// Queries `client` for every prompt and records the responses into the
/// fixture at `path`, creating it if absent.
pub fn fetch_live(suite: &PromptSuite, client: &LiveClient, path: &Path) -> Result<Vec<String>> {
    let mut fixture = if path.exists() { Fixture::load(path)? } else { Fixture::default() };
    let mut docs = Vec::with_capacity(suite.prompts.len());
    for (i, prompt) in suite.prompts.iter().enumerate() {
        let response = client.complete(prompt)?;
        fixture.insert(FixtureRecord {
            category: suite.category.clone(),
            prompt_id: i as u8 + 1,
            prompt: prompt.clone(),
            response: response.clone(),
        })?;
        docs.push(response);
    }
    fixture.save(path)?;
    Ok(docs)
}

pub fn fetch_description(suite: &PromptSuite, mode: ClientMode, fixture_path: &Path) -> Result<Vec<String>> {
    match mode {
        ClientMode::Replay => replay_documents(suite, &Fixture::load(fixture_path)?),
        ClientMode::Live => fetch_live(suite, &LiveClient::from_env()?, fixture_path),
    }
}

// ---------------------------------------------------------------------------
// Corpus and vocabulary

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<mask>", "<unk>"];

/// Lowercased alphanumeric runs.
pub fn split_words(doc: &str) -> Vec<String> {
    doc.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCorpus {
    pub categories: Vec<String>,
    /// Raw documents per category, parallel to `categories`.
    pub documents: Vec<Vec<String>>,
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl TextCorpus {
    /// Vocabulary: the three special ids, then words by descending frequency,
    /// ties broken lexicographically.
    pub fn new(categories: Vec<String>, documents: Vec<Vec<String>>) -> Result<Self> {
        if categories.len() != documents.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} categories with {} document lists",
                categories.len(),
                documents.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in documents.iter().flatten() {
            for w in split_words(doc) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(TextCorpus {
            categories,
            documents,
            ids,
            tokens,
        })
    }

    /// Every category in the fixture, sorted, with responses in prompt order.
    pub fn from_fixture(fixture: &Fixture) -> Result<Self> {
        let categories = fixture.categories();
        let documents = categories
            .iter()
            .map(|c| {
                fixture
                    .records()
                    .filter(|r| &r.category == c)
                    .map(|r| r.response.clone())
                    .collect()
            })
            .collect();
        Self::new(categories, documents)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Every token in id order.
    pub fn vocabulary(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenized documents of `category`, or `None` when absent.
    pub fn category_tokens(&self, category: &str) -> Option<Vec<Vec<usize>>> {
        let i = self.categories.iter().position(|c| c == category)?;
        Some(self.documents[i].iter().map(|d| tokenize_text(d, self)).collect())
    }

    /// All documents tokenized and cut into chunks of at most `max_len`.
    pub fn sequences(&self, max_len: usize) -> Vec<Vec<usize>> {
        self.documents
            .iter()
            .flatten()
            .flat_map(|d| {
                tokenize_text(d, self)
                    .chunks(max_len.max(1))
                    .map(<[usize]>::to_vec)
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

pub fn tokenize_text(doc: &str, corpus: &TextCorpus) -> Vec<usize> {
    split_words(doc).iter().map(|w| corpus.id(w)).collect()
}

// ---------------------------------------------------------------------------
// Small masked language model

pub const LM_PREFIX: &str = "text.lm";
pub const POOL_NAME: &str = "text.u";
pub const MATCH_NAME: &str = "text.v";
pub const MAX_LEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d: 64,
            heads: 4,
            ff_width: 128,
            max_len: MAX_LEN,
        }
    }
}

/// Token embeddings `V×d`, one encoder block, and the MLM projection `d×V`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallLm<T: Element> {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    /// Entries under `text.lm.`.
    pub params: ParamSet<T>,
}

fn lm_name(s: &str) -> String {
    format!("{LM_PREFIX}.{s}")
}

impl<T: Element> SmallLm<T> {
    pub fn init(cfg: LmConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.heads == 0 || cfg.d % cfg.heads != 0 || cfg.max_len == 0 {
            return Err(Error::InvalidArgument(format!("invalid LM shape {cfg:?}")));
        }
        let mut params = ParamSet::new();
        params.insert(lm_name("embed"), xavier(rng, vocab_size, cfg.d));
        init_encoder(&mut params, rng, &lm_name("enc"), cfg.d, cfg.ff_width);
        params.insert(lm_name("mlm.w"), xavier(rng, cfg.d, vocab_size));
        params.insert(lm_name("mlm.b"), Tensor::zeros([1, vocab_size]));
        Ok(SmallLm {
            cfg,
            vocab_size,
            params,
        })
    }

    /// Reassembles from a parameter set holding `text.lm.*` entries.
    pub fn from_params(cfg: LmConfig, params: &ParamSet<T>) -> Result<Self> {
        let params = params.subset(&format!("{LM_PREFIX}."));
        let (v, d) = params.get(&lm_name("embed"))?.dims2()?;
        let (d2, v2) = params.get(&lm_name("mlm.w"))?.dims2()?;
        if d != cfg.d || d2 != d || v2 != v {
            return Err(Error::ShapeMismatch(format!(
                "embedding {v}×{d} and output {d2}×{v2} disagree with d = {}",
                cfg.d
            )));
        }
        Ok(SmallLm {
            cfg,
            vocab_size: v,
            params,
        })
    }
}

/// Fixed sinusoidal position table `m×d`.
pub fn sinusoidal_positions<T: Element>(m: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([m, d]);
    for p in 0..m {
        for j in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = p as f64 * rate;
            t.set(p, j, T::c(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    t
}

fn one_hot<T: Element>(ids: &[usize], width: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([ids.len(), width]);
    for (r, &i) in ids.iter().enumerate() {
        if i >= width {
            return Err(Error::InvalidArgument(format!("token id {i} ≥ vocabulary {width}")));
        }
        t.set(r, i, T::one());
    }
    Ok(t)
}

/// Contextual embeddings `m×d` of one chunk (`1 ≤ m ≤ max_len`).
fn record_encode_chunk<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &LmConfig,
    tokens: &[usize],
) -> Result<Var> {
    let embed = bound.var(&lm_name("embed"))?;
    let vocab = g.shape(embed)[0];
    let sel = g.constant(one_hot(tokens, vocab)?);
    let x = g.matmul(sel, embed)?;
    let pos = g.constant(sinusoidal_positions(tokens.len(), cfg.d));
    let x = g.add(x, pos)?;
    let enc = EncoderVars::from_bound(bound, &lm_name("enc"))?;
    encoder_block(g, x, &enc, cfg.heads)
}

/// Contextual embeddings `m×d`; sequences longer than `max_len` are encoded
/// as independent consecutive chunks.
pub fn record_encode_text<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &LmConfig,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let parts = tokens
        .chunks(cfg.max_len)
        .map(|c| record_encode_chunk(g, bound, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

pub fn encode_text<T: Element>(tokens: &[usize], lm: &SmallLm<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = lm.params.bind(&mut g);
    let h = record_encode_text(&mut g, &bound, &lm.cfg, tokens)?;
    Ok(g.value(h).clone())
}

/// `⌈rate·len⌉` distinct positions (at least one), sorted.
pub fn mask_positions(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let k = ((rate * len as f64).ceil() as usize).clamp(1, len);
    let mut pos = rand::seq::index::sample(rng, len, k).into_vec();
    pos.sort_unstable();
    pos
}

/// Mean cross-entropy of the true tokens at `masked` positions of `tokens`
/// after replacing them with the mask id.
pub fn record_mlm_loss<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &LmConfig,
    tokens: &[usize],
    masked: &[usize],
) -> Result<Var> {
    if masked.is_empty() || masked.iter().any(|&p| p >= tokens.len()) {
        return Err(Error::InvalidArgument(format!(
            "masked positions {masked:?} for length {}",
            tokens.len()
        )));
    }
    let mut input = tokens.to_vec();
    for &p in masked {
        input[p] = MASK_ID;
    }
    let h = record_encode_text(g, bound, cfg, &input)?;
    let pick = g.constant(one_hot(masked, tokens.len())?);
    let hm = g.matmul(pick, h)?;
    let logits = linear(g, hm, bound.var(&lm_name("mlm.w"))?, Some(bound.var(&lm_name("mlm.b"))?))?;
    let probs = g.softmax(logits, 1)?;
    let targets: Vec<usize> = masked.iter().map(|&p| tokens[p]).collect();
    cross_entropy(g, probs, &targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmOptions {
    pub mask_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
}

impl Default for MlmOptions {
    fn default() -> Self {
        MlmOptions {
            mask_rate: 0.15,
            epochs: 5,
            seed: 0,
            lr: 1e-3,
        }
    }
}

/// Masked-LM pretraining with one Adam step per sequence. Masks are drawn
/// from an RNG seeded once with `opts.seed`, in corpus order, so equal seeds
/// give equal mask sets. Returns the trained model and the mean loss of each
/// epoch.
pub fn mlm_pretrain<T: Element>(
    corpus: &TextCorpus,
    lm: &SmallLm<T>,
    opts: &MlmOptions,
) -> Result<(SmallLm<T>, Vec<f64>)> {
    if !(opts.mask_rate > 0.0 && opts.mask_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask_rate {} outside (0, 1)",
            opts.mask_rate
        )));
    }
    if lm.vocab_size != corpus.vocab_size() {
        return Err(Error::ShapeMismatch(format!(
            "model vocabulary {} vs corpus {}",
            lm.vocab_size,
            corpus.vocab_size()
        )));
    }
    let seqs = corpus.sequences(lm.cfg.max_len);
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = nn::rng(opts.seed);
    let mut out = lm.clone();
    let mut adam = Adam::new(opts.lr);
    let names: Vec<String> = out.params.names().map(str::to_string).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        let mut total = 0.0;
        for seq in &seqs {
            let masked = mask_positions(seq.len(), opts.mask_rate, &mut rng);
            let mut g = Graph::new();
            let bound = out.params.bind(&mut g);
            let loss = record_mlm_loss(&mut g, &bound, &out.cfg, seq, &masked)?;
            let l = g.value(loss).data()[0].f64();
            if !l.is_finite() {
                return Err(Error::NonFiniteResult("masked-LM loss".into()));
            }
            total += l;
            let grads = g.backward(loss, Tensor::scalar(T::one()))?;
            let mut gs = ParamSet::new();
            for n in &names {
                if let Some(t) = grads.get(bound.var(n)?) {
                    gs.insert(n.clone(), t.clone());
                }
            }
            adam.step(&mut out.params, &gs)?;
        }
        trace.push(total / seqs.len() as f64);
    }
    Ok((out, trace))
}

// ---------------------------------------------------------------------------
// Pooling, knowledge bank and matching

/// `α = softmax(h·uᵀ)` over rows, `h_text = α·h`. Returns `(h_text 1×d, α 1×m)`.
pub fn record_attention_pool<T: Element>(g: &mut Graph<T>, h: Var, u: Var) -> Result<(Var, Var)> {
    let (_, d) = g.value(h).dims2()?;
    if g.shape(u) != [1, d] {
        return Err(Error::ShapeMismatch(format!(
            "pooling vector {:?} for width {d}",
            g.shape(u)
        )));
    }
    let ut = g.transpose(u)?;
    let logits = g.matmul(h, ut)?;
    let logits = g.transpose(logits)?;
    let alpha = g.softmax(logits, 1)?;
    Ok((g.matmul(alpha, h)?, alpha))
}

pub fn attention_pool<T: Element>(h: &Tensor<T>, u: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (m, _) = h.dims2()?;
    if m == 0 {
        return Err(Error::EmptySequence);
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let uv = g.constant(u.reshape([1, u.len()])?);
    let (pooled, alpha) = record_attention_pool(&mut g, hv, uv)?;
    Ok((g.value(pooled).clone(), g.value(alpha).data().to_vec()))
}

/// Records the `c×d` bank: row k pools the token embeddings of all documents
/// of category k. Absent or token-less categories get a zero row.
pub fn record_bank<T: Element>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &LmConfig,
    per_category: &[Option<Vec<Vec<usize>>>],
) -> Result<Var> {
    let u = bound.var(POOL_NAME)?;
    let mut rows = Vec::with_capacity(per_category.len());
    for docs in per_category {
        let encoded = docs
            .iter()
            .flatten()
            .filter(|d| !d.is_empty())
            .map(|d| record_encode_text(g, bound, cfg, d))
            .collect::<Result<Vec<_>>>()?;
        let row = match encoded.len() {
            0 => g.constant(Tensor::zeros([1, cfg.d])),
            1 => record_attention_pool(g, encoded[0], u)?.0,
            _ => {
                let h = g.concat(&encoded, 0)?;
                record_attention_pool(g, h, u)?.0
            }
        };
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::IncompleteBank("no categories".into()));
    }
    g.concat(&rows, 0)
}

/// Token ids of each requested category, warning about categories the
/// corpus lacks.
pub fn category_token_lists(corpus: &TextCorpus, categories: &[String]) -> Vec<Option<Vec<Vec<usize>>>> {
    categories
        .iter()
        .map(|c| {
            let t = corpus.category_tokens(c);
            if t.is_none() {
                log::warn!("no descriptions for category `{c}`; using a zero text embedding");
            }
            t
        })
        .collect()
}

/// Initial pooling and matching vectors: `u = 0` (mean pooling) and `v = 1`
/// (plain dot-product matching).
pub fn init_text_heads<T: Element>(params: &mut ParamSet<T>, d: usize) {
    params.insert(POOL_NAME, Tensor::zeros([1, d]));
    params.insert(MATCH_NAME, Tensor::ones([1, d]));
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextKnowledgeBank<T: Element> {
    /// Label order.
    pub categories: Vec<String>,
    /// `c×d`, row k belongs to `categories[k]`.
    pub h_text: Tensor<T>,
    /// Pooling vector `1×d`.
    pub u: Tensor<T>,
    /// Matching vector `1×d`.
    pub v: Tensor<T>,
}

impl<T: Element> TextKnowledgeBank<T> {
    /// Encodes every category's documents with `lm`; `heads` holds `text.u`
    /// and `text.v`.
    pub fn build(
        corpus: &TextCorpus,
        lm: &SmallLm<T>,
        heads: &ParamSet<T>,
        categories: &[String],
    ) -> Result<Self> {
        let mut params = lm.params.clone();
        params.insert(POOL_NAME, heads.get(POOL_NAME)?.clone());
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let lists = category_token_lists(corpus, categories);
        let bank = record_bank(&mut g, &bound, &lm.cfg, &lists)?;
        Ok(TextKnowledgeBank {
            categories: categories.to_vec(),
            h_text: g.value(bank).clone(),
            u: heads.get(POOL_NAME)?.clone(),
            v: heads.get(MATCH_NAME)?.clone(),
        })
    }

    pub fn check_complete(&self) -> Result<()> {
        let c = self.categories.len();
        let (rows, d) = self.h_text.dims2()?;
        if c == 0 || rows != c {
            return Err(Error::IncompleteBank(format!("{rows} embeddings for {c} categories")));
        }
        if self.v.len() != d || self.u.len() != d {
            return Err(Error::IncompleteBank(format!(
                "pool/match vectors of length {}/{} for width {d}",
                self.u.len(),
                self.v.len()
            )));
        }
        Ok(())
    }
}

/// `score_k = vᵀ(h_text_k ⊙ h_fus)`; returns `(scores 1×c, softmax 1×c)`.
pub fn record_match_scores<T: Element>(g: &mut Graph<T>, h_fus: Var, bank: Var, v: Var) -> Result<(Var, Var)> {
    let (_, d) = g.value(bank).dims2()?;
    if g.shape(h_fus) != [1, d] || g.shape(v) != [1, d] {
        return Err(Error::ShapeMismatch(format!(
            "h_fus {:?}, v {:?} against bank {:?}",
            g.shape(h_fus),
            g.shape(v),
            g.shape(bank)
        )));
    }
    let w = g.mul(v, h_fus)?;
    let bt = g.transpose(bank)?;
    let scores = g.matmul(w, bt)?;
    let probs = g.softmax(scores, 1)?;
    Ok((scores, probs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome<T: Element> {
    /// Best category; the lowest index wins ties.
    pub beta: usize,
    /// `1×d`, the bank row of `beta`.
    pub h_text_fus: Tensor<T>,
    pub scores: Vec<T>,
    pub probs: Vec<T>,
}

pub fn match_text_embedding<T: Element>(h_fus: &Tensor<T>, bank: &TextKnowledgeBank<T>) -> Result<MatchOutcome<T>> {
    bank.check_complete()?;
    let mut g = Graph::new();
    let h = g.constant(h_fus.reshape([1, h_fus.len()])?);
    let b = g.constant(bank.h_text.clone());
    let v = g.constant(bank.v.reshape([1, bank.v.len()])?);
    let (s, p) = record_match_scores(&mut g, h, b, v)?;
    let scores = g.value(s).data().to_vec();
    let beta = nn::argmax(&scores);
    Ok(MatchOutcome {
        beta,
        h_text_fus: bank.h_text.rows(beta, beta + 1)?,
        scores,
        probs: g.value(p).data().to_vec(),
    })
}

#[cfg(test)]
mod tests;

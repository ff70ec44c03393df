//! Chain-of-key: keys are hyphenated word tuples, and the model must emit a
//! sequence of in-context keys in which each key starts with the word the
//! previous key ended with.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static WORDS: &str = include_str!("../../data/words.txt");

/// The bundled lowercase word list.
pub fn word_list() -> Vec<&'static str> {
    WORDS.lines().filter(|l| !l.is_empty()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainKeyInstance {
    pub instance_id: String,
    pub prompt: String,
    /// Keys in prompt order.
    pub keys: Vec<String>,
    pub successor_map: BTreeMap<String, String>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainScore {
    pub valid_prefix_length: usize,
    pub score: f64,
}

fn first_word(key: &str) -> &str {
    key.split('-').next().unwrap_or(key)
}

fn last_word(key: &str) -> &str {
    key.rsplit('-').next().unwrap_or(key)
}

/// English name of `n` for numbers below one million; digits otherwise.
pub fn spell_number(n: usize) -> String {
    const ONES: [&str; 20] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen",
    ];
    const TENS: [&str; 10] = [
        "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
    ];
    fn below_thousand(n: usize) -> String {
        let mut parts = Vec::new();
        if n >= 100 {
            parts.push(format!("{} hundred", ONES[n / 100]));
        }
        let r = n % 100;
        if r > 0 || n == 0 {
            parts.push(if r < 20 {
                ONES[r].to_string()
            } else if r.is_multiple_of(10) {
                TENS[r / 10].to_string()
            } else {
                format!("{}-{}", TENS[r / 10], ONES[r % 10])
            });
        }
        parts.join(" ")
    }
    match n {
        0..=999 => below_thousand(n),
        1000..=999_999 if n.is_multiple_of(1000) => format!("{} thousand", below_thousand(n / 1000)),
        1000..=999_999 => format!(
            "{} thousand {}",
            below_thousand(n / 1000),
            below_thousand(n % 1000)
        ),
        _ => n.to_string(),
    }
}

/// Render the task prompt: instructions with an example chain, the keys one
/// per block, then the instructions again ending in the answer cue.
pub fn build_prompt(keys: &[String], example: &[String], t: usize) -> String {
    let task = format!(
        "You are given many keys composed of a few words. Your task is to generate a chain of \
         {t} keys such that the first word of the current key is the last word of the previous \
         key. Separate the keys with comma."
    );
    let mut prompt = task.clone();
    if !example.is_empty() {
        prompt.push_str(&format!(" Example: {}.", example.join(", ")));
    }
    prompt.push_str(" You must generate keys that are in the context. DO NOT REPEAT THE EXAMPLE.\n\nContext:");
    let body: Vec<String> = keys.iter().map(|k| format!("Name of key: {k}")).collect();
    prompt.push_str(&body.join("\n\n"));
    prompt.push_str("\n\n");
    prompt.push_str(&task);
    prompt.push_str(&format!(
        "You must generate keys that are in the context. Chain of {} keys:",
        spell_number(t)
    ));
    prompt
}

fn join_key(link_from: &str, fillers: &[&str], link_to: &str) -> String {
    let mut parts = Vec::with_capacity(fillers.len() + 2);
    parts.push(link_from);
    parts.extend_from_slice(fillers);
    parts.push(link_to);
    parts.join("-")
}

/// Generate an instance with `n_keys` keys of `w` words each.
///
/// The keys' boundary words form one cycle, so every key has exactly one
/// successor and one predecessor. Interior words (for `w > 2`) are unique to
/// their key. The example chain in the prompt uses words that do not occur
/// among the keys.
pub fn generate_chain_instance(
    n_keys: usize,
    w: usize,
    t: usize,
    seed: u64,
) -> Result<ChainKeyInstance> {
    if w < 2 {
        return Err(Error::config("chain keys need at least two words"));
    }
    if t == 0 {
        return Err(Error::config("chain length must be positive"));
    }
    if n_keys < 2 || n_keys < t {
        return Err(Error::config(format!(
            "need at least max(2, T={t}) keys, got {n_keys}"
        )));
    }
    let fillers = w - 2;
    let needed = n_keys * (1 + fillers) + (t + 1) + t * fillers;
    let mut words = word_list();
    if words.len() < needed {
        return Err(Error::config(format!(
            "instance needs {needed} distinct words, the word list has {}",
            words.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words.shuffle(&mut rng);
    let (links, rest) = words.split_at(n_keys);
    let (inner, rest) = rest.split_at(n_keys * fillers);
    let (ex_links, rest) = rest.split_at(t + 1);
    let ex_inner = &rest[..t * fillers];

    let chain: Vec<String> = (0..n_keys)
        .map(|i| {
            join_key(
                links[i],
                &inner[i * fillers..(i + 1) * fillers],
                links[(i + 1) % n_keys],
            )
        })
        .collect();
    let successor_map: BTreeMap<String, String> = (0..n_keys)
        .map(|i| (chain[i].clone(), chain[(i + 1) % n_keys].clone()))
        .collect();
    let example: Vec<String> = (0..t)
        .map(|i| {
            join_key(
                ex_links[i],
                &ex_inner[i * fillers..(i + 1) * fillers],
                ex_links[i + 1],
            )
        })
        .collect();
    let mut keys = chain;
    keys.shuffle(&mut rng);
    let prompt = build_prompt(&keys, &example, t);
    Ok(ChainKeyInstance {
        instance_id: format!("ck-{seed}"),
        prompt,
        keys,
        successor_map,
        t,
        w,
        seed,
    })
}

impl ChainKeyInstance {
    /// An instance over explicitly given keys. Successors are derived from
    /// the words; keys without a unique successor are left out of the map.
    pub fn from_keys(instance_id: &str, keys: Vec<String>, example: &[String], t: usize) -> Self {
        let mut successor_map = BTreeMap::new();
        for k in &keys {
            let next: Vec<&String> = keys
                .iter()
                .filter(|c| *c != k && first_word(c) == last_word(k))
                .collect();
            if let [only] = next.as_slice() {
                successor_map.insert(k.clone(), (*only).clone());
            }
        }
        let w = keys.first().map_or(0, |k| k.split('-').count());
        Self {
            instance_id: instance_id.to_string(),
            prompt: build_prompt(&keys, example, t),
            keys,
            successor_map,
            t,
            w,
            seed: 0,
        }
    }

    /// Check the structural guarantees of a generated instance.
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::format("instance T must be positive"));
        }
        let mut seen = HashSet::new();
        for k in &self.keys {
            if k.split('-').count() != self.w {
                return Err(Error::format(format!("key {k:?} does not have {} words", self.w)));
            }
            for word in k.split('-') {
                let boundary = word == first_word(k) || word == last_word(k);
                if !seen.insert(word) && !boundary {
                    return Err(Error::format(format!("word {word:?} is reused")));
                }
            }
        }
        for k in &self.keys {
            let next: Vec<&String> = self
                .keys
                .iter()
                .filter(|c| *c != k && first_word(c) == last_word(k))
                .collect();
            if next.len() != 1 || self.successor_map.get(k) != Some(next[0]) {
                return Err(Error::format(format!("key {k:?} lacks a unique successor")));
            }
        }
        if self.successor_map.len() != self.keys.len() {
            return Err(Error::format("successor map does not match the keys"));
        }
        Ok(())
    }
}

/// Score `output`: the longest prefix of comma-separated keys that are all
/// in context and, from the second key on, start with the previous key's
/// last word; divided by `T`.
pub fn evaluate_chain(instance: &ChainKeyInstance, output: &str) -> ChainScore {
    let known: HashSet<&str> = instance.keys.iter().map(String::as_str).collect();
    let mut valid = 0;
    let mut prev: Option<&str> = None;
    if !output.trim().is_empty() {
        for item in output.split(',').map(str::trim) {
            if valid == instance.t || !known.contains(item) {
                break;
            }
            if let Some(p) = prev {
                if first_word(item) != last_word(p) {
                    break;
                }
            }
            valid += 1;
            prev = Some(item);
        }
    }
    ChainScore {
        valid_prefix_length: valid,
        score: if instance.t == 0 {
            0.0
        } else {
            valid as f64 / instance.t as f64
        },
    }
}

/// The gold chain of `len` keys starting at `start`.
pub fn oracle_chain(instance: &ChainKeyInstance, start: &str, len: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(len);
    let mut cur = start.to_string();
    for i in 0..len {
        if i > 0 {
            cur = instance
                .successor_map
                .get(&cur)
                .ok_or_else(|| Error::contract(format!("key {cur:?} has no successor")))?
                .clone();
        } else if !instance.keys.contains(&cur) {
            return Err(Error::contract(format!("start key {cur:?} is not in the instance")));
        }
        out.push(cur.clone());
    }
    Ok(out)
}

/// What a perfect model would answer, starting from the first listed key.
pub fn oracle_output(instance: &ChainKeyInstance) -> Result<String> {
    let start = instance
        .keys
        .first()
        .ok_or_else(|| Error::contract("instance has no keys"))?;
    Ok(oracle_chain(instance, start, instance.t)?.join(", "))
}

/// One line of model output to be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub instance_id: String,
    pub output_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub instance_id: String,
    pub score: f64,
}

pub fn parse_instance_line(line: &str) -> Result<ChainKeyInstance> {
    let inst: ChainKeyInstance = serde_json::from_str(line)?;
    inst.validate()?;
    Ok(inst)
}

pub fn parse_eval_line(line: &str) -> Result<EvalRecord> {
    Ok(serde_json::from_str(line)?)
}

/// Score JSON-lines outputs against a set of instances.
pub fn evaluate_jsonl(instances: &[ChainKeyInstance], outputs: &str) -> Result<Vec<EvalResult>> {
    let by_id: BTreeMap<&str, &ChainKeyInstance> = instances
        .iter()
        .map(|i| (i.instance_id.as_str(), i))
        .collect();
    outputs
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let rec = parse_eval_line(line)?;
            let inst = by_id.get(rec.instance_id.as_str()).ok_or_else(|| {
                Error::format(format!("unknown instance id {:?}", rec.instance_id))
            })?;
            Ok(EvalResult {
                score: evaluate_chain(inst, &rec.output_text).score,
                instance_id: rec.instance_id,
            })
        })
        .collect()
}

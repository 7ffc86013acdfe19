//! Byte tokenizer, chat template, and seeded synthetic instruction tasks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const ROLE_SEP: u32 = 258;
pub const PAD: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Role tags emitted as plain bytes in front of each chat turn.
pub const SYSTEM_TAG: &str = "S:";
pub const USER_TAG: &str = "U:";
pub const ASSISTANT_TAG: &str = "A:";

/// Modulus used by the modular-addition task.
pub const MODADD_MODULUS: u32 = 23;
/// Number of key=value pairs shown in a lookup prompt.
pub const KVLOOKUP_PAIRS: core::ops::RangeInclusive<usize> = 2..=4;
/// Letters per lookup value.
pub const KVLOOKUP_VALUE_LEN: usize = 1;

/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| b as u32).collect()
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    /// Raw bytes of the non-special tokens.
    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }

    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }

    pub fn is_special(id: u32) -> bool {
        (256..VOCAB_SIZE as u32).contains(&id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Modadd,
    Kvlookup,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Modadd, TaskKind::Kvlookup];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modadd => "modadd",
            TaskKind::Kvlookup => "kvlookup",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            TaskKind::Copy => 1,
            TaskKind::Reverse => 2,
            TaskKind::Modadd => 3,
            TaskKind::Kvlookup => 4,
        }
    }

    fn system_prompt(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modadd => "add",
            TaskKind::Kvlookup => "lookup",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownTaskKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatExample {
    pub system: String,
    pub user: String,
    pub assistant: String,
    pub task_kind: TaskKind,
}

fn letters(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn make_example(kind: TaskKind, rng: &mut ChaCha8Rng) -> ChatExample {
    let (user, assistant) = match kind {
        TaskKind::Copy => {
            let len = rng.random_range(4..=8);
            let s = letters(rng, len);
            (s.clone(), s)
        }
        TaskKind::Reverse => {
            let len = rng.random_range(4..=8);
            let s = letters(rng, len);
            (s.clone(), s.chars().rev().collect())
        }
        TaskKind::Modadd => {
            let a = rng.random_range(0..MODADD_MODULUS);
            let b = rng.random_range(0..MODADD_MODULUS);
            (
                format!("{a}+{b} mod {MODADD_MODULUS}?"),
                format!("{}", (a + b) % MODADD_MODULUS),
            )
        }
        TaskKind::Kvlookup => {
            let pairs = rng.random_range(KVLOOKUP_PAIRS);
            let mut keys: Vec<u8> = (b'a'..=b'z').collect();
            keys.shuffle(rng);
            keys.truncate(pairs);
            let values: Vec<String> = (0..pairs).map(|_| letters(rng, KVLOOKUP_VALUE_LEN)).collect();
            let query = rng.random_range(0..pairs);
            let mut user = String::new();
            for (i, (&k, v)) in keys.iter().zip(&values).enumerate() {
                if i > 0 {
                    user.push(' ');
                }
                user.push(k as char);
                user.push('=');
                user.push_str(v);
            }
            user.push('?');
            user.push(keys[query] as char);
            (user, values[query].clone())
        }
    };
    ChatExample {
        system: kind.system_prompt().to_string(),
        user,
        assistant,
        task_kind: kind,
    }
}

/// `n` examples of one task; example `i` depends only on `(kind, seed, i)`.
pub fn gen_tasks(kind: TaskKind, seed: u64, n: usize) -> Result<Vec<ChatExample>> {
    if n == 0 {
        return Err(Error::EmptyInput("task count"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((kind.stream_id() << 48) | i as u64);
            make_example(kind, &mut rng)
        })
        .collect())
}

/// Round-robin mixture of several task kinds.
pub fn gen_mixture(kinds: &[TaskKind], seed: u64, n: usize) -> Result<Vec<ChatExample>> {
    if kinds.is_empty() {
        return Err(Error::EmptyInput("task kinds"));
    }
    let per = n.div_ceil(kinds.len());
    let sets: Vec<Vec<ChatExample>> = kinds
        .iter()
        .map(|&k| gen_tasks(k, seed, per.max(1)))
        .collect::<Result<_>>()?;
    Ok((0..n).map(|i| sets[i % kinds.len()][i / kinds.len()].clone()).collect())
}

/// A templated example: `tokens[..prefill_len]` is the prompt `x`, the rest
/// is the response `y` (assistant text followed by EOS).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Formatted {
    pub tokens: Vec<u32>,
    pub prefill_len: usize,
}

impl Formatted {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prefill_len]
    }

    pub fn response(&self) -> &[u32] {
        &self.tokens[self.prefill_len..]
    }
}

/// The chat prompt `BOS S: system ROLE_SEP U: user ROLE_SEP A:`.
pub fn format_prompt(system: &str, user: &str, tok: &Tokenizer) -> Vec<u32> {
    let mut out = alloc::vec![BOS];
    out.extend(tok.encode_str(SYSTEM_TAG));
    out.extend(tok.encode_str(system));
    out.push(ROLE_SEP);
    out.extend(tok.encode_str(USER_TAG));
    out.extend(tok.encode_str(user));
    out.push(ROLE_SEP);
    out.extend(tok.encode_str(ASSISTANT_TAG));
    out
}

pub fn format_chat(ex: &ChatExample, tok: &Tokenizer) -> Formatted {
    let mut tokens = format_prompt(&ex.system, &ex.user, tok);
    let prefill_len = tokens.len();
    tokens.extend(tok.encode_str(&ex.assistant));
    tokens.push(EOS);
    Formatted { tokens, prefill_len }
}

/// Exact-match answer extracted from generated tokens (stops at EOS).
pub fn answer_text(generated: &[u32], tok: &Tokenizer) -> String {
    let end = generated.iter().position(|&t| t == EOS).unwrap_or(generated.len());
    tok.decode_lossy(&generated[..end])
}

//! Byte-level text mode: one token per byte, offset past the reserved ids.

use super::{Token, FIRST_CONTENT};
use crate::error::{Error, Result};

/// Instruction-following prompt frame wrapped around every text prompt.
pub const PROMPT_PREFIX: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request. ### USER: ";
pub const RESPONSE_MARKER: &str = " ASSISTANT: ";

/// Vocabulary size needed to represent every byte.
pub const BYTE_VOCAB: usize = 256 + FIRST_CONTENT as usize;

pub fn format_prompt(instruction: &str) -> String {
    format!("{PROMPT_PREFIX}{instruction}{RESPONSE_MARKER}")
}

pub fn encode(text: &str) -> Vec<Token> {
    text.bytes().map(|b| b as Token + FIRST_CONTENT).collect()
}

/// Decodes content tokens, dropping reserved ids.
pub fn decode(tokens: &[Token]) -> Result<String> {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t >= FIRST_CONTENT)
        .map(|&t| {
            u8::try_from(t - FIRST_CONTENT)
                .map_err(|_| Error::invalid(format!("token {t} is not a byte token")))
        })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

/// Template-wrapped, encoded prompt for a plain-text instruction.
pub fn encode_prompt(instruction: &str) -> Vec<Token> {
    encode(&format_prompt(instruction))
}

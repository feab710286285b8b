//! Sliding-window majority vote over per-token exit bits.

use std::collections::VecDeque;

use crate::trace::{THINK_CLOSE, THINK_OPEN};

use super::ExitError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmup {
    /// No exit before `window` tokens have been seen.
    RequireFullWindow,
    /// A partially filled window may already hold a majority.
    AllowPartial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitConfig {
    pub window: usize,
    /// Minimum number of 1-bits in the window that triggers the exit.
    pub majority_min: usize,
    pub prob_threshold: f64,
    pub max_cot_tokens: usize,
    pub warmup: Warmup,
}

impl Default for ExitConfig {
    fn default() -> Self {
        ExitConfig {
            window: 10,
            majority_min: 6,
            prob_threshold: 0.7,
            max_cot_tokens: 32_768,
            warmup: Warmup::RequireFullWindow,
        }
    }
}

impl ExitConfig {
    pub fn validate(&self) -> Result<(), ExitError> {
        if self.window == 0 || self.majority_min == 0 || self.majority_min > self.window {
            return Err(ExitError::BadConfig(format!(
                "need 1 <= majority_min <= window, got {} and {}",
                self.majority_min, self.window
            )));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(ExitError::BadConfig(format!("tau {} outside (0, 1)", self.prob_threshold)));
        }
        if self.max_cot_tokens == 0 {
            return Err(ExitError::BadConfig("max_cot_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Exit,
}

#[derive(Debug, Clone)]
pub struct ExitSession {
    config: ExitConfig,
    bits: VecDeque<bool>,
    ones: usize,
    tokens_seen: usize,
    exited_at: Option<usize>,
    in_think_region: bool,
}

impl ExitSession {
    /// A session that starts inside the think region, as when the chat
    /// template already opened it.
    pub fn new(config: ExitConfig) -> Result<Self, ExitError> {
        config.validate()?;
        Ok(ExitSession {
            bits: VecDeque::with_capacity(config.window),
            config,
            ones: 0,
            tokens_seen: 0,
            exited_at: None,
            in_think_region: true,
        })
    }

    pub fn config(&self) -> &ExitConfig {
        &self.config
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    /// Number of tokens consumed when the exit fired (M_early).
    pub fn exited_at(&self) -> Option<usize> {
        self.exited_at
    }

    pub fn in_think_region(&self) -> bool {
        self.in_think_region
    }

    /// Feeds the probe probability of the next token.
    pub fn step(&mut self, p: f64) -> Result<Decision, ExitError> {
        let bit = self.in_think_region && p >= self.config.prob_threshold;
        self.push_bit(bit)
    }

    /// Like [`step`](Self::step), but tracks think markers: marker tokens get
    /// a 0 bit and toggle the region.
    pub fn step_token(&mut self, token_text: &str, p: f64) -> Result<Decision, ExitError> {
        match token_text.trim() {
            THINK_OPEN => {
                let d = self.push_bit(false);
                self.in_think_region = true;
                d
            }
            THINK_CLOSE => {
                self.in_think_region = false;
                self.push_bit(false)
            }
            _ => self.step(p),
        }
    }

    pub fn push_bit(&mut self, bit: bool) -> Result<Decision, ExitError> {
        if self.exited_at.is_some() {
            return Err(ExitError::SteppedAfterExit);
        }
        self.tokens_seen += 1;
        self.bits.push_back(bit);
        self.ones += usize::from(bit);
        if self.bits.len() > self.config.window {
            let old = self.bits.pop_front().expect("window is non-empty");
            self.ones -= usize::from(old);
        }
        let window_ready =
            self.config.warmup == Warmup::AllowPartial || self.bits.len() == self.config.window;
        if window_ready && self.ones >= self.config.majority_min {
            self.exited_at = Some(self.tokens_seen);
            return Ok(Decision::Exit);
        }
        Ok(Decision::Continue)
    }
}

/// Exit position (1-based token count) for a fixed bit stream.
pub fn first_exit(config: &ExitConfig, bits: &[bool]) -> Result<Option<usize>, ExitError> {
    let mut s = ExitSession::new(config.clone())?;
    for &b in bits {
        if s.push_bit(b)? == Decision::Exit {
            return Ok(s.exited_at());
        }
    }
    Ok(None)
}

//! Exponential backoff for calls to upstream HTTP services.

use std::thread;
use std::time::Duration;

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt; `0` means a single attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub multiplier: f64,
    /// Upper bound of the random extra delay, as a fraction of the delay.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            multiplier: 2.0,
            jitter: 0.25,
        }
    }
}

/// Outcome of a single attempt that did not succeed.
#[derive(Debug)]
pub enum Attempt<E> {
    /// Worth retrying (connection failure, 429, 5xx).
    Transient(E),
    /// Retrying cannot help (4xx, malformed response).
    Fatal(E),
}

impl RetryPolicy {
    /// Delay slept before retry number `retry` (0-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.multiplier.powi(retry as i32))
    }

    fn delay(&self, retry: u32) -> Duration {
        let nominal = self.nominal_delay(retry);
        if self.jitter > 0.0 && !nominal.is_zero() {
            nominal.mul_f64(1.0 + rand::rng().random_range(0.0..self.jitter))
        } else {
            nominal
        }
    }

    /// Runs `op` until it succeeds, fails fatally, or retries run out.
    /// Returns the last error together with the number of attempts made.
    pub fn run<T, E>(&self, mut op: impl FnMut(u32) -> Result<T, Attempt<E>>) -> Result<T, (E, u32)> {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err((e, attempt + 1)),
                Err(Attempt::Transient(e)) => {
                    if attempt >= self.max_retries {
                        return Err((e, attempt + 1));
                    }
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

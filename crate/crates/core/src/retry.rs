//! Retry policy shared by every network-facing backend.

use std::time::Duration;

/// How many times a transient failure is retried and how long to wait between attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 1,
            backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            backoff: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent. Returns the final result and the number of
    /// retries that were performed.
    pub fn run<T, E>(
        &self,
        is_retryable: impl Fn(&E) -> bool,
        mut op: impl FnMut(u32) -> Result<T, E>,
    ) -> (Result<T, E>, u32) {
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return (Ok(v), attempt),
                Err(e) if attempt < self.max_retries && is_retryable(&e) => {
                    attempt += 1;
                    if !self.backoff.is_zero() {
                        std::thread::sleep(self.backoff);
                    }
                }
                Err(e) => return (Err(e), attempt),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_once_then_succeeds() {
        let policy = RetryPolicy::none();
        let policy = RetryPolicy {
            max_retries: 1,
            ..policy
        };
        let (res, retries) = policy.run(
            |_: &&str| true,
            |attempt| {
                if attempt == 0 {
                    Err("boom")
                } else {
                    Ok(7)
                }
            },
        );
        assert_eq!(res, Ok(7));
        assert_eq!(retries, 1);
    }

    #[test]
    fn gives_up_after_budget() {
        let policy = RetryPolicy {
            max_retries: 1,
            backoff: Duration::ZERO,
        };
        let mut calls = 0;
        let (res, retries) = policy.run(
            |_: &&str| true,
            |_| -> Result<(), _> {
                calls += 1;
                Err("boom")
            },
        );
        assert!(res.is_err());
        assert_eq!(retries, 1);
        assert_eq!(calls, 2);
    }

    #[test]
    fn non_retryable_fails_fast() {
        let policy = RetryPolicy::default();
        let mut calls = 0;
        let (res, retries) = policy.run(
            |_: &&str| false,
            |_| -> Result<(), _> {
                calls += 1;
                Err("fatal")
            },
        );
        assert!(res.is_err());
        assert_eq!((retries, calls), (0, 1));
    }
}

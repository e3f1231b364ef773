//! Bounded-concurrency batch execution with per-request retry.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use super::{VlmAnswer, VlmBackend, VlmError, VlmRequest};

/// Exponential backoff: attempt `n` sleeps `base_delay * 2^n`, capped at
/// `max_delay`, up to `max_retries` retries after the initial attempt.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// Maximum requests outstanding at any time. Must be at least 1.
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Runs every request against the backend with at most
/// `opts.max_in_flight` outstanding at once. Each request retries
/// retryable failures with exponential backoff; individual failures are
/// reported per index and never abort the batch. Results come back sorted
/// by the original request index.
pub fn query_batch(
    backend: &dyn VlmBackend,
    requests: &[VlmRequest],
    opts: &BatchOptions,
) -> Vec<(usize, Result<Vec<VlmAnswer>, VlmError>)> {
    assert!(opts.max_in_flight >= 1, "max_in_flight must be >= 1");
    if requests.is_empty() {
        return Vec::new();
    }
    let workers = opts.max_in_flight.min(requests.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();

    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= requests.len() {
                    break;
                }
                let result = query_with_retry(backend, &requests[idx], &opts.retry);
                if tx.send((idx, result)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);

    let mut results: Vec<_> = rx.into_iter().collect();
    results.sort_by_key(|(idx, _)| *idx);
    results
}

fn query_with_retry(
    backend: &dyn VlmBackend,
    request: &VlmRequest,
    retry: &RetryPolicy,
) -> Result<Vec<VlmAnswer>, VlmError> {
    let mut attempt = 0u32;
    loop {
        match backend.query(request) {
            Ok(answers) => return Ok(answers),
            Err(err) if err.is_retryable() && attempt < retry.max_retries => {
                thread::sleep(retry.delay_for(attempt));
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
    use std::sync::Mutex;

    use super::*;
    use crate::vlm::VlmAnswer;

    /// Backend that fails a scripted number of times per request, then
    /// succeeds, while tracking the maximum observed concurrency.
    struct Instrumented {
        fail_first: u32,
        attempts: Mutex<std::collections::HashMap<String, u32>>,
        in_flight: AtomicUsize,
        max_in_flight: AtomicUsize,
        total_calls: AtomicU32,
        permanent_fail_prompt: Option<String>,
    }

    impl Instrumented {
        fn new(fail_first: u32) -> Self {
            Self {
                fail_first,
                attempts: Mutex::new(Default::default()),
                in_flight: AtomicUsize::new(0),
                max_in_flight: AtomicUsize::new(0),
                total_calls: AtomicU32::new(0),
                permanent_fail_prompt: None,
            }
        }
    }

    impl VlmBackend for Instrumented {
        fn query(&self, request: &VlmRequest) -> Result<Vec<VlmAnswer>, VlmError> {
            let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_in_flight.fetch_max(current, Ordering::SeqCst);
            self.total_calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));

            let result = (|| {
                if let Some(prompt) = &self.permanent_fail_prompt {
                    if request.prompt() == prompt {
                        return Err(VlmError::Http {
                            status: 400,
                            body: "bad prompt".into(),
                        });
                    }
                }
                let mut attempts = self.attempts.lock().unwrap();
                let n = attempts.entry(request.prompt().to_string()).or_insert(0);
                *n += 1;
                if *n <= self.fail_first {
                    Err(VlmError::Transport("flaky".into()))
                } else {
                    Ok(vec![VlmAnswer::new(request.prompt().to_string(), 1.0).unwrap()])
                }
            })();

            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            result
        }

        fn backend_id(&self) -> &str {
            "instrumented"
        }
    }

    fn requests(n: usize) -> Vec<VlmRequest> {
        (0..n)
            .map(|i| VlmRequest::new(vec![i as u8], format!("q{i}"), 1).unwrap())
            .collect()
    }

    fn fast_retry(max_retries: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    #[test]
    fn batch_is_complete_and_indexed() {
        let backend = Instrumented::new(0);
        let reqs = requests(100);
        let results = query_batch(
            &backend,
            &reqs,
            &BatchOptions {
                max_in_flight: 8,
                retry: fast_retry(0),
            },
        );
        assert_eq!(results.len(), 100);
        for (i, (idx, result)) in results.iter().enumerate() {
            assert_eq!(i, *idx);
            assert_eq!(result.as_ref().unwrap()[0].text, format!("q{i}"));
        }
        assert!(backend.max_in_flight.load(Ordering::SeqCst) <= 8);
    }

    #[test]
    fn empty_batch_is_empty() {
        let backend = Instrumented::new(0);
        assert!(query_batch(&backend, &[], &BatchOptions::default()).is_empty());
    }

    #[test]
    fn one_permanent_failure_does_not_poison_the_batch() {
        let mut backend = Instrumented::new(0);
        backend.permanent_fail_prompt = Some("q3".into());
        let reqs = requests(10);
        let results = query_batch(
            &backend,
            &reqs,
            &BatchOptions {
                max_in_flight: 4,
                retry: fast_retry(2),
            },
        );
        assert_eq!(results.len(), 10);
        let failures: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).collect();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].0, 3);
        // Non-retryable failure is attempted exactly once.
        assert_eq!(backend.total_calls.load(Ordering::SeqCst), 10);
    }

    #[test]
    fn retryable_failures_are_retried_with_cap() {
        let backend = Instrumented::new(2);
        let reqs = requests(1);
        let results = query_batch(
            &backend,
            &reqs,
            &BatchOptions {
                max_in_flight: 1,
                retry: fast_retry(3),
            },
        );
        assert!(results[0].1.is_ok());
        // 2 failures + 1 success.
        assert_eq!(backend.total_calls.load(Ordering::SeqCst), 3);

        // With a cap below the failure count, the error surfaces.
        let backend = Instrumented::new(5);
        let results = query_batch(
            &backend,
            &reqs,
            &BatchOptions {
                max_in_flight: 1,
                retry: fast_retry(1),
            },
        );
        assert!(results[0].1.is_err());
        assert_eq!(backend.total_calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn in_flight_bound_is_respected() {
        let backend = Instrumented::new(0);
        let reqs = requests(64);
        query_batch(
            &backend,
            &reqs,
            &BatchOptions {
                max_in_flight: 5,
                retry: fast_retry(0),
            },
        );
        let observed = backend.max_in_flight.load(Ordering::SeqCst);
        assert!(observed <= 5, "observed {observed} concurrent requests");
    }
}

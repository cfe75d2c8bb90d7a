//! Bounded-concurrency execution with a request-rate cap.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{BackendPolicy, ChatBackend, ChatRequest, ChatResponse, LlmError};

/// Applies `f` to every item on at most `workers` threads. Results come back
/// in input order; `on_done` sees each result as soon as it is ready.
pub fn parallel_map<T, R, F, D>(items: &[T], workers: usize, f: F, on_done: D) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
    D: Fn(usize, &R) + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                on_done(i, &r);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Spaces request starts at least `60s / requests_per_minute` apart.
pub struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32) -> Self {
        let interval = (requests_per_minute > 0)
            .then(|| Duration::from_secs_f64(60.0 / f64::from(requests_per_minute)));
        Self {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    /// Blocks until the caller may start a request.
    pub fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let slot = {
            let mut next = self.next_slot.lock().expect("limiter");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

/// A backend whose calls pass through a [`RateLimiter`].
pub struct Throttled<B> {
    inner: B,
    limiter: RateLimiter,
}

impl<B: ChatBackend> Throttled<B> {
    pub fn new(inner: B, policy: &BackendPolicy) -> Self {
        Self {
            inner,
            limiter: RateLimiter::new(policy.requests_per_minute),
        }
    }
}

impl<B: ChatBackend> ChatBackend for Throttled<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.limiter.acquire();
        self.inner.complete(req)
    }
}

/// Runs every request with at most `policy.max_in_flight` in flight and
/// under the rate cap. Output is aligned with input; a failed item never
/// affects the others.
pub fn run_batch(
    reqs: &[ChatRequest],
    backend: &dyn ChatBackend,
    policy: &BackendPolicy,
) -> Vec<Result<ChatResponse, LlmError>> {
    let throttled = Throttled::new(backend, policy);
    parallel_map(
        reqs,
        policy.max_in_flight,
        |_, req| {
            req.validate()?;
            throttled.complete(req)
        },
        |_, _| {},
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::{EchoBackend, Instrumented};

    #[test]
    fn echo_batch_keeps_order() {
        let reqs: Vec<_> = (0..10).map(|i| ChatRequest::new("m", format!("msg {i}"))).collect();
        let policy = BackendPolicy { max_in_flight: 3, ..BackendPolicy::default() };
        let out = run_batch(&reqs, &EchoBackend, &policy);
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("msg {i}"));
        }
    }

    #[test]
    fn in_flight_bound_respected() {
        let backend = Instrumented::new(EchoBackend).with_latency(5, 20);
        let reqs: Vec<_> = (0..24).map(|i| ChatRequest::new("m", format!("m{i}"))).collect();
        let policy = BackendPolicy { max_in_flight: 3, ..BackendPolicy::default() };
        let out = run_batch(&reqs, &backend, &policy);
        assert!(out.iter().all(Result::is_ok));
        assert!(backend.max_in_flight() <= 3, "{}", backend.max_in_flight());
        assert!(backend.max_in_flight() >= 2);
        assert_eq!(backend.calls(), 24);
    }

    #[test]
    fn invalid_item_is_isolated() {
        let mut reqs: Vec<_> = (0..5).map(|i| ChatRequest::new("m", format!("m{i}"))).collect();
        reqs[2].user_text.clear();
        let out = run_batch(&reqs, &EchoBackend, &BackendPolicy::default());
        assert!(matches!(out[2], Err(LlmError::InvalidRequest(_))));
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 4);
    }

    #[test]
    fn rate_cap_spaces_starts() {
        // 1200 rpm = one start per 50 ms.
        let reqs: Vec<_> = (0..5).map(|i| ChatRequest::new("m", format!("m{i}"))).collect();
        let policy = BackendPolicy { max_in_flight: 5, requests_per_minute: 1200, ..BackendPolicy::default() };
        let t = Instant::now();
        run_batch(&reqs, &EchoBackend, &policy);
        assert!(t.elapsed() >= Duration::from_millis(195), "{:?}", t.elapsed());
    }

    #[test]
    fn empty_batch() {
        assert!(run_batch(&[], &EchoBackend, &BackendPolicy::default()).is_empty());
    }
}

//! Ordered, bounded fan-out of independent jobs over a small worker pool.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Condvar, Mutex};
use std::thread;

use crate::error::Result;

/// Computes `produce(0..n)` on `workers` threads and hands each result to
/// `consume` in index order. At most `capacity` results are in flight ahead
/// of the consumer, so memory stays bounded however slow the consumer is.
///
/// With `workers <= 1` everything runs inline on the calling thread. The
/// sequence of `consume` calls is identical either way.
pub fn for_each_ordered<T, P, C>(n: usize, workers: usize, capacity: usize, produce: P, mut consume: C) -> Result<()>
where
    T: Send,
    P: Fn(usize) -> Result<T> + Sync,
    C: FnMut(usize, T) -> Result<()>,
{
    if workers <= 1 || n <= 1 {
        for i in 0..n {
            consume(i, produce(i)?)?;
        }
        return Ok(());
    }
    let capacity = capacity.max(workers);
    let next_job = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    // Index of the next result the consumer expects; workers may not start a
    // job more than `capacity` ahead of it.
    let window = (Mutex::new(0usize), Condvar::new());
    let (tx, rx) = mpsc::channel::<(usize, Result<T>)>();

    thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            let tx = tx.clone();
            let (next_job, stop, window, produce) = (&next_job, &stop, &window, &produce);
            scope.spawn(move || loop {
                let i = next_job.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                {
                    let mut consumed = window.0.lock().expect("queue lock");
                    while i >= *consumed + capacity && !stop.load(Ordering::SeqCst) {
                        consumed = window.1.wait(consumed).expect("queue lock");
                    }
                }
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                if tx.send((i, produce(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut expected = 0;
        let outcome = (|| {
            while expected < n {
                let Ok((i, r)) = rx.recv() else { break };
                pending.insert(i, r);
                while let Some(r) = pending.remove(&expected) {
                    consume(expected, r?)?;
                    expected += 1;
                    *window.0.lock().expect("queue lock") = expected;
                    window.1.notify_all();
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::SeqCst);
        window.1.notify_all();
        drop(rx);
        outcome
    })
}

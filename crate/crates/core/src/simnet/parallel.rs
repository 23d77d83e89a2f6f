use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::KeyId;
use crate::server::{Jid, PrekeyServer};
use crate::time::SimTime;

/// Hammers one device's store from `workers` OS threads until every worker
/// has seen an empty bundle, returning each worker's handed-out ids. This
/// mode exists to stress the server's locking and is not deterministic.
pub fn drain_concurrently(server: &PrekeyServer, target: &Jid, workers: usize, seed: u64) -> Vec<Vec<KeyId>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((w as u64 + 1) << 32));
                    let requester = format!("drain-worker-{w}");
                    let mut ids = Vec::new();
                    let mut now: SimTime = 0;
                    loop {
                        now += 1;
                        match server.fetch_bundle(&requester, target, now, &mut rng) {
                            Ok(b) => match b.key {
                                Some(k) => ids.push(k.id),
                                None => break,
                            },
                            Err(_) => continue,
                        }
                    }
                    ids
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("drain worker panicked"))
            .collect()
    })
}

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use prekeysim_bench::{loaded_server, rng, Responder};
use prekeysim_core::attack::experiments::{fixture_world, run_depletion};
use prekeysim_core::attack::DepletionMode;
use prekeysim_core::crypto::{x3dh_initiate, x3dh_respond, IdentityKeyPair};
use prekeysim_core::time::MINUTE;

fn handshake(c: &mut Criterion) {
    let mut r = rng(1);
    let alice = IdentityKeyPair::generate(&mut r);
    let bob = Responder::generate(&mut r);
    for with_one_time in [true, false] {
        let name = if with_one_time { "handshake/with_otpk" } else { "handshake/without_otpk" };
        let bundle = bob.bundle(with_one_time);
        c.bench_function(name, |b| {
            b.iter(|| {
                let (mut s, _) = x3dh_initiate(&alice, &bundle, &mut r).unwrap();
                let env = s.encrypt(b"hello", &mut r).unwrap();
                let otpk = with_one_time.then_some(&bob.one_time);
                black_box(x3dh_respond(&bob.identity, &bob.signed, otpk, &env, &mut r).unwrap())
            })
        });
    }
}

fn fetch_bundle(c: &mut Criterion) {
    c.bench_function("server/drain_812", |b| {
        b.iter_batched(
            || {
                let mut r = rng(2);
                let (server, jid) = loaded_server(&mut r);
                (server, jid, r)
            },
            |(server, jid, mut r)| {
                for i in 0..813u64 {
                    black_box(server.fetch_bundle("bench", &jid, i * 50, &mut r).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
}

fn depletion(c: &mut Criterion) {
    let mut group = c.benchmark_group("sim");
    group.sample_size(20);
    for (name, mode) in [("sync", DepletionMode::Sync), ("async_100", DepletionMode::Async { rate: 100 })] {
        group.bench_function(format!("deplete_windows_{name}"), |b| {
            b.iter_batched(
                || fixture_world(3).unwrap(),
                |mut w| black_box(run_depletion(&mut w.sim, &w.windows, mode, 10 * MINUTE).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, handshake, fetch_bundle, depletion);
criterion_main!(benches);

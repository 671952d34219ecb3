//! Request streams for scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{Dist, Scenario};
use crate::client::Request;
use crate::event::OpKind;

/// Rejection-free Zipf sampler over `0..n` (Gray et al.), rank 0 hottest.
#[derive(Debug, Clone)]
pub struct Zipf {
    n: u64,
    theta: f64,
    alpha: f64,
    zetan: f64,
    eta: f64,
}

fn zeta(n: u64, theta: f64) -> f64 {
    (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum()
}

impl Zipf {
    pub fn new(n: u64, theta: f64) -> Self {
        assert!(n >= 1 && theta > 0.0 && theta != 1.0, "zipf needs n >= 1 and theta in (0, 1) or > 1");
        let zetan = zeta(n, theta);
        let zeta2 = zeta(2.min(n), theta);
        let alpha = 1.0 / (1.0 - theta);
        let eta = (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta2 / zetan);
        Zipf { n, theta, alpha, zetan, eta }
    }

    /// Map a uniform draw in `[0, 1)` to a rank.
    pub fn rank(&self, u: f64) -> u64 {
        let uz = u * self.zetan;
        if uz < 1.0 {
            return 0;
        }
        if self.n > 1 && uz < 1.0 + 0.5f64.powf(self.theta) {
            return 1;
        }
        let r = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        r.min(self.n - 1)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        self.rank(rng.gen::<f64>())
    }
}

pub fn key_name(i: usize) -> Vec<u8> {
    format!("key{i:05}").into_bytes()
}

/// A value unique to (`tag`, `n`), padded to `size` bytes.
pub fn value_for(tag: &str, n: usize, size: usize) -> Vec<u8> {
    let mut v = format!("{tag}.{n}").into_bytes();
    if v.len() < size {
        v.resize(size, b'.');
    }
    v
}

/// Initial contents inserted before the clients start.
pub fn preload(s: &Scenario) -> Vec<Request> {
    (0..s.keys).map(|i| Request::insert(&key_name(i), &value_for("init", i, s.value_size))).collect()
}

/// One request stream per client. Fresh keys are used for inserts in
/// shape D; otherwise every key comes from the configured distribution.
pub fn generate(s: &Scenario) -> Vec<Vec<Request>> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x9e37_79b9_7f4a_7c15);
    let zipf = match s.dist {
        Dist::Zipf(t) => Some(Zipf::new(s.keys as u64, t)),
        Dist::Uniform => None,
    };
    let fresh_inserts = s.workload.as_deref() == Some("D");
    let per_client = s.ops / s.clients;
    let extra = s.ops % s.clients;
    (0..s.clients)
        .map(|c| {
            let count = per_client + usize::from(c < extra);
            (0..count)
                .map(|n| {
                    let op = s.mix.pick(rng.gen::<f64>());
                    let k = match &zipf {
                        Some(z) => z.sample(&mut rng) as usize,
                        None => rng.gen_range(0..s.keys),
                    };
                    let value = value_for(&format!("c{c}"), n, s.value_size);
                    match op {
                        OpKind::Search => Request::search(&key_name(k)),
                        OpKind::Insert if fresh_inserts => Request::insert(format!("new{c}.{n}").as_bytes(), &value),
                        OpKind::Insert => Request::insert(&key_name(k), &value),
                        OpKind::Update => Request::update(&key_name(k), &value),
                        OpKind::Delete => Request::delete(&key_name(k)),
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zipf_matches_the_exact_distribution() {
        let (n, theta) = (64u64, 0.99);
        let z = Zipf::new(n, theta);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 200_000;
        let mut counts = vec![0u64; n as usize];
        for _ in 0..draws {
            counts[z.sample(&mut rng) as usize] += 1;
        }
        let zn = zeta(n, theta);
        // The two hottest ranks are exact in this generator; check them tightly.
        for (rank, count) in counts.iter().take(2).enumerate() {
            let expect = 1.0 / ((rank + 1) as f64).powf(theta) / zn;
            let got = *count as f64 / draws as f64;
            assert!((got - expect).abs() < 0.005, "rank {rank}: {got} vs {expect}");
        }
        assert!(counts.windows(8).next().unwrap().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn streams_are_deterministic_and_sized() {
        let s = Scenario { ops: 103, clients: 4, ..Scenario::default() };
        let a = generate(&s);
        assert_eq!(a, generate(&s));
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 103);
        assert!(a.iter().flatten().all(|r| r.value.is_empty() || r.value.len() == s.value_size));
    }
}

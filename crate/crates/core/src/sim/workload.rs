//! Seeded random streams and payment intent generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::payments::Route;
use crate::sim::scenario::Scenario;
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

/// Independent ChaCha8 stream for `(seed, name, index)`. Streams are
/// `workload/<batch>`, `net/<participant>` and `byz/<participant>`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut e = Encoder::new("hmpc/rng");
    e.u64(seed).bytes(name.as_bytes()).u64(index);
    ChaCha8Rng::from_seed(e.digest_of().0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntentKind {
    Intra { edge: HyperedgeId, sender: ParticipantId, receiver: ParticipantId, value: Amount, fee: Amount },
    Route { route: Route },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub id: u64,
    pub batch: u64,
    pub at: Tick,
    #[serde(flatten)]
    pub kind: IntentKind,
}

impl Intent {
    pub fn sender(&self) -> ParticipantId {
        match &self.kind {
            IntentKind::Intra { sender, .. } => *sender,
            IntentKind::Route { route } => route.sender,
        }
    }
}

/// Fee rounded down to a multiple of `n - 2`.
pub fn round_fee(fee_rate: Amount, n: usize) -> Amount {
    let d = (n as Amount).saturating_sub(2).max(1);
    fee_rate / d * d
}

/// Two distinct members drawn uniformly without replacement.
fn distinct_pair(rng: &mut ChaCha8Rng, members: &[ParticipantId]) -> (ParticipantId, ParticipantId) {
    let n = members.len() as u64;
    let s = rng.gen_range(0..n);
    let mut r = rng.gen_range(0..n - 1);
    if r >= s {
        r += 1;
    }
    (members[s as usize], members[r as usize])
}

fn pick_excluding(rng: &mut ChaCha8Rng, members: &[ParticipantId], exclude: &[ParticipantId]) -> ParticipantId {
    let pool: Vec<ParticipantId> = members.iter().copied().filter(|p| !exclude.contains(p)).collect();
    pool[rng.gen_range(0..pool.len() as u64) as usize]
}

/// Lowest participant shared by two rosters.
pub fn connector(a: &[ParticipantId], b: &[ParticipantId]) -> ParticipantId {
    *a.iter().filter(|p| b.contains(p)).min().expect("validated topology")
}

/// Intents of one batch, starting at tick `start`, spaced evenly.
pub fn generate_workload(
    scenario: &Scenario,
    batch: u64,
    start: Tick,
    first_id: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<Intent> {
    let rosters = scenario.rosters();
    let w = &scenario.workload;
    (0..scenario.tx_per_batch)
        .map(|j| {
            let at = start + j * w.intent_spacing;
            let id = first_id + j;
            let route = w.route_fraction > 0.0 && rng.gen_bool(w.route_fraction);
            let value = rng.gen_range(w.amount_min..=w.amount_cap);
            let kind = if route {
                let k = rosters.len() as u64;
                let a = rng.gen_range(0..k);
                let mut b = rng.gen_range(0..k - 1);
                if b >= a {
                    b += 1;
                }
                let path: Vec<usize> =
                    if a < b { (a as usize..=b as usize).collect() } else { (b as usize..=a as usize).rev().collect() };
                let connectors: Vec<ParticipantId> =
                    path.windows(2).map(|h| connector(&rosters[h[0]], &rosters[h[1]])).collect();
                let sender = pick_excluding(rng, &rosters[path[0]], &connectors[..1]);
                let receiver =
                    pick_excluding(rng, &rosters[*path.last().unwrap()], &connectors[connectors.len() - 1..]);
                IntentKind::Route {
                    route: Route::plan(
                        id,
                        sender,
                        receiver,
                        value,
                        w.connector_fee,
                        path.iter().map(|e| HyperedgeId(*e as u32)).collect(),
                        connectors,
                        at,
                        scenario.route_margin(),
                    ),
                }
            } else {
                let e = if rosters.len() == 1 { 0 } else { rng.gen_range(0..rosters.len() as u64) as usize };
                let (sender, receiver) = distinct_pair(rng, &rosters[e]);
                IntentKind::Intra {
                    edge: HyperedgeId(e as u32),
                    sender,
                    receiver,
                    value,
                    fee: round_fee(w.fee_rate, rosters[e].len()),
                }
            };
            Intent { id, batch, at, kind }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(extra: &str) -> Scenario {
        Scenario::from_toml(&format!(
            "seed = 3\nbatches = 1\ntx_per_batch = 1000\nparticipants = 10\ninitial_balance = 100\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream(1, "workload", 0).gen();
        assert_eq!(a, stream(1, "workload", 0).gen::<u64>());
        assert_ne!(a, stream(1, "workload", 1).gen::<u64>());
        assert_ne!(a, stream(1, "net", 0).gen::<u64>());
        assert_ne!(a, stream(2, "workload", 0).gen::<u64>());
    }

    #[test]
    fn fee_rounding() {
        assert_eq!(round_fee(148, 150), 148);
        assert_eq!(round_fee(150, 150), 148);
        assert_eq!(round_fee(147, 150), 0);
        assert_eq!(round_fee(7, 5), 6);
        assert_eq!(round_fee(7, 3), 7);
    }

    #[test]
    fn amount_cap_one_gives_unit_amounts_and_no_self_payments() {
        let s = scenario("[workload]\namount_cap = 1\n");
        let intents = generate_workload(&s, 0, 0, 0, &mut stream(3, "workload", 0));
        assert_eq!(intents.len(), 1000);
        for i in &intents {
            let IntentKind::Intra { sender, receiver, value, .. } = i.kind else { panic!() };
            assert_eq!(value, 1);
            assert_ne!(sender, receiver);
        }
        assert_eq!(intents[999].at, 999);
    }

    #[test]
    fn send_counts_pass_chi_square() {
        // 100 batches of 1000 over 10 senders: expected 10_000 each. The 0.999
        // quantile of chi-square with 9 degrees of freedom is 27.88.
        let s = scenario("");
        let mut counts = [0u64; 10];
        let mut recv = [0u64; 10];
        for b in 0..100 {
            for i in generate_workload(&s, b, 0, 0, &mut stream(3, "workload", b)) {
                let IntentKind::Intra { sender, receiver, .. } = i.kind else { panic!() };
                counts[sender.0 as usize] += 1;
                recv[receiver.0 as usize] += 1;
            }
        }
        for c in [counts, recv] {
            let chi: f64 = c.iter().map(|&o| (o as f64 - 10_000.0).powi(2) / 10_000.0).sum();
            assert!(chi < 27.88, "chi-square {chi}");
        }
    }

    #[test]
    fn routes_follow_the_chain_of_hyperedges() {
        let s = Scenario::from_toml(
            "seed = 3\nbatches = 1\ntx_per_batch = 200\ninitial_balance = 100\n\
             [workload]\nroute_fraction = 1.0\n\
             [[topology]]\nmembers = [0, 1, 2, 3]\n[[topology]]\nmembers = [3, 4, 5, 6]\n[[topology]]\nmembers = [6, 7, 8, 9]\n",
        )
        .unwrap();
        let rosters = s.rosters();
        for i in generate_workload(&s, 0, 0, 0, &mut stream(3, "workload", 0)) {
            let IntentKind::Route { route } = i.kind else { panic!() };
            route.validate(|e| rosters[e.0 as usize].clone()).unwrap();
            assert!(!route.connectors.contains(&route.sender));
            assert!(!route.connectors.contains(&route.receiver));
            for w in route.edges.windows(2) {
                assert_eq!(w[0].0.abs_diff(w[1].0), 1);
            }
        }
    }
}

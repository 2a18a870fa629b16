#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollcall_vem::model::{BillVariational, ModelParams, PGVariational, RollCall};
use rollcall_vem::pg_vem::{cavi_update_beta, cavi_update_w, initial_params, InitStrategy};
use rollcall_vem::sim::{generate_scenario_one, generate_votes, random_mask, ScenarioOneConfig, Simulated};
use rollcall_vem::Sym2;

/// Scenario I parameters on a mask where every legislator misses each vote
/// with probability `missing`.
pub fn masked_instance(n: usize, m: usize, missing: f64, seed: u64) -> Simulated {
    let truth = generate_scenario_one(&ScenarioOneConfig::new(n, m, seed)).unwrap();
    let mask = random_mask(&vec![missing; n], m, seed).unwrap();
    let data = generate_votes(&truth.theta, &truth.bills, &mask, seed).unwrap();
    Simulated { data, ..truth }
}

/// Random sizes with `I ≤ max_n`, `J ≤ max_m`.
pub fn random_sizes(rng: &mut ChaCha8Rng, max_n: usize, max_m: usize) -> (usize, usize) {
    (rng.random_range(8..=max_n), rng.random_range(10..=max_m))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A mid-iteration variational state: initial parameters and a few CAVI sweeps.
pub fn variational_state(data: &RollCall, sweeps: usize) -> (ModelParams, BillVariational, PGVariational) {
    let params = initial_params(data, &InitStrategy::DoubleCenteredSvd).unwrap();
    let mut bill_q = BillVariational::uniform(data.n_bills(), params.nu);
    let mut pg_q = cavi_update_w(&bill_q, &params, data).unwrap();
    for _ in 0..sweeps {
        bill_q = cavi_update_beta(&pg_q, &params, data).unwrap();
        pg_q = cavi_update_w(&bill_q, &params, data).unwrap();
    }
    (params, bill_q, pg_q)
}

/// `Σ` from precision entries.
pub fn sigma_from_tau(tau: [f64; 3]) -> Sym2 {
    Sym2::new(tau[0], tau[1], tau[2]).inverse().unwrap()
}

pub fn tau_of(sigma: &Sym2) -> [f64; 3] {
    let t = sigma.inverse().unwrap();
    [t.a11, t.a12, t.a22]
}

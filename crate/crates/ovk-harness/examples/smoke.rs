use std::path::Path;

use ovk_harness::{RaceConfig, TransportKind, Winner, run_race, run_scenario};

fn main() {
    let report = run_scenario(
        Path::new("scenarios/device_lifecycle.json"),
        TransportKind::Loopback,
    )
    .unwrap();
    print!("{}", report.to_json_lines());
    assert!(report.all_passed(), "scenario failed");

    for (config, expected) in [
        (RaceConfig { n: 2, n_u: 1, n_a: 1, attacker_first: true }, Winner::Attacker),
        (RaceConfig { n: 3, n_u: 2, n_a: 1, attacker_first: true }, Winner::User),
        (RaceConfig { n: 4, n_u: 2, n_a: 2, attacker_first: false }, Winner::User),
    ] {
        let outcome = run_race(&config, 1).unwrap();
        println!("{config:?} -> {:?}", outcome.winner);
        assert_eq!(outcome.winner, expected);
    }
    println!("smoke ok");
}

use fieldsync_core::sim::{run_scenario, ActionKind, ActorDecl, ActorKind, FaultProfile, RawStep, Scenario, ScenarioHeader};
use serde_json::{json, Value};

fn header(desks: &[&str], cadence_ms: Option<u64>) -> ScenarioHeader {
    ScenarioHeader {
        actors: desks.iter().map(|d| ActorDecl { id: d.to_string(), kind: ActorKind::Desktop }).collect(),
        horizon_ms: 600_000,
        cadence_ms,
        template: None,
        initial_text: None,
        profile: None,
    }
}

fn step(at: u64, actor: &str, action: ActionKind, args: Value) -> RawStep {
    RawStep { at, actor: actor.into(), action, args }
}

#[test]
fn one_typist_two_syncs() {
    let steps = vec![
        step(0, "d1", ActionKind::Edit, json!({"insert": "a"})),
        step(1, "d1", ActionKind::Edit, json!({"insert": "b"})),
        step(2, "d1", ActionKind::Edit, json!({"insert": "c"})),
        step(10, "d1", ActionKind::Sync, Value::Null),
        step(200, "d1", ActionKind::Sync, Value::Null),
    ];
    let scenario = Scenario::from_raw(header(&["d1"], None), steps).unwrap();
    let t = run_scenario(&scenario, &FaultProfile::lossless(0)).unwrap();
    assert!(t.converged && !t.non_quiescent);
    assert_eq!(t.server.text, "abc");
}

fn random_desks(edits_each: u64) -> Scenario {
    let desks = ["d1", "d2", "d3"];
    let mut steps = Vec::new();
    for i in 0..edits_each {
        for (k, d) in desks.iter().enumerate() {
            steps.push(step(1000 + i * 100 + k as u64 * 30, d, ActionKind::Edit, json!({"random": true})));
        }
    }
    Scenario::from_raw(header(&desks, Some(500)), steps).unwrap()
}

#[test]
fn total_loss_never_settles() {
    let profile = FaultProfile { loss_prob: 1.0, ..FaultProfile::lossless(7) };
    let t = run_scenario(&random_desks(5), &profile).unwrap();
    assert!(!t.converged && t.non_quiescent);
}

#[test]
fn transcripts_are_reproducible() {
    let scenario = random_desks(30);
    let profile = FaultProfile { loss_prob: 0.3, dup_prob: 0.2, reorder_prob: 0.2, ..FaultProfile::lossless(11) };
    let a = serde_json::to_string(&run_scenario(&scenario, &profile).unwrap()).unwrap();
    let b = serde_json::to_string(&run_scenario(&scenario, &profile).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn more_loss_settles_no_sooner() {
    let scenario = random_desks(40);
    let mean_settle = |loss: f64| {
        let total: u64 = (0..20)
            .map(|seed| {
                let profile = FaultProfile { loss_prob: loss, ..FaultProfile::lossless(seed) };
                let t = run_scenario(&scenario, &profile).unwrap();
                assert!(t.converged, "loss {loss} seed {seed}");
                t.convergence_time_ms.unwrap() - t.last_edit_ms
            })
            .sum();
        total as f64 / 20.0
    };
    let means: Vec<f64> = [0.0, 0.2, 0.4, 0.6].into_iter().map(mean_settle).collect();
    println!("mean settle ms by loss: {means:?}");
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

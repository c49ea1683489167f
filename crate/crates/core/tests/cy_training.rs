use g2link::cymetric::{monge_ampere_variance, prepare, train_cy, CyPoint, CyTrainConfig, TrainState};
use g2link::par::Execution;
use g2link::quintic::sample_points;

#[test]
fn fifty_epochs_improve_on_fubini_study() {
    let (pts, _) = sample_points(20_000, 2024, Execution::Parallel).unwrap();
    let data = prepare(&pts, Execution::Parallel).unwrap();
    let cfg = CyTrainConfig {
        seed: 2024,
        ..Default::default()
    };
    let state = TrainState::new(data.len(), cfg).unwrap();
    let val: Vec<&CyPoint> = state.split.validation.iter().map(|&i| &data[i]).collect();
    let before = monge_ampere_variance(&state.net, &val, Execution::Parallel).unwrap();
    let state = train_cy(state, &data, 50, 50).unwrap();
    let after = monge_ampere_variance(&state.net, &val, Execution::Parallel).unwrap();
    let first = state.history.first().unwrap().validation;
    let last = state.history.last().unwrap().validation;
    eprintln!("val MA {:.4e} -> {:.4e}; variance {before:.4e} -> {after:.4e}; non-pd {}", first.monge_ampere, last.monge_ampere, last.non_pd_fraction);
    assert!(last.monge_ampere < first.monge_ampere);
    assert!(after < before);
    assert!(last.non_pd_fraction <= 1e-3);
}

use cvqkd_core::campaign::{
    resolve_constellation, run_block, run_block_campaign, run_rolloff_sweep, write_block_csv, write_rolloff_csv,
};
use cvqkd_core::config::ExperimentConfig;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.blocks = 3;
    c.run.symbols_per_block = 20_000;
    c.run.calibration_samples = 200_000;
    c.dsp.cfo_min_pilots = 1000;
    c.eps_prep = Some(2.7e-9);
    c
}

fn csv(c: &ExperimentConfig) -> Vec<u8> {
    let campaign = run_block_campaign(c).unwrap();
    let mut out = Vec::new();
    write_block_csv(c, &campaign.outcomes, &mut out).unwrap();
    out
}

#[test]
fn identical_seeds_give_identical_csv() {
    let c = small();
    let a = csv(&c);
    assert_eq!(a, csv(&c));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# cvqkd-core "));
    assert!(text.contains(&format!("# config_sha256 = {}", c.hash())));
    assert!(text.contains("# run.symbols_per_block = 20000"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("block,xi_B_hat,xi_B_worst,T_hat,V_B_hat"));
    assert_eq!(rows.len(), 4);
    let mut other = c.clone();
    other.run.master_seed = 2;
    assert_ne!(csv(&other), csv(&c));
}

#[test]
fn blocks_do_not_depend_on_scheduling() {
    let c = small();
    let campaign = run_block_campaign(&c).unwrap();
    let spec = resolve_constellation(&c).unwrap();
    assert_eq!(run_block(&c, &spec, 2), campaign.outcomes[2]);
}

#[test]
fn hostile_block_is_isolated() {
    let mut c = small();
    c.run.hostile_block = Some(1);
    let campaign = run_block_campaign(&c).unwrap();
    assert_eq!(campaign.summary.failed_blocks, vec![1]);
    let bad = &campaign.outcomes[1];
    assert!(bad.error.as_deref().unwrap().contains("equalizer diverged"));
    assert!(bad.dsp.stages.len() >= 2, "partial report kept: {:?}", bad.dsp.stages);
    for o in [&campaign.outcomes[0], &campaign.outcomes[2]] {
        let e = o.estimate.as_ref().unwrap();
        assert!((e.xi_b_hat - 0.012).abs() < 0.03);
    }
    assert_eq!(campaign.summary.xi_b_hat.count, 2);
}

#[test]
fn low_frequency_noise_penalises_zero_rolloff() {
    let mut c = small();
    c.sweep.rolloffs = vec![0.0, 0.4];
    c.sweep.rolloff_blocks = 2;
    let rows = run_rolloff_sweep(&c).unwrap();
    assert!(rows.iter().all(|r| r.failed == 0));
    assert!(rows[0].xi_b_hat.mean > rows[1].xi_b_hat.mean + 0.01, "{rows:?}");
    let mut out = Vec::new();
    write_rolloff_csv(&c, &rows, &mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().contains("rolloff,blocks,failed,xi_B_mean"));
}

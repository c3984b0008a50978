use relaygrid::data::synth::synth_split;
use relaygrid::data::Sampler;
use relaygrid::train::RunDir;
use relaygrid::{Checkpoint, RelayVariant, RunConfig, Trainer};

fn tiny(seed: u64, variant: &str, steps: u64) -> RunConfig {
    RunConfig::parse(&format!(
        "seed={seed}\nvariant={variant}\n\
         model.depth=2\nmodel.width=16\nmodel.heads=2\nmodel.patch_size=4\nmodel.num_classes=4\n\
         model.local_size=16\nmodel.global_extent=64\nmodel.relay_count=2\n\
         optim.lr0=0.003\noptim.steps={steps}\noptim.batch=4\n\
         train.eval_every=0\nsampler.aug_prob=0\n\
         synth.size=128\nsynth.cell=16\nsynth.beacon_spacing=128\nsynth.beacon_offset=64\nsynth.beacon_half=16\nsynth.margin=32\n"
    ))
    .unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn loss_decreases_over_first_200_steps() {
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let cfg = tiny(seed, "sequential_relay", 200);
        let train = synth_split(&cfg.synth, seed, 0, 4).unwrap();
        let mut t = Trainer::<f32>::new(&cfg).unwrap();
        let log = t.run(&train, &[], None, |_| {}).unwrap();
        assert_eq!(log.len(), 200);
        let loss: Vec<f64> = log.iter().map(|r| r.loss).collect();
        assert!(loss.iter().all(|l| l.is_finite()));
        ratios.push(mean(&loss[180..]) / mean(&loss[..20]));
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.9, "median late/early loss ratio {}", ratios[1]);
}

#[test]
fn local_only_never_renders_global_windows() {
    let cfg = tiny(1, "local_only", 5);
    let train = synth_split(&cfg.synth, 1, 0, 2).unwrap();
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    let log = t.run(&train, &[], None, |_| {}).unwrap();
    assert_eq!(t.sampler.global_renders(), 0);
    assert!(log.iter().all(|r| r.l_glo.is_none() && r.l_con.is_none()));

    let relay = tiny(1, "sequential_relay", 2);
    let mut t = Trainer::<f32>::new(&relay).unwrap();
    t.run(&train, &[], None, |_| {}).unwrap();
    assert_eq!(t.sampler.global_renders(), 2 * relay.optim.batch);
}

#[test]
fn run_dir_holds_config_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(2, "sequential_relay", 4);
    cfg.train.eval_every = 2;
    cfg.train.checkpoint_every = 2;
    let train = synth_split(&cfg.synth, 2, 0, 2).unwrap();
    let val = synth_split(&cfg.synth, 2, 1, 1).unwrap();
    let rd = RunDir::create(dir.path()).unwrap();
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    t.run(&train, &val, Some(&rd), |_| {}).unwrap();

    let echoed = RunConfig::load(&rd.config()).unwrap();
    assert_eq!(echoed.to_text(), cfg.to_text());
    let log = std::fs::read_to_string(rd.log()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,lr,L_loc,L_glo,L_con,val_miou");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].rsplit(',').next().unwrap().parse::<f64>().is_ok());

    let last = Checkpoint::load(&rd.last()).unwrap();
    assert_eq!(last.require("step").unwrap(), "4");
    assert!(rd.best().exists());
}

#[test]
fn resume_rejects_other_model_config() {
    let cfg = tiny(0, "sequential_relay", 2);
    let ckpt = Trainer::<f32>::new(&cfg).unwrap().checkpoint();
    let mut other = cfg.clone();
    other.model.relay_count = 3;
    assert!(Trainer::<f32>::resume(&other, &ckpt).is_err());
    let mut v = cfg.clone();
    v.variant = RelayVariant::ParallelRelay;
    assert!(Trainer::<f32>::resume(&v, &ckpt).is_err());
    assert!(Sampler::new(cfg.sampler.clone()).is_ok());
}

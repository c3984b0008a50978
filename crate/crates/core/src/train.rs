//! AdamW with linear warmup and plateau reduction, and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::config::RunConfig;
use crate::data::sampler::{stack_batch, Sampler, Scene, WindowPair};
use crate::error::{Error, Result};
use crate::infer::evaluate;
use crate::losses::combined;
use crate::relay::Model;
use crate::tensor::{Float, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub plateau_factor: f64,
    /// Evaluations without improvement tolerated before a reduction.
    pub plateau_patience: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Schedule horizon in updates.
    pub steps_total: u64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 0.0,
            warmup_fraction: 0.05,
            plateau_factor: 0.5,
            plateau_patience: 3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            steps_total: 2000,
            batch: 16,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("optim: {m}")));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1]", self.plateau_factor));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas ({b1}, {b2}) outside [0, 1)"));
        }
        if self.lr0 < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("lr0 and weight_decay must be nonnegative, eps positive".into());
        }
        if self.batch == 0 || self.steps_total == 0 {
            return bad("batch and steps must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.steps_total as f64).round() as u64
    }
}

/// Everything beyond the weights needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    /// Updates applied so far.
    pub step: u64,
    /// First and second moments, one per parameter in store order.
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Rate of the most recent update.
    pub lr: f64,
    pub best_miou: f64,
    pub since_improvement: usize,
    pub reductions: u32,
}

impl<S: Float> TrainState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            lr: 0.0,
            best_miou: f64::NEG_INFINITY,
            since_improvement: 0,
            reductions: 0,
        }
    }

    /// Records a validation result; returns whether it is a new best.
    pub fn observe(&mut self, miou: f64, cfg: &OptimConfig) -> bool {
        if miou > self.best_miou {
            self.best_miou = miou;
            self.since_improvement = 0;
            return true;
        }
        self.since_improvement += 1;
        if self.since_improvement > cfg.plateau_patience {
            self.reductions += 1;
            self.since_improvement = 0;
        }
        false
    }
}

/// Rate for update number `step` (1-based; 0 gives 0): a linear ramp to
/// `lr0` over the warmup, scaled by `plateau_factor` once per reduction.
pub fn lr_schedule<S>(step: u64, state: &TrainState<S>, cfg: &OptimConfig) -> f64 {
    let base = cfg.lr0 * cfg.plateau_factor.powi(state.reductions as i32);
    let warm = cfg.warmup_steps();
    if step < warm {
        base * step as f64 / warm as f64
    } else {
        base
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn optimizer_step<S: Float>(
    store: &mut ParamStore<S>,
    grads: &[Tensor<S>],
    state: &mut TrainState<S>,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let lr = lr_schedule(state.step, state, cfg);
    state.lr = lr;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = S::lit(1.0 - b1.powi(t));
    let c2 = S::lit(1.0 - b2.powi(t));
    let (b1s, b2s) = (S::lit(b1), S::lit(b2));
    let (o1, o2) = (S::lit(1.0 - b1), S::lit(1.0 - b2));
    let decay = S::lit(1.0 - lr * cfg.weight_decay);
    let (lrs, eps) = (S::lit(lr), S::lit(cfg.eps));
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        if grads[i].shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                grads[i].shape(),
                p.shape()
            )));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = b1s * *m + o1 * g;
            *v = b2s * *v + o2 * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w = *w * decay - lrs * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_loc: Option<f64>,
    pub l_glo: Option<f64>,
    pub l_con: Option<f64>,
    pub val_miou: Option<f64>,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,L_loc,L_glo,L_con,val_miou";

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        format!(
            "{},{:?},{},{},{},{}",
            self.step,
            self.lr,
            o(self.l_loc),
            o(self.l_glo),
            o(self.l_con),
            o(self.val_miou)
        )
    }
}

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("rasters"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.rlyt")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("checkpoints").join("best.rlyt")
    }

    pub fn rasters(&self) -> PathBuf {
        self.root.join("rasters")
    }
}

/// Model, optimizer state and sampler of one run.
pub struct Trainer<S: Float> {
    pub cfg: RunConfig,
    pub model: Model<S>,
    pub state: TrainState<S>,
    pub sampler: Sampler,
}

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

/// Rebuilds a model from a checkpoint, checking it was made for `cfg`'s
/// architecture.
pub fn load_model<S: Float>(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Model<S>> {
    let want = sha256_hex(&cfg.model_text());
    let have = ckpt.require("config_hash")?;
    if have != want {
        return Err(Error::Checkpoint(format!(
            "config/checkpoint mismatch: checkpoint architecture hash {have}, config {want}"
        )));
    }
    let mut model = Model::new(&cfg.model, cfg.variant, cfg.seed)?;
    ckpt.load_store(&mut model.weights.store, "")?;
    Ok(model)
}

fn meta_num<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt.require(key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("metadata {key}={v:?}")))
}

impl<S: Float> Trainer<S> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.variant, cfg.seed)?;
        let state = TrainState::new(&model.weights.store);
        Ok(Self {
            cfg: cfg.clone(),
            sampler: Sampler::new(cfg.sampler.clone())?,
            model,
            state,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.model = load_model(cfg, ckpt)?;
        let store = &t.model.weights.store;
        let moments = |prefix: &str| -> Result<Vec<Tensor<S>>> {
            store
                .iter()
                .map(|(_, name, _)| {
                    ckpt.tensor(&format!("{prefix}{name}"))
                        .ok_or_else(|| Error::Checkpoint(format!("moment {prefix}{name} missing")))?
                        .to_tensor()
                })
                .collect()
        };
        t.state = TrainState {
            step: meta_num(ckpt, "step")?,
            m: moments(MOMENT_M)?,
            v: moments(MOMENT_V)?,
            lr: meta_num(ckpt, "lr")?,
            best_miou: meta_num(ckpt, "best_miou")?,
            since_improvement: meta_num(ckpt, "since_improvement")?,
            reductions: meta_num(ckpt, "reductions")?,
        };
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for line in self.cfg.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                c.set_meta(&format!("config.{k}"), v);
            }
        }
        c.set_meta("config_hash", sha256_hex(&self.cfg.model_text()));
        c.set_meta("dtype", format!("{:?}", S::DTYPE));
        c.set_meta("step", self.state.step.to_string());
        c.set_meta("lr", format!("{:?}", self.state.lr));
        c.set_meta("best_miou", format!("{:?}", self.state.best_miou));
        c.set_meta("since_improvement", self.state.since_improvement.to_string());
        c.set_meta("reductions", self.state.reductions.to_string());
        let store = &self.model.weights.store;
        c.push_store(store, "");
        for (i, (_, name, _)) in store.iter().enumerate() {
            c.push(format!("{MOMENT_M}{name}"), &self.state.m[i]);
            c.push(format!("{MOMENT_V}{name}"), &self.state.v[i]);
        }
        c
    }

    /// The pairs of update number `step` (0-based).
    pub fn batch_pairs(&self, scenes: &[Scene], step: u64) -> Result<Vec<WindowPair>> {
        let b = self.cfg.optim.batch as u64;
        let with_global = self.model.variant.uses_global();
        (0..b)
            .into_par_iter()
            .map(|i| self.sampler.draw(scenes, step * b + i, with_global))
            .collect()
    }

    /// Gradients of the combined loss on one batch, in store order.
    pub fn gradients(&self, pairs: &[WindowPair]) -> Result<(Vec<Tensor<S>>, StepLog)> {
        let b = stack_batch::<S>(pairs)?;
        let mut g = Graph::new();
        let xl = g.constant(b.x_loc);
        let xg = b.x_glob.map(|x| g.constant(x));
        let out = self.model.forward(&mut g, xl, xg, None)?;
        let terms = combined(&mut g, out, &b.labels, self.cfg.loss, self.model.variant, self.cfg.geometry())?;
        g.backward(terms.total)?;
        let val = |v: Option<crate::tensor::Var>| v.map(|v| g.value(v).item().to_f64_lossy());
        let log = StepLog {
            step: self.state.step + 1,
            lr: 0.0,
            loss: g.value(terms.total).item().to_f64_lossy(),
            l_loc: val(terms.local),
            l_glo: val(terms.global),
            l_con: val(terms.consistency),
            val_miou: None,
        };
        Ok((g.param_grads(&self.model.weights.store), log))
    }

    /// Draws the next batch and applies one update.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<StepLog> {
        let pairs = self.batch_pairs(scenes, self.state.step)?;
        let (grads, mut log) = self.gradients(&pairs)?;
        optimizer_step(&mut self.model.weights.store, &grads, &mut self.state, &self.cfg.optim)?;
        log.lr = self.state.lr;
        Ok(log)
    }

    pub fn validate(&self, scenes: &[Scene]) -> Result<f64> {
        let t = &self.cfg.train;
        Ok(evaluate(scenes, &self.model, &self.cfg.sampler, t.val_overlap, t.infer_batch)?.miou)
    }

    /// Trains up to the configured stop step. With a run directory, echoes
    /// the config, appends to the log, and keeps `last` and `best`
    /// checkpoints.
    pub fn run(
        &mut self,
        train: &[Scene],
        val: &[Scene],
        dir: Option<&RunDir>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut log_file = match dir {
            Some(d) => {
                fs::write(d.config(), self.cfg.to_text())?;
                let fresh = self.state.step == 0 || !d.log().exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(d.log())?;
                if fresh {
                    writeln!(f, "{}", StepLog::CSV_HEADER)?;
                }
                Some(f)
            }
            None => None,
        };
        let stop = self.cfg.stop_step();
        let t = self.cfg.train.clone();
        let mut logs = Vec::new();
        while self.state.step < stop {
            let mut row = self.step(train)?;
            let n = self.state.step;
            if t.eval_every > 0 && n % t.eval_every == 0 && !val.is_empty() {
                let miou = self.validate(val)?;
                row.val_miou = Some(miou);
                if self.state.observe(miou, &self.cfg.optim) {
                    if let Some(d) = dir {
                        self.checkpoint().save(&d.best())?;
                    }
                }
                log::info!("step {n} val_miou {miou:.4} lr {:.3e}", self.state.lr);
            }
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", row.csv_row())?;
            }
            if let Some(d) = dir {
                if t.checkpoint_every > 0 && n % t.checkpoint_every == 0 {
                    self.checkpoint().save(&d.last())?;
                }
            }
            on_step(&row);
            logs.push(row);
        }
        if let Some(d) = dir {
            self.checkpoint().save(&d.last())?;
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(steps: u64) -> OptimConfig {
        OptimConfig {
            steps_total: steps,
            ..Default::default()
        }
    }

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_grads_leave_parameters() {
        let mut s = scalar_store(0.7);
        let mut st = TrainState::new(&s);
        let c = OptimConfig { warmup_fraction: 0.0, ..cfg(10) };
        for _ in 0..3 {
            optimizer_step(&mut s, &[Tensor::scalar(0.0)], &mut st, &c).unwrap();
        }
        assert_eq!(s.get(s.find("w").unwrap()).item(), 0.7);
    }

    #[test]
    fn two_steps_by_hand() {
        let c = OptimConfig {
            lr0: 0.1,
            weight_decay: 0.01,
            warmup_fraction: 0.0,
            ..cfg(100)
        };
        let mut s = scalar_store(1.0);
        let mut st = TrainState::new(&s);
        let gs = [0.5, -0.25];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            optimizer_step(&mut s, &[Tensor::scalar(g)], &mut st, &c).unwrap();
            let t = t as i32 + 1;
            w -= 0.1 * 0.01 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get(s.find("w").unwrap()).item() - w).abs() < 1e-15);
        }
        // first step moves by almost exactly lr against the gradient sign
        assert!((w - 0.9 * 1.0).abs() < 0.2);
    }

    #[test]
    fn defaults_have_no_decay() {
        let c = OptimConfig::default();
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!(c.lr0, 1e-4);
        assert_eq!(c.warmup_fraction, 0.05);
    }

    #[test]
    fn missing_grads_rejected() {
        let mut s = scalar_store(1.0);
        let mut st = TrainState::new(&s);
        assert!(optimizer_step(&mut s, &[], &mut st, &cfg(10)).is_err());
        assert!(optimizer_step(&mut s, &[Tensor::zeros(&[2])], &mut st, &cfg(10)).is_err());
    }

    #[test]
    fn warmup_endpoints() {
        let c = cfg(2000);
        let st = TrainState::<f64>::new(&scalar_store(0.0));
        assert_eq!(c.warmup_steps(), 100);
        assert_eq!(lr_schedule(0, &st, &c), 0.0);
        assert!((lr_schedule(50, &st, &c) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(100, &st, &c), 1e-4);
        assert_eq!(lr_schedule(1999, &st, &c), 1e-4);
    }

    #[test]
    fn plateau_rule() {
        let c = cfg(2000);
        let mut st = TrainState::<f64>::new(&scalar_store(0.0));
        assert!(st.observe(0.5, &c));
        for _ in 0..c.plateau_patience {
            assert!(!st.observe(0.5, &c));
            assert_eq!(lr_schedule(500, &st, &c), 1e-4);
        }
        st.observe(0.4, &c);
        assert_eq!(lr_schedule(500, &st, &c), 0.5e-4);

        let mut up = TrainState::<f64>::new(&scalar_store(0.0));
        for i in 0..20 {
            up.observe(i as f64 / 20.0, &c);
        }
        assert_eq!(lr_schedule(500, &up, &c), 1e-4);
    }

    #[test]
    fn log_row_format() {
        let r = StepLog {
            step: 3,
            lr: 1e-4,
            loss: 1.0,
            l_loc: Some(1.0),
            l_glo: None,
            l_con: Some(0.25),
            val_miou: None,
        };
        assert_eq!(r.csv_row(), "3,0.0001,1.0,,0.25,");
    }

    proptest! {
        #[test]
        fn lr_non_increasing_after_warmup(evals in proptest::collection::vec(0.0f64..1.0, 0..40)) {
            let c = cfg(1000);
            let mut st = TrainState::<f64>::new(&scalar_store(0.0));
            let mut prev = lr_schedule(c.warmup_steps(), &st, &c);
            for (i, e) in evals.iter().enumerate() {
                st.observe(*e, &c);
                let lr = lr_schedule(c.warmup_steps() + 10 * i as u64, &st, &c);
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }
    }
}

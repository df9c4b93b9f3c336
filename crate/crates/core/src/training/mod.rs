//! Loss functions, the two-phase weighting schedule, and the patch-based
//! training loops for the filtering networks and the reference ranking
//! network.

pub mod adam;
pub mod bundle;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Real, Tape};
use crate::error::{MifError, Result};
use crate::filters::{IfNet, MifNet};
use crate::patch::PatchSample;
use crate::rfs::{rfs_loss, zscore_gt, RfsNet};
use crate::validation;

pub use adam::{Adam, AdamConfig};
pub use bundle::{BundleManifest, ModelBundle, TensorInfo};

/// Tool tag recorded in bundle manifests.
pub const CREATED_BY: &str = concat!("mif-toolkit ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

/// Training phase: compensation first, then the end-to-end objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    McFirst,
    Global,
}

/// Loss mixing weights tied to the phase.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub phase: Phase,
}

impl LossWeights {
    pub fn for_phase(phase: Phase) -> LossWeights {
        match phase {
            Phase::McFirst => LossWeights { alpha: 0.99, beta: 0.01, phase },
            Phase::Global => LossWeights { alpha: 0.01, beta: 0.99, phase },
        }
    }
}

/// Mean over references of the summed squared difference between each
/// compensated plane and the reconstruction.
pub fn loss_intermediate_planes(compensated: &[Array2<f32>], urf: &Array2<f32>) -> Result<f64> {
    if compensated.is_empty() {
        return Err(validation!("intermediate loss needs at least one compensated plane"));
    }
    let mut acc = 0.0f64;
    for c in compensated {
        if c.dim() != urf.dim() {
            return Err(validation!("plane shapes differ: {:?} vs {:?}", c.dim(), urf.dim()));
        }
        for (&a, &b) in c.iter().zip(urf.iter()) {
            let d = a as f64 - b as f64;
            acc += d * d;
        }
    }
    Ok(acc / compensated.len() as f64)
}

/// Summed squared difference between the enhanced plane and the raw plane.
pub fn loss_global_planes(enhanced: &Array2<f32>, raw: &Array2<f32>) -> Result<f64> {
    if enhanced.dim() != raw.dim() {
        return Err(validation!("plane shapes differ: {:?} vs {:?}", enhanced.dim(), raw.dim()));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in enhanced.iter().zip(raw.iter()) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    Ok(acc)
}

/// Weighted total.
pub fn loss_total(l_int: f64, l_glo: f64, weights: &LossWeights) -> f64 {
    weights.alpha * l_int + weights.beta * l_glo
}

/// Tape-side intermediate loss over a batch (sum over samples).
pub fn loss_intermediate_node<T: Real>(
    tape: &mut Tape<T>,
    compensated: &[NodeId],
    urf: NodeId,
) -> Result<NodeId> {
    if compensated.is_empty() {
        return Err(validation!("intermediate loss needs at least one compensated plane"));
    }
    let mut acc: Option<NodeId> = None;
    for &c in compensated {
        let term = tape.sum_sq_diff(c, urf)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / compensated.len() as f64))
}

/// Tape-side global loss over a batch.
pub fn loss_global_node<T: Real>(tape: &mut Tape<T>, enhanced: NodeId, raw: NodeId) -> Result<NodeId> {
    tape.sum_sq_diff(enhanced, raw)
}

/// Tape-side weighted total.
pub fn loss_total_node<T: Real>(
    tape: &mut Tape<T>,
    l_int: NodeId,
    l_glo: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    let a = tape.scale(l_int, weights.alpha);
    let b = tape.scale(l_glo, weights.beta);
    tape.add(a, b)
}

// ---------------------------------------------------------------------------
// Configuration and logging.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adam steps for a from-scratch run.
    pub iterations: u64,
    /// Adam steps for each fine-tuned model in a chain.
    pub finetune_iterations: u64,
    pub qp: i32,
    pub seed: u64,
    /// Bundle to initialize from instead of random weights.
    pub init_from: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            iterations: 20_000,
            finetune_iterations: 4_000,
            qp: 37,
            seed: 1,
            init_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.learning_rate < 0.0 {
            return Err(validation!("batch size, iterations must be positive; learning rate nonnegative"));
        }
        if self.batch_size > dataset_len {
            return Err(validation!(
                "batch size {} exceeds dataset size {dataset_len}",
                self.batch_size
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogEntry {
    pub iteration: u64,
    pub l_int: f64,
    pub l_glo: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Iteration at which the schedule switched to the global phase.
    pub phase2_start: Option<u64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l_int,l_glo,phase\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{:.9},{:.9},{}\n",
                e.iteration,
                e.l_int,
                e.l_glo,
                match e.phase {
                    Phase::McFirst => "mc_first",
                    Phase::Global => "global",
                }
            ));
        }
        out
    }
}

/// Moving-window convergence test for the intermediate loss: converged when
/// the average over the last window improves on the previous window by less
/// than half a percent.
pub const PHASE_WINDOW: u64 = 1000;
const PHASE_IMPROVEMENT: f64 = 0.005;

fn phase1_converged(log: &[LogEntry], window: u64) -> bool {
    let n = log.len() as u64;
    if n < 2 * window {
        return false;
    }
    let avg = |range: std::ops::Range<usize>| -> f64 {
        let s: f64 = log[range.clone()].iter().map(|e| e.l_int).sum();
        s / range.len() as f64
    };
    let prev = avg((n - 2 * window) as usize..(n - window) as usize);
    let last = avg((n - window) as usize..n as usize);
    if prev <= 0.0 {
        return true;
    }
    (prev - last) / prev < PHASE_IMPROVEMENT
}

// ---------------------------------------------------------------------------
// Batch assembly.
// ---------------------------------------------------------------------------

struct Batch {
    urf: ndarray::Array4<f32>,
    raw: ndarray::Array4<f32>,
    guidance: ndarray::Array4<f32>,
    refs: Vec<ndarray::Array4<f32>>,
}

fn assemble_batch(dataset: &[PatchSample], idx: &[usize], m: usize) -> Batch {
    let (h, w) = dataset[idx[0]].urf.dim();
    let b = idx.len();
    let mut urf = ndarray::Array4::zeros((b, 1, h, w));
    let mut raw = ndarray::Array4::zeros((b, 1, h, w));
    let mut guidance = ndarray::Array4::zeros((b, 2, h, w));
    let mut refs = vec![ndarray::Array4::zeros((b, 1, h, w)); m];
    for (bi, &si) in idx.iter().enumerate() {
        let s = &dataset[si];
        for y in 0..h {
            for x in 0..w {
                urf[[bi, 0, y, x]] = s.urf[[y, x]];
                raw[[bi, 0, y, x]] = s.raw[[y, x]];
                guidance[[bi, 0, y, x]] = s.cu[[y, x]];
                guidance[[bi, 1, y, x]] = s.tu[[y, x]];
                for (r, dst) in refs.iter_mut().enumerate() {
                    dst[[bi, 0, y, x]] = s.refs[r][[y, x]];
                }
            }
        }
    }
    Batch { urf, raw, guidance, refs }
}

/// Deterministic epoch-shuffled batch index stream.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> BatchStream {
        let mut s = BatchStream {
            order: (0..n).collect(),
            cursor: 0,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

fn manifest_for(kind: &str, m: usize, config: &TrainConfig, iterations: u64, init_from: Option<String>) -> BundleManifest {
    BundleManifest {
        kind: kind.to_string(),
        m,
        qp: config.qp,
        iterations,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        seed: config.seed,
        init_from,
        created_by: CREATED_BY.to_string(),
        tensors: Vec::new(),
    }
}

fn check_finite(loss: f64, iteration: u64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(MifError::Numeric(format!(
            "{what} loss became non-finite at iteration {iteration}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loops.
// ---------------------------------------------------------------------------

/// Trains the multi-frame network with intermediate supervision: the
/// compensation-heavy phase runs until the intermediate loss stops improving
/// (or half the budget is spent), then the weights flip to emphasize the
/// end-to-end error.
pub fn train_mif(dataset: &[PatchSample], config: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    if dataset.is_empty() {
        return Err(validation!("empty training dataset"));
    }
    let m = dataset[0].refs.len();
    if m == 0 {
        return Err(validation!("multi-frame training samples need reference patches"));
    }
    if dataset.iter().any(|s| s.refs.len() != m) {
        return Err(validation!("all samples must carry the same number of references"));
    }
    config.validate(dataset.len())?;

    let (mut net, init_label) = match &config.init_from {
        Some(path) => {
            let donor = ModelBundle::load(path)?;
            bundle::expect_kind(&donor, "mif")?;
            (MifNet::<f32>::from_params(m, donor.params)?, Some(path.display().to_string()))
        }
        None => (MifNet::<f32>::new(m, config.seed)?, None),
    };

    let mut opt = Adam::new(config.adam(), &net.params);
    let mut stream = BatchStream::new(dataset.len(), config.batch_size, config.seed);
    let mut log = TrainLog::default();
    let mut phase = Phase::McFirst;

    for iter in 1..=config.iterations {
        if phase == Phase::McFirst {
            let halfway = iter > config.iterations / 2;
            let converged = iter % PHASE_WINDOW == 0 && phase1_converged(&log.entries, PHASE_WINDOW);
            if halfway || converged {
                phase = Phase::Global;
                log.phase2_start = Some(iter);
            }
        }
        let weights = LossWeights::for_phase(phase);
        let idx = stream.next_batch();
        let batch = assemble_batch(dataset, &idx, m);

        let mut tape = Tape::new();
        let urf = tape.input(batch.urf);
        let raw = tape.input(batch.raw);
        let guidance = tape.input(batch.guidance);
        let refs: Vec<NodeId> = batch.refs.into_iter().map(|r| tape.input(r)).collect();

        let fwd = net.forward(&mut tape, urf, &refs, guidance)?;
        let l_int = loss_intermediate_node(&mut tape, &fwd.compensated, urf)?;
        let l_glo = loss_global_node(&mut tape, fwd.enhanced, raw)?;
        let total = loss_total_node(&mut tape, l_int, l_glo, &weights)?;

        let l_int_v = tape.scalar(l_int) as f64;
        let l_glo_v = tape.scalar(l_glo) as f64;
        check_finite(l_int_v + l_glo_v, iter, "multi-frame")?;

        let grads = tape.backward(total, &net.params).into_param_grads(&net.params);
        opt.step(&mut net.params, &grads);
        log.entries.push(LogEntry { iteration: iter, l_int: l_int_v, l_glo: l_glo_v, phase });
    }

    let manifest = manifest_for("mif", m, config, config.iterations, init_label);
    Ok((ModelBundle::new(manifest, net.params), log))
}

/// Trains the single-frame network on the end-to-end loss alone.
pub fn train_if(dataset: &[PatchSample], config: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    if dataset.is_empty() {
        return Err(validation!("empty training dataset"));
    }
    config.validate(dataset.len())?;

    let (mut net, init_label) = match &config.init_from {
        Some(path) => {
            let donor = ModelBundle::load(path)?;
            bundle::expect_kind(&donor, "if")?;
            (IfNet::<f32>::from_params(donor.params)?, Some(path.display().to_string()))
        }
        None => (IfNet::<f32>::new(config.seed), None),
    };

    let mut opt = Adam::new(config.adam(), &net.params);
    let mut stream = BatchStream::new(dataset.len(), config.batch_size, config.seed);
    let mut log = TrainLog::default();

    for iter in 1..=config.iterations {
        let idx = stream.next_batch();
        let batch = assemble_batch(dataset, &idx, 0);
        let mut tape = Tape::new();
        let urf = tape.input(batch.urf);
        let raw = tape.input(batch.raw);
        let guidance = tape.input(batch.guidance);
        let fwd = net.forward(&mut tape, urf, guidance)?;
        let l_glo = loss_global_node(&mut tape, fwd.enhanced, raw)?;
        let l_glo_v = tape.scalar(l_glo) as f64;
        check_finite(l_glo_v, iter, "single-frame")?;
        let grads = tape.backward(l_glo, &net.params).into_param_grads(&net.params);
        opt.step(&mut net.params, &grads);
        log.entries.push(LogEntry { iteration: iter, l_int: 0.0, l_glo: l_glo_v, phase: Phase::Global });
    }

    let manifest = manifest_for("if", 0, config, config.iterations, init_label);
    Ok((ModelBundle::new(manifest, net.params), log))
}

/// One ranking batch: the valid references of a single target frame.
#[derive(Debug, Clone)]
pub struct RankingGroup {
    pub features: Vec<[f64; 6]>,
    pub potentials: Vec<f64>,
}

/// Trains the reference ranking network on per-frame groups.
pub fn train_rfs(groups: &[RankingGroup], config: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    if groups.is_empty() {
        return Err(validation!("no ranking groups to train on"));
    }
    for g in groups {
        if g.features.is_empty() || g.features.len() != g.potentials.len() {
            return Err(validation!("ranking group features and potentials must align"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = match &config.init_from {
        Some(path) => {
            let donor = ModelBundle::load(path)?;
            bundle::expect_kind(&donor, "rfs")?;
            RfsNet::from_params(donor.params.cast())?
        }
        None => RfsNet::new(&mut rng),
    };
    let mut opt = Adam::new(config.adam(), &net.params);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut log = TrainLog::default();

    for iter in 1..=config.iterations {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let g = &groups[order[cursor]];
        cursor += 1;

        let fwd = net.forward(&g.features)?;
        let loss = rfs_loss(&g.potentials, &fwd.scores)?;
        check_finite(loss, iter, "ranking")?;
        let gt_z = zscore_gt(&g.potentials)?;
        let grad_scores: Vec<f64> =
            fwd.scores.iter().zip(&gt_z).map(|(p, r)| 2.0 * (p - r)).collect();
        let grads = net.backward(&g.features, &fwd, &grad_scores);
        opt.step(&mut net.params, &grads);
        log.entries.push(LogEntry { iteration: iter, l_int: 0.0, l_glo: loss, phase: Phase::Global });
    }

    let manifest = manifest_for("rfs", 0, config, config.iterations, None);
    Ok((ModelBundle::new(manifest, net.params.cast()), log))
}

/// Which filtering network a fine-tune chain trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Mif,
    If,
}

/// Trains one model per quantization level, from coarse to fine: the first
/// (highest) level trains from scratch with the full budget, every following
/// level fine-tunes from its predecessor with the reduced budget.
pub fn finetune_chain(
    kind: NetKind,
    qps: &[i32],
    base_config: &TrainConfig,
    datasets: &std::collections::BTreeMap<i32, Vec<PatchSample>>,
    workdir: &std::path::Path,
) -> Result<std::collections::BTreeMap<i32, ModelBundle>> {
    if qps.is_empty() {
        return Err(validation!("fine-tune chain needs at least one quantization level"));
    }
    for pair in qps.windows(2) {
        if pair[1] >= pair[0] {
            return Err(validation!("chain levels must be strictly descending, got {:?}", qps));
        }
    }
    let mut out = std::collections::BTreeMap::new();
    let mut donor_path: Option<std::path::PathBuf> = None;
    let mut donor_label: Option<String> = None;
    for (k, &qp) in qps.iter().enumerate() {
        let dataset = datasets
            .get(&qp)
            .ok_or_else(|| validation!("no dataset for quantization level {qp}"))?;
        let mut config = base_config.clone();
        config.qp = qp;
        config.init_from = donor_path.clone();
        if k > 0 {
            config.iterations = base_config.finetune_iterations;
        }
        let (mut bundle, _log) = match kind {
            NetKind::Mif => train_mif(dataset, &config)?,
            NetKind::If => train_if(dataset, &config)?,
        };
        if k > 0 {
            bundle.manifest.init_from = donor_label.clone();
        }
        let path = workdir.join(format!(
            "{}-qp{qp}.mifb",
            match kind {
                NetKind::Mif => "mif",
                NetKind::If => "if",
            }
        ));
        bundle.save(&path)?;
        donor_path = Some(path);
        donor_label = Some(format!("qp{qp}"));
        out.insert(qp, bundle);
    }
    Ok(out)
}

#[cfg(test)]
mod perf {
    use super::*;
    use crate::patch::PatchSample;
    use ndarray::Array2;

    #[test]
    #[ignore]
    fn training_iteration_timing() {
        let sample = |k: u64| {
            let plane = |s: u64| Array2::from_shape_fn((64, 64), |(y, x)| {
                (((y * 31 + x * 17) as u64 ^ s).wrapping_mul(2654435761) % 1000) as f32 / 1000.0
            });
            PatchSample {
                raw: plane(k),
                urf: plane(k + 1),
                cu: Array2::from_elem((64, 64), 1.0),
                tu: Array2::from_elem((64, 64), -1.0),
                refs: vec![plane(k + 2), plane(k + 3)],
            }
        };
        let dataset: Vec<PatchSample> = (0..8).map(|k| sample(k as u64 * 10)).collect();
        for batch in [1usize, 2] {
            let config = TrainConfig { batch_size: batch, iterations: 3, seed: 1, ..Default::default() };
            let t0 = std::time::Instant::now();
            let _ = train_mif(&dataset, &config).unwrap();
            let mif_dt = t0.elapsed().as_secs_f64() / 3.0;
            let t0 = std::time::Instant::now();
            let _ = train_if(&dataset, &config).unwrap();
            let if_dt = t0.elapsed().as_secs_f64() / 3.0;
            println!(
                "batch {batch}: mif {:.0} ms/iter ({:.1} min / 20k) | if {:.0} ms/iter ({:.1} min / 20k)",
                mif_dt * 1e3, mif_dt * 20_000.0 / 60.0, if_dt * 1e3, if_dt * 20_000.0 / 60.0
            );
        }
    }
}


#[cfg(test)]
mod perf3 {
    use crate::autodiff::{ParamSet, Tape};
    use crate::nn::{DenseUnit, McNet};
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[ignore]
    fn hotspot_split() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::<f32>::new();
        let unit = DenseUnit::new(&mut params, "u", 96, false, &mut r);
        let x_a = Array4::<f32>::from_elem((1, 96, 64, 64), 0.3);
        let iters = 20;
        let t0 = std::time::Instant::now();
        for _ in 0..iters {
            let mut t = Tape::new();
            let x = t.input(x_a.clone());
            let _ = unit.forward(&mut t, &params, x).unwrap();
        }
        println!("dense unit (96 in) fwd: {:.1} ms", t0.elapsed().as_secs_f64() / iters as f64 * 1e3);

        let mut params2 = ParamSet::<f32>::new();
        let mc = McNet::new(&mut params2, "mc", &mut r);
        let ref_a = Array4::<f32>::from_elem((1, 1, 64, 64), 0.4);
        let t0 = std::time::Instant::now();
        for _ in 0..iters {
            let mut t = Tape::new();
            let rf = t.input(ref_a.clone());
            let tg = t.input(ref_a.clone());
            let _ = mc.forward(&mut t, &params2, rf, tg).unwrap();
        }
        println!("mc fwd: {:.1} ms", t0.elapsed().as_secs_f64() / iters as f64 * 1e3);
    }
}

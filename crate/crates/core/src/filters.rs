//! MIF-Net and IF-Net assembly, and frame-level mode selection.
//!
//! MIF-Net runs one branch per reference: motion compensation (one shared
//! subnet applied per reference), a partition-guided convolution over the
//! (compensated, reconstruction, difference) triple, and two dense units.
//! Branch features are concatenated and fused by two more dense units, the
//! last of which emits the difference frame added back onto the
//! reconstruction. IF-Net is the single-branch variant without compensation
//! and with four consecutive dense units.
//!
//! Networks operate on luma; chroma passes through untouched.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{plane_to_tensor, tensor_to_plane, NodeId, ParamSet, Real, Tape};
use crate::error::Result;
use crate::frame::{Frame, FrameRole};
use crate::metrics::psnr;
use crate::nn::{DenseUnit, GuidedConv, McNet, GROWTH, GUIDED_OUT};
use crate::partition::PartitionMaps;
use crate::rfs::{compute_metrics, select_references, RfsConfig, RfsNet, Selection};
use crate::validation;

const BRANCH_UNITS: usize = 2;
const FUSION_UNITS: usize = 2;
const IF_UNITS: usize = 4;

struct Branch {
    guided: GuidedConv,
    units: Vec<DenseUnit>,
}

/// Multi-frame in-loop filter network.
pub struct MifNet<T: Real> {
    pub params: ParamSet<T>,
    pub m: usize,
    mc: McNet,
    branches: Vec<Branch>,
    fusion: Vec<DenseUnit>,
}

/// Everything a forward pass exposes; training needs the compensated frames
/// for the intermediate loss, probing tests need per-branch features.
pub struct MifForward {
    pub enhanced: NodeId,
    pub difference: NodeId,
    pub compensated: Vec<NodeId>,
    pub flows: Vec<NodeId>,
    pub branch_features: Vec<NodeId>,
}

impl<T: Real> MifNet<T> {
    pub fn new(m: usize, seed: u64) -> Result<MifNet<T>> {
        if m < 1 {
            return Err(validation!("MIF network needs at least one reference branch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mc = McNet::new(&mut params, "mc", &mut rng);
        let mut branches = Vec::with_capacity(m);
        for b in 0..m {
            let guided = GuidedConv::new(&mut params, &format!("branch{b}.guided"), 3, 2, GUIDED_OUT, &mut rng);
            let mut units = Vec::with_capacity(BRANCH_UNITS);
            let mut c = GUIDED_OUT;
            for u in 0..BRANCH_UNITS {
                let unit = DenseUnit::new(&mut params, &format!("branch{b}.unit{u}"), c, false, &mut rng);
                c = unit.c_out();
                units.push(unit);
            }
            branches.push(Branch { guided, units });
        }
        let mut fusion = Vec::with_capacity(FUSION_UNITS);
        let mut c = m * 4 * GROWTH; // m branches, 48 channels each
        for u in 0..FUSION_UNITS {
            let is_final = u == FUSION_UNITS - 1;
            let unit = DenseUnit::new(&mut params, &format!("fusion.unit{u}"), c, is_final, &mut rng);
            c = unit.c_out();
            fusion.push(unit);
        }
        Ok(MifNet { params, m, mc, branches, fusion })
    }

    /// Reconstructs the layer structure for a parameter set loaded from disk.
    pub fn from_params(m: usize, params: ParamSet<T>) -> Result<MifNet<T>> {
        let template = MifNet::<T>::new(m, 0)?;
        if template.params.len() != params.len() {
            return Err(validation!(
                "parameter count mismatch: bundle has {}, a {m}-reference network needs {}",
                params.len(),
                template.params.len()
            ));
        }
        for (id, (name, value)) in template.params.ids().zip(params.iter()) {
            if template.params.name(id) != name
                || template.params.value(id).shape() != value.shape()
            {
                return Err(validation!(
                    "unexpected tensor {name} {:?}, wanted {} {:?}",
                    value.shape(),
                    template.params.name(id),
                    template.params.value(id).shape()
                ));
            }
        }
        Ok(MifNet { params, ..template })
    }

    pub fn mc_mut(&mut self) -> &mut McNet {
        &mut self.mc
    }

    /// Total dense units in the network (2M + 2).
    pub fn dense_unit_count(&self) -> usize {
        self.branches.iter().map(|b| b.units.len()).sum::<usize>() + self.fusion.len()
    }

    /// Motion compensation only (the MC training phase and the translation
    /// benchmark drive this directly).
    pub fn compensate(
        &self,
        tape: &mut Tape<T>,
        reference: NodeId,
        target: NodeId,
    ) -> Result<crate::nn::McOutput> {
        self.mc.forward(tape, &self.params, reference, target)
    }

    /// Full multi-frame forward pass.
    ///
    /// `urf` and each reference are `[B, 1, H, W]`; `guidance` is the
    /// `[B, 2, H, W]` stack of CU and TU maps.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        urf: NodeId,
        refs: &[NodeId],
        guidance: NodeId,
    ) -> Result<MifForward> {
        if refs.len() != self.m {
            return Err(validation!("expected {} references, got {}", self.m, refs.len()));
        }
        let mut compensated = Vec::with_capacity(self.m);
        let mut flows = Vec::with_capacity(self.m);
        let mut branch_features = Vec::with_capacity(self.m);
        for (branch, &reference) in self.branches.iter().zip(refs) {
            let mc = self.mc.forward(tape, &self.params, reference, urf)?;
            let diff = tape.sub(mc.compensated, urf)?;
            let stacked = tape.concat_c(&[mc.compensated, urf, diff])?;
            let mut feat = branch.guided.forward(tape, &self.params, stacked, guidance)?;
            for unit in &branch.units {
                feat = unit.forward(tape, &self.params, feat)?;
            }
            compensated.push(mc.compensated);
            flows.push(mc.flow);
            branch_features.push(feat);
        }
        let mut fused = if branch_features.len() == 1 {
            branch_features[0]
        } else {
            tape.concat_c(&branch_features)?
        };
        for unit in &self.fusion {
            fused = unit.forward(tape, &self.params, fused)?;
        }
        let difference = fused;
        let sum = tape.add(urf, difference)?;
        let enhanced = tape.clamp01(sum);
        Ok(MifForward { enhanced, difference, compensated, flows, branch_features })
    }
}

/// Single-frame in-loop filter network.
pub struct IfNet<T: Real> {
    pub params: ParamSet<T>,
    guided: GuidedConv,
    units: Vec<DenseUnit>,
}

pub struct IfForward {
    pub enhanced: NodeId,
    pub difference: NodeId,
}

impl<T: Real> IfNet<T> {
    pub fn new(seed: u64) -> IfNet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let guided = GuidedConv::new(&mut params, "guided", 1, 2, GUIDED_OUT, &mut rng);
        let mut units = Vec::with_capacity(IF_UNITS);
        let mut c = GUIDED_OUT;
        for u in 0..IF_UNITS {
            let is_final = u == IF_UNITS - 1;
            let unit = DenseUnit::new(&mut params, &format!("unit{u}"), c, is_final, &mut rng);
            c = unit.c_out();
            units.push(unit);
        }
        IfNet { params, guided, units }
    }

    pub fn from_params(params: ParamSet<T>) -> Result<IfNet<T>> {
        let template = IfNet::<T>::new(0);
        if template.params.len() != params.len() {
            return Err(validation!(
                "parameter count mismatch: bundle has {}, the single-frame network needs {}",
                params.len(),
                template.params.len()
            ));
        }
        for (id, (name, value)) in template.params.ids().zip(params.iter()) {
            if template.params.name(id) != name
                || template.params.value(id).shape() != value.shape()
            {
                return Err(validation!("unexpected tensor {name} {:?}", value.shape()));
            }
        }
        Ok(IfNet { params, ..template })
    }

    pub fn dense_unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn forward(&self, tape: &mut Tape<T>, urf: NodeId, guidance: NodeId) -> Result<IfForward> {
        let mut feat = self.guided.forward(tape, &self.params, urf, guidance)?;
        for unit in &self.units {
            feat = unit.forward(tape, &self.params, feat)?;
        }
        let sum = tape.add(urf, feat)?;
        Ok(IfForward { enhanced: tape.clamp01(sum), difference: feat })
    }
}

// ---------------------------------------------------------------------------
// Frame-level application and mode selection.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mif,
    If,
    Passthrough,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mif => "MIF",
            Mode::If => "IF",
            Mode::Passthrough => "PASS",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "MIF" => Ok(Mode::Mif),
            "IF" => Ok(Mode::If),
            "PASS" => Ok(Mode::Passthrough),
            other => Err(validation!("unknown mode `{other}`")),
        }
    }
}

/// Per-frame record of the encoder-side choice.
#[derive(Debug, Clone)]
pub struct ModeDecision {
    pub frame_index: usize,
    pub mode: Mode,
    /// Absent when too few valid references were found.
    pub psnr_mif: Option<f64>,
    pub psnr_if: f64,
    pub psnr_pass: f64,
    /// Pool indices of the selected references (empty without a MIF candidate).
    pub refs: Vec<usize>,
}

/// The trained models the in-loop filter runs with.
pub struct FilterModels {
    pub mif: MifNet<f32>,
    pub single: IfNet<f32>,
    pub rfs: RfsNet,
    pub rfs_config: RfsConfig,
}

/// Guidance stack for one frame: `[1, 2, H, W]` of CU and TU maps.
pub fn guidance_tensor<T: Real>(maps: &PartitionMaps) -> ndarray::Array4<T> {
    let (h, w) = maps.cu.dim();
    ndarray::Array4::from_shape_fn((1, 2, h, w), |(_, c, y, x)| {
        let plane = if c == 0 { &maps.cu } else { &maps.tu };
        T::from_f64(plane[[y, x]] as f64)
    })
}

fn run_mif_luma(
    net: &MifNet<f32>,
    urf: &Array2<f32>,
    refs: &[&Array2<f32>],
    maps: &PartitionMaps,
) -> Result<Array2<f32>> {
    let mut tape = Tape::new();
    let urf_n = tape.input(plane_to_tensor(urf));
    let ref_nodes: Vec<NodeId> = refs.iter().map(|r| tape.input(plane_to_tensor(r))).collect();
    let guidance = tape.input(guidance_tensor(maps));
    let fwd = net.forward(&mut tape, urf_n, &ref_nodes, guidance)?;
    Ok(tensor_to_plane(tape.value(fwd.enhanced), 0, 0))
}

fn run_if_luma(net: &IfNet<f32>, urf: &Array2<f32>, maps: &PartitionMaps) -> Result<Array2<f32>> {
    let mut tape = Tape::new();
    let urf_n = tape.input(plane_to_tensor(urf));
    let guidance = tape.input(guidance_tensor(maps));
    let fwd = net.forward(&mut tape, urf_n, guidance)?;
    Ok(tensor_to_plane(tape.value(fwd.enhanced), 0, 0))
}

/// Enhances one reconstruction, choosing the best of the multi-frame
/// candidate (when enough references are valid), the single-frame candidate,
/// and the unfiltered frame itself. The choice maximizes luma PSNR against
/// the raw frame, so the output can never score below the input.
pub fn enhance_frame(
    urf: &Frame,
    maps: &PartitionMaps,
    pool: &[&Frame],
    raws: &[Frame],
    models: &FilterModels,
) -> Result<(Frame, ModeDecision)> {
    let raw = raws
        .iter()
        .find(|f| f.index() == urf.index())
        .ok_or_else(|| validation!("no raw frame for index {} (encoder-side selection needs it)", urf.index()))?;

    let records = compute_metrics(urf, pool, raws, &models.rfs_config)?;
    let selection = select_references(&records, &models.rfs, &models.rfs_config)?;

    let psnr_pass = psnr(urf.y(), raw.y(), 1.0)?;
    let if_plane = run_if_luma(&models.single, urf.y(), maps)?;
    let psnr_if = psnr(&if_plane, raw.y(), 1.0)?;

    let (mif_plane, psnr_mif, refs) = match &selection {
        Selection::Selected(indices) => {
            let ref_planes: Vec<&Array2<f32>> = indices
                .iter()
                .map(|&i| {
                    pool.iter()
                        .find(|f| f.index() == i)
                        .map(|f| f.y())
                        .ok_or_else(|| validation!("selected pool frame {i} missing"))
                })
                .collect::<Result<_>>()?;
            let plane = run_mif_luma(&models.mif, urf.y(), &ref_planes, maps)?;
            let p = psnr(&plane, raw.y(), 1.0)?;
            (Some(plane), Some(p), indices.clone())
        }
        Selection::NotEnough { .. } => (None, None, Vec::new()),
    };

    // Keep the unfiltered frame on ties so identity networks leave the
    // sequence untouched.
    let mut mode = Mode::Passthrough;
    let mut best = psnr_pass;
    if psnr_if > best {
        mode = Mode::If;
        best = psnr_if;
    }
    if let Some(p) = psnr_mif {
        if p > best {
            mode = Mode::Mif;
        }
    }

    let enhanced = match mode {
        Mode::Passthrough => urf.with_role(FrameRole::Enhanced),
        Mode::If => urf.with_luma(if_plane, FrameRole::Enhanced)?,
        Mode::Mif => urf.with_luma(mif_plane.expect("mif candidate exists"), FrameRole::Enhanced)?,
    };
    let decision = ModeDecision { frame_index: urf.index(), mode, psnr_mif, psnr_if, psnr_pass, refs };
    Ok((enhanced, decision))
}

/// Runs the in-loop filter over a whole sequence. Enhanced frames re-enter
/// the reference pool for subsequent frames.
pub fn enhance_sequence(
    urfs: &[Frame],
    layouts: &[PartitionMaps],
    raws: &[Frame],
    models: &FilterModels,
) -> Result<(Vec<Frame>, Vec<ModeDecision>)> {
    if urfs.len() != layouts.len() {
        return Err(validation!(
            "{} frames but {} partition maps",
            urfs.len(),
            layouts.len()
        ));
    }
    let mut enhanced: Vec<Frame> = Vec::with_capacity(urfs.len());
    let mut decisions = Vec::with_capacity(urfs.len());
    for (urf, maps) in urfs.iter().zip(layouts) {
        let start = enhanced.len().saturating_sub(models.rfs_config.pool_size);
        let pool: Vec<&Frame> = enhanced[start..].iter().collect();
        let (frame, decision) = enhance_frame(urf, maps, &pool, raws, models)?;
        enhanced.push(frame);
        decisions.push(decision);
    }
    Ok((enhanced, decisions))
}

/// Decoder-side replay: applies recorded decisions (mode and reference
/// indices) without consulting raw frames.
pub fn replay_sequence(
    urfs: &[Frame],
    layouts: &[PartitionMaps],
    decisions: &[ModeDecision],
    models: &FilterModels,
) -> Result<Vec<Frame>> {
    if urfs.len() != decisions.len() || urfs.len() != layouts.len() {
        return Err(validation!("decision log does not cover the sequence"));
    }
    let mut enhanced: Vec<Frame> = Vec::with_capacity(urfs.len());
    for ((urf, maps), decision) in urfs.iter().zip(layouts).zip(decisions) {
        let frame = match decision.mode {
            Mode::Passthrough => urf.with_role(FrameRole::Enhanced),
            Mode::If => {
                let plane = run_if_luma(&models.single, urf.y(), maps)?;
                urf.with_luma(plane, FrameRole::Enhanced)?
            }
            Mode::Mif => {
                let refs: Vec<&Array2<f32>> = decision
                    .refs
                    .iter()
                    .map(|&i| {
                        enhanced
                            .iter()
                            .find(|f| f.index() == i)
                            .map(|f| f.y())
                            .ok_or_else(|| validation!("replayed reference {i} not yet decoded"))
                    })
                    .collect::<Result<_>>()?;
                let plane = run_mif_luma(&models.mif, urf.y(), &refs, maps)?;
                urf.with_luma(plane, FrameRole::Enhanced)?
            }
        };
        enhanced.push(frame);
    }
    Ok(enhanced)
}

/// Serializes decisions as the `frame_index,mode,psnr_mif,psnr_if,psnr_pass`
/// CSV (reference indices go to a separate sidecar).
pub fn decisions_to_csv(decisions: &[ModeDecision]) -> String {
    let mut out = String::from("frame_index,mode,psnr_mif,psnr_if,psnr_pass\n");
    for d in decisions {
        let mif = d.psnr_mif.map(|p| format!("{p:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            d.frame_index,
            d.mode.as_str(),
            mif,
            d.psnr_if,
            d.psnr_pass
        ));
    }
    out
}

/// Reference-index sidecar: `frame_index,ref1,ref2,...` rows.
pub fn refs_to_csv(decisions: &[ModeDecision]) -> String {
    let mut out = String::from("frame_index,refs\n");
    for d in decisions {
        let refs: Vec<String> = d.refs.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("{},{}\n", d.frame_index, refs.join(";")));
    }
    out
}

/// Parses the decisions CSV back (for replay).
pub fn decisions_from_csv(decisions_csv: &str, refs_csv: &str) -> Result<Vec<ModeDecision>> {
    let mut refs_by_frame: Vec<(usize, Vec<usize>)> = Vec::new();
    for line in refs_csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, refs) = line
            .split_once(',')
            .ok_or_else(|| validation!("bad reference row `{line}`"))?;
        let idx: usize = idx.trim().parse().map_err(|_| validation!("bad frame index `{idx}`"))?;
        let refs = refs
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<usize>().map_err(|_| validation!("bad reference `{s}`")))
            .collect::<Result<Vec<usize>>>()?;
        refs_by_frame.push((idx, refs));
    }
    let mut out = Vec::new();
    for line in decisions_csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(validation!("bad decision row `{line}`"));
        }
        let frame_index: usize =
            fields[0].trim().parse().map_err(|_| validation!("bad frame index `{}`", fields[0]))?;
        let mode = Mode::parse(fields[1].trim())?;
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            let s = s.trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| validation!("bad PSNR `{s}`"))
            }
        };
        let refs = refs_by_frame
            .iter()
            .find(|(i, _)| *i == frame_index)
            .map(|(_, r)| r.clone())
            .unwrap_or_default();
        out.push(ModeDecision {
            frame_index,
            mode,
            psnr_mif: parse_opt(fields[2])?,
            psnr_if: parse_opt(fields[3])?.ok_or_else(|| validation!("missing IF PSNR"))?,
            psnr_pass: parse_opt(fields[4])?.ok_or_else(|| validation!("missing PASS PSNR"))?,
            refs,
        });
    }
    Ok(out)
}
